"""Config-driven pipeline orchestration.

Five stages run off one declarative JSON config: poison, train, attribute,
evaluate, report. Heavy stages cache their artifacts keyed by the config
hash, so reruns after a crash resume instead of retraining. A run ledger
records every artifact with a checksum at close.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, attribution, backdoor, evaluation, models, reporting
from .attribution import METHODS, preset
from .backdoor import (
    PoisonPlan,
    PoisonedDataset,
    TriggerSpec,
    TrojanModelCard,
    build_patch_trigger,
    eligible_pairs,
    make_sample_specific_trigger,
    verify_trojan,
)
from .data import DatasetHandle, load_dataset, synthesize_dataset
from .errors import GateFailure, InputError
from .evaluation import DEFAULT_K_GRID, MetricReport, sweep_recovery_rates
from .models import TrainingSchedule, create_model

log = logging.getLogger("backx")

ORACLE_METHOD = "oracle"
DEFAULT_GATE = {"min_poisoned_acc": 0.99, "max_clean_drop": 0.02}
DEFAULT_SCHEDULE = {
    "epochs": 18, "learning_rate": 0.02, "decay_epochs": [13, 16],
    "decay_factor": 0.1, "batch_size": 64, "momentum": 0.9,
    "weight_decay": 1e-4,
}


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment, fully determined: hash covers every field."""

    dataset: dict
    model: dict
    poison: dict
    methods: tuple
    k_grid: tuple
    gate: dict
    eval_samples: int | None
    out_dir: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "poison": self.poison,
            "methods": list(self.methods),
            "k_grid": list(self.k_grid),
            "gate": self.gate,
            "eval_samples": self.eval_samples,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()


def _normalize_methods(entries) -> tuple:
    normalized = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"method": entry}
        if "method" not in entry:
            raise InputError(f"method entry missing 'method': {entry}")
        m = entry["method"]
        if m != ORACLE_METHOD and m not in METHODS:
            raise InputError(f"unknown method {m!r}")
        entry = dict(entry)
        entry.setdefault("label", m)
        normalized.append(entry)
    labels = [e["label"] for e in normalized]
    if len(set(labels)) != len(labels):
        raise InputError("method labels must be unique; set 'label' on variants")
    return tuple(normalized)


def make_config(raw: dict, out_dir=None, seed=None, methods=None, k_grid=None) -> ExperimentConfig:
    """Build a validated config from a raw dict plus optional overrides."""
    raw = dict(raw)
    for key in ("dataset", "model", "poison"):
        if key not in raw:
            raise InputError(f"config missing required section {key!r}")

    dataset = dict(raw["dataset"])
    dataset.setdefault("name", "synthetic")
    if dataset["name"] == "synthetic":
        dataset.setdefault("num_classes", 4)
        dataset.setdefault("samples_per_class", 500)
        dataset.setdefault("image_size", 32)
        dataset.setdefault("test_per_class", None)
        dataset.setdefault("seed", None)
    elif "root" not in dataset:
        raise InputError(f"dataset {dataset['name']!r} needs a 'root' path")

    model = dict(raw["model"])
    model.setdefault("architecture", "small_cnn")
    schedule = dict(DEFAULT_SCHEDULE)
    schedule.update(model.get("schedule", {}))
    model["schedule"] = schedule

    poison = dict(raw["poison"])
    if "trigger" not in poison:
        raise InputError("poison section needs a 'trigger'")
    poison.setdefault("rate", 0.1)
    poison.setdefault("target_label", 0)

    method_entries = methods if methods is not None else raw.get(
        "methods", list(METHODS) + [ORACLE_METHOD])
    grid = k_grid if k_grid is not None else raw.get("k_grid", list(DEFAULT_K_GRID))
    grid = tuple(float(k) for k in grid)
    for k in grid:
        if not 0.0 <= k <= 1.0:
            raise InputError("k grid values must lie in [0,1]")

    gate = dict(DEFAULT_GATE)
    gate.update(raw.get("gate", {}))
    if set(gate) != set(DEFAULT_GATE):
        raise InputError(f"gate keys must be {sorted(DEFAULT_GATE)}")

    final_out = str(out_dir if out_dir is not None else raw.get("out_dir", "backx_run"))
    final_seed = int(seed if seed is not None else raw.get("seed", 0))
    return ExperimentConfig(
        dataset=dataset,
        model=model,
        poison=poison,
        methods=_normalize_methods(method_entries),
        k_grid=grid,
        gate=gate,
        eval_samples=raw.get("eval_samples"),
        out_dir=final_out,
        seed=final_seed,
    )


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    return make_config(json.loads(path.read_text()), **overrides)


def desk_config(out_dir, seed: int = 0, **raw_overrides) -> ExperimentConfig:
    """The small synthetic setup used throughout the docs and tests."""
    raw = {
        "dataset": {"name": "synthetic"},
        "model": {"architecture": "small_cnn"},
        "poison": {
            "trigger": {"kind": "fixed_watermark", "style": "checker",
                        "patch_size": 6, "alpha": 0.5, "margin": 1},
            "rate": 0.1,
            "target_label": 0,
        },
    }
    raw.update(raw_overrides)
    return make_config(raw, out_dir=out_dir, seed=seed)


# -- stage plumbing ----------------------------------------------------------

def stage_root(config: ExperimentConfig) -> Path:
    cache = os.environ.get("BACKX_CACHE")
    if cache:
        return Path(cache) / config.hash()[:12]
    return Path(config.out_dir) / "stages"


def reports_dir(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / "reports"


def plots_dir(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / "plots"


def _marker_path(stage_dir: Path) -> Path:
    return stage_dir / ".complete.json"


def _mark_complete(stage_dir: Path, stage: str, config: ExperimentConfig):
    _marker_path(stage_dir).write_text(json.dumps(
        {"stage": stage, "config_hash": config.hash(), "completed_at": time.time()}))


def _is_complete(stage_dir: Path, config: ExperimentConfig) -> bool:
    marker = _marker_path(stage_dir)
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text()).get("config_hash") == config.hash()
    except json.JSONDecodeError:
        return False


def _fresh_dir(path: Path) -> Path:
    shutil.rmtree(path, ignore_errors=True)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- config-derived builders -------------------------------------------------

def build_dataset(config: ExperimentConfig) -> DatasetHandle:
    spec = config.dataset
    if spec["name"] == "synthetic":
        seed = spec["seed"] if spec["seed"] is not None else config.seed
        return synthesize_dataset(spec["num_classes"], spec["samples_per_class"],
                                  spec["image_size"], seed,
                                  test_per_class=spec["test_per_class"])
    return load_dataset(spec["name"], spec["root"])


def build_trigger(config: ExperimentConfig, image_shape) -> TriggerSpec:
    spec = config.poison["trigger"]
    kind = spec.get("kind", "fixed_watermark")
    if kind == "fixed_watermark":
        return build_patch_trigger(
            image_shape,
            patch_size=spec.get("patch_size", 6),
            alpha=spec.get("alpha", 0.5),
            style=spec.get("style", "checker"),
            margin=spec.get("margin", 1),
            pattern_seed=spec.get("pattern_seed", 0),
        )
    if kind == "sample_specific":
        return make_sample_specific_trigger(
            key=spec.get("key", config.seed),
            amplitude=spec.get("amplitude", 8.0 / 255.0),
        )
    raise InputError(f"unknown trigger kind {kind!r}")


def build_plan(config: ExperimentConfig, trigger: TriggerSpec) -> PoisonPlan:
    return PoisonPlan(
        trigger=trigger,
        poisoning_rate=float(config.poison["rate"]),
        target_label=int(config.poison["target_label"]),
        seed=config.seed,
    )


def build_schedule(config: ExperimentConfig) -> TrainingSchedule:
    s = config.model["schedule"]
    return TrainingSchedule(
        epochs=int(s["epochs"]),
        learning_rate=float(s["learning_rate"]),
        decay_epochs=tuple(s["decay_epochs"]),
        decay_factor=float(s["decay_factor"]),
        batch_size=int(s["batch_size"]),
        momentum=float(s["momentum"]),
        weight_decay=float(s["weight_decay"]),
        seed=config.seed,
    )


def _model_factory(config: ExperimentConfig, dataset: DatasetHandle, image_shape):
    arch = config.model["architecture"]

    def factory():
        return create_model(arch, dataset.num_classes, image_shape,
                            normalization=dataset.normalization, seed=config.seed)

    return factory


# -- pipeline stages ---------------------------------------------------------

def cmd_poison(config: ExperimentConfig):
    """Stage 1: stamp and relabel the training split; idempotent per hash."""
    dataset = build_dataset(config)
    target = int(config.poison["target_label"])
    if not 0 <= target < dataset.num_classes:
        raise InputError(f"target_label {target} outside [0,{dataset.num_classes})")
    image_shape = dataset.train.image_shape
    trigger = build_trigger(config, image_shape)
    plan = build_plan(config, trigger)
    stage = stage_root(config) / "poison"
    if _is_complete(stage, config):
        log.info("poison: cache hit at %s", stage)
        return backdoor.load_poisoned(stage, plan, base=dataset), True

    _fresh_dir(stage)
    poisoned = backdoor.poison_dataset(dataset, plan)
    backdoor.save_poisoned(stage, poisoned)
    _mark_complete(stage, "poison", config)
    log.info("poison: %d of %d samples stamped", len(poisoned.poisoned_indices),
             len(poisoned.train))
    return poisoned, False


def cmd_train(config: ExperimentConfig):
    """Stage 2: trojan + benign twin; the gate decides whether the run is
    usable and a failed gate leaves no completion marker behind."""
    poisoned, _ = cmd_poison(config)
    stage = stage_root(config) / "train"
    if _is_complete(stage, config):
        log.info("train: cache hit at %s", stage)
        handle = models.load_checkpoint(stage / "model")
        payload = json.loads((stage / "card.json").read_text())
        card = TrojanModelCard(
            model=handle, plan=poisoned.plan,
            clean_accuracy=payload["clean_accuracy"],
            poisoned_accuracy=payload["poisoned_accuracy"],
            benign_twin_accuracy=payload["benign_twin_accuracy"],
        )
        gate = verify_trojan(card, **config.gate)
        return card, gate, True

    _fresh_dir(stage)
    image_shape = poisoned.train.image_shape
    factory = _model_factory(config, poisoned.base, image_shape)
    card = backdoor.trojan_train(factory, poisoned, build_schedule(config))
    gate = verify_trojan(card, **config.gate)

    models.save_checkpoint(card.model, stage / "model")
    (stage / "card.json").write_text(json.dumps(card.summary(), indent=2, sort_keys=True))
    (stage / "gate.json").write_text(json.dumps(
        {"passed": gate.passed, "reasons": list(gate.reasons)}, indent=2, sort_keys=True))
    log.info("train: clean %.4f poisoned %.4f twin %.4f gate=%s",
             card.clean_accuracy, card.poisoned_accuracy,
             card.benign_twin_accuracy, "pass" if gate.passed else "FAIL")
    if not gate.passed:
        raise GateFailure(gate.reasons)
    _mark_complete(stage, "train", config)
    return card, gate, False


def _build_pairs(config: ExperimentConfig, poisoned: PoisonedDataset):
    trigger = poisoned.plan.trigger
    clean, stamped = eligible_pairs(poisoned.base.test, trigger,
                                    poisoned.plan.target_label,
                                    limit=config.eval_samples)
    return evaluation.EvalPairs(clean=clean, poisoned=stamped,
                                target_label=poisoned.plan.target_label)


def cmd_attribute(config: ExperimentConfig):
    """Stage 3: maps for every configured method over the eligible pairs,
    explained toward the target class."""
    poisoned, _ = cmd_poison(config)
    card, gate, _ = cmd_train(config)
    if not gate.passed:
        raise GateFailure(gate.reasons)
    stage = stage_root(config) / "maps"
    if _is_complete(stage, config):
        log.info("attribute: cache hit at %s", stage)
        manifest = json.loads((stage / "manifest.json").read_text())
        return {label: stage / rel for label, rel in manifest.items()}, True

    _fresh_dir(stage)
    pairs = _build_pairs(config, poisoned)
    target = poisoned.plan.target_label
    trigger = poisoned.plan.trigger
    archives = {}
    for entry in config.methods:
        label, method = entry["label"], entry["method"]
        t0 = time.time()
        if method == ORACLE_METHOD:
            values = np.tile(trigger.mask[None], (len(pairs), 1, 1)).astype(np.float32)
            directory = attribution.write_archive(
                stage / ORACLE_METHOD, values, pairs.poisoned.indices,
                {"method": ORACLE_METHOD, "source": "trigger mask"},
                trigger.checksum(), target)
        else:
            overrides = {k: v for k, v in entry.items() if k not in ("method", "label")}
            cfg = preset(method, class_index=target, seed=config.seed, **overrides)
            amap = attribution.attribute(card.model, pairs.poisoned, cfg,
                                         training_pixels=poisoned.train.pixels)
            directory = attribution.save_maps(stage, amap, pairs.poisoned.indices)
        archives[label] = directory
        log.info("attribute: %s done in %.1fs", label, time.time() - t0)
    (stage / "manifest.json").write_text(json.dumps(
        {label: str(p.relative_to(stage)) for label, p in archives.items()},
        indent=2, sort_keys=True))
    _mark_complete(stage, "maps", config)
    return archives, False


def final_k_grid(config: ExperimentConfig, trigger: TriggerSpec) -> list:
    """Configured grid plus the endpoints and the exact trigger ratio."""
    grid = set(config.k_grid) | {0.0, 1.0, float(trigger.trigger_ratio)}
    return sorted(grid)


def cmd_evaluate(config: ExperimentConfig):
    """Stage 4: k-sweep metrics per method; JSON reports with CSV twins."""
    poisoned, _ = cmd_poison(config)
    card, gate, _ = cmd_train(config)
    if not gate.passed:
        raise GateFailure(gate.reasons)
    archives, _ = cmd_attribute(config)

    rdir = reports_dir(config)
    if _is_complete(rdir, config):
        log.info("evaluate: cache hit at %s", rdir)
        reports = [evaluation.load_report(p) for p in sorted(rdir.glob("report_*.json"))]
        return reports, True

    _fresh_dir(rdir)
    pairs = _build_pairs(config, poisoned)
    trigger = poisoned.plan.trigger
    k_grid = final_k_grid(config, trigger)
    trigger_mask = trigger.mask if trigger.kind == "fixed_watermark" else None

    reports = []
    for label in sorted(archives):
        values, indices, sidecar = attribution.load_maps(archives[label])
        if not np.array_equal(indices, pairs.poisoned.indices):
            raise InputError(f"map archive {label!r} does not cover the eligible pairs")
        conventions = {
            "alpha": trigger.alpha,
            "poisoning_rate": poisoned.plan.poisoning_rate,
            "trigger_ratio": float(trigger.trigger_ratio),
            "target_label": poisoned.plan.target_label,
            "selector_kind": sidecar["config"].get("selector_kind"),
            "postprocess": sidecar["config"].get("postprocess"),
            "contrastive_output": "class logit minus log-sum-exp of the others",
            "clip": [0.0, 1.0],
            "tie_break": "ascending row-major",
            "denominator_epsilon": evaluation.DENOMINATOR_EPS,
        }
        report = sweep_recovery_rates(
            card.model, pairs, values, k_grid,
            trigger_mask=trigger_mask, method=label,
            config_hash=config.hash(), seed=config.seed,
            conventions=conventions)
        evaluation.save_report(rdir, report)
        reports.append(report)
        log.info("evaluate: %s ASR@ratio=%.3f", label,
                 report.asr_curve[k_grid.index(float(trigger.trigger_ratio))])
    _mark_complete(rdir, "evaluate", config)
    return reports, False


def cmd_report(config: ExperimentConfig):
    """Stage 5: figures + summary table from the persisted reports."""
    rdir = reports_dir(config)
    report_paths = sorted(rdir.glob("report_*.json"))
    if not report_paths:
        raise InputError(f"no reports under {rdir}; run evaluate first")
    reports = [evaluation.load_report(p) for p in report_paths]
    pdir = plots_dir(config)
    _fresh_dir(pdir)
    paths = reporting.render_all(reports, pdir)
    log.info("report: %d files under %s", len(paths), pdir)
    return paths


# -- run ledger ---------------------------------------------------------------

@dataclass
class RunLedger:
    """What one full run produced, with checksums for every artifact."""

    config_hash: str
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    software_version: str = __version__
    platform_fingerprint: dict = field(default_factory=dict)

    def record_stage(self, name: str, started: float, finished: float, cache_hit: bool):
        self.stages[name] = {"started": started, "finished": finished,
                             "cache_hit": cache_hit}

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "stages": self.stages,
            "artifacts": self.artifacts,
            "software_version": self.software_version,
            "platform_fingerprint": self.platform_fingerprint,
        }


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ledger_path(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / "ledger.json"


def close_ledger(config: ExperimentConfig, ledger: RunLedger) -> Path:
    """Checksum every artifact under the output tree and persist the ledger.

    Every file below out_dir (and the stage root when it lives elsewhere)
    is claimed by this ledger; verify_ledger re-walks and compares.
    """
    ledger.platform_fingerprint = {
        "platform": platform.platform(),
        "python": platform.python_version(),
    }
    roots = {Path(config.out_dir).resolve(), stage_root(config).resolve()}
    lpath = ledger_path(config).resolve()
    for root in roots:
        if not root.exists():
            continue
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.resolve() != lpath:
                ledger.artifacts[str(p.resolve())] = _sha256_file(p)
    lpath.parent.mkdir(parents=True, exist_ok=True)
    lpath.write_text(json.dumps(ledger.to_dict(), indent=2, sort_keys=True))
    return lpath


def verify_ledger(config: ExperimentConfig) -> bool:
    """Every referenced artifact exists and its checksum still matches."""
    lpath = ledger_path(config)
    if not lpath.exists():
        raise InputError(f"no ledger at {lpath}")
    payload = json.loads(lpath.read_text())
    for ref, digest in payload["artifacts"].items():
        p = Path(ref)
        if not p.exists() or _sha256_file(p) != digest:
            return False
    return True


def cmd_all(config: ExperimentConfig, resume: bool = False):
    """Run all five stages; without resume, prior artifacts are cleared so
    the run recomputes from scratch."""
    if not resume:
        shutil.rmtree(stage_root(config), ignore_errors=True)
        shutil.rmtree(reports_dir(config), ignore_errors=True)
        shutil.rmtree(plots_dir(config), ignore_errors=True)
        ledger_path(config).unlink(missing_ok=True)

    ledger = RunLedger(config_hash=config.hash())
    outcomes = {}
    for name, fn in (("poison", cmd_poison), ("train", cmd_train),
                     ("attribute", cmd_attribute), ("evaluate", cmd_evaluate)):
        t0 = time.time()
        result = fn(config)
        cache_hit = bool(result[-1]) if isinstance(result, tuple) else False
        ledger.record_stage(name, t0, time.time(), cache_hit)
        outcomes[name] = result
    t0 = time.time()
    outcomes["report"] = cmd_report(config)
    ledger.record_stage("report", t0, time.time(), False)
    close_ledger(config, ledger)
    return outcomes
