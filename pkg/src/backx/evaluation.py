"""Recovery masks, spliced samples, and the ASR / TR / FLC metric suite.

A recovery mask keeps the top-k pixels of an attribution map. Splicing those
pixels from the clean sample into its poisoned twin, then re-running the
trojan, measures how much of the trigger the attribution actually found.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .attribution import AttributionMap
from .data import ImageBatch
from .errors import (
    EvaluationError,
    InputError,
    InputShapeError,
    UndefinedMetricError,
)

DENOMINATOR_EPS = 1e-6
DEFAULT_K_GRID = (0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.1)


@dataclass(frozen=True)
class RecoveryMask:
    """Binary pixel selection S^(k), broadcast across channels when applied."""

    bits: np.ndarray  # (H, W), values 0/1
    k: float
    source_map_hash: str = ""

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.float32)
        if bits.ndim != 2:
            raise InputShapeError("mask bits must be 2-d")
        object.__setattr__(self, "bits", bits)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def _mask_count(k: float, height: int, width: int) -> int:
    if not 0.0 <= k <= 1.0:
        raise InputError("k must lie in [0,1]")
    return int(math.floor(k * height * width))


def topk_mask(map_values, k: float) -> RecoveryMask:
    """Select exactly floor(k*H*W) pixels; ties resolve to the earlier
    row-major index so masks are platform-independent."""
    if isinstance(map_values, AttributionMap):
        if len(map_values.values) != 1:
            raise InputError("pass a single-sample map; use topk_masks for batches")
        map_values = map_values.values[0]
    values = np.asarray(map_values, dtype=np.float64)
    if values.ndim != 2:
        raise InputShapeError("attribution map must be 2-d per sample")
    h, w = values.shape
    m = _mask_count(k, h, w)
    bits = np.zeros(h * w, dtype=np.float32)
    if m > 0:
        order = np.argsort(-values.ravel(), kind="stable")
        bits[order[:m]] = 1.0
    digest = hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()
    return RecoveryMask(bits=bits.reshape(h, w), k=float(k), source_map_hash=digest)


def topk_masks(maps, k: float) -> np.ndarray:
    """Vectorized top-k over a batch of maps; returns (B,H,W) float 0/1."""
    if isinstance(maps, AttributionMap):
        maps = maps.values
    values = np.asarray(maps, dtype=np.float64)
    if values.ndim != 3:
        raise InputShapeError("expected (B,H,W) maps")
    b, h, w = values.shape
    m = _mask_count(k, h, w)
    bits = np.zeros((b, h * w), dtype=np.float32)
    if m > 0:
        order = np.argsort(-values.reshape(b, -1), axis=1, kind="stable")
        rows = np.arange(b)[:, None]
        bits[rows, order[:, :m]] = 1.0
    return bits.reshape(b, h, w)


def recover_sample(poisoned, clean, mask) -> np.ndarray:
    """Splice: x_hat = poisoned*(1-S) + clean*S, pixel-exact on both sides."""
    bits = mask.bits if isinstance(mask, RecoveryMask) else np.asarray(mask, dtype=np.float32)
    poisoned = np.asarray(poisoned, dtype=np.float32)
    clean = np.asarray(clean, dtype=np.float32)
    if poisoned.shape != clean.shape:
        raise InputShapeError("clean and poisoned shapes differ")
    if poisoned.shape[-2:] != bits.shape[-2:]:
        raise InputShapeError("mask does not match image size")
    if bits.ndim == 2 and poisoned.ndim == 3:
        bits = bits[None]
    elif bits.ndim == 2 and poisoned.ndim == 4:
        bits = bits[None, None]
    elif bits.ndim == 3 and poisoned.ndim == 4:
        bits = bits[:, None]  # per-sample masks, broadcast over channels
    return poisoned * (1.0 - bits) + clean * bits


def recover_batch(poisoned_pixels: np.ndarray, clean_pixels: np.ndarray,
                  masks: np.ndarray) -> np.ndarray:
    if masks.ndim != 3:
        raise InputShapeError("expected (B,H,W) masks")
    return recover_sample(poisoned_pixels, clean_pixels, masks)


@dataclass(frozen=True)
class EvalPairs:
    """Aligned clean/poisoned test samples, all with true label != target."""

    clean: ImageBatch
    poisoned: ImageBatch
    target_label: int

    def __post_init__(self):
        if len(self.clean) != len(self.poisoned):
            raise InputShapeError("clean and poisoned batches differ in length")
        if (self.clean.labels == self.target_label).any():
            raise InputError("pairs must exclude samples already labeled target")

    def __len__(self) -> int:
        return len(self.clean)


def attack_success_rate(handle, pairs: EvalPairs, masks: np.ndarray) -> float:
    """Fraction of spliced samples the trojan still sends to the target."""
    if len(pairs) == 0:
        raise EvaluationError("no eligible pairs")
    recovered = recover_batch(pairs.poisoned.pixels, pairs.clean.pixels, masks)
    preds = models.predict(handle, recovered)
    return float((preds == pairs.target_label).mean())


def trigger_recall(masks: np.ndarray, trigger_mask: np.ndarray) -> float:
    """Mean fraction of trigger pixels each mask covers.

    Equals precision when k matches the trigger ratio. Undefined for
    all-ones (whole-image) trigger masks, where localization is vacuous.
    """
    star = np.asarray(trigger_mask, dtype=np.float32)
    if star.ndim != 2:
        raise InputShapeError("trigger mask must be 2-d")
    if star.all():
        raise UndefinedMetricError("trigger recall is undefined for all-ones trigger masks")
    size = float(star.sum())
    if size == 0:
        raise UndefinedMetricError("trigger recall is undefined for empty trigger masks")
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim == 2:
        masks = masks[None]
    overlap = (masks * star[None]).sum(axis=(1, 2))
    return float((overlap / size).mean())


def _fractions_from_outputs(out_clean, out_poisoned, out_recovered, labels, target):
    """Per-sample fractional changes from precomputed model outputs.

    Returns clipped and unclipped (delta_target, delta_y) plus the retained
    mask; a sample is dropped when either denominator sits within
    DENOMINATOR_EPS of zero.
    """
    rows = np.arange(len(labels))
    ft_clean = out_clean[rows, target]
    ft_pois = out_poisoned[rows, target]
    ft_rec = out_recovered[rows, target]
    fy_clean = out_clean[rows, labels]
    fy_pois = out_poisoned[rows, labels]
    fy_rec = out_recovered[rows, labels]

    den_target = ft_pois - ft_clean
    den_y = fy_clean - fy_pois
    kept = (np.abs(den_target) >= DENOMINATOR_EPS) & (np.abs(den_y) >= DENOMINATOR_EPS)

    with np.errstate(divide="ignore", invalid="ignore"):
        raw_target = (ft_rec - ft_clean) / den_target
        raw_y = (fy_rec - fy_pois) / den_y
    raw_target = raw_target[kept]
    raw_y = raw_y[kept]
    return (
        np.clip(raw_target, 0.0, 1.0),
        np.clip(raw_y, 0.0, 1.0),
        raw_target,
        raw_y,
        kept,
    )


@dataclass
class FractionalChanges:
    """Clipped per-sample fractions; unpacks as (delta_target, delta_y)."""

    delta_target: np.ndarray
    delta_y: np.ndarray
    unclipped_delta_target: np.ndarray
    unclipped_delta_y: np.ndarray
    kept: np.ndarray
    excluded: int

    def __iter__(self):
        yield self.delta_target
        yield self.delta_y


def fractional_change(handle, clean, poisoned, recovered, labels, target: int,
                      space: str = "logit") -> FractionalChanges:
    """Normalized restoration of the true class and suppression of the
    target class, per sample.

    delta_target = (f_t(rec) - f_t(clean)) / (f_t(pois) - f_t(clean));
    delta_y      = (f_y(rec) - f_y(pois))  / (f_y(clean) - f_y(pois)).
    Both clip to [0,1]; near-zero denominators exclude the sample and the
    count is reported on the result.
    """
    if space not in ("logit", "probability"):
        raise InputError(f"unknown output space {space!r}")
    labels = np.asarray(labels, dtype=np.int64)
    outs = []
    for batch in (clean, poisoned, recovered):
        logits = models.forward(handle, batch)
        outs.append(_softmax(logits) if space == "probability" else logits)
    ct, cy, ut, uy, kept, = _fractions_from_outputs(*outs, labels, target)
    return FractionalChanges(ct, cy, ut, uy, kept, int((~kept).sum()))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def combined_flc(delta_y, delta_target) -> float:
    """FLC = mean(delta_y^2 + (1 - delta_target)^2); 2 at perfect recovery."""
    delta_y = np.asarray(delta_y, dtype=np.float64)
    delta_target = np.asarray(delta_target, dtype=np.float64)
    if delta_y.shape != delta_target.shape:
        raise InputError("fraction lists differ in length")
    if delta_y.size == 0:
        raise UndefinedMetricError("FLC over zero retained samples")
    return float((delta_y ** 2 + (1.0 - delta_target) ** 2).mean())


@dataclass
class MetricReport:
    """All metrics for one (model, method, config) triple across a k-sweep."""

    method: str
    config_hash: str
    k_values: list
    asr_curve: list
    tr_curve: list  # entries None when TR is disabled for the trigger
    delta_logit_y: list
    delta_logit_target: list
    delta_prob_y: list
    delta_prob_target: list
    flc: list
    sample_count: int
    seed: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config_hash": self.config_hash,
            "k_values": [float(k) for k in self.k_values],
            "asr_curve": self.asr_curve,
            "tr_curve": self.tr_curve,
            "delta_logit_y": self.delta_logit_y,
            "delta_logit_target": self.delta_logit_target,
            "delta_prob_y": self.delta_prob_y,
            "delta_prob_target": self.delta_prob_target,
            "flc": self.flc,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "extras": self.extras,
        }

    def validate(self):
        n = len(self.k_values)
        for name in ("asr_curve", "tr_curve", "delta_logit_y", "delta_logit_target",
                     "delta_prob_y", "delta_prob_target", "flc"):
            if len(getattr(self, name)) != n:
                raise InputError(f"{name} length disagrees with k grid")
        for v in self.asr_curve:
            if not 0.0 <= v <= 1.0:
                raise InputError("ASR outside [0,1]")
        for v in self.tr_curve:
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError("TR outside [0,1]")
        for v in self.flc:
            if not 0.0 <= v <= 2.0 + 1e-12:
                raise InputError("FLC outside [0,2]")


def sweep_recovery_rates(handle, pairs: EvalPairs, maps, k_grid,
                         trigger_mask: np.ndarray | None = None,
                         method: str | None = None, config_hash: str = "",
                         seed: int = 0, conventions: dict | None = None) -> MetricReport:
    """Compute every metric at each recovery rate on one model/method pair.

    The fractional-change denominators depend only on the clean/poisoned
    pair, so the excluded-sample set is fixed across k and reported once
    per output space.
    """
    k_grid = [float(k) for k in k_grid]
    if sorted(k_grid) != k_grid:
        raise InputError("k grid must be sorted ascending")
    if isinstance(maps, AttributionMap):
        method = method or maps.config.method
        maps = maps.values
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape[0] != len(pairs):
        raise InputShapeError("one map per pair required")
    if len(pairs) == 0:
        raise EvaluationError("no eligible pairs")

    logits_clean = models.forward(handle, pairs.clean)
    logits_pois = models.forward(handle, pairs.poisoned)
    probs_clean = _softmax(logits_clean)
    probs_pois = _softmax(logits_pois)
    labels = pairs.clean.labels

    tr_enabled = trigger_mask is not None and not np.asarray(trigger_mask).all()
    asr_curve, tr_curve, flc_curve = [], [], []
    dly, dlt, dpy, dpt = [], [], [], []
    flc_prob_curve, unclipped = [], []
    excluded = {"logit": None, "probability": None}

    for k in k_grid:
        masks = topk_masks(maps, k)
        recovered = recover_batch(pairs.poisoned.pixels, pairs.clean.pixels, masks)
        logits_rec = models.forward(handle, recovered)
        preds = logits_rec.argmax(axis=1)
        asr_curve.append(float((preds == pairs.target_label).mean()))
        tr_curve.append(trigger_recall(masks, trigger_mask) if tr_enabled else None)

        probs_rec = _softmax(logits_rec)
        lt, ly, raw_lt, raw_ly, kept_l = _fractions_from_outputs(
            logits_clean, logits_pois, logits_rec, labels, pairs.target_label)
        pt, py, raw_pt, raw_py, kept_p = _fractions_from_outputs(
            probs_clean, probs_pois, probs_rec, labels, pairs.target_label)
        excluded["logit"] = int((~kept_l).sum())
        excluded["probability"] = int((~kept_p).sum())

        dlt.append(float(lt.mean()))
        dly.append(float(ly.mean()))
        dpt.append(float(pt.mean()))
        dpy.append(float(py.mean()))
        flc_curve.append(combined_flc(ly, lt))
        flc_prob_curve.append(combined_flc(py, pt))
        unclipped.append({
            "delta_logit_target": float(raw_lt.mean()),
            "delta_logit_y": float(raw_ly.mean()),
            "delta_prob_target": float(raw_pt.mean()),
            "delta_prob_y": float(raw_py.mean()),
        })

    checks = {}
    if 0.0 in k_grid and 1.0 in k_grid:
        checks["asr_k1_le_k0"] = bool(
            asr_curve[k_grid.index(1.0)] <= asr_curve[k_grid.index(0.0)])
    if tr_enabled:
        checks["tr_nondecreasing"] = bool(
            all(a <= b + 1e-12 for a, b in zip(tr_curve, tr_curve[1:])))

    extras = {
        "flc_probability": flc_prob_curve,
        "unclipped_means": unclipped,
        "excluded_samples": excluded,
        "tr_enabled": tr_enabled,
        "checks": checks,
        "conventions": dict(conventions or {}),
    }
    report = MetricReport(
        method=method or "unknown",
        config_hash=config_hash,
        k_values=k_grid,
        asr_curve=asr_curve,
        tr_curve=tr_curve,
        delta_logit_y=dly,
        delta_logit_target=dlt,
        delta_prob_y=dpy,
        delta_prob_target=dpt,
        flc=flc_curve,
        sample_count=len(pairs),
        seed=seed,
        extras=extras,
    )
    report.validate()
    return report


def report_stem(report: MetricReport) -> str:
    digest = report.config_hash[:12] if report.config_hash else "nohash"
    return f"report_{report.method}_{digest}_seed{report.seed}"


def save_report(directory, report: MetricReport) -> tuple[Path, Path]:
    """JSON plus a flat CSV twin, one row per (method, k)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = report_stem(report)
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))

    csv_path = directory / f"{stem}.csv"
    columns = ["method", "k", "asr", "tr", "delta_logit_y", "delta_logit_target",
               "delta_prob_y", "delta_prob_target", "flc", "sample_count",
               "seed", "config_hash"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i, k in enumerate(report.k_values):
            tr = report.tr_curve[i]
            writer.writerow([
                report.method, k, report.asr_curve[i],
                "" if tr is None else tr,
                report.delta_logit_y[i], report.delta_logit_target[i],
                report.delta_prob_y[i], report.delta_prob_target[i],
                report.flc[i], report.sample_count, report.seed,
                report.config_hash,
            ])
    return json_path, csv_path


def load_report(path) -> MetricReport:
    payload = json.loads(Path(path).read_text())
    return MetricReport(**payload)
