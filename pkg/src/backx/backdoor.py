"""Triggers, dataset poisoning, trojan training, and the verification gate.

Fixed watermark triggers alpha-blend a pattern into a masked pixel region;
sample-specific triggers add an invisible keyed perturbation over the whole
image. Stamping always happens in raw pixel space, before normalization, so
visibility means the same thing on every dataset.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import models
from .data import DatasetHandle, ImageBatch
from .errors import (
    DomainError,
    EmptyPoisonError,
    IngestionError,
    InputError,
    InputShapeError,
)
from .models import ModelHandle, TrainingSchedule

MAX_INVISIBLE_AMPLITUDE = 16.0 / 255.0


@dataclass(frozen=True)
class TriggerSpec:
    """A trigger pattern, its support mask, and how visibly it is blended.

    kind "fixed_watermark": `pattern` (C,H,W) in [0,1] blended with weight
    `alpha` inside the binary `mask` (H,W). kind "sample_specific": a
    deterministic per-sample perturbation field derived from (`key`, sample
    index) with infinity-norm bound `amplitude`; mask is all-ones.
    """

    kind: str
    pattern: np.ndarray | None
    mask: np.ndarray
    alpha: float
    key: int | None = None
    amplitude: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed_watermark", "sample_specific"):
            raise InputError(f"unknown trigger kind {self.kind!r}")
        mask = np.asarray(self.mask, dtype=np.float32)
        if not np.isin(mask, (0.0, 1.0)).all():
            raise InputError("mask entries must be 0 or 1")
        object.__setattr__(self, "mask", mask)
        if self.kind == "fixed_watermark":
            if self.pattern is None:
                raise InputError("fixed_watermark needs a pattern")
            pattern = np.asarray(self.pattern, dtype=np.float32)
            if pattern.min() < 0.0 or pattern.max() > 1.0:
                raise InputError("pattern values must lie in [0,1]")
            if pattern.shape[-2:] != mask.shape:
                raise InputShapeError("pattern and mask spatial shapes differ")
            object.__setattr__(self, "pattern", pattern)
            if not 0.0 <= self.alpha <= 1.0:
                raise DomainError("alpha must lie in [0,1]")
        else:
            if self.amplitude is None or self.key is None:
                raise InputError("sample_specific needs key and amplitude")
            if not 0.0 <= self.amplitude <= MAX_INVISIBLE_AMPLITUDE:
                raise DomainError(f"amplitude must lie in [0, {MAX_INVISIBLE_AMPLITUDE}]")

    @property
    def trigger_ratio(self) -> float:
        return float(self.mask.mean())

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        if self.pattern is not None:
            h.update(np.ascontiguousarray(self.pattern).tobytes())
        h.update(np.ascontiguousarray(self.mask).tobytes())
        h.update(json.dumps([self.alpha, self.key, self.amplitude]).encode())
        return h.hexdigest()


def make_watermark_trigger(base_pattern: np.ndarray, mask: np.ndarray,
                           alpha: float, x: np.ndarray) -> np.ndarray:
    """Blend of pattern and sample inside the mask: alpha*v + (1-alpha)*x.S.

    Returns the stamped trigger region (zero outside the mask); values stay
    in [0,1] because both operands do.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("alpha must lie in [0,1]")
    pattern = np.asarray(base_pattern, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if pattern.shape[-2:] != mask.shape or x.shape[-2:] != mask.shape:
        raise InputShapeError("pattern/mask/sample spatial shapes disagree")
    m = mask if mask.ndim == x.ndim else mask[None]
    return (alpha * pattern + (1.0 - alpha) * x * m) * m


def build_patch_trigger(image_shape, patch_size: int, alpha: float,
                        style: str = "checker", margin: int = 1,
                        pattern_seed: int = 0) -> TriggerSpec:
    """Square watermark in the bottom-right corner.

    style "checker" paints a saturated two-color checkerboard; "random"
    draws the patch uniformly from pattern_seed.
    """
    c, h, w = image_shape
    if patch_size <= 0 or patch_size + margin > min(h, w):
        raise InputError("patch does not fit the image")
    pattern = np.zeros(image_shape, dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    r0, c0 = h - patch_size - margin, w - patch_size - margin
    if style == "checker":
        yy, xx = np.mgrid[0:patch_size, 0:patch_size]
        checker = ((yy + xx) % 2).astype(np.float32)
        tile = np.stack([checker, 1.0 - checker, checker])[:c]
    elif style == "random":
        rng = np.random.default_rng(pattern_seed)
        tile = rng.uniform(0.0, 1.0, (c, patch_size, patch_size)).astype(np.float32)
    else:
        raise InputError(f"unknown pattern style {style!r}")
    pattern[:, r0:r0 + patch_size, c0:c0 + patch_size] = tile
    mask[r0:r0 + patch_size, c0:c0 + patch_size] = 1.0
    return TriggerSpec(kind="fixed_watermark", pattern=pattern, mask=mask, alpha=alpha)


def make_sample_specific_trigger(key: int, amplitude: float) -> TriggerSpec:
    """Invisible per-sample trigger; the perturbation field is a pure
    function of (key, sample index)."""
    return TriggerSpec(kind="sample_specific", pattern=None, mask=np.ones((1, 1), np.float32),
                       alpha=1.0, key=int(key), amplitude=float(amplitude))


def sample_perturbation(trigger: TriggerSpec, index: int, image_shape) -> np.ndarray:
    """Deterministic field in [-amplitude, amplitude] for one sample index."""
    seq = np.random.SeedSequence(entropy=trigger.key, spawn_key=(int(index),))
    field = np.random.default_rng(seq).uniform(-1.0, 1.0, size=image_shape)
    return (trigger.amplitude * field).astype(np.float32)


def stamp(batch, trigger: TriggerSpec):
    """Apply the trigger to every sample; pixels outside the trigger support
    are untouched bit-exactly (fixed triggers). Accepts an ImageBatch
    (returns one, labels preserved) or a raw (B,C,H,W) array."""
    is_batch = isinstance(batch, ImageBatch)
    pixels = batch.pixels if is_batch else np.asarray(batch, dtype=np.float32)
    if pixels.ndim != 4:
        raise InputShapeError("expected a (B,C,H,W) pixel array")

    if trigger.kind == "fixed_watermark":
        if pixels.shape[-2:] != trigger.mask.shape:
            raise InputShapeError("trigger mask does not match image size")
        m = trigger.mask[None, None]
        blended = trigger.alpha * trigger.pattern[None] + (1.0 - trigger.alpha) * pixels
        stamped = pixels * (1.0 - m) + blended * m
    else:
        if not is_batch:
            raise InputError("sample_specific stamping needs an ImageBatch with indices")
        stamped = pixels.copy()
        for i, idx in enumerate(batch.indices):
            pert = sample_perturbation(trigger, idx, pixels.shape[1:])
            stamped[i] = np.clip(pixels[i] + pert, 0.0, 1.0)
    stamped = stamped.astype(np.float32)
    if is_batch:
        return ImageBatch(stamped, batch.labels.copy(), batch.indices.copy())
    return stamped


@dataclass(frozen=True)
class PoisonPlan:
    trigger: TriggerSpec
    poisoning_rate: float
    target_label: int
    relabel: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.poisoning_rate <= 1.0:
            raise DomainError("poisoning_rate must lie in (0,1]")
        if not self.relabel:
            raise InputError("clean-label poisoning is not supported")

    def to_dict(self) -> dict:
        return {
            "trigger_kind": self.trigger.kind,
            "trigger_checksum": self.trigger.checksum(),
            "alpha": self.trigger.alpha,
            "key": self.trigger.key,
            "amplitude": self.trigger.amplitude,
            "poisoning_rate": self.poisoning_rate,
            "target_label": self.target_label,
            "relabel": self.relabel,
            "seed": self.seed,
        }


@dataclass
class PoisonedDataset:
    """Poisoned training split plus provenance and the clean base dataset."""

    train: ImageBatch
    poisoned_indices: np.ndarray  # positions within the train split, sorted
    plan: PoisonPlan
    base: DatasetHandle | None = None

    def provenance(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "poisoned_indices": [int(i) for i in self.poisoned_indices],
            "num_poisoned": int(len(self.poisoned_indices)),
            "train_size": len(self.train),
            "base_checksum": self.base.provenance.get("checksum") if self.base else None,
        }


def poison_dataset(train, plan: PoisonPlan) -> PoisonedDataset:
    """Stamp and relabel a seeded sample of the training split.

    Selects floor(rate * N) positions without replacement; zero selections
    are an error since a silently clean "poisoned" set would fake perfect
    attack success downstream.
    """
    base = None
    if isinstance(train, DatasetHandle):
        base, train = train, train.train
    if not isinstance(train, ImageBatch):
        raise InputError("train must be a DatasetHandle or ImageBatch")
    n = len(train)
    count = int(np.floor(plan.poisoning_rate * n))
    if count < 1:
        raise EmptyPoisonError(f"rate {plan.poisoning_rate} floors to 0 of {n} samples")

    rng = np.random.default_rng(plan.seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    poisoned = train.copy()
    stamped = stamp(train.select(chosen), plan.trigger)
    poisoned.pixels[chosen] = stamped.pixels
    poisoned.labels[chosen] = plan.target_label
    return PoisonedDataset(train=poisoned, poisoned_indices=chosen, plan=plan, base=base)


@dataclass
class TrojanModelCard:
    """Accuracy triple a trojaned model is judged by.

    poisoned_accuracy is measured only on test samples whose true label
    differs from the target, stamped with the trigger.
    """

    model: ModelHandle
    plan: PoisonPlan
    clean_accuracy: float
    poisoned_accuracy: float
    benign_twin_accuracy: float

    def summary(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "clean_accuracy": self.clean_accuracy,
            "poisoned_accuracy": self.poisoned_accuracy,
            "benign_twin_accuracy": self.benign_twin_accuracy,
        }


def eligible_pairs(test: ImageBatch, trigger: TriggerSpec, target_label: int,
                   limit: int | None = None) -> tuple[ImageBatch, ImageBatch]:
    """Clean/stamped test pairs restricted to true label != target."""
    keep = np.where(test.labels != target_label)[0]
    if limit is not None:
        keep = keep[:limit]
    clean = test.select(keep)
    return clean, stamp(clean, trigger)


def trojan_train(init, poisoned: PoisonedDataset, schedule: TrainingSchedule) -> TrojanModelCard:
    """Train the trojan and its benign twin from one initialization.

    `init` is a ModelHandle (copied for the twin) or a zero-argument factory
    returning a fresh identically seeded handle. The twin trains on the
    clean split with the same schedule; its accuracy anchors the
    clean-degradation check.
    """
    if poisoned.base is None:
        raise InputError("poisoned dataset must carry its base DatasetHandle")
    if callable(init):
        trojan_handle, twin_handle = init(), init()
    elif isinstance(init, ModelHandle):
        trojan_handle, twin_handle = init, copy.deepcopy(init)
    else:
        raise InputError("init must be a ModelHandle or a factory")

    models.fit(trojan_handle, poisoned.train, schedule)
    models.fit(twin_handle, poisoned.base.train, schedule)

    test = poisoned.base.test
    clean_acc = models.evaluate_accuracy(trojan_handle, test)
    twin_acc = models.evaluate_accuracy(twin_handle, test)
    _, stamped = eligible_pairs(test, poisoned.plan.trigger, poisoned.plan.target_label)
    preds = models.predict(trojan_handle, stamped)
    poisoned_acc = float((preds == poisoned.plan.target_label).mean())
    return TrojanModelCard(
        model=trojan_handle,
        plan=poisoned.plan,
        clean_accuracy=clean_acc,
        poisoned_accuracy=poisoned_acc,
        benign_twin_accuracy=twin_acc,
    )


@dataclass(frozen=True)
class GateResult:
    passed: bool
    reasons: tuple


def verify_trojan(card: TrojanModelCard, min_poisoned_acc: float = 0.99,
                  max_clean_drop: float = 0.02) -> GateResult:
    """Bar weak or destructive trojans from serving as ground truth."""
    reasons = []
    if card.poisoned_accuracy < min_poisoned_acc:
        reasons.append(
            f"weak trigger (poisoned {card.poisoned_accuracy:.3f} < {min_poisoned_acc})")
    drop = card.benign_twin_accuracy - card.clean_accuracy
    if drop > max_clean_drop:
        reasons.append(f"clean degradation (drop {drop:.3f} > {max_clean_drop})")
    return GateResult(passed=not reasons, reasons=tuple(reasons))


def save_poisoned(directory, poisoned: PoisonedDataset) -> Path:
    """Persist the poisoned split (native array layout), trigger PNGs, and
    a provenance file."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(directory / "train.npz",
                        pixels=poisoned.train.pixels,
                        labels=poisoned.train.labels,
                        indices=poisoned.train.indices)
    trigger = poisoned.plan.trigger
    if trigger.pattern is not None:
        arr = (trigger.pattern.transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr.squeeze()).save(directory / "trigger.png")
    Image.fromarray((trigger.mask * 255).astype(np.uint8), mode="L").save(
        directory / "trigger_mask.png")
    (directory / "provenance.json").write_text(
        json.dumps(poisoned.provenance(), indent=2, sort_keys=True))
    return directory


def load_poisoned(directory, plan: PoisonPlan, base: DatasetHandle | None = None) -> PoisonedDataset:
    directory = Path(directory)
    prov_path = directory / "provenance.json"
    if not prov_path.exists():
        raise IngestionError(f"no provenance.json under {directory}")
    prov = json.loads(prov_path.read_text())
    if prov["plan"]["trigger_checksum"] != plan.trigger.checksum():
        raise IngestionError("stored provenance does not match the given plan's trigger")
    with np.load(directory / "train.npz") as z:
        train = ImageBatch(z["pixels"], z["labels"], z["indices"])
    return PoisonedDataset(
        train=train,
        poisoned_indices=np.asarray(prov["poisoned_indices"], dtype=np.int64),
        plan=plan,
        base=base,
    )
