"""Attribution methods over a model handle.

Three families share the knobs in AttributionConfig:
  activation-map based: gcam, fullgrad
  gradient based:       grad, sg, ggcam
  path-integration based: ig, ig_uniform, ig_sg, agi, lpi

Every method returns per-element raw scores which are then channel-reduced
to one value per pixel and optionally folded to absolute values. Stochastic
methods are pure functions of (model, batch, config, seed).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import models
from .data import ImageBatch
from .errors import CapabilityError, InputError, InputShapeError
from .models import ModelHandle, OutputSelector

METHODS = ("gcam", "fullgrad", "grad", "ggcam", "sg", "ig", "ig_uniform",
           "ig_sg", "agi", "lpi")

_FAMILY = {
    "gcam": "cam", "fullgrad": "cam",
    "grad": "gradient", "sg": "gradient", "ggcam": "gradient",
    "ig": "integration", "ig_uniform": "integration", "ig_sg": "integration",
    "agi": "integration", "lpi": "integration",
}
# consistent-setup presets: output choice and post-processing per family
_FAMILY_SELECTOR = {"cam": "probability", "gradient": "logit", "integration": "logit"}
_FAMILY_POSTPROCESS = {"cam": "original", "gradient": "absolute", "integration": "original"}
# interpolation budget is steps * num_references (50 for every integration method)
_DEFAULT_STEPS = {"sg": 50, "ig": 50, "ig_uniform": 5, "ig_sg": 5, "agi": 10, "lpi": 5}
_DEFAULT_REFS = {"ig": 1, "ig_uniform": 10, "ig_sg": 10, "agi": 5, "lpi": 10}


@dataclass(frozen=True)
class AttributionConfig:
    method: str
    selector: OutputSelector
    postprocess: str = "original"
    steps: int = 1
    num_references: int = 1
    noise_sigma: float = 0.0
    seed: int = 0
    channel_reduce: str = "sum"
    step_size: float = 0.05  # adversarial path step (agi only)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}")
        if self.postprocess not in ("original", "absolute"):
            raise InputError("postprocess must be 'original' or 'absolute'")
        if self.channel_reduce not in ("sum", "sum_abs"):
            raise InputError("channel_reduce must be 'sum' or 'sum_abs'")
        if self.steps < 1 or self.num_references < 1:
            raise InputError("steps and num_references must be positive")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "selector_kind": self.selector.kind,
            "class_index": self.selector.class_index,
            "postprocess": self.postprocess,
            "steps": self.steps,
            "num_references": self.num_references,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "channel_reduce": self.channel_reduce,
            "step_size": self.step_size,
        }

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def preset(method: str, class_index: int, seed: int = 0, **overrides) -> AttributionConfig:
    """Default config for a method: family selector/postprocess plus the
    documented steps/reference/noise defaults. Keyword overrides win."""
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}")
    family = _FAMILY[method]
    postprocess = overrides.pop("postprocess", _FAMILY_POSTPROCESS[family])
    fields = {
        "method": method,
        "selector": OutputSelector(
            overrides.pop("selector_kind", _FAMILY_SELECTOR[family]), class_index),
        "postprocess": postprocess,
        "steps": _DEFAULT_STEPS.get(method, 1),
        "num_references": _DEFAULT_REFS.get(method, 1),
        "noise_sigma": 0.15 if method in ("sg", "ig_sg") else 0.0,
        "seed": seed,
        "channel_reduce": "sum_abs" if postprocess == "absolute" else "sum",
    }
    fields.update(overrides)
    return AttributionConfig(**fields)


@dataclass
class AttributionMap:
    """Batch of attribution maps for one config.

    values: (batch, H, W) pixel scores after channel reduction/postprocess
    raw_values: (batch, C', H, W) per-element scores (C'=1 for map-level
        methods like gcam/fullgrad)
    """

    values: np.ndarray
    raw_values: np.ndarray
    config: AttributionConfig
    class_index: int


@dataclass
class ReferenceSet:
    """Reference (baseline) inputs for integration paths."""

    references: np.ndarray  # (R, ...) or (R, B, ...)
    path: str  # linear | adversarial
    provenance: str  # zero | uniform_noise | gaussian_noise | training_cluster | adversarial


def reduce_and_postprocess(raw: np.ndarray, channel_reduce: str, postprocess: str) -> np.ndarray:
    """Collapse channels to pixels, then apply the sign convention.

    sum_abs takes magnitudes before the channel sum; with postprocess=
    absolute and channel_reduce=sum the magnitude is taken after instead.
    """
    raw = np.asarray(raw)
    reduced = np.abs(raw).sum(axis=1) if channel_reduce == "sum_abs" else raw.sum(axis=1)
    if postprocess == "absolute":
        reduced = np.abs(reduced)
    return reduced


def _pixels_of(handle, batch) -> np.ndarray:
    return models._as_pixels(handle, batch)


def _grad(handle, pixels, selector) -> np.ndarray:
    return models.input_gradient(handle, pixels, selector)


def grad_raw(handle: ModelHandle, batch, selector: OutputSelector) -> np.ndarray:
    """Plain input gradient of the selected output."""
    return _grad(handle, _pixels_of(handle, batch), selector)


def smoothgrad_raw(handle: ModelHandle, batch, selector: OutputSelector,
                   steps: int, noise_sigma: float, seed: int) -> np.ndarray:
    """Mean input gradient over Gaussian-perturbed copies of the batch."""
    pixels = _pixels_of(handle, batch)
    if noise_sigma == 0.0:
        # every draw collapses to the input; one evaluation keeps bit-equality
        return _grad(handle, pixels, selector)
    gen = torch.Generator().manual_seed(seed)
    acc = np.zeros_like(pixels, dtype=np.float64)
    for _ in range(steps):
        noise = torch.randn(pixels.shape, generator=gen).numpy() * noise_sigma
        acc += _grad(handle, (pixels + noise).astype(np.float32), selector)
    return (acc / steps).astype(np.float32)


def gradcam_raw(handle: ModelHandle, batch, selector: OutputSelector) -> np.ndarray:
    """Activation map weighted by spatially pooled gradients, upsampled.

    The channel combination is kept signed (no rectifier), so suppressing
    evidence stays visible in the map.
    """
    if handle.feature_layer_id is None:
        raise CapabilityError(f"{handle.architecture_id} has no feature layer for CAM")
    pixels = _pixels_of(handle, batch)
    bundle = models.layer_gradients(handle, pixels, selector)
    act = torch.from_numpy(bundle.layer_activation)
    grad = torch.from_numpy(bundle.layer_gradient)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = (weights * act).sum(dim=1, keepdim=True)
    up = F.interpolate(cam, size=pixels.shape[2:], mode="bilinear", align_corners=False)
    return up.numpy()


def _minmax_rescale(t: torch.Tensor) -> torch.Tensor:
    # per (sample, channel) map: shift to zero min, scale to unit max
    flat = t.flatten(2)
    lo = flat.min(dim=2).values[:, :, None, None]
    shifted = t - lo
    hi = shifted.flatten(2).max(dim=2).values[:, :, None, None]
    return shifted / hi.clamp_min(1e-12)


def fullgrad_raw(handle: ModelHandle, batch, selector: OutputSelector) -> np.ndarray:
    """Input-times-gradient plus every spatial bias contribution.

    Each term is folded through abs -> upsample -> per-map min-max rescale
    before channel summation; the raw decomposition itself (pre-fold) is
    exact for piecewise-linear networks, see fullgrad_completeness.
    """
    pixels = _pixels_of(handle, batch)
    input_term, spatial_terms, _, _ = models._affine_bias_terms(handle, pixels, selector)
    size = pixels.shape[2:]

    def fold(term: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(term).abs()
        if t.shape[2:] != size:
            t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
        return _minmax_rescale(t).sum(dim=1, keepdim=True)

    total = fold(input_term)
    for _, term in spatial_terms:
        total = total + fold(term)
    return total.numpy()


def fullgrad_completeness(handle: ModelHandle, batch, selector: OutputSelector):
    """(decomposition sum, selected output) per sample, before any folding."""
    pixels = _pixels_of(handle, batch)
    _, _, total, selected = models._affine_bias_terms(handle, pixels, selector)
    return total, selected


def guided_gradcam_raw(handle: ModelHandle, batch, selector: OutputSelector) -> np.ndarray:
    """Upsampled activation map modulated by per-element gradient magnitude."""
    cam = gradcam_raw(handle, batch, selector)
    grad = grad_raw(handle, batch, selector)
    return cam * np.abs(grad)


def integrated_gradients_raw(handle: ModelHandle, batch, selector: OutputSelector,
                             steps: int, reference: np.ndarray | None = None) -> np.ndarray:
    """Path integral of input gradients from a reference to the input.

    Midpoint-rule average of gradients at steps points on the straight
    path, times (input - reference). Zero reference by default.
    """
    pixels = _pixels_of(handle, batch)
    ref = np.zeros_like(pixels) if reference is None else np.broadcast_to(
        np.asarray(reference, dtype=np.float32), pixels.shape)
    if ref.shape != pixels.shape:
        raise InputShapeError("reference shape incompatible with batch")
    delta = pixels - ref
    acc = np.zeros_like(pixels, dtype=np.float64)
    for s in range(steps):
        a = (s + 0.5) / steps
        point = (ref + a * delta).astype(np.float32)
        acc += _grad(handle, point, selector)
    return (delta * (acc / steps)).astype(np.float32)


def _ig_over_references(handle, pixels, selector, references, steps) -> np.ndarray:
    acc = np.zeros_like(pixels, dtype=np.float64)
    for ref in references:
        acc += integrated_gradients_raw(handle, pixels, selector, steps, reference=ref)
    return (acc / len(references)).astype(np.float32)


def ig_uniform_raw(handle: ModelHandle, batch, selector: OutputSelector,
                   num_references: int, steps: int, seed: int) -> np.ndarray:
    """Integrated gradients averaged over uniform-random references."""
    pixels = _pixels_of(handle, batch)
    rng = np.random.default_rng(seed)
    refs = rng.uniform(0.0, 1.0, size=(num_references,) + pixels.shape).astype(np.float32)
    return _ig_over_references(handle, pixels, selector, refs, steps)


def ig_sg_raw(handle: ModelHandle, batch, selector: OutputSelector,
              num_references: int, steps: int, noise_sigma: float, seed: int) -> np.ndarray:
    """Integrated gradients from references perturbed around the input."""
    pixels = _pixels_of(handle, batch)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(num_references,) + pixels.shape) * noise_sigma
    refs = np.clip(pixels[None] + noise, 0.0, 1.0).astype(np.float32)
    return _ig_over_references(handle, pixels, selector, refs, steps)


def agi_raw(handle: ModelHandle, batch, selector: OutputSelector,
            num_references: int, steps: int, step_size: float, seed: int) -> np.ndarray:
    """Gradients accumulated along targeted adversarial ascent paths.

    For each reference a false class is drawn per sample; the path climbs
    that class's logit by signed-gradient steps (clipped to [0,1]) while
    -(d selected/dx) . dx accumulates along it.
    """
    if handle.num_classes < 2:
        raise CapabilityError("adversarial paths need at least 2 classes")
    pixels = _pixels_of(handle, batch)
    b = len(pixels)
    c = selector.class_index
    models._check_class(handle.num_classes, c)
    pool = np.array([j for j in range(handle.num_classes) if j != c], dtype=np.int64)
    rng = np.random.default_rng(seed)
    false_classes = rng.choice(pool, size=(num_references, b))

    handle.module.eval()
    acc = torch.zeros(pixels.shape, dtype=torch.float64)
    for r in range(num_references):
        target = torch.from_numpy(false_classes[r])
        cur = torch.from_numpy(pixels.copy())
        for _ in range(steps):
            xt = cur.clone().requires_grad_(True)
            logits = handle.module(xt)
            (g_false,) = torch.autograd.grad(
                models._select_t(logits, "logit", target).sum(), xt)
            nxt = (cur + step_size * torch.sign(g_false)).clamp(0.0, 1.0)

            xt = cur.clone().requires_grad_(True)
            logits = handle.module(xt)
            (g_sel,) = torch.autograd.grad(
                models._select_t(logits, selector.kind, c).sum(), xt)
            acc -= (g_sel * (nxt - cur)).to(torch.float64)
            cur = nxt
    return (acc / num_references).numpy().astype(np.float32)


def lpi_raw(handle: ModelHandle, batch, selector: OutputSelector,
            training_pixels: np.ndarray, num_references: int, steps: int) -> np.ndarray:
    """Integrated gradients from the training samples nearest the train centroid.

    Distance ties break toward the lower training index.
    """
    pixels = _pixels_of(handle, batch)
    train = np.asarray(training_pixels, dtype=np.float32)
    if train.ndim != 4 or len(train) == 0:
        raise InputError("training set must be a non-empty (N,C,H,W) array")
    centroid = train.mean(axis=0)
    dists = np.linalg.norm((train - centroid).reshape(len(train), -1), axis=1)
    order = np.argsort(dists, kind="stable")[:min(num_references, len(train))]
    refs = train[order]
    return _ig_over_references(handle, pixels, selector, refs, steps)


def attribute(handle: ModelHandle, batch, config: AttributionConfig,
              training_pixels: np.ndarray | None = None) -> AttributionMap:
    """Dispatch to the configured method and post-process the raw map."""
    sel = config.selector
    m = config.method
    if m == "grad":
        raw = grad_raw(handle, batch, sel)
    elif m == "sg":
        raw = smoothgrad_raw(handle, batch, sel, config.steps, config.noise_sigma, config.seed)
    elif m == "gcam":
        raw = gradcam_raw(handle, batch, sel)
    elif m == "fullgrad":
        raw = fullgrad_raw(handle, batch, sel)
    elif m == "ggcam":
        raw = guided_gradcam_raw(handle, batch, sel)
    elif m == "ig":
        raw = integrated_gradients_raw(handle, batch, sel, config.steps)
    elif m == "ig_uniform":
        raw = ig_uniform_raw(handle, batch, sel, config.num_references, config.steps, config.seed)
    elif m == "ig_sg":
        raw = ig_sg_raw(handle, batch, sel, config.num_references, config.steps,
                        config.noise_sigma, config.seed)
    elif m == "agi":
        raw = agi_raw(handle, batch, sel, config.num_references, config.steps,
                      config.step_size, config.seed)
    elif m == "lpi":
        if training_pixels is None:
            raise InputError("lpi needs the training set pixels")
        raw = lpi_raw(handle, batch, sel, training_pixels, config.num_references, config.steps)
    else:  # pragma: no cover - guarded by config validation
        raise InputError(f"unknown method {m!r}")
    values = reduce_and_postprocess(raw, config.channel_reduce, config.postprocess)
    return AttributionMap(values=values.astype(np.float32), raw_values=raw,
                          config=config, class_index=sel.class_index)


def write_archive(directory, values: np.ndarray, sample_indices,
                  config_dict: dict, config_hash: str, class_index: int) -> Path:
    """Archive layout shared by real methods and pseudo-methods: one tensor
    file per sample plus a sidecar with checksums."""
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    if len(sample_indices) != len(values):
        raise InputError("sample_indices length must match the map batch")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, idx in enumerate(sample_indices):
        fname = f"sample_{int(idx):06d}.npy"
        path = directory / fname
        np.save(path, values[i])
        samples.append({
            "index": int(idx),
            "file": fname,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        })
    sidecar = {
        "config": config_dict,
        "config_hash": config_hash,
        "class_index": class_index,
        "samples": samples,
    }
    (directory / "sidecar.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return directory


def save_maps(root, amap: AttributionMap, sample_indices) -> Path:
    """Persist one attribution batch under root/<method>-<hash8>/."""
    directory = Path(root) / f"{amap.config.method}-{amap.config.hash()[:8]}"
    return write_archive(directory, amap.values, sample_indices,
                         amap.config.to_dict(), amap.config.hash(), amap.class_index)


def load_maps(directory):
    """Load a persisted map archive; returns (values, indices, sidecar)."""
    directory = Path(directory)
    sidecar_path = directory / "sidecar.json"
    if not sidecar_path.exists():
        raise InputError(f"no sidecar.json under {directory}")
    sidecar = json.loads(sidecar_path.read_text())
    values, indices = [], []
    for rec in sidecar["samples"]:
        path = directory / rec["file"]
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if digest != rec["sha256"]:
            raise InputError(f"checksum mismatch for {path}")
        values.append(np.load(path))
        indices.append(rec["index"])
    return np.stack(values), np.asarray(indices, dtype=np.int64), sidecar


def export_heatmap_png(values_2d: np.ndarray, path) -> Path:
    """Write one map as a normalized grayscale PNG for eyeballing."""
    from PIL import Image

    v = np.asarray(values_2d, dtype=np.float64)
    lo, hi = v.min(), v.max()
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    img = Image.fromarray((norm * 255).round().astype(np.uint8), mode="L")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
