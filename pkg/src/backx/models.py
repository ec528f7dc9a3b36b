"""Torch-backed classifier adapter.

Wraps an nn.Module with the metadata and calls the rest of the pipeline
needs: forwards, scalar output selection (logit / probability / contrastive),
input gradients, named-layer activations with gradients, per-layer bias
gradients, and a deterministic SGD training loop.

Inputs are raw pixels in [0,1]; per-channel normalization runs inside the
module as a non-trainable affine layer, so every gradient is taken with
respect to pixel space and the affine shift participates in bias
decompositions.

Handles are exclusive-access: callers must not share one handle across
threads (clone it instead). All inference paths run in eval mode.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import ImageBatch
from .errors import (
    CapabilityError,
    InputError,
    InputShapeError,
    LayerLookupError,
    TrainingFailure,
)

SELECTOR_KINDS = ("logit", "probability", "contrastive")


class Normalize(nn.Module):
    """Per-channel (x - mean) / std as scale * x + shift.

    The shift acts as this layer's bias in bias-gradient walks.
    """

    def __init__(self, mean, std):
        super().__init__()
        mean_t = torch.as_tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        std_t = torch.as_tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
        self.register_buffer("scale", 1.0 / std_t)
        self.register_buffer("shift", -mean_t / std_t)

    def forward(self, x):
        return x * self.scale + self.shift


def _small_cnn(num_classes, input_shape, normalization):
    c, h, w = input_shape
    head_in = 64 * (h // 4) * (w // 4)
    mods = OrderedDict([
        ("norm", Normalize(*normalization)),
        ("conv1", nn.Conv2d(c, 16, 3, padding=1)), ("act1", nn.ReLU()),
        ("pool1", nn.MaxPool2d(2)),
        ("conv2", nn.Conv2d(16, 32, 3, padding=1)), ("act2", nn.ReLU()),
        ("pool2", nn.MaxPool2d(2)),
        ("conv3", nn.Conv2d(32, 64, 3, padding=1)), ("act3", nn.ReLU()),
        ("flatten", nn.Flatten()),
        ("head", nn.Linear(head_in, num_classes)),
    ])
    return nn.Sequential(mods), "act3"


def _linear(num_classes, input_shape, normalization, bias=True):
    feats = int(np.prod(input_shape))
    mods = OrderedDict([
        ("norm", Normalize(*normalization)),
        ("flatten", nn.Flatten()),
        ("head", nn.Linear(feats, num_classes, bias=bias)),
    ])
    return nn.Sequential(mods), None


def _mlp_tanh(num_classes, input_shape, normalization):
    feats = int(np.prod(input_shape))
    mods = OrderedDict([
        ("norm", Normalize(*normalization)),
        ("flatten", nn.Flatten()),
        ("fc1", nn.Linear(feats, 32)), ("tanh", nn.Tanh()),
        ("fc2", nn.Linear(32, num_classes)),
    ])
    return nn.Sequential(mods), None


ARCHITECTURES = {
    "small_cnn": _small_cnn,
    "linear": _linear,
    "linear_nobias": lambda n, s, norm: _linear(n, s, norm, bias=False),
    "mlp_tanh": _mlp_tanh,
}


@dataclass(frozen=True)
class OutputSelector:
    """Reduces a logit vector to one scalar per sample for a fixed class."""

    kind: str
    class_index: int

    def __post_init__(self):
        if self.kind not in SELECTOR_KINDS:
            raise InputError(f"selector kind must be one of {SELECTOR_KINDS}")


@dataclass
class ModelHandle:
    """A classifier plus the metadata the pipeline needs to drive it.

    `module` is the parameter store. `normalization` is (mean, std) in pixel
    units; it is baked into the module's first layer but kept here as the
    portability contract for checkpoints. `feature_layer_id` names the last
    convolutional block's activation for CAM-style methods (None when the
    architecture has no spatial features).
    """

    architecture_id: str
    num_classes: int
    input_shape: tuple[int, int, int]
    normalization: tuple
    module: nn.Module
    feature_layer_id: str | None
    seed: int
    train_history: list = field(default_factory=list)


@dataclass
class GradientBundle:
    """Gradients captured in one backward pass at a named layer.

    bias_gradients holds (layer_id, array) pairs where each array is the
    gradient of the selected output w.r.t. that layer's bias, shaped
    (batch,) + bias.shape.
    """

    input_gradient: np.ndarray
    layer_activation: np.ndarray
    layer_gradient: np.ndarray
    bias_gradients: list


def create_model(architecture_id: str, num_classes: int, input_shape,
                 normalization=None, seed: int = 0) -> ModelHandle:
    if architecture_id not in ARCHITECTURES:
        raise InputError(f"unknown architecture {architecture_id!r}")
    if normalization is None:
        nchan = input_shape[0]
        normalization = ((0.0,) * nchan, (1.0,) * nchan)
    torch.manual_seed(seed)
    module, feature_layer_id = ARCHITECTURES[architecture_id](
        num_classes, tuple(input_shape), normalization)
    module.eval()
    return ModelHandle(
        architecture_id=architecture_id,
        num_classes=num_classes,
        input_shape=tuple(input_shape),
        normalization=(tuple(normalization[0]), tuple(normalization[1])),
        module=module,
        feature_layer_id=feature_layer_id,
        seed=seed,
    )


def _as_pixels(handle: ModelHandle, batch) -> np.ndarray:
    pixels = batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch, dtype=np.float32)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if tuple(pixels.shape[1:]) != handle.input_shape:
        raise InputShapeError(
            f"batch shape {tuple(pixels.shape[1:])} != model input {handle.input_shape}")
    return np.ascontiguousarray(pixels, dtype=np.float32)


def forward(handle: ModelHandle, batch, chunk: int = 1024) -> np.ndarray:
    """Logits for a pixel batch, deterministic in eval mode."""
    pixels = _as_pixels(handle, batch)
    handle.module.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(pixels), chunk):
            outs.append(handle.module(torch.from_numpy(pixels[i:i + chunk])).numpy())
    logits = np.concatenate(outs) if outs else np.zeros((0, handle.num_classes), np.float32)
    return logits


def predict(handle: ModelHandle, batch) -> np.ndarray:
    return forward(handle, batch).argmax(axis=1)


def evaluate_accuracy(handle: ModelHandle, batch, labels=None) -> float:
    if isinstance(batch, ImageBatch) and labels is None:
        labels = batch.labels
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InputError("empty batch")
    return float((predict(handle, batch) == labels).mean())


def _check_class(num_classes: int, class_index: int):
    if not 0 <= class_index < num_classes:
        raise IndexError(f"class_index {class_index} outside [0,{num_classes})")


def select_output(logits: np.ndarray, selector: OutputSelector) -> np.ndarray:
    """One scalar per sample from a logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_class(logits.shape[1], selector.class_index)
    ci = selector.class_index
    if selector.kind == "logit":
        return logits[:, ci].copy()
    if selector.kind == "probability":
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e[:, ci] / e.sum(axis=1)
    # contrastive: class logit against log-sum-exp of the rest
    others = np.delete(logits, ci, axis=1)
    m = others.max(axis=1)
    return logits[:, ci] - (m + np.log(np.exp(others - m[:, None]).sum(axis=1)))


def _select_t(logits: torch.Tensor, kind: str, class_index) -> torch.Tensor:
    """Torch twin of select_output; class_index may be an int or a (B,) tensor."""
    b = logits.shape[0]
    rows = torch.arange(b)
    if isinstance(class_index, int):
        _check_class(logits.shape[1], class_index)
        class_index = torch.full((b,), class_index, dtype=torch.long)
    if kind == "logit":
        return logits[rows, class_index]
    if kind == "probability":
        return torch.softmax(logits, dim=1)[rows, class_index]
    if kind == "contrastive":
        picked = logits[rows, class_index]
        masked = logits.clone()
        masked[rows, class_index] = float("-inf")
        return picked - torch.logsumexp(masked, dim=1)
    raise InputError(f"unknown selector kind {kind!r}")


def _forward_graph(handle: ModelHandle, pixels: np.ndarray):
    handle.module.eval()
    x = torch.from_numpy(pixels).clone().requires_grad_(True)
    logits = handle.module(x)
    return x, logits


def input_gradient(handle: ModelHandle, batch, selector: OutputSelector) -> np.ndarray:
    """d(selected output)/d(input pixels), one gradient image per sample."""
    pixels = _as_pixels(handle, batch)
    x, logits = _forward_graph(handle, pixels)
    sel = _select_t(logits, selector.kind, selector.class_index)
    try:
        (g,) = torch.autograd.grad(sel.sum(), x)
    except RuntimeError as exc:
        raise CapabilityError(f"model is not differentiable end-to-end: {exc}") from exc
    grad = g.detach().numpy()
    if not np.isfinite(grad).all():
        raise CapabilityError("non-finite input gradient")
    return grad


def _affine_modules(module: nn.Module) -> list[tuple[str, nn.Module]]:
    out = []
    for name, mod in module.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear, Normalize)):
            out.append((name, mod))
    return out


def _bias_of(mod: nn.Module):
    if isinstance(mod, Normalize):
        return mod.shift
    return mod.bias


def layer_gradients(handle: ModelHandle, batch, selector: OutputSelector,
                    layer_id: str | None = None, with_biases: bool = False) -> GradientBundle:
    """Activation and gradient at a named layer for the selected output.

    Args:
        layer_id: module name to capture; defaults to the handle's
            feature_layer_id.
        with_biases: also populate gradients w.r.t. every parameter bias.

    Returns a GradientBundle; layer_activation and layer_gradient share a
    shape, input_gradient matches the batch.
    """
    pixels = _as_pixels(handle, batch)
    layer_id = layer_id if layer_id is not None else handle.feature_layer_id
    modules = dict(handle.module.named_modules())
    if layer_id is None or layer_id not in modules:
        raise LayerLookupError(f"no layer named {layer_id!r}")

    captured = {}
    bias_layers = []
    hooks = [modules[layer_id].register_forward_hook(
        lambda m, i, o: captured.__setitem__("act", o))]
    if with_biases:
        for name, mod in _affine_modules(handle.module):
            if isinstance(mod, Normalize) or _bias_of(mod) is None:
                continue  # parameter biases only; the normalize shift is not trainable

            def make_hook(key):
                return lambda m, i, o: captured.__setitem__(key, o)

            hooks.append(mod.register_forward_hook(make_hook(f"z:{name}")))
            bias_layers.append(name)
    try:
        x, logits = _forward_graph(handle, pixels)
        sel = _select_t(logits, selector.kind, selector.class_index)
        targets = [x, captured["act"]] + [captured[f"z:{n}"] for n in bias_layers]
        grads = torch.autograd.grad(sel.sum(), targets)
    finally:
        for h in hooks:
            h.remove()

    bias_gradients = []
    for name, gz in zip(bias_layers, grads[2:]):
        # d(out)/d(bias) = gradient at the pre-activation, summed over its
        # broadcast (spatial) dims; result is (batch,) + bias.shape
        gb = gz.sum(dim=(2, 3)) if gz.dim() == 4 else gz
        bias_gradients.append((name, gb.detach().numpy()))
    return GradientBundle(
        input_gradient=grads[0].detach().numpy(),
        layer_activation=captured["act"].detach().numpy(),
        layer_gradient=grads[1].detach().numpy(),
        bias_gradients=bias_gradients,
    )


def _affine_bias_terms(handle: ModelHandle, pixels: np.ndarray, selector: OutputSelector):
    """Input term and per-layer bias contributions of the selected output.

    Returns (input_term, spatial_terms, total_per_sample, selected) where
    input_term = x * dx (batch-shaped), spatial_terms are the 4-d
    bias-times-gradient maps [(layer_id, array)], and total_per_sample sums
    input term plus every bias contribution including non-spatial ones.
    For piecewise-linear networks that total reconstructs the selected
    output exactly.
    """
    affine = _affine_modules(handle.module)
    if not affine:
        raise CapabilityError("model exposes no affine layers to decompose")
    captured = {}
    hooks = []
    for name, mod in affine:
        def make_hook(key):
            return lambda m, i, o: captured.__setitem__(key, o)

        hooks.append(mod.register_forward_hook(make_hook(name)))
    try:
        x, logits = _forward_graph(handle, pixels)
        sel = _select_t(logits, selector.kind, selector.class_index)
        names = [name for name, _ in affine]
        grads = torch.autograd.grad(sel.sum(), [x] + [captured[n] for n in names])
    finally:
        for h in hooks:
            h.remove()

    input_term = (x.detach() * grads[0].detach()).numpy()
    total = torch.from_numpy(input_term).flatten(1).sum(1)
    spatial_terms = []
    for (name, mod), gz in zip(affine, grads[1:]):
        bias = _bias_of(mod)
        if bias is None:
            continue
        gz = gz.detach()
        view = bias.detach()
        if gz.dim() == 4 and view.dim() == 1:
            view = view.view(1, -1, 1, 1)
        contrib = gz * view
        total = total + contrib.flatten(1).sum(1)
        if contrib.dim() == 4:
            spatial_terms.append((name, contrib.numpy()))
    selected = sel.detach().numpy()
    return input_term, spatial_terms, total.numpy(), selected


@dataclass
class TrainingSchedule:
    """SGD schedule; one seed drives init-independent shuffling."""

    epochs: int
    learning_rate: float = 0.1
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


def fit(handle: ModelHandle, train, schedule: TrainingSchedule) -> ModelHandle:
    """Train in place with plain SGD + momentum and step decay.

    Args:
        train: ImageBatch (or anything with .pixels/.labels) used as the
            training stream; shuffled each epoch from the schedule seed.

    Returns the same handle. Raises TrainingFailure with the epoch index if
    the epoch loss goes non-finite. Zero epochs return the model unchanged.
    """
    if schedule.epochs == 0:
        return handle
    pixels = _as_pixels(handle, train)
    labels = torch.from_numpy(np.asarray(train.labels, dtype=np.int64))
    xt = torch.from_numpy(pixels)
    n = len(labels)
    if n == 0:
        raise InputError("empty training stream")

    torch.manual_seed(schedule.seed)
    gen = torch.Generator().manual_seed(schedule.seed)
    opt = torch.optim.SGD(handle.module.parameters(), lr=schedule.learning_rate,
                          momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    lossf = nn.CrossEntropyLoss()
    decay_at = set(int(e) for e in schedule.decay_epochs)

    handle.module.train()
    for epoch in range(schedule.epochs):
        if epoch in decay_at:
            for group in opt.param_groups:
                group["lr"] *= schedule.decay_factor
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, schedule.batch_size):
            idx = perm[i:i + schedule.batch_size]
            opt.zero_grad()
            loss = lossf(handle.module(xt[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            handle.module.eval()
            raise TrainingFailure(epoch)
        handle.train_history.append(epoch_loss)
    handle.module.eval()
    return handle


def save_checkpoint(handle: ModelHandle, directory) -> Path:
    """Write manifest.json (the portability contract) plus a weight blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "architecture_id": handle.architecture_id,
        "num_classes": handle.num_classes,
        "input_shape": list(handle.input_shape),
        "normalization": {"mean": list(handle.normalization[0]),
                          "std": list(handle.normalization[1])},
        "feature_layer_id": handle.feature_layer_id,
        "seed": handle.seed,
        "weights": "weights.pt",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    torch.save(handle.module.state_dict(), directory / "weights.pt")
    return directory


def load_checkpoint(directory) -> ModelHandle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    handle = create_model(
        manifest["architecture_id"],
        manifest["num_classes"],
        tuple(manifest["input_shape"]),
        (tuple(manifest["normalization"]["mean"]), tuple(manifest["normalization"]["std"])),
        seed=manifest["seed"],
    )
    state = torch.load(directory / manifest["weights"], weights_only=True)
    handle.module.load_state_dict(state)
    handle.module.eval()
    return handle
