"""Layered classifier with named, individually addressable parameter groups.

A weight-bearing layer (dense weight+bias, or normalization scale+shift)
is the unit at which learning weights and per-layer rates are assigned;
activation layers carry no parameters and are not counted. Layer
enumeration order is stable, so index l means the same layer to gradient
extraction, trace accumulation and the weighted update alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_HEADER = "fimtta-checkpoint v1"


@dataclass
class LayerParams:
    """One named layer: its kind, parameter tensors and buffers."""

    name: str
    kind: str  # dense | norm | relu
    params: list[Tensor] = field(default_factory=list)
    trainable: bool = True
    # frozen-source normalization statistics (norm layers only)
    source_mean: np.ndarray | None = None
    source_var: np.ndarray | None = None

    @property
    def grads(self) -> list[np.ndarray | None]:
        return [p.grad for p in self.params]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params)


class Model:
    """Ordered stack of layers mapping [batch, input_dim] to [batch, C]."""

    def __init__(self, layers: list[LayerParams], input_dim: int, class_count: int):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        self.layers = layers
        self.input_dim = input_dim
        self.class_count = class_count

    def weight_layers(self) -> list[LayerParams]:
        """Parameter-bearing layers in forward order; defines the layer index."""
        return [layer for layer in self.layers if layer.params]

    def weight_layer_names(self) -> list[str]:
        return [layer.name for layer in self.weight_layers()]

    def norm_layers(self) -> list[LayerParams]:
        return [layer for layer in self.layers if layer.kind == "norm"]

    def forward(self, inputs, batch_stats: bool = True) -> Tensor:
        """Logits for a [batch, input_dim] array.

        ``batch_stats=True`` normalizes with the current batch statistics
        (the convention during adaptation); ``False`` uses the stored
        source statistics, which is the frozen-source prediction path.
        """
        x = inputs if isinstance(inputs, Tensor) else ad.constant(inputs)
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise ad.ShapeError(
                f"forward: expected [batch, {self.input_dim}] inputs, got {x.data.shape}"
            )
        out = x
        for layer in self.layers:
            if layer.kind == "dense":
                weight, bias = layer.params
                out = ad.add(ad.matmul(out, weight), bias)
            elif layer.kind == "norm":
                scale, shift = layer.params
                if batch_stats:
                    out = ad.batch_norm(out, scale, shift)
                else:
                    if layer.source_mean is None:
                        raise RuntimeError(
                            f"layer {layer.name}: no source statistics recorded"
                        )
                    out = ad.batch_norm(
                        out, scale, shift, mean=layer.source_mean, var=layer.source_var
                    )
            elif layer.kind == "relu":
                out = ad.relu(out)
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
        return out

    def clone(self) -> "Model":
        """Deep copy; parameters, flags and buffers are all duplicated."""
        layers = []
        for layer in self.layers:
            layers.append(
                LayerParams(
                    name=layer.name,
                    kind=layer.kind,
                    params=[ad.param(p.data.copy()) for p in layer.params],
                    trainable=layer.trainable,
                    source_mean=None if layer.source_mean is None else layer.source_mean.copy(),
                    source_var=None if layer.source_var is None else layer.source_var.copy(),
                )
            )
        return Model(layers, self.input_dim, self.class_count)

    def param_snapshot(self) -> dict[str, list[np.ndarray]]:
        return {
            layer.name: [p.data.copy() for p in layer.params] for layer in self.layers
        }


def build_classifier(
    input_dim: int, hidden_dims: list[int], class_count: int, seed: int
) -> Model:
    """Dense -> norm -> ReLU blocks with a final dense head.

    Initialization is fully determined by the seed. An empty
    ``hidden_dims`` yields a plain linear classifier (one dense layer).
    """
    if input_dim < 1 or class_count < 1 or any(h < 1 for h in hidden_dims):
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    layers: list[LayerParams] = []
    width = input_dim
    for i, hidden in enumerate(hidden_dims, start=1):
        weight = rng.standard_normal((width, hidden)) * np.sqrt(2.0 / width)
        layers.append(
            LayerParams(
                name=f"dense{i}",
                kind="dense",
                params=[ad.param(weight), ad.param(np.zeros(hidden))],
            )
        )
        layers.append(
            LayerParams(
                name=f"norm{i}",
                kind="norm",
                params=[ad.param(np.ones(hidden)), ad.param(np.zeros(hidden))],
            )
        )
        layers.append(LayerParams(name=f"relu{i}", kind="relu"))
        width = hidden
    head = rng.standard_normal((width, class_count)) * np.sqrt(1.0 / width)
    layers.append(
        LayerParams(
            name="head",
            kind="dense",
            params=[ad.param(head), ad.param(np.zeros(class_count))],
        )
    )
    return Model(layers, input_dim, class_count)


def predict(model: Model, inputs, batch_stats: bool = True) -> Tensor:
    """Logits for a batch; softmax of these gives class probabilities."""
    return model.forward(inputs, batch_stats=batch_stats)


def record_source_stats(model: Model, inputs: np.ndarray) -> None:
    """Store each norm layer's observed input statistics on the given data.

    Runs one batch-statistics forward over ``inputs`` (normally the full
    source set) and freezes the mean/variance every norm layer actually
    used, so the frozen-source prediction path reproduces that pass.
    """
    x = np.asarray(inputs, dtype=np.float64)
    out = x
    for layer in model.layers:
        if layer.kind == "dense":
            weight, bias = layer.params
            out = out @ weight.data + bias.data
        elif layer.kind == "norm":
            layer.source_mean = out.mean(axis=0)
            layer.source_var = out.var(axis=0)
            scale, shift = layer.params
            out = (out - layer.source_mean) / np.sqrt(layer.source_var + 1e-5)
            out = out * scale.data + shift.data
        elif layer.kind == "relu":
            out = np.where(out > 0.0, out, 0.0)


# ---------------------------------------------------------------------------
# checkpoint serialization (bit-exact text format)


def _fmt_vals(arr: np.ndarray) -> str:
    return " ".join(v.hex() for v in arr.ravel().tolist())


def _parse_vals(line: str, shape: tuple[int, ...]) -> np.ndarray:
    vals = [float.fromhex(tok) for tok in line.split()]
    return np.asarray(vals, dtype=np.float64).reshape(shape)


def save_checkpoint(model: Model, path, meta: dict[str, str] | None = None) -> None:
    """Write layer name -> shape -> values as hex-float text; round trips exactly."""
    lines = [CHECKPOINT_HEADER]
    lines.append(f"input_dim {model.input_dim}")
    lines.append(f"class_count {model.class_count}")
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    for layer in model.layers:
        lines.append(
            f"layer {layer.name} {layer.kind} trainable={int(layer.trainable)}"
        )
        for p in layer.params:
            lines.append("param " + " ".join(str(d) for d in p.data.shape))
            lines.append(_fmt_vals(p.data))
        for buf_name in ("source_mean", "source_var"):
            buf = getattr(layer, buf_name)
            if buf is not None:
                lines.append(f"buffer {buf_name} " + " ".join(str(d) for d in buf.shape))
                lines.append(_fmt_vals(buf))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a recognized checkpoint (bad header)")
    input_dim = class_count = None
    meta: dict[str, str] = {}
    layers: list[LayerParams] = []
    current: LayerParams | None = None
    i = 1
    while i < len(lines):
        tokens = lines[i].split()
        kind = tokens[0]
        if kind == "input_dim":
            input_dim = int(tokens[1])
        elif kind == "class_count":
            class_count = int(tokens[1])
        elif kind == "meta":
            meta[tokens[1]] = " ".join(tokens[2:])
        elif kind == "layer":
            current = LayerParams(
                name=tokens[1],
                kind=tokens[2],
                trainable=bool(int(tokens[3].split("=")[1])),
            )
            layers.append(current)
        elif kind == "param":
            shape = tuple(int(t) for t in tokens[1:])
            i += 1
            current.params.append(ad.param(_parse_vals(lines[i], shape)))
        elif kind == "buffer":
            shape = tuple(int(t) for t in tokens[2:])
            i += 1
            setattr(current, tokens[1], _parse_vals(lines[i], shape))
        else:
            raise ValueError(f"{path}: unrecognized checkpoint line {lines[i]!r}")
        i += 1
    if input_dim is None or class_count is None:
        raise ValueError(f"{path}: checkpoint missing dimensions")
    return Model(layers, input_dim, class_count), meta
