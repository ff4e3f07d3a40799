"""Layer stacks, parameter storage and first-order optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

LAYER_KINDS = ("dense", "conv", "maxpool", "relu", "dropout", "flatten", "softmax", "sigmoid", "l2normalize")
OUTPUT_ACTIVATIONS = ("softmax", "sigmoid")


@dataclass
class LayerSpec:
    """One row of an architecture table.

    ``out`` is the unit count for dense layers and the channel count for conv
    layers. ``size_in``/``size_out`` are optional declared shapes (without the
    batch axis); when given they are checked against the inferred chain.
    """

    kind: str
    out: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: int | str = 0
    rate: float = 0.0
    size_in: Optional[tuple[int, ...]] = None
    size_out: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.size_in is not None:
            self.size_in = tuple(int(s) for s in self.size_in)
        if self.size_out is not None:
            self.size_out = tuple(int(s) for s in self.size_out)
        if self.kind in ("dense", "conv") and (self.out is None or self.out < 1):
            raise ConfigError(f"{self.kind} layer needs a positive 'out'")
        if self.kind in ("conv", "maxpool") and (self.kernel is None or self.kernel < 1):
            raise ConfigError(f"{self.kind} layer needs a positive 'kernel'")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for key in ("out", "kernel", "stride"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.kind == "conv":
            d["padding"] = self.padding
        if self.kind == "dropout":
            d["rate"] = self.rate
        if self.size_in is not None:
            d["size_in"] = list(self.size_in)
        if self.size_out is not None:
            d["size_out"] = list(self.size_out)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        unknown = set(d) - {"kind", "out", "kernel", "stride", "padding", "rate", "size_in", "size_out"}
        if unknown:
            raise ConfigError(f"unknown layer field(s) {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("layer entry is missing 'kind'")
        return cls(**d)


def _out_shape(spec: LayerSpec, shape: tuple[int, ...], where: str) -> tuple[int, ...]:
    kind = spec.kind
    if kind == "dense":
        if len(shape) != 1:
            raise DimensionError(f"{where}: dense expects a flat input, got {shape}")
        return (spec.out,)
    if kind == "conv":
        if len(shape) != 3:
            raise DimensionError(f"{where}: conv expects c×h×w input, got {shape}")
        _, h, w = shape
        stride = spec.stride or 1
        ph, pw = ad.conv_padding(spec.padding, spec.kernel, spec.kernel)
        if spec.kernel > h + sum(ph) or spec.kernel > w + sum(pw):
            raise DimensionError(f"{where}: kernel {spec.kernel} larger than padded input {shape}")
        return (spec.out, ad.conv_output_size(h, spec.kernel, stride, ph), ad.conv_output_size(w, spec.kernel, stride, pw))
    if kind == "maxpool":
        if len(shape) != 3:
            raise DimensionError(f"{where}: maxpool expects c×h×w input, got {shape}")
        c, h, w = shape
        if spec.kernel > h or spec.kernel > w:
            raise DimensionError(f"{where}: pool window {spec.kernel} exceeds {shape}")
        stride = spec.stride or spec.kernel
        return (c, (h - spec.kernel) // stride + 1, (w - spec.kernel) // stride + 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind in ("softmax", "sigmoid", "l2normalize") and len(shape) != 1:
        raise DimensionError(f"{where}: {kind} expects a flat input, got {shape}")
    return shape


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int], name: str = "net") -> list[tuple[tuple, tuple]]:
    """Walk the size-in/size-out chain, rejecting any disagreement."""
    shape = tuple(int(s) for s in input_shape)
    chain = []
    for i, spec in enumerate(specs):
        where = f"{name} layer {i} ({spec.kind})"
        if spec.size_in is not None and spec.size_in != shape:
            raise DimensionError(f"{where}: declared size-in {spec.size_in} but receives {shape}")
        out = _out_shape(spec, shape, where)
        if spec.size_out is not None and spec.size_out != out:
            raise DimensionError(f"{where}: declared size-out {spec.size_out} but produces {out}")
        chain.append((shape, out))
        shape = out
    return chain


class ParameterSet:
    """Named parameter tensors in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise ContractError(f"state is missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_parameters(spec: LayerSpec, in_shape: tuple, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases. Parameter-free layers return ``{}``."""
    if spec.kind == "dense":
        fan_in, fan_out = in_shape[0], spec.out
        bound = glorot_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return {"weight": w.astype(dtype), "bias": np.zeros(fan_out, dtype=dtype)}
    if spec.kind == "conv":
        c_in, k = in_shape[0], spec.kernel
        fan_in, fan_out = c_in * k * k, spec.out * k * k
        bound = glorot_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(spec.out, c_in, k, k))
        return {"weight": w.astype(dtype), "bias": np.zeros(spec.out, dtype=dtype)}
    return {}


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"dense: x {x.shape}, w {w.shape}, b {b.shape} do not agree")
    return ad.add_bias(ad.matmul(x, w), b)


def dropout_forward(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return ad.mul(x, Tensor._wrap(mask))


class Network:
    """A feed-forward stack built from :class:`LayerSpec` rows.

    A trailing softmax/sigmoid row is split off as ``output_activation``:
    :meth:`forward` returns pre-activation scores so losses can use stable
    fused forms, and :meth:`activate` applies it for prediction.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], params: ParameterSet,
                 prefix: str, rng: np.random.Generator, dtype=np.float64, dropout: bool = True):
        specs = list(specs)
        self.chain = infer_shapes(specs, input_shape, prefix)
        self.output_activation = None
        if specs and specs[-1].kind in OUTPUT_ACTIVATIONS:
            self.output_activation = specs[-1].kind
            specs = specs[:-1]
        for i, spec in enumerate(specs):
            if spec.kind in OUTPUT_ACTIVATIONS:
                raise ConfigError(f"{prefix} layer {i}: {spec.kind} is only allowed as the last layer")
        self.specs = specs
        self.prefix = prefix
        self.dropout = dropout
        self.input_shape = tuple(input_shape)
        self.output_shape = self.chain[-1][1] if self.chain else self.input_shape
        self.layer_params: list[dict[str, Tensor]] = []
        for i, spec in enumerate(specs):
            arrays = init_parameters(spec, self.chain[i][0], rng, dtype)
            self.layer_params.append({k: params.add(f"{prefix}.{i}.{k}", ad.parameter(v)) for k, v in arrays.items()})

    def forward(self, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        for spec, p in zip(self.specs, self.layer_params):
            kind = spec.kind
            if kind == "dense":
                x = dense_forward(x, p["weight"], p["bias"])
            elif kind == "conv":
                x = ad.add_bias(ad.conv2d(x, p["weight"], spec.stride or 1, spec.padding), p["bias"])
            elif kind == "maxpool":
                x = ad.maxpool2d(x, spec.kernel, spec.stride or spec.kernel)
            elif kind == "relu":
                x = ad.relu(x)
            elif kind == "dropout":
                if self.dropout:
                    x = dropout_forward(x, spec.rate, "train" if train else "eval", rng)
            elif kind == "flatten":
                x = ad.flatten(x)
            elif kind == "l2normalize":
                x = ad.l2_normalize(x)
        return x

    def activate(self, scores: Tensor) -> Tensor:
        if self.output_activation == "softmax":
            return ad.softmax(scores)
        if self.output_activation == "sigmoid":
            return ad.sigmoid(scores)
        return scores


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "rmsprop", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(state: OptimizerState, params: ParameterSet) -> None:
    """Apply one update using the ``grad`` slot of every parameter."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = p.grad
        buf = state.buffers.setdefault(name, {})
        if state.kind == "sgd-momentum":
            v = buf.get("v")
            v = g.copy() if v is None else state.momentum * v + g
            buf["v"] = v
            p.data -= p.dtype.type(state.lr) * v
        elif state.kind == "rmsprop":
            s = buf.get("s")
            s = (1 - state.rho) * g * g if s is None else state.rho * s + (1 - state.rho) * g * g
            buf["s"] = s
            p.data -= (state.lr * g / (np.sqrt(s) + state.eps)).astype(p.dtype, copy=False)
        else:
            m = buf.get("m", np.zeros_like(g))
            v = buf.get("v", np.zeros_like(g))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            buf["m"], buf["v"] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
