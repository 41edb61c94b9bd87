"""Parameter registry and the shared neural layer primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError, EmptyInputError, IntegrityError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamStore:
    """Named, shape-tagged registry of every learnable tensor and buffer.

    Trainable entries are leaf tensors with ``requires_grad``; buffers (batch
    norm running statistics) are plain arrays updated in place during training.
    Names are dotted paths, e.g. ``composition.3.gate.fc1.weight``.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    # registration
    def _check_new(self, name):
        if name in self._params or name in self._buffers:
            raise IntegrityError(f"duplicate parameter name {name!r}")

    def add(self, name: str, value: np.ndarray) -> Tensor:
        self._check_new(name)
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_new(name)
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    # access
    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params) + len(self._buffers)

    def names(self) -> list[str]:
        return sorted(self._params)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in sorted(self._buffers):
            yield name, self._buffers[name]

    def state(self) -> dict[str, np.ndarray]:
        """All values (parameters and buffers) by name, name-sorted."""
        merged = {n: t.data for n, t in self._params.items()}
        merged.update(self._buffers)
        return {n: merged[n] for n in sorted(merged)}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        if strict:
            missing = set(self._params) | set(self._buffers)
            missing -= set(state)
            extra = set(state) - set(self._params) - set(self._buffers)
            if missing or extra:
                raise IntegrityError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
                )
        for name, value in state.items():
            target = self._params[name].data if name in self._params else self._buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(value):
                raise IntegrityError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in self.parameters()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


class Mode:
    """Forward-pass mode: batch-norm statistics source and dropout RNG."""

    def __init__(self, training: bool = False, dropout: float = 0.0, rng=None):
        self.training = training
        self.dropout = dropout
        self.rng = rng if rng is not None else np.random.default_rng(0)


EVAL = Mode(training=False)


# ----------------------------------------------------------------------------
# layer parameter constructors


def init_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, bias: bool = True):
    store.uniform(f"{prefix}.weight", (n_out, n_in), n_in)
    if bias:
        store.zeros(f"{prefix}.bias", (n_out,))


def init_conv1d(store: ParamStore, prefix: str, n_in: int, n_out: int, width: int = 3):
    store.uniform(f"{prefix}.weight", (n_out, n_in, width), n_in * width)
    store.zeros(f"{prefix}.bias", (n_out,))


def init_batchnorm(store: ParamStore, prefix: str, dim: int):
    store.add(f"{prefix}.scale", np.ones(dim))
    store.zeros(f"{prefix}.shift", (dim,))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(dim))
    store.add_buffer(f"{prefix}.running_var", np.ones(dim))


def init_context_gating(store: ParamStore, prefix: str, dim: int):
    init_linear(store, prefix, dim, dim)


# ----------------------------------------------------------------------------
# layers


def linear(x, store: ParamStore, prefix: str) -> Tensor:
    """y = x W^T + b over the last axis."""
    x = T.as_tensor(x)
    w = store[f"{prefix}.weight"]
    n_out, n_in = w.shape
    if x.ndim == 0 or x.shape[-1] != n_in:
        raise DimensionError(f"linear[{prefix}]", x.shape, w.shape)
    lead = x.shape[:-1]
    y = T.matmul(x.reshape(-1, n_in), w.T)
    if f"{prefix}.bias" in store:
        y = y + store[f"{prefix}.bias"]
    return y.reshape(*lead, n_out)


def project(x, w) -> Tensor:
    """x W^T over the last axis of ``x`` for a (out, in) weight block."""
    x = T.as_tensor(x)
    n_out, n_in = w.shape
    if x.shape[-1] != n_in:
        raise DimensionError("project", x.shape, w.shape)
    return T.matmul(x.reshape(-1, n_in), w.T).reshape(*x.shape[:-1], n_out)


def linear_concat(parts, store: ParamStore, prefix: str) -> Tensor:
    """``linear(concat(parts))`` without materializing the broadcast concatenation.

    Each part multiplies its own column block of the weight, so parts may have
    broadcast-compatible leading shapes (e.g. (B, 1, D) with (1, B, D)).
    """
    parts = [T.as_tensor(p) for p in parts]
    w = store[f"{prefix}.weight"]
    n_out, n_in = w.shape
    widths = [p.shape[-1] for p in parts]
    if sum(widths) != n_in:
        raise DimensionError(f"linear[{prefix}]", tuple(widths), w.shape)
    y = None
    col = 0
    for p, width in zip(parts, widths):
        term = project(p, w[:, col:col + width])
        col += width
        y = term if y is None else y + term
    if f"{prefix}.bias" in store:
        y = y + store[f"{prefix}.bias"]
    return y


def conv1d_same(x, store: ParamStore, prefix: str) -> Tensor:
    """Zero-padded cross-correlation along the sequence axis.

    ``x`` is (len, in) or (batch, len, in); output keeps the length.
    """
    x = T.as_tensor(x)
    k = store[f"{prefix}.weight"]
    n_out, n_in, width = k.shape
    if x.ndim < 2 or x.shape[-1] != n_in:
        raise DimensionError(f"conv1d[{prefix}]", x.shape, k.shape)
    length = x.shape[-2]
    if length == 0:
        raise EmptyInputError(f"conv1d[{prefix}]: empty sequence")
    half = width // 2
    xp = T.pad_axis(x, -2, half, half)
    taps = [xp[..., j:j + length, :] for j in range(width)]
    cols = T.concat(taps, axis=-1)
    # column (j, i) of the unrolled kernel is K[:, i, j]
    kmat = T.transpose(k, (0, 2, 1)).reshape(n_out, width * n_in)
    lead = cols.shape[:-1]
    y = T.matmul(cols.reshape(-1, width * n_in), kmat.T) + store[f"{prefix}.bias"]
    return y.reshape(*lead, n_out)


def batchnorm(x, store: ParamStore, prefix: str, mode: Mode) -> Tensor:
    """Normalize features over every axis except the last.

    Training mode uses batch statistics and updates the running buffers;
    inference mode is the fixed affine map given by the running buffers.
    """
    x = T.as_tensor(x)
    scale, shift = store[f"{prefix}.scale"], store[f"{prefix}.shift"]
    if x.shape[-1] != scale.shape[0]:
        raise DimensionError(f"batchnorm[{prefix}]", x.shape, scale.shape)
    rmean = store.buffer(f"{prefix}.running_mean")
    rvar = store.buffer(f"{prefix}.running_var")
    if mode.training:
        axes = tuple(range(x.ndim - 1))
        n = int(np.prod([x.shape[a] for a in axes]))
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered / T.power(var + BN_EPS, 0.5)
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        rmean *= 1.0 - BN_MOMENTUM
        rmean += BN_MOMENTUM * mu.data.reshape(-1)
        rvar *= 1.0 - BN_MOMENTUM
        rvar += BN_MOMENTUM * unbiased
    else:
        xhat = (x - rmean) * (1.0 / np.sqrt(rvar + BN_EPS))
    return xhat * scale + shift


def dropout(x, mode: Mode, p: float | None = None) -> Tensor:
    p = mode.dropout if p is None else p
    if not mode.training or p <= 0.0:
        return T.as_tensor(x)
    x = T.as_tensor(x)
    keep = (mode.rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def context_gating(x, store: ParamStore, prefix: str) -> Tensor:
    """y = x * sigmoid(W x + b)."""
    return T.mul(x, T.sigmoid(linear(x, store, prefix)))
