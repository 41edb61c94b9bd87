"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import GradCheckError
from .model import CCNet
from .nn import Mode, ParamStore

H = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def group_of(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "experts" else parts[0]


@dataclass
class GradCheckResult:
    errors: dict  # group -> max relative error
    checked: int
    worst: tuple  # (name, flat index, analytic, numeric)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self, tol: float = TOLERANCE) -> dict:
        return {g: e for g, e in self.errors.items() if e > tol}


def check_gradients(
    loss_fn: Callable[[], T.Tensor],
    store: ParamStore,
    per_tensor: int | None = 4,
    seed: int = 0,
    h: float = H,
) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``per_tensor`` entries are sampled from each parameter (all of them when
    ``None`` or when the tensor is that small).
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    loss = loss_fn()
    T.backward(loss, [p for _, p in store.parameters()])
    errors: dict[str, float] = {}
    worst = ("", -1, 0.0, 0.0)
    worst_err = -1.0
    checked = 0
    for name, p in store.parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        if per_tensor is None or flat.size <= per_tensor:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=per_tensor, replace=False)
        group = group_of(name)
        errors.setdefault(group, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = relative_error(grad[i], numeric)
            checked += 1
            errors[group] = max(errors[group], err)
            if err > worst_err:
                worst_err, worst = err, (name, int(i), float(grad[i]), numeric)
    return GradCheckResult(errors, checked, worst)


def micro_fixture(seed: int = 0, dim=8, batch=4, length=3, rank=2, share_diff_fc=True):
    """Small CCNet with random inputs and randomized batch-norm statistics."""
    rng = np.random.default_rng([seed, 11])
    cfg = ModelConfig(dim=dim, channels=5, inter_channels=4, word_dim=6, rank=rank, share_diff_fc=share_diff_fc)
    model = CCNet(cfg, seed=seed)
    for name, buf in model.params.buffers():
        if name.endswith("running_var"):
            buf[:] = rng.uniform(0.5, 1.5, size=buf.shape)
        else:
            buf[:] = rng.normal(scale=0.1, size=buf.shape)
    # move scalars and scales off their symmetric initial values
    for name, p in model.params.parameters():
        if name.endswith(("bn.scale", "bn.shift", ".bias")) or name.startswith("composition.w_"):
            p.data += rng.normal(scale=0.1, size=p.data.shape)
    inputs = (
        rng.normal(size=(batch, 7, 7, cfg.channels)),
        rng.normal(size=(batch, cfg.inter_channels)),
        rng.normal(size=(batch, 7, 7, cfg.channels)),
        rng.normal(size=(batch, cfg.inter_channels)),
        rng.normal(size=(batch, length, cfg.word_dim)),
        np.ones((batch, length)),
    )
    # one shorter caption exercises the pad mask
    inputs[4][-1, -1] = 0.0
    inputs[5][-1, -1] = 0.0
    return model, inputs


def grad_check(seed: int = 0, per_tensor: int | None = 4, tol: float = TOLERANCE, raise_on_fail=True) -> GradCheckResult:
    """Joint CCNet loss on the micro configuration (D=8, B=4, l=3, R=2).

    Runs at double precision with dropout off and batch norm in inference mode.
    """
    model, inputs = micro_fixture(seed)
    mode = Mode(training=False, dropout=0.0)

    def loss_fn():
        out = model.batch(*inputs, mode=mode)
        return out.loss_r + out.loss_c

    result = check_gradients(loss_fn, model.params, per_tensor=per_tensor, seed=seed)
    bad = result.failures(tol)
    if bad and raise_on_fail:
        detail = ", ".join(f"{g}: {e:.3g}" for g, e in sorted(bad.items()))
        raise GradCheckError(f"gradient check failed (tol {tol}): {detail}; worst {result.worst}")
    return result
