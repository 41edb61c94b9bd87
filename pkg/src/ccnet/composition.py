"""Composition network: (reference bank, text bank) -> composed bank -> target score."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, DimensionError
from .nn import EVAL, Mode, ParamStore
from .tensor import Tensor


def init_composition(store: ParamStore, cfg: ModelConfig):
    d, r = cfg.dim, cfg.rank
    for e in range(cfg.n_experts):
        p = f"composition.{e}"
        nn.init_linear(store, f"{p}.fusion.u", d, r * d, bias=False)
        nn.init_linear(store, f"{p}.fusion.v", d, r * d, bias=False)
        nn.init_linear(store, f"{p}.fusion.out", r * d, d, bias=False)
        for branch in ("gate", "res"):
            nn.init_linear(store, f"{p}.{branch}.fc1", 3 * d, d)
            nn.init_batchnorm(store, f"{p}.{branch}.bn", d)
            nn.init_linear(store, f"{p}.{branch}.fc2", d, d)
    store.add("composition.w_g", np.array(1.0))
    store.add("composition.w_r", np.array(1.0))


def mutan_fusion(x, t, store: ParamStore, prefix: str) -> Tensor:
    """W_o [ (U_r x) * (V_r t) ]_{r=1..R}: bilinear in (x, t), no inner nonlinearity."""
    x, t = T.as_tensor(x), T.as_tensor(t)
    if x.shape != t.shape:
        raise DimensionError("mutan_fusion", x.shape, t.shape)
    ux = nn.linear(x, store, f"{prefix}.fusion.u")
    vt = nn.linear(t, store, f"{prefix}.fusion.v")
    return nn.linear(ux * vt, store, f"{prefix}.fusion.out")


def _stack(parts, store, prefix, mode):
    h = nn.linear_concat(parts, store, f"{prefix}.fc1")
    h = nn.batchnorm(h, store, f"{prefix}.bn", mode)
    h = nn.dropout(T.relu(h), mode)
    return nn.linear(h, store, f"{prefix}.fc2")


def compose_expert(x_ref, t, e: int, store: ParamStore, mode: Mode = EVAL) -> Tensor:
    """c_e = w_g * sigmoid(f(x, t_bar)) * x + w_r * g(x, t_bar), t_bar = [t; fusion(x, t)]."""
    x_ref, t = T.as_tensor(x_ref), T.as_tensor(t)
    if x_ref.shape != t.shape:
        raise DimensionError("compose", x_ref.shape, t.shape)
    p = f"composition.{e}"
    fused = mutan_fusion(x_ref, t, store, p)
    parts = [x_ref, t, fused]
    gate = T.sigmoid(_stack(parts, store, f"{p}.gate", mode)) * x_ref
    res = _stack(parts, store, f"{p}.res", mode)
    return store["composition.w_g"] * gate + store["composition.w_r"] * res


def compose(x_ref, t, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """Banks (..., E, D) -> composed bank (..., E, D)."""
    x_ref, t = T.as_tensor(x_ref), T.as_tensor(t)
    if x_ref.shape != t.shape or x_ref.shape[-2] != cfg.n_experts:
        raise DimensionError("compose", x_ref.shape, t.shape)
    return T.stack(
        [compose_expert(x_ref[..., e, :], t[..., e, :], e, store, mode) for e in range(cfg.n_experts)],
        axis=-2,
    )


def score_composition(c, x_trg) -> Tensor:
    """s^r = sum_e c_e . x_trg_e for one (E, D) pair."""
    c, x_trg = T.as_tensor(c), T.as_tensor(x_trg)
    if c.shape != x_trg.shape:
        raise ContractError(f"expert banks differ: {c.shape} vs {x_trg.shape}")
    return (c * x_trg).sum()


def composition_scores(c, x_trg) -> Tensor:
    """Score matrix (N, M) between composed banks (N, E, D) and targets (M, E, D)."""
    c, x_trg = T.as_tensor(c), T.as_tensor(x_trg)
    if c.shape[1:] != x_trg.shape[1:]:
        raise ContractError(f"expert banks differ: {c.shape} vs {x_trg.shape}")
    n, e, d = c.shape
    return T.matmul(c.reshape(n, e * d), x_trg.reshape(x_trg.shape[0], e * d).T)


def batch_softmax_loss(scores) -> Tensor:
    """Mean over rows of -log softmax(scores[i])[i]; diagonal holds the positives."""
    scores = T.as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractError(f"score matrix must be square, got {scores.shape}")
    b = scores.shape[0]
    diag = scores[np.arange(b), np.arange(b)]
    return (T.logsumexp(scores, axis=1) - diag).mean()
