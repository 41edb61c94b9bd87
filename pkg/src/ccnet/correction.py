"""Correction network: (reference bank, target bank) -> difference bank -> caption score."""

from __future__ import annotations

from . import nn
from . import tensor as T
from .composition import batch_softmax_loss
from .config import ModelConfig
from .errors import ContractError, DimensionError
from .nn import EVAL, Mode, ParamStore
from .tensor import Tensor


def init_correction(store: ParamStore, cfg: ModelConfig):
    d = cfg.dim
    for e in range(cfg.n_experts):
        p = f"correction.{e}"
        if cfg.share_diff_fc:
            nn.init_linear(store, f"{p}.diff", 2 * d, d)
        else:
            nn.init_linear(store, f"{p}.diff_trg", 2 * d, d)
            nn.init_linear(store, f"{p}.diff_ref", 2 * d, d)
        nn.init_linear(store, f"{p}.out.fc1", 3 * d, d)
        nn.init_linear(store, f"{p}.out.fc2", d, d)


def difference_parts(x_ref, x_trg, e: int, store: ParamStore, mode: Mode = EVAL) -> dict:
    """Intermediate quantities of the difference embedding for expert ``e``.

    Inputs may carry broadcast-compatible leading axes, e.g. (B, 1, D) references
    against (1, B, D) targets to get every pair at once.
    """
    x_ref, x_trg = T.as_tensor(x_ref), T.as_tensor(x_trg)
    if x_ref.shape[-1] != x_trg.shape[-1]:
        raise DimensionError("difference_embed", x_ref.shape, x_trg.shape)
    p = f"correction.{e}"
    h = x_trg * x_ref
    if f"{p}.diff.weight" in store:
        w, b = store[f"{p}.diff.weight"], store[f"{p}.diff.bias"]
        k = x_ref.shape[-1]
        # one shared FC: the product term is computed once and reused on both sides
        hw = nn.project(h, w[:, :k])
        xbar_trg = hw + (nn.project(x_trg, w[:, k:]) + b)
        xbar_ref = hw + (nn.project(x_ref, w[:, k:]) + b)
    else:
        xbar_trg = nn.linear_concat([h, x_trg], store, f"{p}.diff_trg")
        xbar_ref = nn.linear_concat([h, x_ref], store, f"{p}.diff_ref")
    diff = xbar_trg - xbar_ref
    hid = nn.linear_concat([x_ref, x_trg, diff], store, f"{p}.out.fc1")
    hid = nn.dropout(T.relu(hid), mode)
    out = nn.linear(hid, store, f"{p}.out.fc2")
    return {"xbar_trg": xbar_trg, "xbar_ref": xbar_ref, "diff": diff, "d": out}


def difference_embed(x_ref, x_trg, e: int, store: ParamStore, mode: Mode = EVAL) -> Tensor:
    return difference_parts(x_ref, x_trg, e, store, mode)["d"]


def difference_bank(x_ref, x_trg, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """Banks (..., E, D) -> difference bank d (..., E, D), broadcasting leading axes."""
    x_ref, x_trg = T.as_tensor(x_ref), T.as_tensor(x_trg)
    if x_ref.shape[-2:] != x_trg.shape[-2:] or x_ref.shape[-2] != cfg.n_experts:
        raise DimensionError("difference_bank", x_ref.shape, x_trg.shape)
    return T.stack(
        [difference_embed(x_ref[..., e, :], x_trg[..., e, :], e, store, mode) for e in range(cfg.n_experts)],
        axis=-2,
    )


def score_correction(d, t) -> Tensor:
    """s^c = sum_e d_e . t_e for one (E, D) pair."""
    d, t = T.as_tensor(d), T.as_tensor(t)
    if d.shape != t.shape:
        raise ContractError(f"expert banks differ: {d.shape} vs {t.shape}")
    return (d * t).sum()


def correction_scores(x_ref, x_trg, t, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """Score matrix (N, M): query i = (x_ref[i], t[i]) against candidate target j."""
    x_ref, x_trg, t = T.as_tensor(x_ref), T.as_tensor(x_trg), T.as_tensor(t)
    n, e, dim = x_ref.shape
    m = x_trg.shape[0]
    d = difference_bank(x_ref.reshape(n, 1, e, dim), x_trg.reshape(1, m, e, dim), store, cfg, mode)
    return (d * t.reshape(n, 1, e, dim)).sum(axis=(2, 3))


correction_loss = batch_softmax_loss
