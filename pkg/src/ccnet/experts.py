"""
Image and text experts.

Image side: a global average pool, the intermediate-layer vector and five
average-pooled 3x3 slices each go through an expert-specific projection
(FC, batch norm, ReLU, dropout) and context gating, giving an (E, D) bank.

Text side: word vectors are encoded per token as ``FC([conv1d(w*); w*])``;
every expert then attends over tokens using its own characterize embedding
and maps the pooled vector through an expert FC and context gating.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .errors import DimensionError, EmptyInputError, SliceRangeError
from .nn import EVAL, Mode, ParamStore
from .tensor import Tensor

MASK_VALUE = -1e9


def init_experts(store: ParamStore, cfg: ModelConfig):
    d = cfg.dim
    for e in range(cfg.n_experts):
        p = f"experts.image.{e}"
        n_in = cfg.inter_channels if e == 1 else cfg.channels
        nn.init_linear(store, f"{p}.fc", n_in, d)
        nn.init_batchnorm(store, f"{p}.bn", d)
        nn.init_context_gating(store, f"{p}.gate", d)
    nn.init_conv1d(store, "experts.text.conv", cfg.word_dim, cfg.word_dim, cfg.conv_width)
    nn.init_linear(store, "experts.text.fc", 2 * cfg.word_dim, d)
    nn.init_linear(store, "experts.text.att.fc1", d, d)
    nn.init_linear(store, "experts.text.att.fc2", d, 1)
    store.add("experts.text.m", store.rng.standard_normal((cfg.n_experts, d)) / np.sqrt(d))
    for e in range(cfg.n_experts):
        p = f"experts.text.{e}"
        nn.init_linear(store, f"{p}.fc", d, d)
        nn.init_context_gating(store, f"{p}.gate", d)


# ----------------------------------------------------------------------------
# image experts


def pool_regions(maps: np.ndarray, slices) -> np.ndarray:
    """Raw spatial expert inputs: global mean then one mean per slice.

    ``maps`` is (H, W, C) or (N, H, W, C); returns (1 + len(slices), C) with the
    same leading axes.
    """
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-3], maps.shape[-2]
    pooled = [maps.mean(axis=(-3, -2))]
    for r0, r1, c0, c1 in slices:
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise SliceRangeError(f"slice [{r0}:{r1},{c0}:{c1}] outside {h}x{w} map")
        pooled.append(maps[..., r0:r1, c0:c1, :].mean(axis=(-3, -2)))
    return np.stack(pooled, axis=-2)


def image_experts(maps, inter, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """(N, H, W, C) maps and (N, C_i) vectors -> (N, E, D) expert bank."""
    maps = np.asarray(maps, dtype=np.float64)
    inter = np.asarray(inter, dtype=np.float64)
    if maps.shape[-1] != cfg.channels or inter.shape[-1] != cfg.inter_channels:
        raise DimensionError("image_experts", maps.shape, inter.shape)
    spatial = pool_regions(maps, cfg.slices)
    raws = [spatial[:, 0], inter] + [spatial[:, 1 + k] for k in range(len(cfg.slices))]
    out = []
    for e, raw in enumerate(raws):
        p = f"experts.image.{e}"
        h = nn.linear(raw, store, f"{p}.fc")
        h = nn.batchnorm(h, store, f"{p}.bn", mode)
        h = nn.dropout(T.relu(h), mode)
        out.append(nn.context_gating(h, store, f"{p}.gate"))
    return T.stack(out, axis=1)


def extract_image_experts(fmap, inter, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """Single image -> (E, D) bank."""
    return image_experts(np.asarray(fmap)[None], np.asarray(inter)[None], store, cfg, mode)[0]


# ----------------------------------------------------------------------------
# text experts


def pad_captions(token_lists, table) -> tuple[np.ndarray, np.ndarray]:
    """Word vectors (N, L, word_dim) zero-padded to the longest caption, plus a 0/1 mask."""
    if any(len(toks) == 0 for toks in token_lists):
        raise EmptyInputError("caption with no tokens")
    length = max(len(toks) for toks in token_lists)
    wstar = np.zeros((len(token_lists), length, table.dim))
    mask = np.zeros((len(token_lists), length))
    for i, toks in enumerate(token_lists):
        wstar[i, : len(toks)] = table.lookup(toks)
        mask[i, : len(toks)] = 1.0
    return wstar, mask


def encode_caption(wstar, store: ParamStore) -> Tensor:
    """w = FC([conv1d(w*); w*]) per token; (..., L, word_dim) -> (..., L, D)."""
    wstar = T.as_tensor(wstar)
    if wstar.ndim < 2 or wstar.shape[-2] == 0:
        raise EmptyInputError("encode_caption needs at least one token")
    conv = nn.conv1d_same(wstar, store, "experts.text.conv")
    return nn.linear_concat([conv, wstar], store, "experts.text.fc")


def attention_weights(w, store: ParamStore, mask=None, mode: Mode = EVAL) -> Tensor:
    """alpha (N, E, L): softmax over tokens of FC(relu(FC(m_e * w_l))).

    Pad positions (mask 0) receive an additive -1e9 before the softmax.
    """
    w = T.as_tensor(w)
    m = store["experts.text.m"]
    if w.shape[-1] != m.shape[-1]:
        raise DimensionError("attention", w.shape, m.shape)
    n, length, d = w.shape
    mw = T.reshape(w, (n, 1, length, d)) * T.reshape(m, (1, m.shape[0], 1, d))
    h = nn.dropout(T.relu(nn.linear(mw, store, "experts.text.att.fc1")), mode)
    logits = T.reshape(nn.linear(h, store, "experts.text.att.fc2"), (n, m.shape[0], length))
    if mask is not None:
        logits = logits + (1.0 - np.asarray(mask))[:, None, :] * MASK_VALUE
    return T.softmax(logits, axis=-1)


def attend(w, alpha) -> Tensor:
    """t*_e = sum_l alpha_{e,l} w_l; (N, L, D), (N, E, L) -> (N, E, D)."""
    w = T.as_tensor(w)
    return T.matmul(alpha, w)


def text_head(tstar, e: int, store: ParamStore) -> Tensor:
    p = f"experts.text.{e}"
    return nn.context_gating(nn.linear(tstar, store, f"{p}.fc"), store, f"{p}.gate")


def text_experts(wstar, mask, store: ParamStore, cfg: ModelConfig, mode: Mode = EVAL) -> Tensor:
    """Padded word vectors (N, L, word_dim) -> text expert bank (N, E, D)."""
    w = encode_caption(wstar, store)
    alpha = attention_weights(w, store, mask, mode)
    tstar = attend(w, alpha)
    return T.stack([text_head(tstar[:, e], e, store) for e in range(cfg.n_experts)], axis=1)


def attend_text_expert(w, e: int, store: ParamStore, mode: Mode = EVAL):
    """Single caption: (L, D) token embeddings -> (alpha_e, t*_e, t_e) for expert e."""
    w = T.as_tensor(w)
    if w.ndim != 2 or w.shape[0] == 0:
        raise EmptyInputError("attend_text_expert needs an (L, D) caption with L >= 1")
    alpha = attention_weights(T.reshape(w, (1,) + w.shape), store, None, mode)[:, e : e + 1]
    tstar = attend(T.reshape(w, (1,) + w.shape), alpha)[0, 0]
    return alpha[0, 0], tstar, text_head(tstar, e, store)
