"""CCNet: shared experts feeding the composition and correction networks."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .composition import batch_softmax_loss, compose, composition_scores, init_composition
from .config import DEFAULT_SLICES, ModelConfig
from .correction import correction_scores, init_correction
from .errors import FormatError
from .experts import image_experts, init_experts, pad_captions, text_experts
from .nn import EVAL, Mode, ParamStore
from .tensor import Tensor


@dataclass
class BatchOutput:
    loss_r: Tensor
    loss_c: Tensor
    scores_r: Tensor
    scores_c: Tensor


class CCNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        if store is None:
            store = ParamStore(seed)
            init_experts(store, cfg)
            init_composition(store, cfg)
            init_correction(store, cfg)
        self.params = store

    @classmethod
    def from_state(cls, state: dict) -> "CCNet":
        """Rebuild a model whose shapes are inferred from checkpoint entries."""
        try:
            fc0 = state["experts.image.0.fc.weight"]
            fc1 = state["experts.image.1.fc.weight"]
            conv = state["experts.text.conv.weight"]
            fu = state["composition.0.fusion.u.weight"]
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks {exc.args[0]!r}") from None
        n_experts = len({m.group(1) for m in (re.match(r"experts\.image\.(\d+)\.", k) for k in state) if m})
        dim = fc0.shape[0]
        cfg = ModelConfig(
            dim=dim,
            channels=fc0.shape[1],
            inter_channels=fc1.shape[1],
            word_dim=conv.shape[1],
            conv_width=conv.shape[2],
            rank=fu.shape[0] // dim,
            slices=DEFAULT_SLICES[: n_experts - 2],
            share_diff_fc="correction.0.diff.weight" in state,
        )
        model = cls(cfg, seed=0)
        model.params.load_state(state)
        return model

    # encoders
    def images(self, maps, inter, mode: Mode = EVAL) -> Tensor:
        return image_experts(maps, inter, self.params, self.cfg, mode)

    def texts(self, wstar, mask, mode: Mode = EVAL) -> Tensor:
        return text_experts(wstar, mask, self.params, self.cfg, mode)

    def captions(self, token_lists, table, mode: Mode = EVAL) -> Tensor:
        wstar, mask = pad_captions(token_lists, table)
        return self.texts(wstar, mask, mode)

    # training objective
    def batch(self, ref_maps, ref_inter, trg_maps, trg_inter, wstar, mask, mode: Mode = EVAL) -> BatchOutput:
        """In-batch scores and the two softmax losses for B aligned triplets."""
        b = ref_maps.shape[0]
        x = self.images(
            np.concatenate([ref_maps, trg_maps]), np.concatenate([ref_inter, trg_inter]), mode
        )
        x_ref, x_trg = x[:b], x[b:]
        t = self.texts(wstar, mask, mode)
        c = compose(x_ref, t, self.params, self.cfg, mode)
        s_r = composition_scores(c, x_trg)
        s_c = correction_scores(x_ref, x_trg, t, self.params, self.cfg, mode)
        return BatchOutput(batch_softmax_loss(s_r), batch_softmax_loss(s_c), s_r, s_c)

    # inference
    def gallery_scores(self, x_ref, t, x_gal, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Composition and correction scores (Q, G) of queries against a gallery bank."""
        x_ref, t, x_gal = (np.asarray(getattr(a, "data", a)) for a in (x_ref, t, x_gal))
        s_r = np.empty((x_ref.shape[0], x_gal.shape[0]))
        s_c = np.empty_like(s_r)
        with T.no_grad():
            c = compose(x_ref, t, self.params, self.cfg, EVAL).data
            s_r[:] = composition_scores(c, x_gal).data
            for lo in range(0, x_ref.shape[0], chunk):
                hi = lo + chunk
                s_c[lo:hi] = correction_scores(
                    x_ref[lo:hi], x_gal, t[lo:hi], self.params, self.cfg, EVAL
                ).data
        return s_r, s_c
