"""Joint training of the composition and correction networks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import OptimizerSnapshot, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .errors import ContractError, IntegrityError, NonFiniteLossError
from .experts import pad_captions
from .model import CCNet
from .nn import Mode, ParamStore

log = logging.getLogger(__name__)

LOG_HEADER = "step,epoch,loss_r,loss_c,loss,lr"


@dataclass
class TrainConfig:
    dim: int = 64
    n_experts: int = 7
    batch_size: int = 32
    lr: float = 1e-4
    decay: float = 0.95
    decay_unit: str = "epoch"
    dropout: float = 0.2
    rank: int = 4
    epochs: int = 10
    seed: int = 0
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    share_diff_fc: bool = True
    train_split: str = "train"
    eval_split: str | None = None
    eval_ks: tuple = (10, 50)
    checkpoint_every: int = 1

    def __post_init__(self):
        self.eval_ks = tuple(self.eval_ks)
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2: the in-batch softmax needs negatives")
        if self.n_experts != 7:
            raise ContractError("the expert layout is fixed at 7 experts")
        if self.lr < 0 or not 0 < self.decay <= 1:
            raise ContractError("learning rate must be >= 0 and decay in (0, 1]")
        if self.decay_unit not in ("epoch", "step"):
            raise ContractError(f"decay_unit must be 'epoch' or 'step', got {self.decay_unit!r}")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self) -> str:
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return json.dumps(d, indent=2, sort_keys=True)

    def model_config(self, store, word_dim: int) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            channels=store.channels,
            inter_channels=store.inter_channels,
            word_dim=word_dim,
            rank=self.rank,
            share_diff_fc=self.share_diff_fc,
        )


# ----------------------------------------------------------------------------
# Adam


class Adam:
    """Bias-corrected Adam over a ParamStore's trainable tensors."""

    def __init__(self, store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.parameters()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.parameters()}

    def step(self, grads: dict | None = None):
        grads = self.store.grads() if grads is None else grads
        for name, p in self.store.parameters():
            if grads[name].shape != p.data.shape:
                raise IntegrityError(f"{name}: gradient shape {grads[name].shape} != {p.data.shape}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.store.parameters():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def decay(self, factor: float):
        self.lr *= factor

    def snapshot(self, epoch: int) -> OptimizerSnapshot:
        return OptimizerSnapshot(self.step_count, self.lr, epoch, dict(self.m), dict(self.v))

    def restore(self, snap: OptimizerSnapshot):
        self.step_count, self.lr = snap.step, snap.lr
        for name in self.m:
            self.m[name][...] = snap.m[name]
            self.v[name][...] = snap.v[name]


def adam_step(store: ParamStore, grads: dict, state: Adam) -> Adam:
    state.step(grads)
    return state


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: CCNet
    log_rows: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    best_eval: float | None = None
    seconds: float = 0.0


class _Batcher:
    """Dense arrays for the triplets of one split, indexed by position."""

    def __init__(self, dataset, records):
        ids = sorted({i for r in records for i in (r.ref_id, r.trg_id)})
        self.row = {image_id: k for k, image_id in enumerate(ids)}
        self.maps, self.inter = dataset.store.batch(ids)
        self.records = records
        self.words = dataset.words

    def arrays(self, idx):
        recs = [self.records[i] for i in idx]
        ref = [self.row[r.ref_id] for r in recs]
        trg = [self.row[r.trg_id] for r in recs]
        wstar, mask = pad_captions([r.tokens for r in recs], self.words)
        return self.maps[ref], self.inter[ref], self.maps[trg], self.inter[trg], wstar, mask


def batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def _grad_report(store: ParamStore) -> str:
    worst, worst_name = -1.0, "?"
    for name, p in store.parameters():
        g = p.grad
        norm = float(np.sqrt(np.sum(g * g))) if g is not None else 0.0
        if not np.isfinite(norm):
            return f"{name} (gradient norm {norm})"
        if norm > worst:
            worst, worst_name = norm, name
    return f"{worst_name} (gradient norm {worst:.4g})"


def train(
    cfg: TrainConfig,
    dataset,
    out=None,
    log_path=None,
    resume=None,
    stop_after_epochs: int | None = None,
    progress=None,
) -> TrainResult:
    """Train CCNet on ``dataset``; write checkpoints to ``out`` and the loss log to ``log_path``.

    ``resume`` is a checkpoint written by an earlier run with the same config;
    training continues from the epoch it recorded. ``stop_after_epochs`` ends the
    run early (used to produce such checkpoints).
    """
    t0 = time.time()
    records = dataset.split(cfg.train_split)
    if len(records) < 2:
        raise ContractError("need at least two training triplets")
    model = CCNet(cfg.model_config(dataset.store, dataset.words.dim), seed=cfg.seed)
    opt = Adam(model.params, cfg.lr)
    start_epoch = 0
    if resume is not None:
        state, snap = load_checkpoint(resume)
        if snap is None:
            raise IntegrityError(f"{resume}: checkpoint has no optimizer state to resume from")
        model.params.load_state(state)
        opt.restore(snap)
        start_epoch = snap.epoch
    batcher = _Batcher(dataset, records)
    eval_records = dataset.split(cfg.eval_split) if cfg.eval_split else None

    result = TrainResult(model)
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w")
        if resume is None:
            log_fh.write(LOG_HEADER + "\n")
    last_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)
    try:
        for epoch in range(start_epoch, last_epoch):
            rng = np.random.default_rng([cfg.seed, 5, epoch])
            losses = []
            for idx in batches(len(records), cfg.batch_size, rng):
                step = opt.step_count
                mode = Mode(True, cfg.dropout, np.random.default_rng([cfg.seed, 7, step]))
                outb = model.batch(*batcher.arrays(idx), mode=mode)
                loss = cfg.lambda_r * outb.loss_r + cfg.lambda_c * outb.loss_c
                model.params.zero_grad()
                T.backward(loss, (p for _, p in model.params.parameters()))
                if not np.isfinite(loss.item()):
                    raise NonFiniteLossError(
                        f"non-finite loss {loss.item()} at step {step}; worst parameter {_grad_report(model.params)}"
                    )
                lr_used = opt.lr
                opt.step()
                row = (step, epoch, outb.loss_r.item(), outb.loss_c.item(), loss.item(), lr_used)
                result.log_rows.append(row)
                losses.append(row[4])
                if log_fh:
                    log_fh.write(",".join(repr(v) for v in row) + "\n")
                if cfg.decay_unit == "step":
                    opt.decay(cfg.decay)
            if cfg.decay_unit == "epoch":
                opt.decay(cfg.decay)
            result.epoch_losses.append(float(np.mean(losses)))
            msg = f"epoch {epoch + 1}/{cfg.epochs} loss {result.epoch_losses[-1]:.4f} lr {opt.lr:.3g}"
            if eval_records is not None:
                from .retrieval import evaluate

                score = evaluate(model, dataset, eval_records, cfg.eval_ks).overall
                msg += f" {cfg.eval_split} avg recall {score:.4f}"
                if out is not None and (result.best_eval is None or score > result.best_eval):
                    save_checkpoint(model.params, _best_path(out))
                if result.best_eval is None or score > result.best_eval:
                    result.best_eval = score
            log.info(msg)
            if progress:
                progress(msg)
            if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == last_epoch):
                save_checkpoint(model.params, out, opt.snapshot(epoch + 1))
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.time() - t0
    return result


def _best_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".best")


def read_loss_log(path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ContractError(f"{path}: unexpected header {header!r}")
        for line in fh:
            s, e, lr_, lc, lo, lrate = line.strip().split(",")
            rows.append((int(s), int(e), float(lr_), float(lc), float(lo), float(lrate)))
    return rows
