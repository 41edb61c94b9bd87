"""
Acceptance checks for the CCNet engine.

Each check prints exactly one ``PASS``/``FAIL`` line with the measured values.
Run under pytest (lines are repeated in the terminal summary) or directly::

    python tests/test_acceptance.py

The trained-model checks share one benchmark run (three model seeds on one
synthetic dataset); it is computed on first use and cached for the session.
"""

from __future__ import annotations

import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from ccnet import nn
from ccnet.checkpoint import load_checkpoint, save_checkpoint
from ccnet.composition import batch_softmax_loss, init_composition, mutan_fusion
from ccnet.config import DEFAULT_SLICES, ModelConfig
from ccnet.correction import difference_parts, init_correction
from ccnet.data.dataset import load_dataset
from ccnet.data.features import load_feature_store, write_feature_store
from ccnet.data.synthetic import SyntheticSpec, generate_synthetic
from ccnet.experts import attend_text_expert, init_experts, pool_regions
from ccnet.gradcheck import grad_check
from ccnet.model import CCNet
from ccnet.retrieval import (
    QueryScores,
    RankedList,
    combine_query_scores,
    recall_at_k,
    report_from_scores,
    score_queries,
)
from ccnet.tensor import no_grad
from ccnet.train import TrainConfig, train

RESULTS: list[str] = []

TRIALS = 100
ORACLE_TOL = 1e-12

# benchmark: the default synthetic spec (A=4, V=6, N=1296, 432 candidates per
# category gallery, 500 evaluation triplets), three model seeds
BENCH_DATA_SEED = 0
BENCH_SEEDS = (0, 1, 2)
BENCH_TRAIN = dict(lr=1e-4, epochs=20)
BENCH_KS = (10, 50)

# overfit check
OVERFIT_TRAIN = dict(dim=32, lr=1e-3, epochs=100, dropout=0.0, decay=1.0, seed=0)


def report(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# ----------------------------------------------------------------------------
# 1. gradient suite


def check_gradient_suite() -> bool:
    t0 = time.perf_counter()
    result = grad_check(seed=0, raise_on_fail=False)
    secs = time.perf_counter() - t0
    groups = ", ".join(f"{g} {e:.2e}" for g, e in sorted(result.errors.items()))
    ok = result.max_error <= 1e-4 and secs < 60
    return report(
        "gradient suite",
        ok,
        f"max rel err {result.max_error:.2e} (<= 1e-4) over {result.checked} entries [{groups}]; {secs:.1f}s (< 60s)",
    )


# ----------------------------------------------------------------------------
# 2. oracle equivalence


def _loss_oracle(s: np.ndarray) -> float:
    total = 0.0
    for i in range(len(s)):
        m = max(s[i])
        lse = m + math.log(math.fsum(math.exp(v - m) for v in s[i]))
        total += lse - s[i][i]
    return total / len(s)


def _attention_oracle(w, e, store):
    m = store["experts.text.m"].data[e]
    w1, b1 = store["experts.text.att.fc1.weight"].data, store["experts.text.att.fc1.bias"].data
    w2, b2 = store["experts.text.att.fc2.weight"].data, store["experts.text.att.fc2.bias"].data
    logits = []
    for tok in w:
        h = [max(0.0, sum(w1[j, k] * m[k] * tok[k] for k in range(len(tok))) + b1[j]) for j in range(len(b1))]
        logits.append(sum(w2[0, j] * h[j] for j in range(len(h))) + b2[0])
    mx = max(logits)
    ex = [math.exp(v - mx) for v in logits]
    alpha = [v / sum(ex) for v in ex]
    pooled = [sum(alpha[l] * w[l][k] for l in range(len(w))) for k in range(w.shape[1])]
    return np.array(alpha), np.array(pooled)


def _slice_oracle(fmap):
    h, w, c = fmap.shape
    out = [[sum(fmap[r, q, k] for r in range(h) for q in range(w)) / (h * w) for k in range(c)]]
    for r0, r1, c0, c1 in DEFAULT_SLICES:
        cells = [(r, q) for r in range(r0, r1) for q in range(c0, c1)]
        out.append([sum(fmap[r, q, k] for r, q in cells) / len(cells) for k in range(c)])
    return np.array(out)


def _fusion_oracle(x, t, u, v, o, rank):
    d = len(x)
    z = []
    for r in range(rank):
        for i in range(d):
            ux = sum(u[r * d + i, k] * x[k] for k in range(d))
            vt = sum(v[r * d + i, k] * t[k] for k in range(d))
            z.append(ux * vt)
    return np.array([sum(o[j, q] * z[q] for q in range(len(z))) for j in range(o.shape[0])])


def _recall_oracle(logp, truth_idx, k):
    hits = 0
    for row, ti in zip(logp, truth_idx):
        better = sum(1 for j, v in enumerate(row) if v > row[ti] or (v == row[ti] and j < ti))
        hits += better < k
    return hits / len(logp)


def check_oracle_equivalence() -> bool:
    rng = np.random.default_rng(2024)
    worst = {"loss": 0.0, "attention": 0.0, "slices": 0.0, "fusion": 0.0, "recall": 0.0}
    for trial in range(TRIALS):
        b = int(rng.integers(2, 9))
        s = rng.normal(size=(b, b)) * rng.uniform(0.1, 10)
        worst["loss"] = max(worst["loss"], abs(batch_softmax_loss(s).item() - _loss_oracle(s)))

        d = int(rng.integers(2, 7))
        cfg = ModelConfig(dim=d, channels=3, inter_channels=2, word_dim=4, rank=2)
        store = nn.ParamStore(seed=trial)
        init_experts(store, cfg)
        store["experts.text.att.fc1.bias"].data[:] = rng.normal(size=d)
        store["experts.text.att.fc2.bias"].data[:] = rng.normal(size=1)
        w = rng.normal(size=(int(rng.integers(1, 6)), d))
        e = int(rng.integers(7))
        alpha, tstar, _ = attend_text_expert(w, e, store)
        a_o, t_o = _attention_oracle(w, e, store)
        worst["attention"] = max(
            worst["attention"], np.abs(alpha.data - a_o).max(), np.abs(tstar.data - t_o).max()
        )

        fmap = rng.normal(size=(7, 7, int(rng.integers(1, 5))))
        worst["slices"] = max(worst["slices"], np.abs(pool_regions(fmap, DEFAULT_SLICES) - _slice_oracle(fmap)).max())

        rank = int(rng.integers(1, 4))
        fcfg = ModelConfig(dim=d, channels=1, inter_channels=1, word_dim=1, rank=rank)
        fstore = nn.ParamStore(seed=trial + 1000)
        init_composition(fstore, fcfg)
        x, t = rng.normal(size=d), rng.normal(size=d)
        got = mutan_fusion(x, t, fstore, "composition.0").data
        want = _fusion_oracle(
            x,
            t,
            fstore["composition.0.fusion.u.weight"].data,
            fstore["composition.0.fusion.v.weight"].data,
            fstore["composition.0.fusion.out.weight"].data,
            rank,
        )
        worst["fusion"] = max(worst["fusion"], np.abs(got - want).max())

        g, q = int(rng.integers(2, 40)), int(rng.integers(1, 10))
        ids = [f"c{i:03d}" for i in range(g)]
        logp = np.array([rng.permutation(g) for _ in range(q)], dtype=float)
        if trial % 3 == 0:
            logp = np.floor(logp / 3)  # ties exercise the id tie-break
        truth_idx = rng.integers(g, size=q)
        k = int(rng.integers(1, g + 2))
        ranked = [RankedList.from_log_probs(str(i), ids, row) for i, row in enumerate(logp)]
        by_list = recall_at_k(ranked, [ids[i] for i in truth_idx], k)
        scores = QueryScores({"c": ids}, {"c": logp}, {"c": [ids[i] for i in truth_idx]}, {"c": list(range(q))})
        by_report = report_from_scores(scores, (k,)).per_category["c"][k]
        want = _recall_oracle(logp, truth_idx, k)
        worst["recall"] = max(worst["recall"], abs(by_list - want), abs(by_report - want))
    ok = all(v <= ORACLE_TOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return report("oracle equivalence", ok, f"{TRIALS} trials each, max abs diff [{detail}] (<= 1e-12)")


# ----------------------------------------------------------------------------
# 3. analytic fixtures


def check_analytic_fixtures() -> bool:
    loss = batch_softmax_loss(np.zeros((32, 32))).item()
    ok_loss = abs(loss - 3.465736) <= 1e-6

    cfg = ModelConfig(dim=8, channels=3, inter_channels=2, word_dim=4, rank=2)
    store = nn.ParamStore(seed=5)
    init_experts(store, cfg)
    init_correction(store, cfg)
    rng = np.random.default_rng(5)
    ok_att = True
    for e in range(7):
        w = rng.normal(size=(1, 8))
        alpha, tstar, _ = attend_text_expert(w, e, store)
        ok_att &= alpha.data.tolist() == [1.0] and np.array_equal(tstar.data, w[0])

    ok_diff = True
    for e in range(7):
        x = rng.normal(size=(5, 8))
        ok_diff &= bool(np.all(difference_parts(x, x, e, store)["diff"].data == 0.0))

    ok_gate = True
    for e in range(7):
        store[f"experts.image.{e}.gate.bias"].data[:] = rng.normal(size=8) * 3
        x = rng.normal(size=(50, 8)) * 10
        y = nn.context_gating(x, store, f"experts.image.{e}.gate").data
        ok_gate &= bool(np.all(np.abs(y) <= np.abs(x)))
    ok = ok_loss and ok_att and ok_diff and ok_gate
    return report(
        "analytic fixtures",
        ok,
        f"uniform B=32 loss {loss:.7f} (3.465736 +- 1e-6): {ok_loss}; one-token attention exact: {ok_att}; "
        f"identical-pair difference exactly 0: {ok_diff}; gating |y|<=|x|: {ok_gate}",
    )


# ----------------------------------------------------------------------------
# 4. overfit


def check_overfit() -> bool:
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        generate_synthetic(SyntheticSpec(seed=0, splits={"train": 64}), tmp)
        ds = load_dataset(tmp)
        result = train(TrainConfig(**OVERFIT_TRAIN), ds)
        records = ds.split("train")
        scores = score_queries(result.model, ds, records, gallery="targets")["ccnet"]
        r1 = report_from_scores(scores, (1,)).overall
    secs = time.perf_counter() - t0
    ok = r1 >= 0.95 and secs < 300 and OVERFIT_TRAIN["epochs"] <= 200
    return report(
        "overfit",
        ok,
        f"64 triplets, D=32, {OVERFIT_TRAIN['epochs']} epochs: train Recall@1 {r1:.3f} (>= 0.95, gallery = "
        f"training targets per category); final loss {result.epoch_losses[-1]:.4f}; {secs:.0f}s (< 300s)",
    )


# ----------------------------------------------------------------------------
# 5-7. benchmark runs


@functools.lru_cache(maxsize=None)
def benchmark():
    """Train one model per seed on the benchmark data and score the test split."""
    t0 = time.perf_counter()
    tmp = tempfile.mkdtemp(prefix="ccnet-bench-")
    generate_synthetic(SyntheticSpec(seed=BENCH_DATA_SEED), tmp)
    ds = load_dataset(tmp)
    records = ds.split("test")
    runs = []
    for seed in BENCH_SEEDS:
        res = train(TrainConfig(seed=seed, **BENCH_TRAIN), ds)
        scores = score_queries(res.model, ds, records)
        runs.append(
            {
                "seed": seed,
                "model": res.model,
                "epoch_losses": res.epoch_losses,
                "scores": scores,
                "overall": {k: report_from_scores(v, BENCH_KS).overall for k, v in scores.items()},
            }
        )
    return {"dataset": ds, "records": records, "runs": runs, "seconds": time.perf_counter() - t0}


def check_generalization() -> bool:
    bench = benchmark()
    margins = [r["overall"]["ccnet"] - r["overall"]["composition"] for r in bench["runs"]]
    wins = sum(m > 0 for m in margins)
    per = "; ".join(
        f"seed {r['seed']}: ccnet {r['overall']['ccnet']:.4f} vs composition {r['overall']['composition']:.4f}"
        f" (correction {r['overall']['correction']:.4f})"
        for r in bench["runs"]
    )
    ok = wins == len(margins) and bench["seconds"] < 1800
    return report(
        "generalization + ablation direction",
        ok,
        f"{wins}/{len(margins)} seeds with positive margin {[round(m, 4) for m in margins]}; {per}; "
        f"{bench['seconds']:.0f}s (< 1800s)",
    )


def check_ensemble() -> bool:
    bench = benchmark()
    members = [r["overall"]["ccnet"] for r in bench["runs"]]
    combined = combine_query_scores([r["scores"]["ccnet"] for r in bench["runs"]])
    ens = report_from_scores(combined, BENCH_KS).overall
    ok = ens >= max(members) - 0.01
    return report(
        "ensemble sanity",
        ok,
        f"3-model ensemble {ens:.4f} vs best member {max(members):.4f} (members {[round(m, 4) for m in members]};"
        f" need >= best - 0.01)",
    )


def check_direction_sensitivity() -> bool:
    """Supplementary: swapping reference and target lowers the correction score."""
    bench = benchmark()
    ds, records = bench["dataset"], bench["records"]
    fractions = []
    for run in bench["runs"]:
        model = run["model"]
        with no_grad():
            x_ref = model.images(*ds.store.batch([r.ref_id for r in records])).data
            x_trg = model.images(*ds.store.batch([r.trg_id for r in records])).data
            t = model.captions([r.tokens for r in records], ds.words).data
            from ccnet.correction import difference_bank

            fwd = (difference_bank(x_ref, x_trg, model.params, model.cfg).data * t).sum(axis=(1, 2))
            rev = (difference_bank(x_trg, x_ref, model.params, model.cfg).data * t).sum(axis=(1, 2))
        fractions.append(float(np.mean(rev < fwd)))
    ok = min(fractions) >= 0.9
    return report(
        "supplementary: correction direction sensitivity",
        ok,
        f"swapped pair scores lower on {[round(f, 3) for f in fractions]} of test triplets (>= 0.90)",
    )


def check_training_dynamics() -> bool:
    """Supplementary: the last benchmark epoch loss is at most half the first."""
    bench = benchmark()
    ratios = [r["epoch_losses"][-1] / r["epoch_losses"][0] for r in bench["runs"]]
    ok = max(ratios) <= 0.5
    return report(
        "supplementary: training dynamics",
        ok,
        f"epoch-{BENCH_TRAIN['epochs']} / epoch-1 training loss ratios {[round(x, 3) for x in ratios]} (<= 0.5)",
    )


# ----------------------------------------------------------------------------
# 6. determinism


def check_determinism() -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        generate_synthetic(SyntheticSpec(seed=3, splits={"train": 256}), tmp / "data")
        ds = load_dataset(tmp / "data")
        cfg = TrainConfig(seed=11, epochs=2, lr=1e-3)
        for run in ("a", "b"):
            train(cfg, ds, out=tmp / f"{run}.ckpt", log_path=tmp / f"{run}.csv")
        same_ckpt = (tmp / "a.ckpt").read_bytes() == (tmp / "b.ckpt").read_bytes()
        same_log = (tmp / "a.csv").read_bytes() == (tmp / "b.csv").read_bytes()
        size = (tmp / "a.ckpt").stat().st_size
    return report(
        "determinism",
        same_ckpt and same_log,
        f"checkpoints byte-identical: {same_ckpt} ({size} bytes); loss logs byte-identical: {same_log}",
    )


# ----------------------------------------------------------------------------
# 8. format round trips


def check_round_trips() -> bool:
    rng = np.random.default_rng(8)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        maps = {f"i{k}": rng.normal(size=(7, 7, 6)).astype(np.float32) for k in range(20)}
        inter = {f"i{k}": rng.normal(size=5).astype(np.float32) for k in range(20)}
        write_feature_store(tmp / "fs", maps, inter)
        store = load_feature_store(tmp / "fs")
        ok_fs = all(
            store.get(k)[0].tobytes() == maps[k].tobytes() and store.get(k)[1].tobytes() == inter[k].tobytes()
            for k in maps
        )
        model = CCNet(ModelConfig(dim=16, channels=6, inter_channels=5, word_dim=8), seed=4)
        for _, buf in model.params.buffers():
            buf[:] = rng.uniform(0.5, 2.0, size=buf.shape)
        save_checkpoint(model.params, tmp / "m.ckpt")
        state, _ = load_checkpoint(tmp / "m.ckpt")
        original = model.params.state()
        ok_ck = list(state) == list(original) and all(
            state[k].astype(np.float32).tobytes() == original[k].astype(np.float32).tobytes() for k in original
        )
        save_checkpoint(state, tmp / "m2.ckpt")
        ok_ck &= (tmp / "m.ckpt").read_bytes() == (tmp / "m2.ckpt").read_bytes()
    return report(
        "format round trips",
        ok_fs and ok_ck,
        f"feature store bit-exact: {ok_fs}; checkpoint bit-exact at float32 ({len(state)} entries): {ok_ck}",
    )


# ----------------------------------------------------------------------------
# pytest entry points

CHECKS = [
    check_gradient_suite,
    check_oracle_equivalence,
    check_analytic_fixtures,
    check_overfit,
    check_generalization,
    check_determinism,
    check_ensemble,
    check_round_trips,
    check_direction_sensitivity,
    check_training_dynamics,
]


@pytest.mark.parametrize("check", CHECKS, ids=[c.__name__[len("check_"):] for c in CHECKS])
def test_acceptance(check):
    assert check()


if __name__ == "__main__":
    results = [check() for check in CHECKS]
    sys.exit(0 if all(results) else 1)
