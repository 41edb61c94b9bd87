import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccnet import nn
from ccnet import tensor as T
from ccnet.composition import (
    batch_softmax_loss,
    compose,
    compose_expert,
    composition_scores,
    init_composition,
    mutan_fusion,
    score_composition,
)
from ccnet.config import ModelConfig
from ccnet.correction import (
    correction_loss,
    correction_scores,
    difference_bank,
    difference_parts,
    init_correction,
    score_correction,
)
from ccnet.errors import ContractError, DimensionError

CFG = ModelConfig(dim=8, channels=5, inter_channels=3, word_dim=6, rank=2)


def comp_store(seed=0, cfg=CFG):
    s = nn.ParamStore(seed)
    init_composition(s, cfg)
    rng = np.random.default_rng(seed + 100)
    for name, buf in s.buffers():
        buf[:] = rng.uniform(0.5, 1.5, buf.shape) if name.endswith("var") else rng.normal(size=buf.shape)
    return s


def corr_store(seed=0, cfg=CFG):
    s = nn.ParamStore(seed)
    init_correction(s, cfg)
    for name, p in s.parameters():
        if name.endswith("bias"):
            p.data[:] = np.random.default_rng(seed).normal(size=p.shape)
    return s


# fusion


def test_zero_factors_annihilate():
    s = comp_store()
    for part in ("u", "v", "out"):
        s[f"composition.0.fusion.{part}.weight"].data[:] = 0
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(mutan_fusion(rng.normal(size=8), rng.normal(size=8), s, "composition.0").data, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 2**16))
def test_fusion_is_linear_in_the_image(alpha, seed):
    s = comp_store()
    rng = np.random.default_rng(seed)
    x, t = rng.normal(size=8), rng.normal(size=8)
    lhs = mutan_fusion(alpha * x, t, s, "composition.3").data
    rhs = alpha * mutan_fusion(x, t, s, "composition.3").data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_fusion_hand_sized_case():
    cfg = ModelConfig(dim=2, channels=1, inter_channels=1, word_dim=2, rank=1)
    s = nn.ParamStore()
    init_composition(s, cfg)
    u = np.array([[1.0, 2.0], [0.0, -1.0]])
    v = np.array([[0.5, 0.0], [1.0, 1.0]])
    o = np.array([[2.0, 1.0], [-1.0, 3.0]])
    s["composition.0.fusion.u.weight"].data[:] = u
    s["composition.0.fusion.v.weight"].data[:] = v
    s["composition.0.fusion.out.weight"].data[:] = o
    x, t = np.array([1.0, -2.0]), np.array([3.0, 0.5])
    # U x = [-3, 2], V t = [1.5, 3.5], product = [-4.5, 7], projection = [-2, 25.5]
    np.testing.assert_allclose(mutan_fusion(x, t, s, "composition.0").data, [-2.0, 25.5], atol=1e-12)


def test_fusion_dimension_mismatch():
    with pytest.raises(DimensionError):
        mutan_fusion(np.ones(8), np.ones(7), comp_store(), "composition.0")


# composition


def test_pure_gate_never_exceeds_reference():
    s = comp_store()
    s["composition.w_g"].data[...] = 1.0
    s["composition.w_r"].data[...] = 0.0
    rng = np.random.default_rng(1)
    x, t = rng.normal(size=(20, 8)) * 5, rng.normal(size=(20, 8))
    c = compose_expert(x, t, 2, s).data
    assert np.all(np.abs(c) <= np.abs(x))


def test_switched_off_gate_ignores_gate_parameters():
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    a, b = comp_store(), comp_store()
    for s in (a, b):
        s["composition.w_g"].data[...] = 0.0
        s["composition.w_r"].data[...] = 0.7
    b["composition.1.gate.fc1.weight"].data[:] = rng.normal(size=(8, 24))
    b["composition.1.gate.fc2.bias"].data[:] = 9.0
    np.testing.assert_array_equal(compose_expert(x, t, 1, a).data, compose_expert(x, t, 1, b).data)


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def compose_oracle(x, t, e, s):
    """Step-by-step numpy re-derivation in inference mode."""
    g = lambda n: s[f"composition.{e}.{n}"].data
    buf = lambda n: s.buffer(f"composition.{e}.{n}")
    fused = g("fusion.out.weight") @ ((g("fusion.u.weight") @ x) * (g("fusion.v.weight") @ t))
    z = np.concatenate([x, t, fused])

    def stack(branch):
        h = g(f"{branch}.fc1.weight") @ z + g(f"{branch}.fc1.bias")
        h = (h - buf(f"{branch}.bn.running_mean")) / np.sqrt(buf(f"{branch}.bn.running_var") + 1e-5)
        h = np.maximum(h * g(f"{branch}.bn.scale") + g(f"{branch}.bn.shift"), 0)
        return g(f"{branch}.fc2.weight") @ h + g(f"{branch}.fc2.bias")

    wg, wr = s["composition.w_g"].data, s["composition.w_r"].data
    return wg * sigmoid(stack("gate")) * x + wr * stack("res")


def test_compose_matches_step_by_step_oracle():
    s = comp_store(3)
    s["composition.w_g"].data[...] = 0.8
    s["composition.w_r"].data[...] = 1.3
    rng = np.random.default_rng(3)
    x, t = rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
    got = compose(x, t, s, CFG).data
    for e in range(7):
        np.testing.assert_allclose(got[e], compose_oracle(x[e], t[e], e, s), atol=1e-12)


def test_score_examples():
    assert score_composition(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == 0.0
    c = np.zeros((7, 2))
    c[0] = [1, 2]
    assert score_composition(c, c).item() == 5.0
    with pytest.raises(ContractError):
        score_composition(np.zeros((7, 2)), np.zeros((6, 2)))


def test_score_matrix_matches_double_loop():
    rng = np.random.default_rng(4)
    c, x = rng.normal(size=(3, 7, 8)), rng.normal(size=(5, 7, 8))
    got = composition_scores(c, x).data
    for i in range(3):
        for j in range(5):
            want = sum(sum(c[i, e, k] * x[j, e, k] for k in range(8)) for e in range(7))
            assert abs(got[i, j] - want) < 1e-12


# loss


def loss_oracle(s):
    return np.mean([-np.log(np.exp(s[i, i]) / np.exp(s[i]).sum()) for i in range(len(s))])


def test_loss_examples():
    assert batch_softmax_loss(np.zeros((32, 32))).item() == pytest.approx(3.465736, abs=1e-6)
    sat = np.eye(4) * 20
    assert batch_softmax_loss(sat).item() == pytest.approx(3 * np.exp(-20), rel=1e-6)
    assert batch_softmax_loss(sat).item() < 1e-6
    s = np.random.default_rng(5).normal(size=(4, 4))
    assert abs(batch_softmax_loss(s).item() - loss_oracle(s)) < 1e-12
    with pytest.raises(ContractError):
        batch_softmax_loss(np.zeros((3, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_loss_row_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(5, 5)) * 3
    shifted = s + rng.normal(size=(5, 1)) * 100
    assert abs(batch_softmax_loss(s).item() - batch_softmax_loss(shifted).item()) < 1e-9


def test_correction_loss_shares_the_implementation():
    assert correction_loss(np.zeros((8, 8))).item() == pytest.approx(2.079442, abs=1e-6)
    s = np.random.default_rng(6).normal(size=(4, 4))
    assert correction_loss(s).item() == batch_softmax_loss(s).item()
    assert abs(correction_loss(s).item() - loss_oracle(s)) < 1e-12


def test_loss_gradient_through_composition():
    s = comp_store(7)
    rng = np.random.default_rng(7)
    x, t, y = rng.normal(size=(4, 7, 8)), rng.normal(size=(4, 7, 8)), rng.normal(size=(4, 7, 8))
    loss = lambda: batch_softmax_loss(composition_scores(compose(x, t, s, CFG), y))
    s.zero_grad()
    T.backward(loss(), [p for _, p in s.parameters()])
    w = s["composition.5.res.fc1.weight"]
    for idx in [(0, 0), (3, 17), (7, 23)]:
        orig = w.data[idx]
        w.data[idx] = orig + 1e-6
        up = loss().item()
        w.data[idx] = orig - 1e-6
        down = loss().item()
        w.data[idx] = orig
        assert w.grad[idx] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-9)


# correction


def test_identical_images_give_exact_zero_difference():
    s = corr_store()
    x = np.random.default_rng(8).normal(size=8)
    for e in range(7):
        assert np.all(difference_parts(x, x, e, s)["diff"].data == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_difference_is_antisymmetric(seed):
    s = corr_store()
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=8), rng.normal(size=8)
    ab = difference_parts(a, b, 4, s)["diff"].data
    ba = difference_parts(b, a, 4, s)["diff"].data
    np.testing.assert_allclose(ab, -ba, atol=1e-12)


def correction_oracle(x_ref, x_trg, e, s):
    g = lambda n: s[f"correction.{e}.{n}"].data
    h = x_trg * x_ref
    xt = g("diff.weight") @ np.concatenate([h, x_trg]) + g("diff.bias")
    xr = g("diff.weight") @ np.concatenate([h, x_ref]) + g("diff.bias")
    hid = np.maximum(g("out.fc1.weight") @ np.concatenate([x_ref, x_trg, xt - xr]) + g("out.fc1.bias"), 0)
    return g("out.fc2.weight") @ hid + g("out.fc2.bias")


def test_difference_embedding_matches_oracle():
    s = corr_store(9)
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
    got = difference_bank(a, b, s, CFG).data
    for e in range(7):
        np.testing.assert_allclose(got[e], correction_oracle(a[e], b[e], e, s), atol=1e-12)


def test_unshared_variant_has_two_fcs():
    cfg = ModelConfig(dim=8, channels=5, inter_channels=3, word_dim=6, rank=2, share_diff_fc=False)
    s = corr_store(cfg=cfg)
    assert "correction.0.diff_trg.weight" in s and "correction.0.diff_ref.weight" in s
    x = np.random.default_rng(10).normal(size=8)
    assert difference_parts(x, x, 0, s)["d"].shape == (8,)


def test_correction_score_examples():
    assert score_correction(np.zeros((7, 8)), np.ones((7, 8))).item() == 0.0
    assert score_correction(np.array([[2.0, 0.0]]), np.array([[3.0, 7.0]])).item() == 6.0
    rng = np.random.default_rng(11)
    d, t = rng.normal(size=(7, 8)), rng.normal(size=(7, 8))
    want = sum(d[e, k] * t[e, k] for e in range(7) for k in range(8))
    assert abs(score_correction(d, t).item() - want) < 1e-12


def test_correction_score_matrix_matches_pairwise():
    s = corr_store(12)
    rng = np.random.default_rng(12)
    xr, xt, t = rng.normal(size=(3, 7, 8)), rng.normal(size=(4, 7, 8)), rng.normal(size=(3, 7, 8))
    got = correction_scores(xr, xt, t, s, CFG).data
    for i in range(3):
        for j in range(4):
            d = difference_bank(xr[i], xt[j], s, CFG).data
            assert abs(got[i, j] - score_correction(d, t[i]).item()) < 1e-12
