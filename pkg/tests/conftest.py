import numpy as np
import pytest

from ccnet import tensor as T
from ccnet.data.synthetic import SyntheticSpec, generate_synthetic


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def check_op_grad(build, *arrays, tol=1e-6, seed=0):
    """Compare backprop against central differences for ``build(*tensors) -> Tensor``.

    The output is contracted with a fixed random projection so every output
    entry contributes to the checked scalar.
    """
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    proj = rng.normal(size=out.shape)
    T.backward((out * proj).sum())
    for t in tensors:
        num = numeric_grad(lambda: float(np.sum(build(*[T.Tensor(s.data) for s in tensors]).data * proj)), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset written to disk once per session."""
    root = tmp_path_factory.mktemp("synth")
    spec = SyntheticSpec(splits={"train": 64, "val": 16, "test": 40}, channels=8, inter_channels=8, word_dim=16, seed=4)
    generate_synthetic(spec, root)
    return root, spec


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
