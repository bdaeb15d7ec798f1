import numpy as np
import pytest

from ackd import tensor_core as tc


def central_diff(f, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued f over every element.

    f takes the raw numpy arrays and returns a python float. Arrays must be
    float64; the step is applied one element at a time.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        for i in range(a.size):
            orig = a.reshape(-1)[i]
            a.reshape(-1)[i] = orig + eps
            fp = f(*arrays)
            a.reshape(-1)[i] = orig - eps
            fm = f(*arrays)
            a.reshape(-1)[i] = orig
            flat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def assert_close_rel(analytic, numeric, rtol=1e-4):
    """Elementwise |a - n| <= rtol * max(1, |a|, |n|)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    err = np.abs(a - n) / denom
    assert err.max() <= rtol, f"max relative error {err.max():.3e} > {rtol}"


def check_gradients(build, arrays, rtol=1e-4, eps=1e-5):
    """Compare reverse-mode gradients of a scalar against central differences.

    build(*tensors) must construct the scalar output from float64 leaf
    tensors created here; the same arrays drive the numeric estimate.
    """
    leaves = [tc.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*leaves)
    analytic = tc.grad(out, leaves)

    def f(*arrs):
        with_consts = [tc.Tensor(a, dtype=np.float64) for a in arrs]
        return build(*with_consts).item()

    numeric = central_diff(f, [a.copy() for a in arrays], eps=eps)
    for leaf, num in zip(leaves, numeric):
        assert_close_rel(analytic[leaf].data, num, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
