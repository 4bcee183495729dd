import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from transmix import _kernels
from transmix import tensor as T
from transmix.errors import ContractError, ShapeError
from transmix.gradcheck import check_tensors
from transmix.tensor import Tensor

# softmax([1, 2, 3]) at 50 digits (mpmath)
SOFTMAX_123 = [0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183]
# x * Phi(x) at x = 1, Phi by adaptive quadrature of the normal pdf
GELU_AT_1 = 0.841344746068543


def param(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def run_backward(build):
    with T.Tape() as tape:
        loss = build()
    T.backward(loss, tape)
    return loss


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.values, [[3, 4], [5, 6]])


def test_matmul_scalar_case():
    assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).values.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for t in range(4):
                ref[i, j] += a[i, t] * b[t, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).values, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    a, b = param(rng.standard_normal((3, 4))), param(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    run_backward(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.values.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.values.T @ g, atol=1e-12)


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).values, [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_logits_no_overflow():
    with np.errstate(over="raise", divide="raise", invalid="raise"):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).values
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    e = [mpmath.e**k for k in (1, 2, 3)]
    oracle = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(oracle, SOFTMAX_123, rtol=1e-15)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).values[0], SOFTMAX_123, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_permute(x):
    y = T.softmax_rows(Tensor(x)).values
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((y >= 0) & (y <= 1))
    perm = np.random.default_rng(0).permutation(x.shape[1])
    np.testing.assert_allclose(T.softmax_rows(Tensor(x[:, perm])).values, y[:, perm], atol=1e-15)


# --- layer norm -------------------------------------------------------------


def _ln_params(n):
    return Tensor(np.ones(n)), Tensor(np.zeros(n))


def test_layer_norm_constant_row_is_zero():
    g, b = _ln_params(4)
    np.testing.assert_array_equal(T.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), g, b).values, 0.0)


def test_layer_norm_two_values():
    g, b = _ln_params(2)
    out = T.layer_norm(Tensor([[1.0, -1.0]]), g, b).values
    np.testing.assert_allclose(out, [[1 / math.sqrt(1 + 1e-6), -1 / math.sqrt(1 + 1e-6)]], rtol=1e-15)


def test_layer_norm_random_row_statistics():
    x = np.random.default_rng(3).normal(5.0, 3.0, (1, 64))
    g, b = _ln_params(64)
    out = T.layer_norm(Tensor(x), g, b).values
    assert abs(out.mean()) < 1e-6
    assert 1 - 1e-3 <= out.var() <= 1.0


def test_layer_norm_affine_shape_checked():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# --- gelu -------------------------------------------------------------------


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).values[0] == 0.0


def test_gelu_asymptotes():
    out = T.gelu(Tensor([10.0, -10.0])).values
    assert out[0] == pytest.approx(10.0, abs=1e-12)
    assert out[1] == pytest.approx(0.0, abs=1e-12)


def test_gelu_at_one_matches_quadrature():
    phi, _ = quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi), -math.inf, 1.0, epsabs=1e-14, epsrel=1e-14)
    assert phi == pytest.approx(GELU_AT_1, abs=1e-14)
    assert T.gelu(Tensor([1.0])).values[0] == pytest.approx(GELU_AT_1, abs=1e-8)


def test_gelu_monotone_on_grid():
    # GELU has its minimum near -0.7518; nondecreasing to the right of it
    grid = np.linspace(-0.75, 6, 2000)
    assert np.all(np.diff(T.gelu(Tensor(grid)).values) >= 0)


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = param(np.random.default_rng(0).standard_normal((2, 3, 4)))
    run_backward(lambda: T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square_gives_x():
    x = param([1.5, -2.0, 0.25])
    run_backward(lambda: T.scale(T.sum_all(T.mul(x, x)), 0.5))
    np.testing.assert_array_equal(x.grad, x.values)


def test_backward_accumulates_over_fan_out():
    x = param([2.0, 3.0])
    run_backward(lambda: T.sum_all(T.add(T.mul(x, x), x)))
    np.testing.assert_array_equal(x.grad, 2 * x.values + 1)


def test_backward_rejects_non_scalar():
    x = param([1.0, 2.0])
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(y, tape)


def test_no_tape_records_nothing():
    x = param([1.0])
    y = T.mul(x, x)
    assert not y.requires_grad


def test_tape_topological_order():
    x = param([1.0, 2.0])
    with T.Tape() as tape:
        T.sum_all(T.gelu(T.mul(x, x)))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))


OPS = {
    "matmul_batched": lambda a, b: T.matmul(a, b),
    "softmax": lambda a, b: T.matmul(T.softmax_rows(a), b),
    "layer_norm": lambda a, b: T.matmul(T.layer_norm(a, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.full(4, 0.1))), b),
    "gelu": lambda a, b: T.matmul(T.gelu(a), b),
    "transpose_reshape": lambda a, b: T.matmul(T.reshape(T.transpose(a, (0, 2, 1)), (2, 3, 4)), b),
    "concat_select": lambda a, b: T.matmul(
        T.concat([a, T.broadcast_to(T.reshape(T.select(a, 1, axis=1), (2, 1, 4)), (2, 3, 4))], axis=1), b
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    a = param(rng.standard_normal((2, 3, 4)))
    b = param(rng.standard_normal((4, 2)))
    w = rng.standard_normal((2, 6 if name == "concat_select" else 3, 2))

    def build():
        return T.sum_all(T.mul(OPS[name](a, b), Tensor(w)))

    for r in check_tensors(build, {"a": a, "b": b}):
        assert r.max_rel_err <= 1e-4, r


def test_select_and_broadcast_gradients():
    rng = np.random.default_rng(8)
    a = param(rng.standard_normal((3, 5, 2)))
    c = param(rng.standard_normal((2,)))
    w = rng.standard_normal((3, 4, 2))

    def build():
        picked = T.select(a, 0, axis=1)  # (3, 2)
        spread = T.broadcast_to(T.reshape(c, (1, 1, 2)), (3, 4, 2))
        return T.add(T.sum_all(T.mul(spread, Tensor(w))), T.sum_all(T.mul(picked, picked)))

    for r in check_tensors(build, {"a": a, "c": c}):
        assert r.max_rel_err <= 1e-4, r


def test_soft_cross_entropy_gradient():
    rng = np.random.default_rng(9)
    logits = param(rng.standard_normal((4, 3)))
    targets = rng.dirichlet(np.ones(3), size=4)
    (r,) = check_tensors(lambda: T.soft_cross_entropy(logits, targets), {"logits": logits})
    assert r.max_rel_err <= 1e-4


def test_identical_forwards_bit_identical():
    x = np.random.default_rng(2).standard_normal((8, 16)).astype(np.float32)
    g, b = Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))
    run = lambda: T.gelu(T.softmax_rows(T.layer_norm(Tensor(x), g, b))).values  # noqa: E731
    assert run().tobytes() == run().tobytes()


# --- kernel paths -----------------------------------------------------------


@pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba path disabled")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_numba_kernels_agree_with_numpy(dtype):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((37, 13)).astype(dtype)
    gy = rng.standard_normal((37, 13)).astype(dtype)
    gamma = rng.standard_normal(13).astype(dtype)
    beta = rng.standard_normal(13).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12

    y = _kernels._softmax_rows_nb(x)
    np.testing.assert_allclose(y, _kernels.softmax_rows_np(x), atol=tol)
    np.testing.assert_allclose(_kernels._softmax_rows_backward_nb(y, gy), _kernels.softmax_rows_backward_np(y, gy), atol=tol)
    eps = dtype(1e-6)
    for got, want in zip(_kernels._layer_norm_nb(x, gamma, beta, eps), _kernels.layer_norm_np(x, gamma, beta, eps)):
        np.testing.assert_allclose(got, np.reshape(want, got.shape), atol=tol * 10)
    out, xhat, rstd = _kernels.layer_norm_np(x, gamma, beta, eps)
    for got, want in zip(
        _kernels._layer_norm_backward_nb(gy, xhat, rstd, gamma), _kernels.layer_norm_backward_np(gy, xhat, rstd, gamma)
    ):
        np.testing.assert_allclose(got, want, atol=tol * 10)
    np.testing.assert_allclose(_kernels._gelu_nb(x), _kernels.gelu_np(x), atol=tol)
    np.testing.assert_allclose(_kernels._gelu_backward_nb(x, gy), _kernels.gelu_backward_np(x, gy), atol=tol)


@pytest.mark.parametrize("flag, expected", [("0", "False"), ("off", "False")])
def test_env_flag_selects_numpy_path(flag, expected):
    import os
    import subprocess
    import sys

    env = dict(os.environ, TRANSMIX_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from transmix import _kernels; print(_kernels.HAS_NUMBA)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
