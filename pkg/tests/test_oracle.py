"""Reference evaluator tests with hand-computed expected values."""

from __future__ import annotations

import math

import numpy as np

from einstream.frontend import parse_program, validate_program
from einstream.oracle import evaluate_program, random_dense


def run(src: str, **inputs):
    vp = validate_program(parse_program(src))
    return evaluate_program(vp, inputs)


def test_spmv_hand_value():
    out = run(
        "index i = 2; index k = 3;\n"
        "tensor B(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
        "tensor c(k): compressed(k) order(k) input;\n"
        "x(i) = B(i, k) * c(k);\n",
        B=np.array([[2.0, 0.0, 3.0], [0.0, 4.0, 0.0]]),
        c=np.array([1.0, 2.0, 3.0]),
    )
    # row 0: 2*1 + 3*3 = 11; row 1: 4*2 = 8
    assert np.array_equal(out["x"], [11.0, 8.0])


def test_matmul_bias_relu_hand_value():
    out = run(
        "index i = 2; index j = 2; index k = 2;\n"
        "tensor A(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
        "tensor X(k, j): compressed(k) -> compressed(j) order(k, j) input;\n"
        "tensor b(j): compressed(j) order(j) input;\n"
        "Y(i, j) = relu(A(i, k) * X(k, j) + b(j));\n",
        A=np.array([[1.0, 0.0], [0.0, -1.0]]),
        X=np.array([[1.0, 2.0], [3.0, 4.0]]),
        b=np.array([1.0, 1.0]),
    )
    assert np.array_equal(out["Y"], [[2.0, 3.0], [0.0, 0.0]])


def test_max_reduce_uses_stored_support():
    # row 0 stores only -5: its max is -5, not the absent slot's 0
    out = run(
        "index i = 2; index j = 2;\n"
        "tensor S(i, j): compressed(i) -> compressed(j) order(i, j) input;\n"
        "R(i) = max(S(i, j));\n",
        S=np.array([[-5.0, 0.0], [1.0, 2.0]]),
    )
    assert np.array_equal(out["R"], [-5.0, 2.0])


def test_pointwise_zero_maps_to_zero():
    out = run(
        "index i = 3;\n"
        "tensor a(i): compressed(i) order(i) input;\n"
        "y(i) = exp(a(i));\n",
        a=np.array([0.0, 1.0, -1.0]),
    )
    assert np.allclose(out["y"], [0.0, math.e, math.exp(-1.0)], atol=1e-12)


def test_softmax_chain_stored_semantics():
    # S row 0 stores {1, 2}: shifted exps are exp(-1) and exp(0) -> 0 under
    # stored-entry semantics, so only the non-max entry survives; its ratio
    # with the row sum is exactly 1.  Row 1 stores a single entry: shifted
    # value 0 vanishes entirely.
    src = """
    index i = 2; index j = 2;
    tensor S(i, j): compressed(i) -> compressed(j) order(i, j) input;
    R(i) = max(S(i, j));
    Z(i, j) = exp(S(i, j) - R(i));
    D(i) = Z(i, j);
    O(i, j) = Z(i, j) / D(i);
    """
    out = run(src, S=np.array([[1.0, 2.0], [3.0, 0.0]]))
    assert np.allclose(out["R"], [2.0, 3.0])
    assert np.allclose(out["Z"], [[math.exp(-1.0), 0.0], [0.0, 0.0]])
    assert np.allclose(out["D"], [math.exp(-1.0), 0.0])
    assert np.allclose(out["O"], [[1.0, 0.0], [0.0, 0.0]])


def test_broadcast_add_limited_to_owner_rows():
    # b(j) repeats over i, so it only lands on rows where T has support;
    # within such a row it unions fresh j coordinates in.
    out = run(
        "index i = 2; index j = 2;\n"
        "tensor T(i, j): compressed(i) -> compressed(j) order(i, j) input;\n"
        "tensor b(j): compressed(j) order(j) input;\n"
        "Y(i, j) = T(i, j) + b(j);\n",
        T=np.array([[5.0, 0.0], [0.0, 0.0]]),
        b=np.array([1.0, 2.0]),
    )
    assert np.array_equal(out["Y"], [[6.0, 2.0], [0.0, 0.0]])


def test_division_skips_empty_points():
    out = run(
        "index i = 2;\n"
        "tensor a(i): compressed(i) order(i) input;\n"
        "tensor d(i): compressed(i) order(i) input;\n"
        "y(i) = a(i) / d(i);\n",
        a=np.array([6.0, 0.0]),
        d=np.array([3.0, 0.0]),  # 0/0 point yields 0, not nan
    )
    assert np.array_equal(out["y"], [2.0, 0.0])


def test_chained_expressions_share_env():
    out = run(
        "index i = 2; index k = 2;\n"
        "tensor B(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
        "tensor c(k): compressed(k) order(k) input;\n"
        "t(i) = B(i, k) * c(k);\n"
        "y(i) = relu(t(i));\n",
        B=np.array([[1.0, 2.0], [-3.0, 0.0]]),
        c=np.array([1.0, 1.0]),
    )
    assert np.array_equal(out["t"], [3.0, -3.0])
    assert np.array_equal(out["y"], [3.0, 0.0])


def test_three_factor_product_reduces_both_vars():
    # y(i) = sum_{k,j} A(i,k) B(k,j) c(j), hand-checked tiny case
    out = run(
        "index i = 1; index k = 2; index j = 2;\n"
        "tensor A(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
        "tensor B(k, j): compressed(k) -> compressed(j) order(k, j) input;\n"
        "tensor c(j): compressed(j) order(j) input;\n"
        "y(i) = A(i, k) * B(k, j) * c(j);\n",
        A=np.array([[2.0, 3.0]]),
        B=np.array([[1.0, 0.0], [0.0, 5.0]]),
        c=np.array([7.0, 1.0]),
    )
    # 2*1*7 + 3*5*1 = 29
    assert np.array_equal(out["y"], [29.0])


def test_matches_numpy_einsum_on_random_dense():
    rng = np.random.default_rng(11)
    for _ in range(20):
        A = random_dense((3, 4), 0.6, rng)
        X = random_dense((4, 5), 0.6, rng)
        out = run(
            "index i = 3; index k = 4; index j = 5;\n"
            "tensor A(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
            "tensor X(k, j): compressed(k) -> compressed(j) order(k, j) input;\n"
            "Y(i, j) = A(i, k) * X(k, j);\n",
            A=A,
            X=X,
        )
        assert np.allclose(out["Y"], A @ X, atol=1e-12)
