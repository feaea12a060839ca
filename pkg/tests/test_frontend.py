"""Parser, printer, and validation tests."""

from __future__ import annotations

import numpy as np
import pytest

from einstream.errors import (
    ArityMismatch,
    FrontendError,
    NonSSA,
    ParseError,
    UnknownTensor,
)
from einstream.frontend import (
    Access,
    Bin,
    Call,
    EinsumProgram,
    Expression,
    Literal,
    RegionSpec,
    ScheduleSpec,
    TensorDecl,
    normalize,
    parse_program,
    render_program,
    validate_program,
)
from einstream.tensors import COMPRESSED, COORDINATE, DENSE, LevelSpec

SPMV = """
index i = 2; index k = 3;
tensor B(i, k): compressed(i) -> compressed(k) order(i, k) input;
tensor c(k): compressed(k) order(k) input;
x(i) = B(i, k) * c(k);
"""


def test_parse_spmv():
    p = parse_program(SPMV)
    assert p.extents == {"i": 2, "k": 3}
    assert p.decls["B"].dims == ("i", "k")
    assert p.decls["B"].formats == (LevelSpec(COMPRESSED), LevelSpec(COMPRESSED))
    assert p.decls["c"].role == "input"
    assert len(p.expressions) == 1
    ex = p.expressions[0]
    assert ex.lhs == Access("x", ("i",))
    assert ex.body == Bin("*", Access("B", ("i", "k")), Access("c", ("k",)))
    assert len(p.regions) == 1 and not p.regions[0].fused


def test_parse_mode_order_csc():
    p = parse_program(
        "index i = 2; index k = 3;\n"
        "tensor B(i, k): dense(k) -> compressed(i) order(k, i) input;\n"
    )
    assert p.decls["B"].mode_order == (1, 0)
    assert p.decls["B"].formats == (LevelSpec(COMPRESSED), LevelSpec(DENSE))


def test_parse_fuse_block_and_directives():
    src = """
    index i = 4; index j = 4; index k = 4;
    tensor A(i, k): compressed(i) -> compressed(k) order(i, k) input;
    tensor X(k, j): compressed(k) -> compressed(j) order(k, j) input;
    tensor W(j, k): dense(j) -> compressed(k) order(j, k) input;
    fuse {
        T(i, j) = A(i, k) * X(k, j);
        Y(i, k) = T(i, j) * W(j, k);
        order(i, k, j);
    }
    parallelize(i, 4);
    block(2, 2);
    density(A, 0.25);
    rate(A.k, X.k, 0.5);
    order_cap(500);
    """
    p = parse_program(src)
    assert len(p.regions) == 1
    r = p.regions[0]
    assert r.fused and r.exprs == [0, 1] and r.order == ("i", "k", "j")
    s = p.schedule
    assert s.parallelize == [("i", 4)]
    assert s.block == (2, 2)
    assert s.densities == {"A": 0.25}
    assert s.rates == {("A", "k", "X", "k"): 0.5}
    assert s.order_cap == 500


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as err:
        parse_program("index i = ;\n")
    assert err.value.line == 1 and err.value.col == 11


def test_parse_rejects_unknown_level_kind():
    with pytest.raises(ParseError):
        parse_program("index i = 2;\ntensor A(i): banded(i) order(i);\n")


def test_parse_rejects_empty_fuse():
    with pytest.raises(ParseError):
        parse_program("fuse { }")


def test_precedence_and_parens():
    p = parse_program(
        "index i = 2;\n"
        "tensor A(i): compressed(i) order(i) input;\n"
        "tensor B(i): compressed(i) order(i) input;\n"
        "tensor C(i): compressed(i) order(i) input;\n"
        "y(i) = A(i) + B(i) * C(i);\n"
        "z(i) = (A(i) + B(i)) * C(i);\n"
    )
    y, z = p.expressions
    assert isinstance(y.body, Bin) and y.body.op == "+"
    assert isinstance(y.body.rhs, Bin) and y.body.rhs.op == "*"
    assert isinstance(z.body, Bin) and z.body.op == "*"
    assert isinstance(z.body.lhs, Bin) and z.body.lhs.op == "+"


def test_normalize_matmul_bias_relu():
    p = parse_program(
        "index i = 2; index j = 2; index k = 2;\n"
        "tensor A(i, k): compressed(i) -> compressed(k) order(i, k) input;\n"
        "tensor X(k, j): compressed(k) -> compressed(j) order(k, j) input;\n"
        "tensor b(j): compressed(j) order(j) input;\n"
        "Y(i, j) = relu(A(i, k) * X(k, j) + b(j));\n"
    )
    n = normalize(p.expressions[0])
    assert n.maps == ("relu",)
    assert len(n.terms) == 2
    t0, t1 = n.terms
    assert [f.access.tensor for f in t0.factors] == ["A", "X"]
    assert t0.reduction_vars == ("k",)
    assert t0.sign == 1.0 and t0.reduce_op == "sum"
    assert [f.access.tensor for f in t1.factors] == ["b"]
    assert t1.reduction_vars == ()


def test_normalize_division_scale_and_signs():
    p = parse_program(
        "index i = 2; index j = 2;\n"
        "tensor Z(i, j): compressed(i) -> compressed(j) order(i, j) input;\n"
        "tensor D(i): compressed(i) order(i) input;\n"
        "tensor R(i): compressed(i) order(i) input;\n"
        "O(i, j) = 2 * Z(i, j) / D(i) - R(i);\n"
    )
    n = normalize(p.expressions[0])
    t0, t1 = n.terms
    assert t0.scale == 2.0 and [f.access.tensor for f in t0.divisors] == ["D"]
    assert t1.sign == -1.0


def test_normalize_max_reduction():
    p = parse_program(
        "index i = 2; index j = 3;\n"
        "tensor S(i, j): compressed(i) -> compressed(j) order(i, j) input;\n"
        "R(i) = max(S(i, j));\n"
    )
    n = normalize(p.expressions[0])
    assert n.terms[0].reduce_op == "max"
    assert n.terms[0].reduction_vars == ("j",)


def test_normalize_rejects_reduction_in_divisor():
    p = parse_program(
        "index i = 2; index j = 2;\n"
        "tensor A(i): compressed(i) order(i) input;\n"
        "tensor B(i, j): compressed(i) -> compressed(j) order(i, j) input;\n"
        "y(i) = A(i) / B(i, j);\n"
    )
    with pytest.raises(FrontendError):
        normalize(p.expressions[0])


def test_validate_roles_and_inferred_decl():
    p = parse_program(
        SPMV + "tensor d(i): compressed(i) order(i) input;\n"
        "y(i) = x(i) * d(i);\n"
    )
    vp = validate_program(p)
    assert vp.role_of("B") == "input"
    assert vp.role_of("x") == "intermediate"
    assert vp.role_of("y") == "output"
    xd = vp.decl("x")
    assert xd.formats == (LevelSpec(COMPRESSED),)
    assert xd.mode_order == (0,)
    assert vp.shape_of("x") == (2,)


def test_validate_rejects_double_assignment():
    p = parse_program(SPMV + "x(i) = B(i, k) * c(k);\n")
    with pytest.raises(NonSSA):
        validate_program(p)


def test_validate_rejects_assigning_declared_input():
    p = parse_program(SPMV + "c(k) = B(i, k) * B(i, k);\n")
    with pytest.raises(NonSSA):
        validate_program(p)


def test_validate_rejects_unknown_tensor():
    p = parse_program("index i = 2;\ny(i) = Q(i) * Q(i);\n")
    with pytest.raises(UnknownTensor):
        validate_program(p)


def test_validate_rejects_arity_mismatch():
    p = parse_program(SPMV + "z(i) = B(i) * B(i);\n")
    with pytest.raises(ArityMismatch):
        validate_program(p)


def test_validate_rejects_extent_conflict():
    p = parse_program(
        "index i = 2; index k = 3;\n"
        "tensor A(i): compressed(i) order(i) input;\n"
        "tensor B(k): compressed(k) order(k) input;\n"
        "y(i) = A(p) * B(p);\n".replace("y(i)", "y(p)")
    )
    with pytest.raises(FrontendError):
        validate_program(p)


def test_round_trip_fixed_program():
    src = """
    index i = 4; index j = 4; index k = 4;
    tensor A(i, k): compressed(i) -> coordinate(k) order(i, k) input;
    tensor X(k, j): dense(k) -> compressed(j) order(j, k) input;
    fuse {
        T(i, j) = scale(0.5, A(i, k) * X(k, j));
        order(i, k, j);
    }
    Y(i, j) = relu(T(i, j));
    parallelize(j, 2);
    density(A, 0.1);
    """
    p1 = parse_program(src)
    text1 = render_program(p1)
    p2 = parse_program(text1)
    assert render_program(p2) == text1
    assert p2.expressions == p1.expressions
    assert p2.decls == p1.decls
    assert p2.extents == p1.extents


def _random_program(rng: np.random.Generator) -> EinsumProgram:
    idx_names = ["i", "j", "k", "l", "m", "n"][: rng.integers(2, 6)]
    extents = {v: int(rng.integers(2, 9)) for v in idx_names}
    kinds = [DENSE, COMPRESSED, COORDINATE]
    decls = {}
    for t in range(rng.integers(2, 5)):
        name = f"T{t}"
        rank = int(rng.integers(1, min(3, len(idx_names)) + 1))
        dims = tuple(
            idx_names[i] for i in rng.choice(len(idx_names), size=rank, replace=False)
        )
        formats = tuple(LevelSpec(kinds[rng.integers(0, 3)]) for _ in dims)
        order = tuple(int(m) for m in rng.permutation(rank))
        role = ["input", None][rng.integers(0, 2)]
        decls[name] = TensorDecl(name, dims, formats, order, role)

    def access():
        name = list(decls)[rng.integers(0, len(decls))]
        return Access(name, tuple(idx_names[rng.integers(0, len(idx_names))]
                                  for _ in decls[name].dims))

    def body(depth):
        r = rng.integers(0, 6)
        if depth <= 0 or r < 2:
            return access()
        if r == 2:
            return Literal(float(rng.integers(1, 5)))
        if r == 3:
            fn = ["relu", "exp", "gelu"][rng.integers(0, 3)]
            return Call(fn, (body(depth - 1),))
        if r == 4:
            return Call("scale", (Literal(float(rng.integers(1, 4))), body(depth - 1)))
        op = "+-*/"[rng.integers(0, 4)]
        return Bin(op, body(depth - 1), body(depth - 1))

    expressions, regions = [], []
    n_expr = int(rng.integers(1, 4))
    k = 0
    while k < n_expr:
        lhs = Access(f"O{k}", tuple(idx_names[: rng.integers(1, 3)]))
        expressions.append(Expression(lhs, Bin("*", body(2), body(2))))
        if rng.integers(0, 2) and k + 1 < n_expr:
            lhs2 = Access(f"O{k + 1}", lhs.indices)
            expressions.append(Expression(lhs2, Call("relu", (access(),))))
            order = tuple(idx_names[:2]) if rng.integers(0, 2) else None
            regions.append(RegionSpec([k, k + 1], order=order, fused=True))
            k += 2
        else:
            regions.append(RegionSpec([k], fused=False))
            k += 1
    sched = ScheduleSpec()
    if rng.integers(0, 2):
        sched.parallelize.append((idx_names[0], int(rng.integers(2, 5))))
    if rng.integers(0, 2):
        sched.block = (2, 2)
    if rng.integers(0, 2):
        sched.densities[list(decls)[0]] = 0.25
    return EinsumProgram(extents, decls, expressions, regions, sched)


def test_round_trip_random_programs():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p1 = _random_program(rng)
        text1 = render_program(p1)
        p2 = parse_program(text1)
        assert render_program(p2) == text1
        assert p2.expressions == p1.expressions
        assert p2.decls == p1.decls
        assert p2.extents == p1.extents
        assert [r.exprs for r in p2.regions] == [r.exprs for r in p1.regions]
        assert p2.schedule == p1.schedule
