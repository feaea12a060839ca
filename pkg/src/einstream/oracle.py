"""Reference evaluator: literal nested loops over dense index space.

Each expression is evaluated independently on dense arrays, in program
order, so chained results match a run that materializes every intermediate.

Semantics follow stored entries rather than the full dense space:

* a product term is supported where every factor is nonzero; per-term
  reduction sums (or max-reduces) over that support;
* in an additive combination, a term missing some output index only
  contributes where a term that owns the index has support — a repeated
  operand pairs with existing coordinates, it cannot invent new ones.
  Ownership is resolved outer-to-inner per the left-hand side index order;
* division applies only where the term value is nonzero, mirroring result
  streams that carry no value there.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import EinstreamError
from .frontend.program import NormExpr, NormTerm, ValidatedProgram, apply_pointwise


def _term_arrays(term: NormTerm, out_vars, shape, env, extents):
    """Raw per-point term value (no sign/scale/divisors) plus support."""
    vals = np.zeros(shape, dtype=np.float64)
    supp = np.zeros(shape, dtype=bool)
    spaces = [range(extents[v]) for v in term.reduction_vars]
    for combo in itertools.product(*(range(s) for s in shape)):
        point = dict(zip(out_vars, combo))
        acc = 0.0
        best = None
        alive_any = False
        for red in itertools.product(*spaces):
            idx = dict(point)
            idx.update(zip(term.reduction_vars, red))
            prod = 1.0
            alive = True
            for f in term.factors:
                v = float(env[f.access.tensor][tuple(idx[i] for i in f.access.indices)])
                if v == 0.0:
                    alive = False
                for fn in f.maps:
                    v = apply_pointwise(fn, v)
                prod *= v
            alive_any = alive_any or alive
            if term.reduce_op == "max":
                if alive and (best is None or prod > best):
                    best = prod
            else:
                acc += prod
        total = best if term.reduce_op == "max" else acc
        vals[combo] = 0.0 if total is None else total
        supp[combo] = alive_any
    return vals, supp


def _broadcast_mask(term: NormTerm, terms, supports, out_vars, shape):
    """Points where this term may contribute given indices it does not own."""
    own = {v for f in term.factors for v in f.access.indices}
    mask = np.ones(shape, dtype=bool)
    rank = len(out_vars)
    for axis, v in enumerate(out_vars):
        if v in own:
            continue
        allowed = np.zeros(shape, dtype=bool)
        inner = tuple(range(axis + 1, rank))
        for other, osupp in zip(terms, supports):
            if any(v in f.access.indices for f in other.factors):
                slab = osupp.any(axis=inner, keepdims=True) if inner else osupp
                allowed |= np.broadcast_to(slab, shape)
        mask &= allowed
    return mask


def evaluate_expression(expr: NormExpr, env: dict, extents: dict[str, int]) -> np.ndarray:
    out_vars = expr.lhs.indices
    shape = tuple(extents[v] for v in out_vars)
    pairs = [_term_arrays(t, out_vars, shape, env, extents) for t in expr.terms]
    supports = [supp for _, supp in pairs]
    out = np.zeros(shape, dtype=np.float64)
    for term, (vals, _) in zip(expr.terms, pairs):
        mask = _broadcast_mask(term, expr.terms, supports, out_vars, shape)
        contrib = np.where(mask, vals, 0.0) * (term.sign * term.scale)
        for f in term.divisors:
            d = np.zeros(shape, dtype=np.float64)
            for combo in itertools.product(*(range(s) for s in shape)):
                point = dict(zip(out_vars, combo))
                v = float(env[f.access.tensor][tuple(point[i] for i in f.access.indices)])
                for fn in f.maps:
                    v = apply_pointwise(fn, v)
                d[combo] = v
            nz = contrib != 0.0
            contrib[nz] = contrib[nz] / d[nz]
        out += contrib
    for combo in itertools.product(*(range(s) for s in shape)):
        v = out[combo]
        for fn in expr.maps:
            v = apply_pointwise(fn, v)
        out[combo] = v
    return out


def evaluate_program(
    vp: ValidatedProgram, inputs: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Run every expression; returns all assigned tensors as dense arrays."""
    env: dict[str, np.ndarray] = {}
    for name, decl in vp.decls.items():
        if decl.role == "input":
            if name not in inputs:
                raise EinstreamError(f"missing input tensor {name}")
            arr = np.asarray(inputs[name], dtype=np.float64)
            if arr.shape != vp.shape_of(name):
                raise EinstreamError(
                    f"input {name}: shape {arr.shape}, declared {vp.shape_of(name)}"
                )
            env[name] = arr
    produced: dict[str, np.ndarray] = {}
    for expr in vp.norm:
        arr = evaluate_expression(expr, env, vp.var_extents)
        env[expr.lhs.tensor] = arr
        produced[expr.lhs.tensor] = arr
    return produced


def random_dense(shape, density, rng: np.random.Generator, low=0.5, high=2.0):
    """Dense array with ~density fraction nonzero, values in [low, high)."""
    mask = rng.random(shape) < density
    vals = rng.uniform(low, high, size=shape)
    return np.where(mask, vals, 0.0)
