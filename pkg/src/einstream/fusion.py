"""Region elaboration and loop-order planning.

A fusion region's expressions are flattened into one iteration space:

* every reduction index is renamed to a fresh ``u<n>`` so indices from
  different expressions cannot collide;
* an intermediate consumed inside its region is inlined — its producer
  expression is re-instantiated with the consumer's indices substituted,
  so a producer consumed under two different index patterns is recomputed;
* n-ary products binarize left-associated into synthesized partials, and
  each reduction index attaches to the last op whose operands carry it.

Valid loop orders are the topological orders of the precedence graph:
for every stored view, a non-dense storage level must come after every
level above it (all-dense prefixes are unconstrained), and an inlined
producer contributes the same constraints through its declared result
nesting.  A cycle means no single storage layout serves every use; it is
broken by scheduling one input view as a permuted copy, materialized by
the host before the region runs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import UnsatisfiableOrder, UnsupportedSchedule
from .frontend.program import NormExpr, ValidatedProgram
from .tensors import BLOCKED, DENSE

_VAR_KEY = re.compile(r"([a-zA-Z_]+)(\d*)")


def var_key(name: str):
    m = _VAR_KEY.fullmatch(name)
    if not m:
        return (name, -1)
    return (m.group(1), int(m.group(2) or -1))


@dataclass(frozen=True)
class View:
    tensor: str
    vars: tuple[str, ...]  # per storage level, outer to inner
    formats: tuple[str, ...]  # level kinds per storage level
    maps: tuple = ()  # pointwise chain on this operand's values


@dataclass(frozen=True)
class Operand:
    kind: str  # 'view' | 'op'
    index: int
    maps: tuple = ()


@dataclass
class OpIR:
    kind: str  # 'mul' | 'div' | 'add' | 'sub' | 'one'
    lhs: Operand
    rhs: Operand | None
    name: str
    reduces: tuple[str, ...] = ()
    reduce_kind: str = "sum"
    maps: tuple = ()
    # filled by planning:
    own_vars: tuple[str, ...] = ()
    extra_vars: tuple[str, ...] = ()
    result_vars: tuple[str, ...] = ()


@dataclass
class RegionIR:
    index: int
    extents: dict[str, int]
    views: list[View] = field(default_factory=list)
    ops: list[OpIR] = field(default_factory=list)
    outputs: list[tuple[int, str]] = field(default_factory=list)  # (op, tensor)
    edges: set = field(default_factory=set)
    name_map: dict = field(default_factory=dict)  # source name -> region vars
    copies: dict = field(default_factory=dict)  # view index -> True
    view_density: dict = field(default_factory=dict)  # view index -> rho

    def operand_vars(self, operand: Operand) -> tuple[str, ...]:
        if operand.kind == "view":
            seen = []
            for v in self.views[operand.index].vars:
                if v not in seen:
                    seen.append(v)
            return tuple(seen)
        return self.ops[operand.index].result_vars


# --- elaboration ----------------------------------------------------------


class _Elaborator:
    def __init__(self, vp: ValidatedProgram, expr_ids: list[int]):
        self.vp = vp
        self.in_region = {
            vp.norm[k].lhs.tensor: vp.norm[k] for k in expr_ids
        }
        self.ir = RegionIR(index=-1, extents={})
        self.counter = 0
        self._view_cache: dict = {}

    def fresh(self, original: str) -> str:
        u = f"u{self.counter}"
        self.counter += 1
        self.ir.name_map.setdefault(original, set()).add(u)
        return u

    def bind(self, var: str):
        self.ir.name_map.setdefault(var, set()).add(var)
        if var not in self.ir.extents:
            self.ir.extents[var] = self.vp.var_extents[var]

    def view_of(self, access, subst, maps=()) -> Operand:
        decl = self.vp.decl(access.tensor)
        logical = tuple(subst.get(v, v) for v in access.indices)
        if len(set(logical)) != len(logical):
            raise UnsupportedSchedule(
                f"repeated index in access {access.tensor}{logical}"
            )
        vars_storage = tuple(logical[m] for m in decl.mode_order)
        formats = tuple(decl.formats[m].kind for m in decl.mode_order)
        key = (access.tensor, vars_storage, formats)
        if key in self._view_cache:
            idx = self._view_cache[key]
        else:
            idx = len(self.ir.views)
            self.ir.views.append(View(access.tensor, vars_storage, formats))
            self._view_cache[key] = idx
        return Operand("view", idx, maps)

    def result_view_edges(self, expr: NormExpr, subst):
        """Precedence edges from an inlined producer's declared nesting."""
        decl = self.vp.decl(expr.lhs.tensor)
        logical = tuple(subst.get(v, v) for v in expr.lhs.indices)
        svars = tuple(logical[m] for m in decl.mode_order)
        formats = tuple(decl.formats[m].kind for m in decl.mode_order)
        for t in range(len(svars)):
            if formats[t] != DENSE:
                for s in range(t):
                    if svars[s] != svars[t]:
                        self.ir.edges.add((svars[s], svars[t]))

    def add_op(self, op: OpIR) -> int:
        self.ir.ops.append(op)
        return len(self.ir.ops) - 1

    def operand_var_set(self, operand: Operand) -> set:
        """Free vars of an operand while the region is still being built.

        Op operands from inlined producers are complete (their reduces are
        assigned), so their free vars are subtree vars minus reductions.
        """
        if operand.kind == "view":
            return set(self.ir.views[operand.index].vars)
        op = self.ir.ops[operand.index]
        s = self.operand_var_set(op.lhs)
        if op.rhs is not None:
            s |= self.operand_var_set(op.rhs)
        return s - set(op.reduces)

    def elaborate_expr(self, expr: NormExpr, subst: dict) -> int:
        """Returns the index of the op producing this expression's value."""
        term_ops = []
        for term in expr.terms:
            red_map = {v: self.fresh(v) for v in term.reduction_vars}
            tsubst = dict(subst)
            tsubst.update(red_map)
            fixed = []
            for f in term.factors:
                if f.access.tensor in self.in_region:
                    prod = self.in_region[f.access.tensor]
                    inner = {}
                    for formal, actual in zip(prod.lhs.indices, f.access.indices):
                        inner[formal] = tsubst.get(actual, actual)
                        self.ir.name_map.setdefault(formal, set()).add(
                            inner[formal]
                        )
                    op_idx = self.elaborate_expr(prod, inner)
                    self.result_view_edges(prod, inner)
                    fixed.append(Operand("op", op_idx, f.maps))
                else:
                    fixed.append(self.view_of(f.access, tsubst, f.maps))
            for f in term.factors:
                for v in f.access.indices:
                    rv = tsubst.get(v, v)
                    self.bind_extent(rv, v)
            # binarize the product left-associated
            cur = fixed[0]
            chain: list[int] = []
            if len(fixed) == 1:
                idx = self.add_op(
                    OpIR("one", cur, None, self.synth_name())
                )
                chain.append(idx)
                cur = Operand("op", idx)
            else:
                for nxt in fixed[1:]:
                    idx = self.add_op(
                        OpIR("mul", cur, nxt, self.synth_name())
                    )
                    chain.append(idx)
                    cur = Operand("op", idx)
            # attach each reduction var to the last op in the chain using it
            per_op_red: dict[int, list] = {}
            for v in term.reduction_vars:
                rv = red_map[v]
                target = None
                for ci, idx in enumerate(chain):
                    op = self.ir.ops[idx]
                    # only this op's own factors count: the lhs chain link
                    # would smear every var over the whole chain
                    vars_here = set()
                    if ci == 0:
                        vars_here |= self.operand_var_set(op.lhs)
                    if op.rhs is not None:
                        vars_here |= self.operand_var_set(op.rhs)
                    if rv in vars_here:
                        target = idx
                if target is None:
                    raise UnsupportedSchedule(f"reduction index {v!r} unused")
                per_op_red.setdefault(target, []).append(rv)
            for idx, reds in per_op_red.items():
                self.ir.ops[idx].reduces = tuple(reds)
                self.ir.ops[idx].reduce_kind = term.reduce_op
            last = chain[-1]
            maps = []
            if term.scale * term.sign != 1.0 and not (
                term.sign == -1.0 and term.scale == 1.0 and len(expr.terms) > 1
            ):
                maps.append(("scale", term.scale * term.sign))
            for f in term.divisors:
                if f.access.tensor in self.in_region:
                    prod = self.in_region[f.access.tensor]
                    inner = {}
                    for formal, actual in zip(prod.lhs.indices, f.access.indices):
                        inner[formal] = subst.get(actual, actual)
                        self.ir.name_map.setdefault(formal, set()).add(
                            inner[formal]
                        )
                    div_idx = self.elaborate_expr(prod, inner)
                    self.result_view_edges(prod, inner)
                    divisor = Operand("op", div_idx, f.maps)
                else:
                    divisor = self.view_of(f.access, subst, f.maps)
                if maps:
                    self.ir.ops[last].maps = self.ir.ops[last].maps + tuple(maps)
                    maps = []
                last = self.add_op(
                    OpIR("div", Operand("op", last), divisor, self.synth_name())
                )
            if maps:
                self.ir.ops[last].maps = self.ir.ops[last].maps + tuple(maps)
            term_ops.append((term.sign, last))
        # combine terms with union adds
        sign0, acc = term_ops[0]
        for sign, idx in term_ops[1:]:
            kind = "sub" if sign == -1.0 else "add"
            acc_idx = self.add_op(
                OpIR(kind, Operand("op", acc), Operand("op", idx), self.synth_name())
            )
            acc = acc_idx
        if expr.maps:
            self.ir.ops[acc].maps = self.ir.ops[acc].maps + tuple(expr.maps)
        self.ir.ops[acc].name = expr.lhs.tensor
        for v in expr.lhs.indices:
            self.bind(subst.get(v, v))
        return acc

    def bind_extent(self, region_var: str, source_var: str):
        if region_var not in self.ir.extents:
            self.ir.extents[region_var] = self.vp.var_extents[source_var]

    def synth_name(self) -> str:
        return f"t{len(self.ir.ops)}"


def elaborate_region(vp: ValidatedProgram, region_index: int) -> RegionIR:
    region = vp.regions[region_index]
    exprs = [vp.norm[k] for k in region.exprs]
    el = _Elaborator(vp, region.exprs)
    later_reads = _later_reads(vp, region_index)
    produced_here = {e.lhs.tensor for e in exprs}

    for expr in exprs:
        consumed_inside = any(
            expr.lhs.tensor in _read_tensors(other)
            for other in exprs
            if other is not expr
        )
        escapes = (
            vp.role_of(expr.lhs.tensor) == "output"
            or expr.lhs.tensor in later_reads
        )
        if consumed_inside and not escapes:
            continue  # only materialized through its consumers
        for v in expr.lhs.indices:
            el.bind(v)
        op_idx = el.elaborate_expr(expr, {})
        el.ir.outputs.append((op_idx, expr.lhs.tensor))
    if not el.ir.outputs:
        raise UnsupportedSchedule("region produces nothing")

    ir = el.ir
    ir.index = region_index
    for view in ir.views:
        for t in range(len(view.vars)):
            if view.formats[t] not in (DENSE, BLOCKED):
                for s in range(t):
                    if view.vars[s] != view.vars[t]:
                        ir.edges.add((view.vars[s], view.vars[t]))
    _plan_structs(ir)
    _assign_densities(vp, ir)
    return ir


def _read_tensors(expr: NormExpr) -> set:
    out = set()
    for t in expr.terms:
        for f in t.factors:
            out.add(f.access.tensor)
        for f in t.divisors:
            out.add(f.access.tensor)
    return out


def _later_reads(vp: ValidatedProgram, region_index: int) -> set:
    reads = set()
    for r in vp.regions[region_index + 1 :]:
        for k in r.exprs:
            reads |= _read_tensors(vp.norm[k])
    return reads


def _plan_structs(ir: RegionIR):
    """Own/result vars per op, then the recompute fixpoint for extras."""
    for op in ir.ops:
        vars_here = set(ir.operand_vars(op.lhs))
        if op.rhs is not None:
            vars_here |= set(ir.operand_vars(op.rhs))
        op.own_vars = tuple(sorted(vars_here, key=var_key))
        op.result_vars = tuple(
            v for v in op.own_vars if v not in op.reduces
        )
    # consumers may iterate vars the producer does not know; a var outer to
    # the producer's deepest level forces the producer pipeline to re-run
    # per that var (its views gain repeat rows), which is what extra_vars
    # records.  Resolved per chosen order at table-build time; here we only
    # record the consumer vars each producer must be able to see.
    changed = True
    while changed:
        changed = False
        for op in ir.ops:
            full = set(op.own_vars) | set(op.extra_vars)
            for operand in (op.lhs, op.rhs):
                if operand is None or operand.kind != "op":
                    continue
                prod = ir.ops[operand.index]
                missing = full - set(prod.own_vars) - set(prod.extra_vars) - set(prod.reduces)
                if missing:
                    prod.extra_vars = tuple(
                        sorted(set(prod.extra_vars) | missing, key=var_key)
                    )
                    changed = True


def _assign_densities(vp: ValidatedProgram, ir: RegionIR):
    sched = vp.schedule
    for idx, view in enumerate(ir.views):
        rho = sched.densities.get(view.tensor)
        if rho is None:
            rho = 1.0
        ir.view_density[idx] = float(rho)


# --- precedence graph API -------------------------------------------------


def region_vars(ir: RegionIR) -> list[str]:
    return sorted(ir.extents, key=var_key)


def toposort_vars(ir: RegionIR, edges=None):
    """One valid order, or None if the precedence graph has a cycle."""
    edges = ir.edges if edges is None else edges
    vs = region_vars(ir)
    indeg = {v: 0 for v in vs}
    succ = {v: [] for v in vs}
    for a, b in sorted(edges):
        if a in indeg and b in indeg:
            succ[a].append(b)
            indeg[b] += 1
    ready = sorted((v for v in vs if indeg[v] == 0), key=var_key)
    out = []
    while ready:
        v = ready.pop(0)
        out.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
        ready.sort(key=var_key)
    return out if len(out) == len(vs) else None


def resolve_cycles(ir: RegionIR) -> RegionIR:
    """Break precedence cycles by scheduling permuted input copies."""
    while toposort_vars(ir) is None:
        producer = _producer_edges(ir)
        for idx, view in enumerate(ir.views):
            if idx in ir.copies:
                continue
            trial = set(producer)
            for jdx, other in enumerate(ir.views):
                if jdx == idx or jdx in ir.copies:
                    continue
                for t in range(len(other.vars)):
                    if other.formats[t] not in (DENSE, BLOCKED):
                        for s in range(t):
                            if other.vars[s] != other.vars[t]:
                                trial.add((other.vars[s], other.vars[t]))
            if toposort_vars(ir, trial) is not None:
                ir.copies[idx] = True
                ir.edges = trial
                break
        else:
            raise UnsupportedSchedule(
                "conflicting access orders among fused intermediates; "
                "split the region"
            )
    return ir


@dataclass(frozen=True)
class CopyPlan:
    view_index: int
    alias: str
    source: str
    storage_perm: tuple[int, ...]  # alias level d reads source level perm[d]


def plan_copies(ir: RegionIR, order) -> list[CopyPlan]:
    """Once an order is chosen, pin each copied view's storage to it."""
    pos = {v: i for i, v in enumerate(order)}
    plans = []
    for n, idx in enumerate(sorted(ir.copies)):
        view = ir.views[idx]
        perm = tuple(
            sorted(range(len(view.vars)), key=lambda d: pos[view.vars[d]])
        )
        if perm == tuple(range(len(view.vars))):
            continue  # already nested consistently; no copy needed
        alias = f"{view.tensor}__perm{n}"
        ir.views[idx] = View(
            alias,
            tuple(view.vars[d] for d in perm),
            tuple(view.formats[d] for d in perm),
            view.maps,
        )
        ir.view_density[idx] = ir.view_density.get(idx, 1.0)
        plans.append(CopyPlan(idx, alias, view.tensor, perm))
    return plans


def _producer_edges(ir: RegionIR) -> set:
    view_edges = set()
    for view in ir.views:
        for t in range(len(view.vars)):
            if view.formats[t] not in (DENSE, BLOCKED):
                for s in range(t):
                    if view.vars[s] != view.vars[t]:
                        view_edges.add((view.vars[s], view.vars[t]))
    return ir.edges - view_edges


def enumerate_orders(ir: RegionIR, cap: int = 10000, extra_edges=()):
    """Lexicographic topological orders up to cap.

    Returns (orders, count, capped): count is exact when capped is False,
    otherwise at least cap orders exist.
    """
    vs = region_vars(ir)
    edges = set(ir.edges) | set(extra_edges)
    pred = {v: set() for v in vs}
    for a, b in edges:
        if a in pred and b in pred and a != b:
            pred[b].add(a)
    orders: list[tuple[str, ...]] = []
    chosen: list[str] = []
    used: set = set()

    def dfs() -> bool:
        if len(orders) >= cap:
            return True
        if len(chosen) == len(vs):
            orders.append(tuple(chosen))
            return len(orders) >= cap
        for v in vs:
            if v in used or not pred[v] <= used:
                continue
            chosen.append(v)
            used.add(v)
            if dfs():
                chosen.pop()
                used.remove(v)
                return True
            chosen.pop()
            used.remove(v)
        return False

    capped = dfs()
    return orders, len(orders), capped


def check_order(ir: RegionIR, order: tuple[str, ...]):
    vs = set(region_vars(ir))
    if set(order) != vs or len(order) != len(vs):
        raise UnsatisfiableOrder(
            f"order {order} must mention each of {sorted(vs, key=var_key)} once"
        )
    pos = {v: i for i, v in enumerate(order)}
    for a, b in sorted(ir.edges):
        if a in pos and b in pos and pos[a] > pos[b]:
            raise UnsatisfiableOrder(
                f"order violates storage nesting: {a!r} must precede {b!r}"
            )


def map_user_order(ir: RegionIR, names) -> list[str]:
    """Translate source index names to region vars (reductions renamed)."""
    out = []
    for name in names:
        cands = ir.name_map.get(name)
        if not cands:
            raise UnsatisfiableOrder(f"unknown index {name!r} in order directive")
        if len(cands) > 1:
            raise UnsatisfiableOrder(
                f"index {name!r} is ambiguous in this region "
                f"(candidates {sorted(cands, key=var_key)}); rename indices"
            )
        out.append(next(iter(cands)))
    return out


def choose_order(ir: RegionIR, user_names=None, cap: int = 10000) -> tuple[str, ...]:
    """First valid order honoring the user's (possibly partial) precedence."""
    extra = []
    if user_names:
        mapped = map_user_order(ir, user_names)
        extra = [(a, b) for a, b in zip(mapped, mapped[1:])]
        if set(mapped) == set(region_vars(ir)):
            order = tuple(mapped)
            check_order(ir, order)
            return order
    edges = set(ir.edges) | set(extra)
    order = toposort_vars(ir, edges)
    if order is None:
        raise UnsatisfiableOrder(
            "requested precedence conflicts with storage nesting"
        )
    return tuple(order)
