"""Program model: declarations, einsum expressions, schedules, validation.

An expression is an assignment ``T(i,j) = body`` where the body combines
tensor accesses with ``* / + -`` and pointwise wrappers (relu, exp, gelu,
scale(c, .), max(.)).  Indices present in the body but not on the left-hand
side are reduction indices; each additive term reduces over its own ones.

Pointwise ops use stored-entry semantics: they apply to stored (nonzero)
values and map the zero fill to zero, so results do not depend on whether an
intermediate was materialized or streamed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from ..errors import ArityMismatch, FrontendError, NonSSA, UnknownTensor
from ..tensors import COMPRESSED, LevelSpec

POINTWISE_FNS = ("relu", "exp", "gelu", "scale")
REDUCE_FNS = ("max",)


# --- body AST -------------------------------------------------------------


@dataclass(frozen=True)
class Access:
    tensor: str
    indices: tuple[str, ...]

    def __str__(self):
        return f"{self.tensor}({', '.join(self.indices)})"


@dataclass(frozen=True)
class Literal:
    value: float

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple  # Literal first for scale

    def __str__(self):
        return f"{self.fn}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Bin:
    op: str  # one of * / + -
    lhs: object
    rhs: object

    def __str__(self):
        return f"{self.lhs} {self.op} {self.rhs}"


@dataclass(frozen=True)
class Expression:
    lhs: Access
    body: object

    def __str__(self):
        return f"{self.lhs} = {self.body}"


# --- declarations and schedule -------------------------------------------


@dataclass(frozen=True)
class TensorDecl:
    name: str
    dims: tuple[str, ...]  # formal mode names, bound to index extents
    formats: tuple[LevelSpec, ...]
    mode_order: tuple[int, ...]
    role: str | None = None  # input | output | None (inferred)


@dataclass
class RegionSpec:
    """One fusion region: expression indices plus its local directives."""

    exprs: list[int] = field(default_factory=list)
    order: tuple[str, ...] | None = None
    fused: bool = True  # False for singleton regions outside fuse blocks


@dataclass
class ScheduleSpec:
    parallelize: list[tuple[str, int]] = field(default_factory=list)
    block: tuple[int, int] | None = None
    densities: dict[str, float] = field(default_factory=dict)
    rates: dict[tuple[str, str, str, str], float] = field(default_factory=dict)
    order_cap: int = 10000
    default_order: tuple[str, ...] | None = None


@dataclass
class EinsumProgram:
    extents: dict[str, int]
    decls: dict[str, TensorDecl]
    expressions: list[Expression]
    regions: list[RegionSpec]
    schedule: ScheduleSpec


# --- normal form ----------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    access: Access
    maps: tuple = ()  # inner pointwise chain, innermost first


@dataclass(frozen=True)
class NormTerm:
    sign: float
    factors: tuple[Factor, ...]
    divisors: tuple[Factor, ...]
    scale: float
    reduce_op: str  # sum | max
    reduction_vars: tuple[str, ...]


@dataclass(frozen=True)
class NormExpr:
    lhs: Access
    terms: tuple[NormTerm, ...]
    maps: tuple = ()  # outer pointwise chain, innermost first


def apply_pointwise(fn, x: float) -> float:
    """Stored-entry pointwise semantics; zero maps to zero for every fn."""
    if x == 0.0:
        return 0.0
    if isinstance(fn, tuple):  # ('scale', c)
        return fn[1] * x
    if fn == "relu":
        return x if x > 0.0 else 0.0
    if fn == "exp":
        return math.exp(x)
    if fn == "gelu":
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
    raise FrontendError(f"unknown pointwise fn {fn!r}")


def _peel_outer(body):
    """Strip outer pointwise wrappers; returns (maps innermost-first, core)."""
    maps = []
    node = body
    while isinstance(node, Call) and node.fn in POINTWISE_FNS:
        if node.fn == "scale":
            c, inner = node.args
            maps.append(("scale", c.value))
            node = inner
        else:
            maps.append(node.fn)
            (node,) = node.args
    maps.reverse()
    return tuple(maps), node


def _additive_terms(node):
    if isinstance(node, Bin) and node.op in "+-":
        for sign, sub in _additive_terms(node.lhs):
            yield sign, sub
        for sign, sub in _additive_terms(node.rhs):
            yield (sign if node.op == "+" else -sign), sub
    else:
        yield 1.0, node


def _as_factor(node) -> tuple[Factor | None, float]:
    """A multiplicative atom: access with optional inner maps, or a scalar."""
    if isinstance(node, Literal):
        return None, float(node.value)
    maps = []
    while isinstance(node, Call) and node.fn in POINTWISE_FNS:
        if node.fn == "scale":
            c, node = node.args
            maps.append(("scale", c.value))
        else:
            fn = node.fn
            (node,) = node.args
            maps.append(fn)
    if not isinstance(node, Access):
        raise FrontendError(f"cannot use {node} as a multiplicative factor")
    maps.reverse()
    return Factor(node, tuple(maps)), 1.0


def _mul_chain(node):
    """Flatten a * / chain into (numerator atoms, denominator atoms)."""
    if isinstance(node, Bin) and node.op == "*":
        ln, ld = _mul_chain(node.lhs)
        rn, rd = _mul_chain(node.rhs)
        return ln + rn, ld + rd
    if isinstance(node, Bin) and node.op == "/":
        ln, ld = _mul_chain(node.lhs)
        rn, rd = _mul_chain(node.rhs)
        return ln, ld + rn + rd
    return [node], []


def normalize(expr: Expression) -> NormExpr:
    out_vars = set(expr.lhs.indices)
    maps, core = _peel_outer(expr.body)
    terms = []
    for sign, tnode in _additive_terms(core):
        reduce_op = "sum"
        if isinstance(tnode, Call) and tnode.fn == "max":
            reduce_op = "max"
            (tnode,) = tnode.args
        nums, dens = _mul_chain(tnode)
        factors, divisors = [], []
        scale = 1.0
        for atom in nums:
            f, c = _as_factor(atom)
            scale *= c
            if f is not None:
                factors.append(f)
        for atom in dens:
            f, c = _as_factor(atom)
            if f is None:
                if c == 0.0:
                    raise FrontendError("division by literal zero")
                scale /= c
            else:
                divisors.append(f)
        if not factors:
            raise FrontendError(f"term in {expr.lhs} has no tensor factor")
        seen: list[str] = []
        for f in factors:
            for v in f.access.indices:
                if v not in out_vars and v not in seen:
                    seen.append(v)
        for f in divisors:
            for v in f.access.indices:
                if v not in out_vars:
                    raise FrontendError(
                        f"divisor {f.access} carries reduction index {v!r}"
                    )
        if reduce_op == "max" and not seen:
            raise FrontendError("max(...) wrapper without a reduction index")
        terms.append(
            NormTerm(sign, tuple(factors), tuple(divisors), scale, reduce_op, tuple(seen))
        )
    if any(t.reduce_op == "max" for t in terms) and len(terms) > 1:
        raise FrontendError("max reduction cannot be combined additively")
    for v in out_vars:
        if not any(v in f.access.indices for t in terms for f in t.factors):
            raise FrontendError(
                f"output index {v!r} of {expr.lhs} appears in no factor"
            )
    return NormExpr(expr.lhs, tuple(terms), maps)


# --- validation -----------------------------------------------------------


@dataclass
class ValidatedProgram:
    program: EinsumProgram
    norm: list[NormExpr]
    var_extents: dict[str, int]  # every index var used anywhere

    @property
    def decls(self):
        return self.program.decls

    @property
    def regions(self):
        return self.program.regions

    @property
    def schedule(self):
        return self.program.schedule

    def decl(self, name: str) -> TensorDecl:
        return self.program.decls[name]

    def shape_of(self, name: str) -> tuple[int, ...]:
        return tuple(self.var_extents[d] for d in self.program.decls[name].dims)

    def role_of(self, name: str) -> str:
        return self.program.decls[name].role or "input"


def _accesses(node):
    if isinstance(node, Access):
        yield node
    elif isinstance(node, Bin):
        yield from _accesses(node.lhs)
        yield from _accesses(node.rhs)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _accesses(a)


def validate_program(program: EinsumProgram) -> ValidatedProgram:
    """Check SSA, arity, extent consistency; infer roles and missing decls."""
    decls = dict(program.decls)
    extents = dict(program.extents)
    for d in decls.values():
        for dim in d.dims:
            if dim not in extents:
                raise FrontendError(
                    f"tensor {d.name}: dimension {dim!r} has no declared extent"
                )

    written: dict[str, int] = {}
    read_after: dict[str, bool] = {}
    var_extents: dict[str, int] = {}

    def bind(var: str, extent: int, where: str):
        if var in var_extents and var_extents[var] != extent:
            raise FrontendError(
                f"index {var!r} used with extents {var_extents[var]} and {extent} ({where})"
            )
        var_extents[var] = extent

    for k, ex in enumerate(program.expressions):
        for acc in _accesses(ex.body):
            if acc.tensor not in decls and acc.tensor not in written:
                raise UnknownTensor(f"{acc.tensor} read before any definition")
            if acc.tensor in written:
                read_after[acc.tensor] = True
            decl = decls[acc.tensor]
            if len(acc.indices) != len(decl.dims):
                raise ArityMismatch(
                    f"{acc} has {len(acc.indices)} indices, {acc.tensor} is rank {len(decl.dims)}"
                )
            for var, dim in zip(acc.indices, decl.dims):
                bind(var, extents[dim], str(acc))
        name = ex.lhs.tensor
        if name in written:
            raise NonSSA(f"{name} assigned more than once")
        if name in decls and decls[name].role == "input":
            raise NonSSA(f"{name} is declared input but assigned")
        if name not in decls:
            dims = []
            for var in ex.lhs.indices:
                if var not in var_extents:
                    raise FrontendError(
                        f"cannot infer extent of output index {var!r} in {ex.lhs}"
                    )
                dim = var
                if dim not in extents:
                    extents[dim] = var_extents[var]
                dims.append(dim)
            decls[name] = TensorDecl(
                name,
                tuple(dims),
                tuple(LevelSpec(COMPRESSED) for _ in dims),
                tuple(range(len(dims))),
                role=None,
            )
        decl = decls[name]
        if len(ex.lhs.indices) != len(decl.dims):
            raise ArityMismatch(f"{ex.lhs}: {name} is rank {len(decl.dims)}")
        for var, dim in zip(ex.lhs.indices, decl.dims):
            bind(var, extents[dim], str(ex.lhs))
        written[name] = k
        read_after.setdefault(name, False)

    # roles: written + read later -> intermediate unless declared output;
    # written only -> output; everything else -> input.
    for name, d in list(decls.items()):
        if name in written:
            role = d.role
            if role == "input":
                raise NonSSA(f"{name} is declared input but assigned")
            if role is None:
                role = "intermediate" if read_after.get(name) else "output"
            decls[name] = replace(d, role=role)
        else:
            if d.role == "output":
                raise FrontendError(f"declared output {name} is never assigned")
            decls[name] = replace(d, role="input")

    norm = [normalize(ex) for ex in program.expressions]

    covered = [i for r in program.regions for i in r.exprs]
    if sorted(covered) != list(range(len(program.expressions))):
        raise FrontendError("regions must cover every expression exactly once")

    fixed = replace_program(program, decls=decls, extents=extents)
    return ValidatedProgram(fixed, norm, var_extents)


def replace_program(program: EinsumProgram, **kw) -> EinsumProgram:
    data = dict(
        extents=program.extents,
        decls=program.decls,
        expressions=program.expressions,
        regions=program.regions,
        schedule=program.schedule,
    )
    data.update(kw)
    return EinsumProgram(**data)
