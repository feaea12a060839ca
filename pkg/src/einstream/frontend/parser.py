"""Text format parser.

Example::

    index i = 4; index k = 3;
    tensor B(i, k): compressed(i) -> compressed(k) order(i, k) input;
    tensor c(k): compressed(k) order(k) input;
    x(i) = B(i, k) * c(k);
    order(i, k);

Assignments outside a ``fuse { ... }`` block each form their own region;
a fuse block groups its assignments into one region and may carry a local
``order(...)`` directive.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ParseError
from ..tensors import COMPRESSED, COORDINATE, DENSE, LevelSpec
from .program import (
    Access,
    Bin,
    Call,
    EinsumProgram,
    Expression,
    Literal,
    POINTWISE_FNS,
    RegionSpec,
    ScheduleSpec,
    TensorDecl,
)

_PUNCT = ("->", "(", ")", "{", "}", ",", ";", "=", "+", "-", "*", "/", ":", ".")
_LEVEL_KINDS = {"dense": DENSE, "compressed": COMPRESSED, "coordinate": COORDINATE}


@dataclass(frozen=True)
class _Tok:
    kind: str  # ident | number | punct | eof
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    line, col = 1, 1
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#" or src.startswith("//", i):
            while i < n and src[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(_Tok("ident", src[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            toks.append(_Tok("number", src[i:j], line, col))
            col += j - i
            i = j
            continue
        for p in _PUNCT:
            if src.startswith(p, i):
                toks.append(_Tok("punct", p, line, col))
                i += len(p)
                col += len(p)
                break
        else:
            raise ParseError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.pos = 0
        self.extents: dict[str, int] = {}
        self.decls: dict[str, TensorDecl] = {}
        self.expressions: list[Expression] = []
        self.regions: list[RegionSpec] = []
        self.schedule = ScheduleSpec()

    # -- token helpers --

    def peek(self, ahead: int = 0) -> _Tok:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> _Tok:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ParseError(msg, tok.line, tok.col)

    def expect(self, text: str) -> _Tok:
        t = self.next()
        if t.text != text:
            self.fail(f"expected {text!r}, found {t.text or 'end of input'!r}", t)
        return t

    def ident(self) -> str:
        t = self.next()
        if t.kind != "ident":
            self.fail(f"expected a name, found {t.text or 'end of input'!r}", t)
        return t.text

    def number(self) -> float:
        neg = False
        if self.peek().text == "-":
            self.next()
            neg = True
        t = self.next()
        if t.kind != "number":
            self.fail(f"expected a number, found {t.text or 'end of input'!r}", t)
        v = float(t.text)
        return -v if neg else v

    def integer(self) -> int:
        v = self.number()
        if v != int(v):
            self.fail("expected an integer")
        return int(v)

    def ident_list(self) -> tuple[str, ...]:
        self.expect("(")
        names = [self.ident()]
        while self.peek().text == ",":
            self.next()
            names.append(self.ident())
        self.expect(")")
        return tuple(names)

    # -- grammar --

    def parse(self) -> EinsumProgram:
        while self.peek().kind != "eof":
            self.item()
        return EinsumProgram(
            self.extents, self.decls, self.expressions, self.regions, self.schedule
        )

    def item(self):
        t = self.peek()
        if t.text == "index":
            self.index_decl()
        elif t.text == "tensor":
            self.tensor_decl()
        elif t.text == "fuse":
            self.fuse_block()
        elif t.text in ("parallelize", "block", "density", "rate", "order_cap"):
            self.directive()
        elif t.text == "order" and self.peek(1).text == "(":
            self.next()
            self.schedule.default_order = self.ident_list()
            self.expect(";")
        elif t.kind == "ident":
            k = len(self.expressions)
            self.assignment()
            self.regions.append(RegionSpec([k], fused=False))
        else:
            self.fail(f"unexpected {t.text!r}")

    def index_decl(self):
        self.expect("index")
        name = self.ident()
        self.expect("=")
        size = self.integer()
        if size <= 0:
            self.fail(f"extent of {name!r} must be positive")
        self.expect(";")
        if name in self.extents and self.extents[name] != size:
            self.fail(f"index {name!r} redeclared with a different extent")
        self.extents[name] = size

    def tensor_decl(self):
        tok = self.expect("tensor")
        name = self.ident()
        dims = self.ident_list()
        self.expect(":")
        by_dim: dict[str, LevelSpec] = {}
        while True:
            kind_tok = self.next()
            if kind_tok.text not in _LEVEL_KINDS:
                self.fail(f"unknown level kind {kind_tok.text!r}", kind_tok)
            (dim,) = self.ident_list()
            if dim not in dims:
                self.fail(f"{dim!r} is not a dimension of {name}", kind_tok)
            if dim in by_dim:
                self.fail(f"dimension {dim!r} given two formats", kind_tok)
            by_dim[dim] = LevelSpec(_LEVEL_KINDS[kind_tok.text])
            if self.peek().text != "->":
                break
            self.next()
        missing = [d for d in dims if d not in by_dim]
        if missing:
            self.fail(f"tensor {name}: no format for {missing[0]!r}", tok)
        self.expect("order")
        order_names = self.ident_list()
        if sorted(order_names) != sorted(dims):
            self.fail(f"order(...) of {name} must mention each dimension once", tok)
        role = None
        if self.peek().text in ("input", "output"):
            role = self.next().text
        self.expect(";")
        if name in self.decls:
            self.fail(f"tensor {name} declared twice", tok)
        formats = tuple(by_dim[d] for d in dims)
        mode_order = tuple(dims.index(d) for d in order_names)
        self.decls[name] = TensorDecl(name, dims, formats, mode_order, role)

    def fuse_block(self):
        self.expect("fuse")
        self.expect("{")
        region = RegionSpec(fused=True)
        while self.peek().text != "}":
            if self.peek().text == "order" and self.peek(1).text == "(":
                self.next()
                region.order = self.ident_list()
                self.expect(";")
            else:
                region.exprs.append(len(self.expressions))
                self.assignment()
        self.expect("}")
        if not region.exprs:
            self.fail("empty fuse block")
        self.regions.append(region)

    def directive(self):
        name = self.next().text
        self.expect("(")
        if name == "parallelize":
            var = self.ident()
            self.expect(",")
            factor = self.integer()
            if factor < 1:
                self.fail("parallelize factor must be >= 1")
            self.schedule.parallelize.append((var, factor))
        elif name == "block":
            b1 = self.integer()
            self.expect(",")
            b2 = self.integer()
            if b1 < 1 or b2 < 1:
                self.fail("block extents must be >= 1")
            self.schedule.block = (b1, b2)
        elif name == "density":
            tensor = self.ident()
            self.expect(",")
            self.schedule.densities[tensor] = self.number()
        elif name == "rate":
            t1 = self.ident()
            self.expect(".")
            d1 = self.ident()
            self.expect(",")
            t2 = self.ident()
            self.expect(".")
            d2 = self.ident()
            self.expect(",")
            self.schedule.rates[(t1, d1, t2, d2)] = self.number()
        elif name == "order_cap":
            self.schedule.order_cap = self.integer()
        self.expect(")")
        self.expect(";")

    def assignment(self):
        lhs = self.access()
        self.expect("=")
        body = self.add_expr()
        self.expect(";")
        self.expressions.append(Expression(lhs, body))

    def access(self) -> Access:
        name = self.ident()
        return Access(name, self.ident_list())

    def add_expr(self):
        node = self.mul_expr()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            node = Bin(op, node, self.mul_expr())
        return node

    def mul_expr(self):
        node = self.atom()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            node = Bin(op, node, self.atom())
        return node

    def atom(self):
        t = self.peek()
        if t.text == "(":
            self.next()
            node = self.add_expr()
            self.expect(")")
            return node
        if t.kind == "number" or (t.text == "-" and self.peek(1).kind == "number"):
            return Literal(self.number())
        if t.kind == "ident" and self.peek(1).text == "(":
            if t.text == "scale":
                self.next()
                self.expect("(")
                c = Literal(self.number())
                self.expect(",")
                arg = self.add_expr()
                self.expect(")")
                return Call("scale", (c, arg))
            if t.text in POINTWISE_FNS or t.text == "max":
                fn = self.next().text
                self.expect("(")
                arg = self.add_expr()
                self.expect(")")
                return Call(fn, (arg,))
            return self.access()
        self.fail(f"unexpected {t.text or 'end of input'!r}")


def parse_program(src: str) -> EinsumProgram:
    return _Parser(src).parse()
