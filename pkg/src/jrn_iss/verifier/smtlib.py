"""SMT-LIB2 export of falsification queries, and a reader for the same subset.

The script declares one real per variable and asserts the box bounds and
every feasibility constraint (including the exclusion ball). It then asserts
the disjunction of the violations. A delta-complete solver answering
``unsat`` agrees with an UNSAT answer from :func:`~jrn_iss.verifier.bnb.falsify`.

Nodes used more than once become ``define-fun`` terms. Squares are written
``(^ a 2)`` and norms ``(sqrt (+ (^ a 2) ...))``, and constants are plain
decimals (negative ones as ``(- c)``). The reader parses the output of
:func:`export_smtlib` back into the identical expression DAG.
"""

from __future__ import annotations

import math
import re
from decimal import Decimal

from ..errors import ModelFormatError
from .bnb import Box, FalsifyQuery
from .expr import Expr, const, topological

LOGIC = "QF_NRA"
_INFIX = {"add": "+", "sub": "-", "mul": "*", "neg": "-"}
_FUNC = {"tanh": "tanh", "sin": "sin", "cos": "cos", "abs": "abs"}


def decimal_text(x: float) -> str:
    """Shortest exact decimal for a nonnegative float, without exponent."""
    text = format(Decimal(repr(float(x))), "f")
    return text if "." in text else text + ".0"


def _const_text(x: float) -> str:
    if x < 0 or math.copysign(1.0, x) < 0:
        return f"(- {decimal_text(-x)})"
    return decimal_text(x)


class _Writer:
    def __init__(self, roots):
        self.roots = roots
        self.order = topological(roots)
        uses = {}
        for node in self.order:
            for child in node.args:
                uses[id(child)] = uses.get(id(child), 0) + 1
        self.names = {}
        self.defs = []
        for node in self.order:
            if node.op == "var":
                self.names[id(node)] = node.value[1]
            elif node.op != "const" and uses.get(id(node), 0) > 1:
                text = self.term(node)
                name = f"_t{len(self.defs)}"
                self.defs.append(f"(define-fun {name} () Real {text})")
                self.names[id(node)] = name

    def ref(self, node):
        if node.op == "const":
            return _const_text(node.value)
        name = self.names.get(id(node))
        return name if name is not None else self.term(node)

    def term(self, node):
        op = node.op
        if op == "var":
            return node.value[1]
        if op == "const":
            return _const_text(node.value)
        if op == "sq":
            return f"(^ {self.ref(node.args[0])} 2)"
        if op == "norm":
            squares = [f"(^ {self.ref(a)} 2)" for a in node.args]
            inner = squares[0] if len(squares) == 1 else f"(+ {' '.join(squares)})"
            return f"(sqrt {inner})"
        head = _INFIX.get(op) or _FUNC[op]
        return f"({head} {' '.join(self.ref(a) for a in node.args)})"


def export_smtlib(query: FalsifyQuery) -> str:
    names = list(query.violations)
    constraints = query.all_constraints()
    roots = [query.violations[n] for n in names] + constraints
    writer = _Writer(roots)
    lines = [f"(set-logic {LOGIC})",
             f"(set-info :precision {decimal_text(query.delta)})"]
    lines += [f"(declare-fun {v} () Real)" for v in query.variables]
    lines += writer.defs
    for k, v in enumerate(query.variables):
        lo, hi = _const_text(query.region.lower[k]), _const_text(query.region.upper[k])
        lines.append(f"(assert (and (<= {lo} {v}) (<= {v} {hi})))")
    for k, c in enumerate(constraints):
        lines.append(f"(assert (! (<= {writer.ref(c)} 0.0) :named c{k}))")
    parts = [f"(! (> {writer.ref(query.violations[n])} 0.0) :named {n})" for n in names]
    lines.append(f"(assert (or {' '.join(parts)}))")
    lines += ["(check-sat)", "(exit)"]
    return "\n".join(lines) + "\n"


# -- reader ---------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(;[^\n]*)|(\()|(\))|(\"[^\"]*\")|([^\s()\";]+))")


def _tokens(text):
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise ModelFormatError(f"cannot tokenize SMT-LIB text at offset {pos}")
            return
        pos = m.end()
        if m.group(1):
            continue
        yield m.group(2) or m.group(3) or m.group(4) or m.group(5)


def _sexprs(text):
    stack, out = [], []
    for tok in _tokens(text):
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if not stack:
                raise ModelFormatError("unbalanced ')' in SMT-LIB text")
            done = stack.pop()
            (stack[-1] if stack else out).append(done)
        else:
            (stack[-1] if stack else out).append(tok)
    if stack:
        raise ModelFormatError("unbalanced '(' in SMT-LIB text")
    return out


def _is_decimal(tok):
    return isinstance(tok, str) and re.fullmatch(r"[0-9]+(\.[0-9]+)?", tok) is not None


class _Reader:
    def __init__(self):
        self.env = {}
        self.variables = []

    def real(self, s):
        if _is_decimal(s):
            return float(s)
        if isinstance(s, list) and len(s) == 2 and s[0] == "-" and _is_decimal(s[1]):
            return -float(s[1])
        raise ModelFormatError(f"expected a numeric constant, got {s!r}")

    def expr(self, s):
        if isinstance(s, str):
            if _is_decimal(s):
                return const(float(s))
            if s in self.env:
                return self.env[s]
            raise ModelFormatError(f"unknown symbol {s!r}")
        if not s:
            raise ModelFormatError("empty term")
        head, args = s[0], s[1:]
        if head == "-" and len(args) == 1 and _is_decimal(args[0]):
            return const(-float(args[0]))
        if head == "^":
            if len(args) != 2 or args[1] != "2":
                raise ModelFormatError("only (^ a 2) is supported")
            return Expr("sq", (self.expr(args[0]),))
        if head == "sqrt":
            if len(args) != 1:
                raise ModelFormatError("sqrt takes one argument")
            inner = args[0]
            squares = inner[1:] if isinstance(inner, list) and inner[:1] == ["+"] else [inner]
            bases = []
            for t in squares:
                if not (isinstance(t, list) and len(t) == 3 and t[0] == "^" and t[2] == "2"):
                    raise ModelFormatError("sqrt must wrap a sum of squares")
                bases.append(self.expr(t[1]))
            return Expr("norm", bases)
        parsed = [self.expr(a) for a in args]
        if head == "+":
            return Expr("add", parsed)
        if head == "*":
            return Expr("mul", parsed)
        if head == "-":
            return Expr("neg", parsed) if len(parsed) == 1 else Expr("sub", parsed)
        if head in _FUNC.values():
            return Expr(head, parsed)
        raise ModelFormatError(f"unsupported operator {head!r}")


def _named(s, relation):
    if not (isinstance(s, list) and len(s) == 4 and s[0] == "!" and s[2] == ":named"):
        raise ModelFormatError(f"expected a named {relation} term")
    body = s[1]
    if not (isinstance(body, list) and len(body) == 3 and body[0] == relation
            and body[2] == "0.0"):
        raise ModelFormatError(f"expected ({relation} term 0.0)")
    return s[3], body[1]


def parse_smtlib(text: str) -> FalsifyQuery:
    """Rebuild a :class:`FalsifyQuery` from :func:`export_smtlib` output.

    The exclusion ball comes back as an ordinary constraint, so
    ``all_constraints()`` of the result matches the original.
    """
    reader = _Reader()
    bounds, constraints, violations = {}, [], {}
    delta = None
    for cmd in _sexprs(text):
        if not isinstance(cmd, list) or not cmd:
            raise ModelFormatError(f"unexpected top-level token {cmd!r}")
        head = cmd[0]
        if head in ("set-logic", "check-sat", "exit"):
            continue
        if head == "set-info":
            if cmd[1:2] == [":precision"]:
                delta = float(cmd[2])
            continue
        if head == "declare-fun":
            name = cmd[1]
            reader.env[name] = Expr("var", value=(len(reader.variables), name))
            reader.variables.append(name)
        elif head == "define-fun":
            reader.env[cmd[1]] = reader.expr(cmd[4])
        elif head == "assert":
            body = cmd[1]
            if body[0] == "and":
                lo_term, hi_term = body[1], body[2]
                name = lo_term[2]
                bounds[name] = (reader.real(lo_term[1]), reader.real(hi_term[2]))
            elif body[0] == "or":
                for part in body[1:]:
                    name, term = _named(part, ">")
                    violations[name] = reader.expr(term)
            else:
                _, term = _named(body, "<=")
                constraints.append(reader.expr(term))
        else:
            raise ModelFormatError(f"unsupported command {head!r}")
    missing = [v for v in reader.variables if v not in bounds]
    if missing:
        raise ModelFormatError(f"no bounds for {missing}")
    region = Box([bounds[v][0] for v in reader.variables],
                 [bounds[v][1] for v in reader.variables])
    return FalsifyQuery(variables=reader.variables, region=region, violations=violations,
                        constraints=constraints, delta=delta if delta is not None else 1e-4)
