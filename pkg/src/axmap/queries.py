"""Query DSL, formula AST, and quantitative robustness over finite traces.

A trace is the per-batch accuracy difference (exact minus approximate, in
percentage points) of one inference run, together with the run's scalar
energy gain and average accuracy drop. Queries constrain traces through
``<=`` atoms over three signals (``acc_diff``, ``avg_acc_drop``,
``energy_gain``), conjunction, one optional implication, ``always``, and a
relaxed ``always[X%]`` that only requires the condition on at least X% of
the batches. Exactly one free parameter is allowed and must appear as
``always (energy_gain <= <param>)`` on the left of the implication; mining
searches for its largest satisfying value.

Grammar::

    query       := "param" IDENT ";" "assert" formula ";"
    formula     := implication
    implication := conj ("->" conj)?
    conj        := unit ("and" unit)*
    unit        := "always" ("[" NUMBER "%" "]")? "(" formula ")"
                 | "(" formula ")" | atom
    atom        := ("acc_diff" | "avg_acc_drop" | "energy_gain") "<="
                   (NUMBER | IDENT)

Robustness semantics: an atom ``x <= c`` has margin ``c - x``; conjunction
takes the pointwise minimum; implication ``A -> B`` is ``max(-rho(A),
rho(B))``; ``always`` is the minimum over batches; ``always[X%]`` is the
k-th largest pointwise margin with ``k = ceil(X/100 * N)``. A robustness of
exactly zero counts as satisfied.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, QueryError, ValidationError

SIGNALS = ("acc_diff", "avg_acc_drop", "energy_gain")
_KEYWORDS = ("param", "assert", "always", "and")


# ---------------------------------------------------------------------------
# trace


@dataclass(frozen=True)
class Trace:
    """Finite per-batch accuracy-difference signal plus run scalars.

    ``acc_diff`` entries are percentage points in [-100, 100];
    ``avg_acc_drop`` must equal their mean (it is recomputed and checked).
    """

    acc_diff: np.ndarray
    energy_gain: float
    avg_acc_drop: float

    def __post_init__(self):
        diff = np.array(self.acc_diff, dtype=np.float64)
        if diff.ndim != 1 or diff.size < 1:
            raise ValidationError("trace needs at least one batch")
        if np.any(np.abs(diff) > 100 + 1e-9):
            raise ValidationError("acc_diff entries must lie in [-100, 100]")
        if not 0 <= self.energy_gain < 1:
            raise ValidationError(f"energy_gain must be in [0, 1), got {self.energy_gain}")
        if abs(self.avg_acc_drop - diff.mean()) > 1e-6:
            raise ValidationError(
                f"avg_acc_drop {self.avg_acc_drop} does not match the trace mean {diff.mean()}"
            )
        diff.setflags(write=False)
        object.__setattr__(self, "acc_diff", diff)

    def __len__(self) -> int:
        return int(self.acc_diff.size)

    @classmethod
    def from_accuracies(cls, acc_exact_pct: np.ndarray, acc_approx_pct: np.ndarray,
                        energy_gain: float) -> "Trace":
        diff = np.asarray(acc_exact_pct, dtype=np.float64) - \
            np.asarray(acc_approx_pct, dtype=np.float64)
        return cls(acc_diff=diff, energy_gain=energy_gain,
                   avg_acc_drop=float(diff.mean()))


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Atom:
    """``signal <= bound``; ``bound=None`` marks the free parameter."""

    signal: str
    bound: float | None


@dataclass(frozen=True)
class Always:
    """``always`` over the whole trace; ``percent`` relaxes it to X% of batches."""

    child: "Node"
    percent: float | None = None


@dataclass(frozen=True)
class And:
    children: tuple["Node", ...]


@dataclass(frozen=True)
class Implies:
    antecedent: "Node"
    consequent: "Node"


Node = Atom | Always | And | Implies


@dataclass(frozen=True)
class Query:
    """A parsed query: declared parameter name plus the asserted formula."""

    param: str
    formula: Node
    text: str = ""


def to_text(node: Node) -> str:
    """Render a formula back to query syntax (for logs and reports)."""
    if isinstance(node, Atom):
        bound = "<param>" if node.bound is None else repr(node.bound)
        return f"{node.signal} <= {bound}"
    if isinstance(node, Always):
        op = "always" if node.percent is None else f"always[{node.percent:g}%]"
        return f"{op} ({to_text(node.child)})"
    if isinstance(node, And):
        return " and ".join(to_text(c) for c in node.children)
    if isinstance(node, Implies):
        return f"{to_text(node.antecedent)} -> ({to_text(node.consequent)})"
    raise TypeError(f"not a formula node: {node!r}")


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"(?P<op><=|->|[;()\[\]%])"
    r"|(?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "op" | "number" | "ident" | "eof"
    value: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    n = len(text)
    while pos < n:
        ch = text[pos]
        if ch == "\n":
            line += 1
            line_start = pos + 1
            pos += 1
            continue
        if ch.isspace():
            pos += 1
            continue
        if ch == "#":  # comment to end of line
            while pos < n and text[pos] != "\n":
                pos += 1
            continue
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise QueryError(f"unexpected character {ch!r}", line, pos - line_start + 1)
        kind = match.lastgroup
        tokens.append(_Token(kind, match.group(), line, pos - line_start + 1))
        pos = match.end()
    tokens.append(_Token("eof", "", line, n - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, value: str) -> _Token:
        token = self.advance()
        if token.value != value:
            raise QueryError(f"expected {value!r}, found {token.value or 'end of input'!r}",
                             token.line, token.column)
        return token

    def expect_ident(self) -> _Token:
        token = self.advance()
        if token.kind != "ident":
            raise QueryError(f"expected identifier, found {token.value!r}",
                             token.line, token.column)
        return token

    # grammar rules -------------------------------------------------------

    def query(self) -> tuple[str, Node]:
        self.expect("param")
        param = self.expect_ident()
        if param.value in _KEYWORDS or param.value in SIGNALS:
            raise QueryError(f"{param.value!r} cannot be used as a parameter name",
                             param.line, param.column)
        self.expect(";")
        self.expect("assert")
        formula = self.formula(param.value)
        self.expect(";")
        tail = self.peek()
        if tail.kind != "eof":
            raise QueryError(f"trailing input {tail.value!r}", tail.line, tail.column)
        return param.value, formula

    def formula(self, param: str) -> Node:
        left = self.conj(param)
        if self.peek().value == "->":
            self.advance()
            right = self.conj(param)
            return Implies(left, right)
        return left

    def conj(self, param: str) -> Node:
        units = [self.unit(param)]
        while self.peek().value == "and":
            self.advance()
            units.append(self.unit(param))
        return units[0] if len(units) == 1 else And(tuple(units))

    def unit(self, param: str) -> Node:
        token = self.peek()
        if token.value == "always":
            self.advance()
            percent = None
            if self.peek().value == "[":
                self.advance()
                num = self.advance()
                if num.kind != "number":
                    raise QueryError(f"expected a percentage, found {num.value!r}",
                                     num.line, num.column)
                percent = float(num.value)
                self.expect("%")
                self.expect("]")
                if not 0 < percent <= 100:
                    raise QueryError(f"always[X%] needs X in (0, 100], got {percent:g}",
                                     num.line, num.column)
            self.expect("(")
            child = self.formula(param)
            self.expect(")")
            return Always(child, percent)
        if token.value == "(":
            self.advance()
            inner = self.formula(param)
            self.expect(")")
            return inner
        return self.atom(param)

    def atom(self, param: str) -> Node:
        token = self.advance()
        if token.kind != "ident" or token.value not in SIGNALS:
            raise QueryError(
                f"expected one of {', '.join(SIGNALS)}, found {token.value or 'end of input'!r}",
                token.line, token.column)
        self.expect("<=")
        bound = self.advance()
        if bound.kind == "number":
            return Atom(token.value, float(bound.value))
        if bound.kind == "ident":
            if bound.value != param:
                raise QueryError(f"unknown identifier {bound.value!r} "
                                 f"(declared parameter is {param!r})",
                                 bound.line, bound.column)
            return Atom(token.value, None)
        raise QueryError(f"expected a number or {param!r}, found {bound.value!r}",
                         bound.line, bound.column)


def _param_atoms(node: Node) -> list[Atom]:
    if isinstance(node, Atom):
        return [node] if node.bound is None else []
    if isinstance(node, Always):
        return _param_atoms(node.child)
    if isinstance(node, And):
        return [a for c in node.children for a in _param_atoms(c)]
    if isinstance(node, Implies):
        return _param_atoms(node.antecedent) + _param_atoms(node.consequent)
    raise TypeError(node)


def parse_query(text: str) -> Query:
    """Parse and semantically check a query.

    The declared parameter must occur exactly once, as the bound of
    ``always (energy_gain <= <param>)`` forming the implication antecedent.
    """
    param, formula = _Parser(text).query()
    occurrences = _param_atoms(formula)
    if len(occurrences) != 1:
        raise QueryError(
            f"parameter {param!r} must occur exactly once, found {len(occurrences)} uses")
    expected_antecedent = Always(Atom("energy_gain", None), None)
    if not isinstance(formula, Implies) or formula.antecedent != expected_antecedent:
        raise QueryError(
            f"parameter {param!r} is only allowed in the antecedent "
            f"'always (energy_gain <= {param})' of an implication")
    return Query(param=param, formula=formula, text=text)


def consequent(query: Query) -> Node:
    """The constraint side of the query (right of the implication)."""
    if not isinstance(query.formula, Implies):
        raise ValidationError("query has no implication")
    return query.formula.consequent


def conjuncts(node: Node) -> tuple[Node, ...]:
    """Top-level conjuncts of a formula (itself, if not a conjunction)."""
    return node.children if isinstance(node, And) else (node,)


# ---------------------------------------------------------------------------
# semantics


def _relaxed_index(percent: float, n: int) -> int:
    k = math.ceil(percent * n / 100.0)
    return min(max(k, 1), n)


def _signal(node: Atom, trace: Trace, theta: float | None) -> tuple[np.ndarray | float, float]:
    bound = node.bound
    if bound is None:
        if theta is None:
            raise ValidationError("formula has a free parameter but no theta was given")
        bound = float(theta)
    if node.signal == "acc_diff":
        return trace.acc_diff, bound
    if node.signal == "avg_acc_drop":
        return trace.avg_acc_drop, bound
    return trace.energy_gain, bound


def _rho(node: Node, trace: Trace, theta: float | None) -> np.ndarray:
    n = len(trace)
    if isinstance(node, Atom):
        value, bound = _signal(node, trace, theta)
        return np.broadcast_to(np.asarray(bound - value, dtype=np.float64), (n,))
    if isinstance(node, And):
        return np.min([_rho(c, trace, theta) for c in node.children], axis=0)
    if isinstance(node, Implies):
        return np.maximum(-_rho(node.antecedent, trace, theta),
                          _rho(node.consequent, trace, theta))
    if isinstance(node, Always):
        pointwise = _rho(node.child, trace, theta)
        if node.percent is None:
            value = pointwise.min()
        else:
            k = _relaxed_index(node.percent, n)
            value = np.partition(pointwise, n - k)[n - k]  # k-th largest
        return np.full(n, value)
    raise TypeError(node)


def _sat(node: Node, trace: Trace, theta: float | None) -> np.ndarray:
    n = len(trace)
    if isinstance(node, Atom):
        value, bound = _signal(node, trace, theta)
        return np.broadcast_to(np.asarray(value <= bound), (n,))
    if isinstance(node, And):
        return np.logical_and.reduce([_sat(c, trace, theta) for c in node.children])
    if isinstance(node, Implies):
        return np.logical_or(~_sat(node.antecedent, trace, theta),
                             _sat(node.consequent, trace, theta))
    if isinstance(node, Always):
        pointwise = _sat(node.child, trace, theta)
        if node.percent is None:
            value = bool(pointwise.all())
        else:
            value = int(pointwise.sum()) >= _relaxed_index(node.percent, n)
        return np.full(n, value)
    raise TypeError(node)


def robustness(phi: Query | Node, theta: float | None, trace: Trace) -> float:
    """Signed satisfaction margin; >= 0 means the formula holds."""
    node = phi.formula if isinstance(phi, Query) else phi
    return float(_rho(node, trace, theta)[0])


def satisfies(phi: Query | Node, theta: float | None, trace: Trace) -> bool:
    """Boolean semantics, evaluated directly rather than via robustness."""
    node = phi.formula if isinstance(phi, Query) else phi
    return bool(_sat(node, trace, theta)[0])


def consequent_robustness(query: Query, trace: Trace) -> float:
    """Robustness of everything right of the implication (theta-free)."""
    return robustness(consequent(query), None, trace)


# ---------------------------------------------------------------------------
# AXTR trace files


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_trace(path: str | Path, acc_exact_pct: np.ndarray, acc_approx_pct: np.ndarray,
                energy_gain: float) -> Trace:
    """Write an AXTR trace: a CSV plus a JSON sidecar with the run scalars."""
    path = Path(path)
    trace = Trace.from_accuracies(acc_exact_pct, acc_approx_pct, energy_gain)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "acc_exact", "acc_approx", "acc_diff"])
        for i, (exact, approx, diff) in enumerate(
                zip(acc_exact_pct, acc_approx_pct, trace.acc_diff)):
            writer.writerow([i, repr(float(exact)), repr(float(approx)), repr(float(diff))])
    _sidecar(path).write_text(
        json.dumps({"energy_gain": trace.energy_gain,
                    "avg_acc_drop": trace.avg_acc_drop}, sort_keys=True) + "\n",
        encoding="utf-8")
    return trace


def read_trace(path: str | Path) -> tuple[Trace, np.ndarray, np.ndarray]:
    """Read an AXTR trace; returns (trace, acc_exact_pct, acc_approx_pct)."""
    path = Path(path)
    sidecar = _sidecar(path)
    if not path.exists():
        raise ValidationError(f"trace file not found: {path}")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing sidecar {sidecar.name}")
    exact, approx, diffs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["batch", "acc_exact", "acc_approx", "acc_diff"]:
            raise FormatError(f"{path}: bad AXTR header {header}")
        try:
            for row in reader:
                if len(row) != 4:
                    raise FormatError(f"{path}: bad AXTR row {row}")
                exact.append(float(row[1]))
                approx.append(float(row[2]))
                diffs.append(float(row[3]))
        except ValueError as exc:
            raise FormatError(f"{path}: bad AXTR value: {exc}") from exc
    try:
        scalars = json.loads(sidecar.read_text(encoding="utf-8"))
        gain = float(scalars["energy_gain"])
        avg = float(scalars["avg_acc_drop"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{sidecar}: bad sidecar: {exc}") from exc
    exact_arr = np.array(exact)
    approx_arr = np.array(approx)
    diff_arr = np.array(diffs)
    if diff_arr.size and np.max(np.abs(exact_arr - approx_arr - diff_arr)) > 1e-9:
        raise FormatError(f"{path}: acc_diff column inconsistent with accuracies")
    trace = Trace(acc_diff=diff_arr, energy_gain=gain, avg_acc_drop=avg)
    return trace, exact_arr, approx_arr
