"""
Canonical s-expression text for contract specifications.

Grammar (whitespace separates tokens; ``[...]`` is optional)::

    spec    := (done) | (fail)
             | (pay PARTY target RESOURCE expr DEADLINE)
             | (observe PARTY KEY (CMP expr) DEADLINE [SNAPSHOT])
             | (notice PARTY TAG DEADLINE)
             | (seq spec spec) | (both spec spec) | (choice spec spec)
    target  := (party PARTY) | (pro-rata BASIS) | (pro-rata)
    expr    := INTEGER | NAME | (+ expr expr) | (- expr expr)
             | (* expr expr) | (/ expr expr)
    CMP     := == | != | > | >= | < | <=

``format_spec`` prints exactly one canonical form (single spaces, no
trailing whitespace), so the text can be signed and hashed.
"""

from __future__ import annotations
import re
from typing import List, Union

from .calculus import (
    BinOp, Both, Choice, Done, Expr, Fail, Lit, Notice, Observation, PartyTarget, Payment,
    Pred, ProRata, Seq, Spec, Var,
)
from .core import MalformedSpec


__all__ = ['format_spec', 'parse_spec', 'format_expr']

_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_INTEGER = re.compile(r"-?\d+\Z")
_ARITHMETIC = ("+", "-", "*", "/")
_COMPARISONS = ("==", "!=", ">", ">=", "<", "<=")

SExpr = Union[str, List["SExpr"]]


# =========================================================================
# Formatting
# =========================================================================


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Lit):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    return f"({expr.op} {format_expr(expr.left)} {format_expr(expr.right)})"


def format_spec(spec: Spec) -> str:
    """
    Examples:
        >>> format_spec(Seq(Done(), Fail()))
        '(seq (done) (fail))'
    """
    if isinstance(spec, Done):
        return "(done)"
    if isinstance(spec, Fail):
        return "(fail)"
    if isinstance(spec, Payment):
        if isinstance(spec.target, PartyTarget):
            target = f"(party {spec.target.party})"
        elif spec.target.basis is None:
            target = "(pro-rata)"
        else:
            target = f"(pro-rata {spec.target.basis})"
        return (f"(pay {spec.payer} {target} {spec.resource} "
                f"{format_expr(spec.amount)} {spec.deadline})")
    if isinstance(spec, Observation):
        text = (f"(observe {spec.agent} {spec.key} "
                f"({spec.pred.op} {format_expr(spec.pred.rhs)}) {spec.deadline}")
        if spec.snapshot is not None:
            text += f" {spec.snapshot}"
        return text + ")"
    if isinstance(spec, Notice):
        return f"(notice {spec.party} {spec.tag} {spec.deadline})"
    if isinstance(spec, Seq):
        return f"(seq {format_spec(spec.first)} {format_spec(spec.then)})"
    if isinstance(spec, Both):
        return f"(both {format_spec(spec.left)} {format_spec(spec.right)})"
    if isinstance(spec, Choice):
        return f"(choice {format_spec(spec.left)} {format_spec(spec.right)})"
    raise MalformedSpec(f"cannot format {spec!r}")


# =========================================================================
# Parsing
# =========================================================================


def _read(text: str) -> SExpr:
    tokens: List[str] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            if text[pos:].strip():
                raise MalformedSpec(f"unexpected text at {pos}")
            break
        tokens.append(match.group(1))
        pos = match.end()
    if not tokens:
        raise MalformedSpec("empty specification")

    stack: List[List[SExpr]] = [[]]
    for token in tokens:
        if token == "(":
            stack.append([])
        elif token == ")":
            if len(stack) == 1:
                raise MalformedSpec("unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(token)
    if len(stack) != 1:
        raise MalformedSpec("unbalanced '('")
    if len(stack[0]) != 1:
        raise MalformedSpec("expected exactly one top-level form")
    return stack[0][0]


def _atom(node: SExpr, what: str) -> str:
    if not isinstance(node, str):
        raise MalformedSpec(f"expected {what}, got a list")
    return node


def _int(node: SExpr, what: str) -> int:
    token = _atom(node, what)
    if not _INTEGER.match(token):
        raise MalformedSpec(f"expected integer {what}, got {token!r}")
    return int(token)


def _expr(node: SExpr) -> Expr:
    if isinstance(node, str):
        if _INTEGER.match(node):
            return Lit(int(node))
        return Var(node)
    if len(node) != 3 or node[0] not in _ARITHMETIC:
        raise MalformedSpec(f"malformed expression {node!r}")
    return BinOp(_atom(node[0], "operator"), _expr(node[1]), _expr(node[2]))


def _form(node: SExpr, head: str, *arities: int) -> List[SExpr]:
    if len(node) - 1 not in arities:
        raise MalformedSpec(f"({head} ...) takes {' or '.join(map(str, arities))} arguments")
    return list(node[1:])


def _spec(node: SExpr) -> Spec:
    if isinstance(node, str) or not node:
        raise MalformedSpec(f"expected a form, got {node!r}")
    head = _atom(node[0], "form name")
    if head == "done":
        _form(node, head, 0)
        return Done()
    if head == "fail":
        _form(node, head, 0)
        return Fail()
    if head == "pay":
        payer, target, resource, amount, deadline = _form(node, head, 5)
        return Payment(_atom(payer, "payer"), _target(target), _atom(resource, "resource"),
                       _expr(amount), _int(deadline, "deadline"))
    if head == "observe":
        args = _form(node, head, 4, 5)
        pred = args[2]
        if isinstance(pred, str) or len(pred) != 2 or pred[0] not in _COMPARISONS:
            raise MalformedSpec(f"malformed predicate {pred!r}")
        snapshot = _atom(args[4], "snapshot name") if len(args) == 5 else None
        return Observation(_atom(args[0], "agent"), _atom(args[1], "key"),
                           Pred(_atom(pred[0], "comparison"), _expr(pred[1])),
                           _int(args[3], "deadline"), snapshot)
    if head == "notice":
        party, tag, deadline = _form(node, head, 3)
        return Notice(_atom(party, "party"), _atom(tag, "tag"), _int(deadline, "deadline"))
    if head in ("seq", "both", "choice"):
        left, right = _form(node, head, 2)
        cls = {"seq": Seq, "both": Both, "choice": Choice}[head]
        return cls(_spec(left), _spec(right))
    raise MalformedSpec(f"unknown form ({head} ...)")


def _target(node: SExpr) -> Union[PartyTarget, ProRata]:
    if isinstance(node, str) or not node:
        raise MalformedSpec(f"malformed payment target {node!r}")
    head = _atom(node[0], "target kind")
    if head == "party":
        (party,) = _form(node, head, 1)
        return PartyTarget(_atom(party, "party"))
    if head == "pro-rata":
        args = _form(node, head, 0, 1)
        return ProRata(_atom(args[0], "basis") if args else None)
    raise MalformedSpec(f"unknown payment target ({head} ...)")


def parse_spec(text: str) -> Spec:
    """
    Parse the canonical text form.

    Raises:
        MalformedSpec: on any syntax error. Well-formedness (bound variables,
            deadlines) is checked separately by
            :func:`~green_bond_engine.calculus.check_spec`.
    """
    return _spec(_read(text))
