"""Arithmetic expression strings evaluated over floats, arrays or jets.

Grammar (a subset of Python expression syntax)::

    expr   := expr ('+' | '-') term | term
    term   := term ('*' | '/') factor | factor
    factor := ('+' | '-') factor | power
    power  := atom ('**' | '^') factor
    atom   := NUMBER | NAME | 'sqrt(' expr ')' | 'pow(' expr ',' expr ')' | '(' expr ')'

Names are whatever the caller binds, e.g. ``x1..xn, y1..yn`` for Finsler
functions or ``t`` for parametric curves.  Exponents must be constants.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import jets
from .errors import ExpressionError

_FUNCTIONS = {"sqrt": 1, "pow": 2}


@dataclass(frozen=True)
class Expression:
    source: str
    tree: ast.AST
    names: frozenset

    def __call__(self, env: Mapping[str, object]):
        return _eval(self.tree, env)

    def __str__(self):
        return self.source

    @property
    def is_constant(self) -> bool:
        return not self.names


def parse(source, allowed_names=None) -> Expression:
    """Parse ``source`` (str or number) into an :class:`Expression`."""
    if isinstance(source, (int, float)):
        source = repr(float(source))
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError(f"expected a non-empty expression string, got {source!r}")
    text = source.replace("^", "**")
    try:
        tree = ast.parse(text, mode="eval").body
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {source!r}: {exc.msg}") from None
    names = set()
    _validate(tree, names, source)
    if allowed_names is not None:
        unknown = names - set(allowed_names)
        if unknown:
            raise ExpressionError(f"unknown variable(s) {sorted(unknown)} in {source!r}")
    return Expression(source, tree, frozenset(names))


def _validate(node, names, source):
    if isinstance(node, ast.BinOp):
        if not isinstance(node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)):
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {source!r}")
        _validate(node.left, names, source)
        _validate(node.right, names, source)
        if isinstance(node.op, ast.Pow) and not _is_constant(node.right):
            raise ExpressionError(f"exponent must be a constant in {source!r}")
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.UAdd, ast.USub)):
            raise ExpressionError(f"unary operator not allowed in {source!r}")
        _validate(node.operand, names, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"only sqrt() and pow() calls are allowed in {source!r}")
        if node.keywords or len(node.args) != _FUNCTIONS[node.func.id]:
            raise ExpressionError(f"bad arguments to {node.func.id}() in {source!r}")
        for arg in node.args:
            _validate(arg, names, source)
        if node.func.id == "pow" and not _is_constant(node.args[1]):
            raise ExpressionError(f"pow() exponent must be a constant in {source!r}")
    elif isinstance(node, ast.Name):
        names.add(node.id)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"bad constant {node.value!r} in {source!r}")
    else:
        raise ExpressionError(f"unsupported syntax {type(node).__name__} in {source!r}")


def _is_constant(node) -> bool:
    return not any(isinstance(n, ast.Name) for n in ast.walk(node))


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        try:
            return env[node.id]
        except KeyError:
            raise ExpressionError(f"variable {node.id!r} is not bound") from None
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp):
        left = _eval(node.left, env)
        if isinstance(node.op, ast.Pow):
            return jets.power(left, float(_eval(node.right, {})))
        right = _eval(node.right, env)
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        if not isinstance(right, jets.Jet) and not isinstance(left, jets.Jet):
            right = np.asarray(right, dtype=float)
            if np.any(right == 0):
                raise ExpressionError("division by zero")
        return left / right
    if isinstance(node, ast.Call):
        args = [_eval(a, env) for a in node.args[:1]]
        if node.func.id == "sqrt":
            return jets.sqrt(args[0])
        return jets.power(args[0], float(_eval(node.args[1], {})))
    raise ExpressionError(f"unsupported node {type(node).__name__}")  # pragma: no cover
