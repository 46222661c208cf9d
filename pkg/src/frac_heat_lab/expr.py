"""Tiny arithmetic expression language for user-supplied nonlinearities.

Expressions are written in the variable ``u`` and may use ``+ - * / ^``,
the functions ``exp``, ``log`` and ``pow`` and the constants ``e`` and
``pi``.  Parsing goes through :mod:`ast` with a strict node whitelist, so
nothing outside that grammar is ever evaluated.
"""

from __future__ import annotations

import ast
from typing import Callable

import numpy as np


class ExpressionError(ValueError):
    """Raised for expressions outside the supported grammar."""


_FUNCS = {"exp": (np.exp, 1), "log": (np.log, 1), "pow": (np.power, 2)}
_CONSTS = {"e": float(np.e), "pi": float(np.pi)}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _build(node: ast.AST) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(node, ast.Expression):
        return _build(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        value = float(node.value)
        return lambda u: np.full_like(u, value)
    if isinstance(node, ast.Name):
        if node.id == "u":
            return lambda u: u
        if node.id in _CONSTS:
            value = _CONSTS[node.id]
            return lambda u: np.full_like(u, value)
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _build(node.operand)
        if isinstance(node.op, ast.USub):
            return lambda u: -inner(u)
        return inner
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        left, right = _build(node.left), _build(node.right)
        return lambda u: op(left(u), right(u))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        name = node.func.id
        if name not in _FUNCS or node.keywords:
            raise ExpressionError(f"unsupported function {name!r}")
        fn, arity = _FUNCS[name]
        if len(node.args) != arity:
            raise ExpressionError(f"{name} takes {arity} argument(s)")
        args = [_build(a) for a in node.args]
        if arity == 1:
            return lambda u: fn(args[0](u))
        return lambda u: fn(args[0](u), args[1](u))
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")


def parse_expression(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile ``text`` into a vectorised function of ``u``.

    Parameters
    ----------
    text : str
        Expression such as ``"u^2 + exp(u)"``.

    Returns
    -------
    callable
        Maps an array (or scalar) ``u`` to an array of float64 values.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("expression must be a non-empty string")
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    body = _build(tree)

    def evaluate(u):
        arr = np.asarray(u, dtype=float)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            out = np.asarray(body(arr), dtype=float)
        return out if out.ndim else float(out)

    return evaluate
