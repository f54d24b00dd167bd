"""Closed-form data (f, psi, g, exact solutions) written as small arithmetic expressions.

Variables are v1..vd, x1..xd and t; operators + - * / ^ (or **);
functions sin cos exp abs max min sqrt log tanh; the constant pi.
"""
import io
import keyword
import tokenize
from dataclasses import dataclass, field
from functools import cached_property
from tokenize import TokenError
from typing import Callable, Dict, List, Union

import numpy as np
import sympy as sym
from sympy.core.function import AppliedUndef
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations
from sympy.printing.numpy import NumPyPrinter

from .fields import GridSpec, ScalarField

FUNCTIONS = {
    'sin': sym.sin,
    'cos': sym.cos,
    'exp': sym.exp,
    'abs': sym.Abs,
    'max': sym.Max,
    'min': sym.Min,
    'sqrt': sym.sqrt,
    'log': sym.log,
    'tanh': sym.tanh,
}
TRANSFORMATIONS = standard_transformations + (convert_xor,)


class ExpressionError(ValueError):
    pass


def variable_names(d: int) -> List[str]:
    return ['v{}'.format(i + 1) for i in range(d)] + ['x{}'.format(i + 1) for i in range(d)] + ['t']


def _symbols(d: int) -> Dict[str, sym.Symbol]:
    return {name: sym.Symbol(name, real=True) for name in variable_names(d)}


def _global_dict() -> dict:
    out = {'__builtins__': {}, 'Integer': sym.Integer, 'Float': sym.Float, 'Rational': sym.Rational,
           'Symbol': sym.Symbol, 'Function': sym.Function, 'pi': sym.pi}
    out.update(FUNCTIONS)
    out.update({'Abs': sym.Abs, 'Max': sym.Max, 'Min': sym.Min, 'sign': sym.sign})
    return out


def _check_tokens(text: str, name: str):
    """Reject attribute access, dunder names and Python keywords before the text reaches the parser."""
    try:
        tokens = list(tokenize.generate_tokens(io.StringIO(text).readline))
    except (TokenError, SyntaxError):
        return
    for tok in tokens:
        if tok.type == tokenize.OP and tok.string == '.':
            raise ExpressionError('{}: attribute access is not allowed in "{}"'.format(name, text))
        if tok.type == tokenize.NAME and ('__' in tok.string or keyword.iskeyword(tok.string)):
            raise ExpressionError('{}: name "{}" is not allowed in "{}"'.format(name, tok.string, text))


class _Printer(NumPyPrinter):
    """Pairwise numpy.maximum / numpy.minimum so that max and min broadcast against literals."""

    def _nested(self, fn, args):
        out = self._print(args[0])
        for a in args[1:]:
            out = '{}({}, {})'.format(self._module_format('numpy.' + fn), out, self._print(a))
        return out

    def _print_Max(self, expr):
        return self._nested('maximum', expr.args)

    def _print_Min(self, expr):
        return self._nested('minimum', expr.args)


@dataclass(frozen=True)
class ExpressionSpec:
    source: Union[str, sym.Expr]
    d: int
    name: str = 'expression'
    expr: sym.Expr = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise ExpressionError('{}: dimension must be >= 1, got {}'.format(self.name, self.d))
        if isinstance(self.source, sym.Expr):
            object.__setattr__(self, 'source', sym.sstr(self.source))
        text = str(self.source).strip()
        if not text:
            raise ExpressionError('{}: empty expression'.format(self.name))
        _check_tokens(text, self.name)
        symbols = _symbols(self.d)
        try:
            expr = parse_expr(text, local_dict=dict(symbols), global_dict=_global_dict(),
                              transformations=TRANSFORMATIONS)
        except (SyntaxError, TokenError) as e:
            offset = getattr(e, 'offset', None)
            where = ' at column {}'.format(offset) if offset else ''
            raise ExpressionError('{}: cannot parse "{}"{}: {}'.format(self.name, text, where, e)) from None
        except (TypeError, AttributeError, NameError, ValueError) as e:
            raise ExpressionError('{}: invalid expression "{}": {}'.format(self.name, text, e)) from None
        if not isinstance(expr, sym.Expr):
            raise ExpressionError('{}: "{}" is not an arithmetic expression'.format(self.name, text))
        unknown_functions = sorted(str(f.func) for f in expr.atoms(AppliedUndef))
        if unknown_functions:
            raise ExpressionError('{}: unknown function(s) {}; allowed: {}'.format(
                self.name, ', '.join(unknown_functions), ', '.join(sorted(FUNCTIONS))))
        unknown = sorted(str(s) for s in expr.free_symbols if s not in symbols.values())
        if unknown:
            raise ExpressionError('{}: unknown variable(s) {}; allowed: {}'.format(
                self.name, ', '.join(unknown), ', '.join(variable_names(self.d))))
        object.__setattr__(self, 'expr', expr)

    @cached_property
    def _evaluator(self) -> Callable:
        return sym.lambdify(list(_symbols(self.d).values()), self.expr, modules='numpy', printer=_Printer)

    def __call__(self, v, x, t) -> np.ndarray:
        args = [np.asarray(a, dtype=float) for a in list(v) + list(x) + [t]]
        shape = np.broadcast_shapes(*(a.shape for a in args))
        args = [np.broadcast_to(a, shape) for a in args]
        with np.errstate(all='ignore'):
            values = np.asarray(self._evaluator(*args), dtype=float)
        return np.broadcast_to(values, shape)

    def sample(self, grid: GridSpec) -> ScalarField:
        if grid.d != self.d:
            raise ExpressionError('{}: expression is {}-dimensional, grid is {}-dimensional'.format(
                self.name, self.d, grid.d))
        v, x, t = grid.mesh()
        values = np.broadcast_to(self(v, x, t), grid.shape)
        bad = ~np.isfinite(values)
        if np.any(bad):
            node = tuple(int(k) for k in np.argwhere(bad)[0])
            raise ExpressionError('{}: "{}" is not finite on the grid (first at node {})'.format(
                self.name, self.source, node))
        return ScalarField(grid, values.copy())


def kfp_forcing(exact: ExpressionSpec, name: str = 'f') -> ExpressionSpec:
    """f = Laplace_v u + v . grad_x u - d_t u for a closed-form u (the operator with A = I)."""
    s = _symbols(exact.d)
    u = exact.expr
    out = -sym.diff(u, s['t'])
    for i in range(exact.d):
        vi, xi = s['v{}'.format(i + 1)], s['x{}'.format(i + 1)]
        out += sym.diff(u, vi, 2) + vi * sym.diff(u, xi)
    return ExpressionSpec(sym.simplify(out), exact.d, name)
