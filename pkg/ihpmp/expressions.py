"""A small formula language for declaring problems in config files.

Formulas are written over state variables `x1..xm`, controls `u1..uk`, the time `t` and named
numeric parameters, with `+ - * / ^`, unary minus and the functions `exp`, `log`, `sin`, `cos`,
`tanh`. Parsing produces a sympy expression, so partial derivatives are exact and evaluation goes
through `sympy.lambdify` onto numpy arrays of any (broadcastable) shape.

    >>> ast = parse_expression("x1*(x1^4 - 5)*exp(-2*t)")
    >>> float(ast.evaluate({"x1": 1.0, "t": 0.0}))
    -4.0
"""

import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp
from numpy.typing import ArrayLike

FUNCTIONS: dict[str, Callable[[sp.Expr], sp.Expr]] = {
    "exp": sp.exp,
    "log": sp.log,
    "sin": sp.sin,
    "cos": sp.cos,
    "tanh": sp.tanh,
}
FUNCTION_ARITY = 1
DEFAULT_VARIABLE = re.compile(r"^(?:[xu][1-9][0-9]*|t)$")

_TOKEN = re.compile(
    r"(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<identifier>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),])"
    r"|(?P<space>\s+)"
)
_OPERAND_START = frozenset({"number", "identifier", "(", "-", "+"})


class ExpressionSyntaxError(ValueError):
    """Malformed formula. `offset` is a byte offset into the UTF-8 source."""

    def __init__(self, src: str, offset: int, expected: Iterable[str]):
        self.src = src
        self.offset = offset
        self.expected = frozenset(expected)
        super().__init__(
            f"Syntax error at offset {offset} in {src!r}: expected one of {sorted(self.expected)}"
        )


class UnknownIdentifierError(ValueError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"Unknown identifier {name!r} at offset {offset}")


class ArityError(ValueError):
    def __init__(self, name: str, got: int, offset: int):
        self.name = name
        self.got = got
        self.offset = offset
        super().__init__(
            f"Function {name!r} at offset {offset} takes {FUNCTION_ARITY} argument, got {got}"
        )


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int


def tokenize(src: str) -> list[Token]:
    """Split `src` into tokens, ending with an `end` token at the byte length of the source."""
    tokens: list[Token] = []
    pos = 0
    while pos < len(src):
        match = _TOKEN.match(src, pos)
        offset = len(src[:pos].encode())
        if match is None:
            raise ExpressionSyntaxError(src, offset, _OPERAND_START | {"operator"})
        kind = match.lastgroup
        assert kind is not None
        if kind == "op":
            tokens.append(Token(match.group(), match.group(), offset))
        elif kind != "space":
            tokens.append(Token(kind, match.group(), offset))
        pos = match.end()
    tokens.append(Token("end", "", len(src.encode())))
    return tokens


@dataclass(frozen=True)
class ExpressionAST:
    """A parsed formula: a sympy expression plus the identifiers it may be evaluated over."""

    expr: sp.Expr
    variables: tuple[str, ...] = field(default=())

    def __str__(self) -> str:
        return str(self.expr)

    @property
    def free_variables(self) -> tuple[str, ...]:
        return tuple(sorted(str(s) for s in self.expr.free_symbols))

    @property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    @cached_property
    def _compiled(self) -> Callable[..., ArrayLike]:
        symbols = [sp.Symbol(name) for name in self.free_variables]
        return sp.lambdify(symbols, self.expr, modules="numpy")

    def evaluate(self, env: Mapping[str, ArrayLike]) -> np.ndarray:
        """Evaluate at `env`, broadcasting over the shapes of all supplied values.

        Constant formulas still return an array of the broadcast shape.
        """
        missing = [name for name in self.free_variables if name not in env]
        if missing:
            raise KeyError(f"No value supplied for {missing} when evaluating {self}")
        args = [np.asarray(env[name], dtype=float) for name in self.free_variables]
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values()))
        value = np.asarray(self._compiled(*args), dtype=float)
        return np.broadcast_to(value, np.broadcast_shapes(shape, value.shape)).copy()


class _Parser:
    """Recursive-descent parser producing sympy expressions."""

    def __init__(self, src: str, is_variable: Callable[[str], bool], params: Mapping[str, float]):
        self.src = src
        self.tokens = tokenize(src)
        self.pos = 0
        self.is_variable = is_variable
        self.params = params

    @property
    def token(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, kind: str) -> bool:
        return self.token.kind == kind

    def accept(self, kind: str) -> Token | None:
        if self.peek(kind):
            token = self.token
            self.pos += 1
            return token
        return None

    def expect(self, kind: str) -> Token:
        token = self.accept(kind)
        if token is None:
            raise ExpressionSyntaxError(self.src, self.token.offset, {kind})
        return token

    def parse(self) -> sp.Expr:
        expr = self._expression()
        if not self.peek("end"):
            raise ExpressionSyntaxError(
                self.src, self.token.offset, {"+", "-", "*", "/", "^", "end"}
            )
        return expr

    # <EXPRESSION> -> <TERM> { ( '+' | '-' ) <TERM> }*
    def _expression(self) -> sp.Expr:
        expr = self._term()
        while self.peek("+") or self.peek("-"):
            if self.accept("+"):
                expr = expr + self._term()
            else:
                self.expect("-")
                expr = expr - self._term()
        return expr

    # <TERM> -> <UNARY> { ( '*' | '/' ) <UNARY> }*
    def _term(self) -> sp.Expr:
        expr = self._unary()
        while self.peek("*") or self.peek("/"):
            if self.accept("*"):
                expr = expr * self._unary()
            else:
                self.expect("/")
                expr = expr / self._unary()
        return expr

    # <UNARY> -> ( '-' | '+' ) <UNARY> | <POWER>
    def _unary(self) -> sp.Expr:
        if self.accept("-"):
            return -self._unary()
        if self.accept("+"):
            return self._unary()
        return self._power()

    # <POWER> -> <ATOM> [ '^' <UNARY> ]     (right associative)
    def _power(self) -> sp.Expr:
        base = self._atom()
        if self.accept("^"):
            return sp.Pow(base, self._unary())
        return base

    # <ATOM> -> NUMBER | IDENTIFIER | FUNCTION '(' <ARGS> ')' | '(' <EXPRESSION> ')'
    def _atom(self) -> sp.Expr:
        token = self.token
        if self.accept("number"):
            if re.fullmatch(r"\d+", token.text):
                return sp.Integer(int(token.text))
            return sp.Float(float(token.text))
        if self.accept("identifier"):
            if token.text in FUNCTIONS:
                return self._call(token)
            if token.text in self.params:
                return sp.Float(float(self.params[token.text]))
            if self.is_variable(token.text):
                return sp.Symbol(token.text)
            raise UnknownIdentifierError(token.text, token.offset)
        if self.accept("("):
            expr = self._expression()
            self.expect(")")
            return expr
        raise ExpressionSyntaxError(self.src, token.offset, _OPERAND_START)

    def _call(self, name: Token) -> sp.Expr:
        self.expect("(")
        args = [self._expression()]
        while self.accept(","):
            args.append(self._expression())
        self.expect(")")
        if len(args) != FUNCTION_ARITY:
            raise ArityError(name.text, len(args), name.offset)
        return FUNCTIONS[name.text](args[0])


def parse_expression(
    src: str,
    variables: Iterable[str] | None = None,
    params: Mapping[str, float] | None = None,
) -> ExpressionAST:
    """Parse `src` into an `ExpressionAST`.

    Args:
        src: The formula text.
        variables: Identifiers allowed as free variables. Defaults to anything of the form
            `x<i>`, `u<i>` or `t`.
        params: Named constants substituted by value while parsing.

    Raises:
        ExpressionSyntaxError: On malformed input, with the offending byte offset.
        UnknownIdentifierError: On an identifier that is neither a variable, parameter nor function.
        ArityError: On a function called with the wrong number of arguments.
    """
    params = dict(params or {})
    if variables is None:
        allowed: tuple[str, ...] = ()
        is_variable: Callable[[str], bool] = lambda name: bool(DEFAULT_VARIABLE.match(name))
    else:
        allowed = tuple(variables)
        is_variable = allowed.__contains__
    expr = _Parser(src, is_variable, params).parse()
    return ExpressionAST(expr=expr, variables=allowed)


def differentiate(ast: ExpressionAST, var: str) -> ExpressionAST:
    """Exact partial derivative of `ast` with respect to `var`."""
    if ast.variables and var not in ast.variables:
        raise UnknownIdentifierError(var, -1)
    if not ast.variables and not DEFAULT_VARIABLE.match(var):
        raise UnknownIdentifierError(var, -1)
    return ExpressionAST(expr=sp.diff(ast.expr, sp.Symbol(var)), variables=ast.variables)
