"""Expression trees for symbolic regression.

A tree is stored as a flat prefix program (a tuple of tokens):

* ``int``   -- input variable index (0 is C_s),
* ``float`` -- constant,
* ``str``   -- operator from :data:`BINARY` or :data:`UNARY`.

Evaluation is total: division by zero or overflow yields inf/nan, which
propagates to the result instead of raising.  Complexity is the node count.
"""
from __future__ import annotations

import math
import re

import numpy as np
from numba import njit

BINARY = ("+", "-", "*", "/")
UNARY = ("exp", "sin", "cos")
ARITY = {**{op: 2 for op in BINARY}, **{op: 1 for op in UNARY}}

VARIABLE_NAMES = ("C_s",)

# opcodes for the compiled evaluator
OP_VAR, OP_CONST, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_EXP, OP_SIN, OP_COS = range(9)
_OPCODE = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "exp": OP_EXP, "sin": OP_SIN, "cos": OP_COS}


def is_const(tok) -> bool:
    return isinstance(tok, float)


def is_var(tok) -> bool:
    return isinstance(tok, int) and not isinstance(tok, bool)


def arity(tok) -> int:
    return ARITY[tok] if isinstance(tok, str) else 0


def complexity(program) -> int:
    return len(program)


def subtree_end(program, start: int) -> int:
    """Index one past the subtree rooted at ``start``."""
    need = 1
    i = start
    while need:
        need += arity(program[i]) - 1
        i += 1
    return i


def validate(program) -> tuple:
    program = tuple(program)
    if not program:
        raise ValueError("empty expression")
    for tok in program:
        if isinstance(tok, str) and tok not in ARITY:
            raise ValueError(f"unknown operator {tok!r}")
        if not (isinstance(tok, str) or is_const(tok) or is_var(tok)):
            raise ValueError(f"bad token {tok!r}")
    try:
        end = subtree_end(program, 0)
    except IndexError:
        end = -1
    if end != len(program):
        raise ValueError("malformed prefix program")
    return program


def constant_indices(program) -> list[int]:
    return [i for i, tok in enumerate(program) if is_const(tok)]


def with_constants(program, values) -> tuple:
    out = list(program)
    for i, v in zip(constant_indices(program), values):
        out[i] = float(v)
    return tuple(out)


def structure(program) -> tuple:
    """Program with constants blanked; equal for trees differing only in constants."""
    return tuple("c" if is_const(t) else t for t in program)


def evaluate(program, X):
    """Evaluate on inputs ``X``: a scalar/1-D array of C_s, or a (n_vars, n) array."""
    X = np.asarray(X, dtype=float)
    scalar = X.ndim == 0
    if X.ndim <= 1:
        X = np.atleast_1d(X)[None, :]
    stack = []
    with np.errstate(all="ignore"):
        for tok in reversed(program):
            if isinstance(tok, str):
                a = stack.pop()
                if tok == "exp":
                    r = np.exp(a)
                elif tok == "sin":
                    r = np.sin(a)
                elif tok == "cos":
                    r = np.cos(a)
                else:
                    b = stack.pop()
                    if tok == "+":
                        r = a + b
                    elif tok == "-":
                        r = a - b
                    elif tok == "*":
                        r = a * b
                    else:
                        r = np.divide(a, b)
                # inf never re-enters as a finite value, e.g. exp(-1/0)
                r = np.asarray(r, dtype=float)
                if not np.all(np.isfinite(r)):
                    r = np.where(np.isfinite(r), r, np.nan)
                stack.append(r)
            elif is_const(tok):
                stack.append(tok)
            else:
                stack.append(X[tok])
    out = np.broadcast_to(np.asarray(stack[0], dtype=float), X.shape[1:])
    return float(out[0]) if scalar else out


def eval_tree(program, Cs):
    """Evaluate at C_s; returns nan where the expression is undefined."""
    return evaluate(program, Cs)


def to_string(program, names=VARIABLE_NAMES, const_format=repr) -> str:
    """Infix text with explicit parentheses around every nested binary node."""

    def render(i, top):
        tok = program[i]
        if is_const(tok):
            return const_format(float(tok)), i + 1
        if is_var(tok):
            return names[tok], i + 1
        if tok in UNARY:
            inner, j = render(i + 1, True)
            return f"{tok}({inner})", j
        left, j = render(i + 1, False)
        right, k = render(j, False)
        text = f"{left} {tok} {right}"
        return (text if top else f"({text})"), k

    text, _ = render(0, True)
    return text


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/()−×÷]))"
)
_OP_ALIASES = {"−": "-", "×": "*", "÷": "/"}


def _tokenize(text):
    text = text.replace("$", "")
    pos = 0
    out = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValueError(f"cannot parse expression at {text[pos:]!r}")
        pos = m.end()
        if m.group("num") is not None:
            out.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            out.append(("name", m.group("name")))
        else:
            op = m.group("op")
            out.append(("op", _OP_ALIASES.get(op, op)))
    return out


def parse(text: str, names=VARIABLE_NAMES) -> tuple:
    """Parse infix text (as produced by :func:`to_string`) into a program.

    A minus sign directly before a number is folded into the constant, so
    ``C_s - -4.631`` keeps the double negative as written.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, None)

    def take(kind=None, value=None):
        nonlocal pos
        tok = peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ValueError(f"unexpected token {tok[1]!r} in {text!r}")
        pos += 1
        return tok

    def expr():
        node = term()
        while peek() in (("op", "+"), ("op", "-")):
            op = take()[1]
            node = (op,) + node + term()
        return node

    def term():
        node = factor()
        while peek() in (("op", "*"), ("op", "/")):
            op = take()[1]
            node = (op,) + node + factor()
        return node

    def factor():
        kind, val = peek()
        if (kind, val) == ("op", "-"):
            take()
            if peek()[0] == "num":
                return (-take()[1],)
            return ("-", 0.0) + factor()
        if (kind, val) == ("op", "+"):
            take()
            return factor()
        if kind == "num":
            take()
            return (float(val),)
        if kind == "name":
            take()
            if val in UNARY:
                take("op", "(")
                inner = expr()
                take("op", ")")
                return (val,) + inner
            if val in names:
                return (names.index(val),)
            raise ValueError(f"unknown name {val!r}")
        if (kind, val) == ("op", "("):
            take()
            inner = expr()
            take("op", ")")
            return inner
        raise ValueError(f"unexpected token {val!r} in {text!r}")

    program = expr()
    if pos != len(tokens):
        raise ValueError(f"trailing input in {text!r}")
    return validate(program)


def compile_program(program):
    """Opcode/constant/variable arrays for :func:`run_program`."""
    n = len(program)
    ops = np.empty(n, dtype=np.int64)
    vals = np.zeros(n)
    for i, tok in enumerate(program):
        if isinstance(tok, str):
            ops[i] = _OPCODE[tok]
        elif is_const(tok):
            ops[i] = OP_CONST
            vals[i] = tok
        else:
            ops[i] = OP_VAR
            vals[i] = tok
    return ops, vals


@njit(cache=True)
def run_program(ops, vals, n, x):
    """Evaluate a compiled single-input program at scalar ``x``."""
    return run_program_into(ops, vals, n, x, np.empty(n))


@njit(cache=True)
def run_program_into(ops, vals, n, x, stack):
    """:func:`run_program` using caller-provided scratch of length >= ``n``."""
    sp = 0
    for i in range(n - 1, -1, -1):
        op = ops[i]
        if op == OP_VAR:
            stack[sp] = x
            sp += 1
        elif op == OP_CONST:
            stack[sp] = vals[i]
            sp += 1
        elif op == OP_EXP:
            stack[sp - 1] = math.exp(stack[sp - 1]) if stack[sp - 1] < 709.0 else math.inf
        elif op == OP_SIN:
            a = stack[sp - 1]
            stack[sp - 1] = math.sin(a) if math.isfinite(a) else math.nan
        elif op == OP_COS:
            a = stack[sp - 1]
            stack[sp - 1] = math.cos(a) if math.isfinite(a) else math.nan
        else:
            a = stack[sp - 1]
            b = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                stack[sp - 1] = a + b
            elif op == OP_SUB:
                stack[sp - 1] = a - b
            elif op == OP_MUL:
                stack[sp - 1] = a * b
            elif b == 0.0:
                stack[sp - 1] = math.nan
            else:
                stack[sp - 1] = a / b
        if not math.isfinite(stack[sp - 1]):
            stack[sp - 1] = math.nan
    return stack[0]


@njit(cache=True)
def _run_column(ops, vals, n, X, k, stack):
    sp = 0
    for i in range(n - 1, -1, -1):
        op = ops[i]
        if op == OP_VAR:
            stack[sp] = X[int(vals[i]), k]
            sp += 1
            continue
        if op == OP_CONST:
            stack[sp] = vals[i]
            sp += 1
            continue
        a = stack[sp - 1]
        if op == OP_EXP:
            r = math.exp(a) if a < 709.0 else math.inf
        elif op == OP_SIN:
            r = math.sin(a) if math.isfinite(a) else math.nan
        elif op == OP_COS:
            r = math.cos(a) if math.isfinite(a) else math.nan
        else:
            b = stack[sp - 2]
            sp -= 1
            if op == OP_ADD:
                r = a + b
            elif op == OP_SUB:
                r = a - b
            elif op == OP_MUL:
                r = a * b
            elif b == 0.0:
                r = math.nan
            else:
                r = a / b
        if not math.isfinite(r):
            return math.nan
        stack[sp - 1] = r
    return stack[0]


@njit(cache=True)
def program_sse(ops, vals, X, y):
    """Summed squared error of a compiled program; inf if any point fails."""
    n = ops.size
    stack = np.empty(n)
    total = 0.0
    for k in range(y.size):
        v = _run_column(ops, vals, n, X, k, stack)
        if not math.isfinite(v):
            return math.inf
        r = v - y[k]
        total += r * r
    return total if math.isfinite(total) else math.inf


# scalar operators with the compiled evaluator's exact semantics, for generated code
@njit(cache=True, inline="always")
def _fin(r):
    return r if math.isfinite(r) else math.nan


@njit(cache=True, inline="always")
def op_add(a, b):
    return _fin(a + b)


@njit(cache=True, inline="always")
def op_sub(a, b):
    return _fin(a - b)


@njit(cache=True, inline="always")
def op_mul(a, b):
    return _fin(a * b)


@njit(cache=True, inline="always")
def op_div(a, b):
    return math.nan if b == 0.0 else _fin(a / b)


@njit(cache=True, inline="always")
def op_exp(a):
    return _fin(math.exp(a)) if a < 709.0 else math.nan


@njit(cache=True, inline="always")
def op_sin(a):
    return math.sin(a) if math.isfinite(a) else math.nan


@njit(cache=True, inline="always")
def op_cos(a):
    return math.cos(a) if math.isfinite(a) else math.nan


_OP_FUNCS = {"+": "op_add", "-": "op_sub", "*": "op_mul", "/": "op_div",
             "exp": "op_exp", "sin": "op_sin", "cos": "op_cos"}


def to_source(program, var_names=("x",)) -> str:
    """Python source for ``program`` as nested ``op_*`` calls.

    Matches :func:`run_program` bit for bit when the ``op_*`` helpers of
    this module are in scope.
    """

    def emit(i):
        tok = program[i]
        if isinstance(tok, str):
            j = i + 1
            args = []
            for _ in range(ARITY[tok]):
                src, j = emit(j)
                args.append(src)
            return f"{_OP_FUNCS[tok]}({', '.join(args)})", j
        if is_const(tok):
            v = float(tok)
            if math.isfinite(v):
                return repr(v), i + 1
            return ("np.nan" if math.isnan(v) else ("np.inf" if v > 0 else "-np.inf")), i + 1
        return var_names[tok], i + 1

    src, end = emit(0)
    if end != len(program):
        raise ValueError("malformed program")
    return src
