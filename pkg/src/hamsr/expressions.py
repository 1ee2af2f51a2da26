"""Symbolic expression trees for separable Hamiltonians.

Expressions are trees of operator/variable/constant tokens with a canonical
pre-order token serialization. Evaluation and analytic differentiation run
batched over numpy arrays and propagate constant tangents (see
:mod:`hamsr.duals`), so the same machinery serves plain evaluation, the
gradient fields fed to the integrator, and exact constant gradients of
multi-step rollout losses.

Two kinds of numeric leaf exist:

* constant slots ("ephemeral" constants): placeholders whose values live in
  a per-candidate vector and get fitted. Every ``const`` token in a parsed
  sequence opens a fresh slot; programmatically built trees may share slots.
* literals: fixed numbers that are part of a structural template (e.g. the
  exponents inside a Euclidean-distance subtree) and are never fitted.

Note on integer exponents: sampled sequences contain no literal integers;
``q^2`` is expressed as ``pow(q, const)`` and fitting is expected to drive
the slot to 2.0. Fixed integers appear only in built-in ground truths and
composite templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .duals import (
    Jet,
    JetVec,
    jadd,
    jconst,
    jcos,
    jdiv,
    jet_all_finite,
    jlog,
    jmul,
    jneg,
    jpow,
    jrecip,
    jsin,
    jslot,
    jsub,
    pow_values,
)
from .errors import (
    DomainError,
    EquivalenceSamplingError,
    ExpressionSyntaxError,
    IncompleteSequenceError,
    SeparabilityError,
    TrailingTokensError,
    UnknownTokenError,
)

OPERATOR_ARITY = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "pow": 2,
    "cos": 1,
    "sin": 1,
}

CONST_SYMBOL = "const"

_KIND_OP = 0
_KIND_VAR = 1
_KIND_SLOT = 2
_KIND_LIT = 3


@dataclass(frozen=True)
class Token:
    kind: str  # "operator" | "variable" | "const"
    symbol: str
    arity: int


def operator_token(symbol):
    return Token("operator", symbol, OPERATOR_ARITY[symbol])


def variable_token(symbol):
    return Token("variable", symbol, 0)


CONST_TOKEN = Token("const", CONST_SYMBOL, 0)


@dataclass(frozen=True)
class TokenLibrary:
    """Fixed, ordered token vocabulary for one run.

    Ordering is part of the contract: softmax indices of the expression
    sampler refer to positions in ``tokens``.
    """

    operators: tuple[Token, ...]
    variables: tuple[Token, ...]
    has_const: bool = True

    def __post_init__(self):
        symbols = [t.symbol for t in self.tokens]
        if len(set(symbols)) != len(symbols):
            raise ValueError("token symbols must be unique")

    @property
    def tokens(self):
        extra = (CONST_TOKEN,) if self.has_const else ()
        return self.operators + self.variables + extra

    @property
    def size(self):
        return len(self.tokens)

    def index(self, symbol):
        for i, t in enumerate(self.tokens):
            if t.symbol == symbol:
                return i
        raise UnknownTokenError(f"token {symbol!r} not in library")

    def by_symbol(self, symbol):
        return self.tokens[self.index(symbol)]


def make_library(operator_names, variable_names, has_const=True):
    return TokenLibrary(
        operators=tuple(operator_token(s) for s in operator_names),
        variables=tuple(variable_token(s) for s in variable_names),
        has_const=has_const,
    )


class Node:
    """Immutable expression node."""

    __slots__ = ("kind", "symbol", "children", "slot", "value")

    def __init__(self, kind, symbol, children=(), slot=None, value=None):
        self.kind = kind
        self.symbol = symbol
        self.children = tuple(children)
        self.slot = slot
        self.value = value


def op(symbol, *children):
    arity = OPERATOR_ARITY[symbol]
    if len(children) != arity:
        raise ValueError(f"{symbol} expects {arity} children, got {len(children)}")
    return Node(_KIND_OP, symbol, children)


def var(name):
    return Node(_KIND_VAR, name)


def const_slot(slot):
    return Node(_KIND_SLOT, CONST_SYMBOL, slot=slot)


def literal(value):
    return Node(_KIND_LIT, "lit", value=float(value))


class ExprTree:
    """Compiled expression tree.

    The constructor flattens the node graph into parallel arrays in
    post-order so evaluation is a simple loop. Trees are immutable and safe
    to evaluate concurrently.
    """

    __slots__ = (
        "root",
        "n_slots",
        "_kind",
        "_sym",
        "_child",
        "_slot",
        "_lit",
        "_post",
        "_has_var",
        "_var_leaves",
        "variables",
    )

    def __init__(self, root, n_slots=None):
        self.root = root
        kind, sym, child, slot, lit = [], [], [], [], []

        def build(node):
            idxs = [build(c) for c in node.children]
            kind.append(node.kind)
            sym.append(node.symbol)
            child.append(tuple(idxs))
            slot.append(node.slot)
            lit.append(node.value)
            return len(kind) - 1

        build(root)
        self._kind = kind
        self._sym = sym
        self._child = child
        self._slot = slot
        self._lit = lit
        self._post = list(range(len(kind)))  # build() already emits post-order
        has_var = [False] * len(kind)
        var_leaves = {}
        for i in self._post:
            if kind[i] == _KIND_VAR:
                has_var[i] = True
                var_leaves.setdefault(sym[i], []).append(i)
            else:
                has_var[i] = any(has_var[c] for c in child[i])
        self._has_var = has_var
        self._var_leaves = var_leaves
        self.variables = tuple(sorted(var_leaves))
        used = sorted({s for s in slot if s is not None})
        if n_slots is None:
            n_slots = (max(used) + 1) if used else 0
        elif used and max(used) >= n_slots:
            raise ValueError("slot index exceeds declared slot count")
        self.n_slots = n_slots

    @property
    def n_nodes(self):
        return len(self._kind)

    @property
    def n_operators(self):
        return sum(1 for k in self._kind if k == _KIND_OP)

    def to_preorder(self):
        """Pre-order token symbols. Literals serialize as their repr."""
        out = []

        def walk(node):
            if node.kind == _KIND_LIT:
                out.append(repr(node.value))
            else:
                out.append(node.symbol)
            for c in node.children:
                walk(c)

        walk(self.root)
        return out


def parse_preorder(symbols, lib):
    """Parse a pre-order token symbol sequence against a library.

    Every ``const`` token opens a fresh constant slot, numbered in pre-order.
    """
    symbols = list(symbols)
    pos = 0
    n_slots = 0

    def parse_node():
        nonlocal pos, n_slots
        if pos >= len(symbols):
            raise IncompleteSequenceError(
                f"sequence ended after {pos} tokens with the tree still open"
            )
        symbol = symbols[pos]
        token = lib.by_symbol(symbol)
        pos += 1
        if token.kind == "operator":
            children = [parse_node() for _ in range(token.arity)]
            return op(symbol, *children)
        if token.kind == "const":
            node = const_slot(n_slots)
            n_slots += 1
            return node
        return var(symbol)

    root = parse_node()
    if pos != len(symbols):
        raise TrailingTokensError(
            f"{len(symbols) - pos} tokens remain after the tree closed at {pos}"
        )
    return ExprTree(root, n_slots=n_slots)


# ---------------------------------------------------------------------------
# Evaluation engine (batched, jet-valued)

_ONE = np.float64(1.0)
_ZERO = np.float64(0.0)


def _forward(tree, bind, consts):
    kind, sym, child, slot, lit = (
        tree._kind,
        tree._sym,
        tree._child,
        tree._slot,
        tree._lit,
    )
    vals = [None] * tree.n_nodes
    for i in tree._post:
        k = kind[i]
        if k == _KIND_OP:
            s = sym[i]
            c = child[i]
            if s == "add":
                vals[i] = jadd(vals[c[0]], vals[c[1]])
            elif s == "sub":
                vals[i] = jsub(vals[c[0]], vals[c[1]])
            elif s == "mul":
                vals[i] = jmul(vals[c[0]], vals[c[1]])
            elif s == "div":
                vals[i] = jdiv(vals[c[0]], vals[c[1]])
            elif s == "pow":
                vals[i] = jpow(vals[c[0]], vals[c[1]])
            elif s == "cos":
                vals[i] = jcos(vals[c[0]])
            elif s == "sin":
                vals[i] = jsin(vals[c[0]])
            else:  # pragma: no cover
                raise UnknownTokenError(s)
        elif k == _KIND_VAR:
            vals[i] = bind[sym[i]]
        elif k == _KIND_SLOT:
            vals[i] = consts[slot[i]]
        else:
            vals[i] = Jet(np.float64(lit[i]))
    return vals


def eval_jets(tree, bind, consts):
    """Evaluate the tree over jet bindings; returns the root jet."""
    return _forward(tree, bind, consts)[-1]


def grad_jets(tree, bind, consts, with_value=False):
    """Reverse pass over the jet algebra.

    Returns ``{variable: Jet}`` partial derivatives at the binding point;
    each jet also carries the constant tangents of that partial, which is
    what lets integrator rollouts backpropagate into the constants. Adjoints
    are only propagated into branches containing variables, so e.g. the
    ``log(base)`` term of ``pow`` is never formed for constant exponents.
    """
    vals = _forward(tree, bind, consts)
    kind, sym, child, has_var = tree._kind, tree._sym, tree._child, tree._has_var
    adj = [None] * tree.n_nodes
    adj[tree.n_nodes - 1] = Jet(_ONE)
    for i in reversed(tree._post):
        a = adj[i]
        if a is None or kind[i] != _KIND_OP:
            continue
        s = sym[i]
        c = child[i]
        if s == "add":
            for ci in c:
                if has_var[ci]:
                    adj[ci] = a if adj[ci] is None else jadd(adj[ci], a)
        elif s == "sub":
            if has_var[c[0]]:
                adj[c[0]] = a if adj[c[0]] is None else jadd(adj[c[0]], a)
            if has_var[c[1]]:
                na = jneg(a)
                adj[c[1]] = na if adj[c[1]] is None else jadd(adj[c[1]], na)
        elif s == "mul":
            if has_var[c[0]]:
                t = jmul(a, vals[c[1]])
                adj[c[0]] = t if adj[c[0]] is None else jadd(adj[c[0]], t)
            if has_var[c[1]]:
                t = jmul(a, vals[c[0]])
                adj[c[1]] = t if adj[c[1]] is None else jadd(adj[c[1]], t)
        elif s == "div":
            rec = jrecip(vals[c[1]])
            if has_var[c[0]]:
                t = jmul(a, rec)
                adj[c[0]] = t if adj[c[0]] is None else jadd(adj[c[0]], t)
            if has_var[c[1]]:
                t = jneg(jmul(a, jmul(vals[i], rec)))
                adj[c[1]] = t if adj[c[1]] is None else jadd(adj[c[1]], t)
        elif s == "pow":
            u, w = vals[c[0]], vals[c[1]]
            if has_var[c[0]]:
                t = jmul(a, jmul(w, jpow(u, jsub(w, Jet(_ONE)))))
                adj[c[0]] = t if adj[c[0]] is None else jadd(adj[c[0]], t)
            if has_var[c[1]]:
                t = jmul(a, jmul(vals[i], jlog(u)))
                adj[c[1]] = t if adj[c[1]] is None else jadd(adj[c[1]], t)
        elif s == "cos":
            if has_var[c[0]]:
                t = jmul(a, jneg(jsin(vals[c[0]])))
                adj[c[0]] = t if adj[c[0]] is None else jadd(adj[c[0]], t)
        elif s == "sin":
            if has_var[c[0]]:
                t = jmul(a, jcos(vals[c[0]]))
                adj[c[0]] = t if adj[c[0]] is None else jadd(adj[c[0]], t)
    grads = {}
    for name, leaves in tree._var_leaves.items():
        g = None
        for li in leaves:
            if adj[li] is not None:
                g = adj[li] if g is None else jadd(g, adj[li])
        grads[name] = g if g is not None else Jet(_ZERO)
    if with_value:
        return grads, vals[-1]
    return grads


def _const_jets(constants, n_slots, with_tangents):
    constants = np.asarray(constants, dtype=float)
    if constants.shape != (n_slots,):
        raise ValueError(
            f"expected {n_slots} constants, got shape {constants.shape}"
        )
    if with_tangents:
        return [jslot(constants[i], i, n_slots) for i in range(n_slots)]
    return [Jet(np.float64(constants[i])) for i in range(n_slots)]


def _scalar_bind(bindings, tree):
    missing = [v for v in tree.variables if v not in bindings]
    if missing:
        raise KeyError(f"unbound variables: {missing}")
    return {k: Jet(np.float64(v)) for k, v in bindings.items()}


def evaluate(tree, bindings, constants=()):
    """Scalar evaluation; raises DomainError on non-finite results."""
    out = eval_jets(tree, _scalar_bind(bindings, tree), _const_jets(constants, tree.n_slots, False))
    val = float(np.asarray(out.val))
    if not np.isfinite(val):
        raise DomainError("expression value is not finite")
    return val


def grad_vars(tree, bindings, constants=(), wrt=None):
    """Analytic partial derivatives with respect to variables.

    Variables absent from the tree get derivative 0. Raises DomainError if
    any requested partial is non-finite.
    """
    names = tuple(wrt) if wrt is not None else tree.variables
    grads = grad_jets(tree, _scalar_bind(bindings, tree), _const_jets(constants, tree.n_slots, False))
    out = {}
    for name in names:
        jet = grads.get(name)
        g = 0.0 if jet is None else float(np.asarray(jet.val))
        if not np.isfinite(g):
            raise DomainError(f"d/d{name} is not finite")
        out[name] = g
    return out


@dataclass(frozen=True)
class ConstTangents:
    """Derivatives with respect to every constant slot.

    ``value`` is d(eval)/dc, shape (S,). ``grads[name]`` is d(d expr/d name)/dc,
    also shape (S,), supporting nested differentiation through the integrator.
    """

    value: np.ndarray
    grads: dict[str, np.ndarray]


def const_tangents(tree, bindings, constants):
    consts = _const_jets(constants, tree.n_slots, True)
    bind = _scalar_bind(bindings, tree)
    grads, value = grad_jets(tree, bind, consts, with_value=True)
    S = tree.n_slots

    def tangent(jet):
        if jet.dc is None:
            return np.zeros(S)
        return np.asarray(jet.dc, dtype=float).reshape(S)

    vt = tangent(value)
    gt = {name: tangent(jet) for name, jet in grads.items()}
    if not np.all(np.isfinite(vt)) or any(
        not np.all(np.isfinite(g)) for g in gt.values()
    ):
        raise DomainError("constant tangents are not finite")
    return ConstTangents(value=vt, grads=gt)


def eval_batch(tree, bind_arrays, constants=()):
    """Vectorized evaluation over (B,) binding arrays. NaN marks failures."""
    bind = {k: Jet(np.asarray(v, dtype=float)) for k, v in bind_arrays.items()}
    return np.asarray(
        eval_jets(tree, bind, _const_jets(constants, tree.n_slots, False)).val
    )


def grads_batch(tree, bind_arrays, constants=(), wrt=None):
    """Vectorized partials over (B,) binding arrays. NaN marks failures."""
    arrays = {k: np.asarray(v, dtype=float) for k, v in bind_arrays.items()}
    B = max((a.shape[0] for a in arrays.values() if a.ndim), default=1)
    bind = {k: Jet(v) for k, v in arrays.items()}
    grads = grad_jets(tree, bind, _const_jets(constants, tree.n_slots, False))
    names = tuple(wrt) if wrt is not None else tree.variables
    out = {}
    for name in names:
        jet = grads.get(name)
        if jet is None:
            out[name] = np.zeros(B)
        else:
            out[name] = np.broadcast_to(np.asarray(jet.val), (B,)).copy()
    return out


# ---------------------------------------------------------------------------
# Hamiltonian candidates


def _check_variable_split(T, V):
    bad_t = [v for v in T.variables if not v.startswith("p")]
    bad_v = [v for v in V.variables if not v.startswith("q")]
    if bad_t or bad_v:
        raise SeparabilityError(
            f"kinetic part may only use momenta and potential part positions "
            f"(offending: {bad_t + bad_v})"
        )


class HamiltonianCandidate:
    """A separable Hamiltonian T(p) + V(q) with one shared constant vector.

    Slot indices are global across T and V. Immutable; safe to evaluate from
    many threads.
    """

    __slots__ = ("T", "V", "constants")

    def __init__(self, T, V, constants=()):
        _check_variable_split(T, V)
        n = max(T.n_slots, V.n_slots)
        constants = np.array(constants, dtype=float, copy=True)
        if constants.size == 0:
            constants = np.zeros(n)
        if constants.shape != (n,):
            raise ValueError(
                f"constants must have length {n}, got {constants.shape}"
            )
        # Both trees index one flat slot vector.
        self.T = T if T.n_slots == n else ExprTree(T.root, n_slots=n)
        self.V = V if V.n_slots == n else ExprTree(V.root, n_slots=n)
        self.constants = constants
        self.constants.setflags(write=False)

    @property
    def n_slots(self):
        return max(self.T.n_slots, self.V.n_slots)

    @property
    def momenta(self):
        return self.T.variables

    @property
    def positions(self):
        return self.V.variables

    def with_constants(self, constants):
        return HamiltonianCandidate(self.T, self.V, constants)

    def value(self, bindings):
        t = evaluate(self.T, bindings, self.constants)
        v = evaluate(self.V, bindings, self.constants)
        return t + v

    def gradient(self, bindings):
        """dH/d(var) for every variable of T and V at a scalar point."""
        out = grad_vars(self.T, bindings, self.constants)
        out.update(grad_vars(self.V, bindings, self.constants))
        return out

    def gradient_batch(self, bind_arrays, wrt):
        """Batched dH/d(var) for the requested variables (NaN on failure)."""
        p_names = tuple(n for n in wrt if n.startswith("p"))
        q_names = tuple(n for n in wrt if n.startswith("q"))
        out = grads_batch(self.T, bind_arrays, self.constants, wrt=p_names)
        out.update(grads_batch(self.V, bind_arrays, self.constants, wrt=q_names))
        return out

    def render(self):
        return f"{render_infix(self.T, self.constants)} + {render_infix(self.V, self.constants)}"


def shift_slots(node, offset):
    """Copy a node graph with every constant slot index shifted by offset."""
    if node.kind == _KIND_SLOT:
        return const_slot(node.slot + offset)
    if node.children:
        return Node(
            node.kind,
            node.symbol,
            [shift_slots(c, offset) for c in node.children],
            value=node.value,
        )
    return node


def combine_parsed(T_tree, V_tree, constants=None):
    """Join two independently parsed trees into a candidate.

    The potential tree's slots are shifted past the kinetic tree's so the
    candidate has one flat constant vector.
    """
    offset = T_tree.n_slots
    total = offset + V_tree.n_slots
    V_shifted = ExprTree(shift_slots(V_tree.root, offset), n_slots=total)
    if constants is None:
        constants = np.zeros(total)
    return HamiltonianCandidate(T_tree, V_shifted, constants)


# ---------------------------------------------------------------------------
# Numerical equivalence of gradient fields


def numeric_equivalence(
    a,
    b,
    domain,
    tol,
    n_points=256,
    seed=0,
    max_grad=None,
):
    """True iff the gradient fields of two candidates agree on a box.

    Hamiltonians determine the dynamics only through their gradients, so
    equivalence is tested as ``max |grad a - grad b|_inf <= tol`` over at
    least ``n_points`` quasi-random points of the per-variable box ``domain``.
    Points where either field fails to evaluate are resampled; if more than
    half of a draw fails, EquivalenceSamplingError is raised. ``max_grad``
    optionally treats points where either field exceeds that magnitude as
    out-of-domain (useful near the singularities of gravitational fields).
    """
    from scipy.stats import qmc

    names = sorted(set(a.momenta) | set(b.momenta) | set(a.positions) | set(b.positions))
    if not names:
        return True
    lows = np.array([domain[n][0] for n in names], dtype=float)
    highs = np.array([domain[n][1] for n in names], dtype=float)
    sampler = qmc.Halton(d=len(names), scramble=True, seed=seed)

    worst = 0.0
    n_valid = 0
    rounds = 0
    while n_valid < n_points:
        rounds += 1
        if rounds > 64:
            raise EquivalenceSamplingError(
                "could not collect enough valid equivalence sample points"
            )
        draw = sampler.random(n_points)
        pts = lows + draw * (highs - lows)
        bind = {n: pts[:, i] for i, n in enumerate(names)}
        ga = a.gradient_batch(bind, names)
        gb = b.gradient_batch(bind, names)
        mat_a = np.stack([ga[n] for n in names], axis=1)
        mat_b = np.stack([gb[n] for n in names], axis=1)
        ok = np.all(np.isfinite(mat_a), axis=1) & np.all(np.isfinite(mat_b), axis=1)
        if max_grad is not None:
            ok &= (np.abs(mat_a).max(axis=1) <= max_grad) & (
                np.abs(mat_b).max(axis=1) <= max_grad
            )
        if np.count_nonzero(~ok) > n_points // 2:
            raise EquivalenceSamplingError(
                f"{np.count_nonzero(~ok)} of {n_points} equivalence points failed"
            )
        if np.any(ok):
            diff = np.abs(mat_a[ok] - mat_b[ok]).max()
            worst = max(worst, float(diff))
            if worst > tol:
                return False
        n_valid += int(np.count_nonzero(ok))
    return worst <= tol


# ---------------------------------------------------------------------------
# Infix text form

_INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def format_constant(x):
    return f"{float(x):.6g}"


def render_infix(tree, constants=None):
    """Infix text with explicit parentheses; constants to 6 significant digits."""

    def walk(node):
        if node.kind == _KIND_VAR:
            return node.symbol
        if node.kind == _KIND_LIT:
            return format_constant(node.value)
        if node.kind == _KIND_SLOT:
            if constants is None:
                return f"c{node.slot}"
            return format_constant(constants[node.slot])
        if node.symbol in ("cos", "sin"):
            return f"{node.symbol}({walk(node.children[0])})"
        sym = _INFIX_SYMBOL[node.symbol]
        return f"({walk(node.children[0])} {sym} {walk(node.children[1])})"

    return walk(tree.root)


_NUMBER_CHARS = "0123456789."


class _InfixParser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def error(self, message):
        raise ExpressionSyntaxError(message, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self):
        node = self.expr()
        self.skip_ws()
        if self.pos != len(self.text):
            self.error("unexpected trailing text")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in ("+", "-"):
            sym = self.peek()
            self.pos += 1
            rhs = self.term()
            node = op("add" if sym == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() in ("*", "/"):
            sym = self.peek()
            self.pos += 1
            rhs = self.unary()
            node = op("mul" if sym == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek() == "-":
            self.pos += 1
            inner = self.unary()
            if inner.kind == _KIND_LIT:
                return literal(-inner.value)
            return op("sub", literal(0.0), inner)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == "^":
            self.pos += 1
            expo = self.unary()  # right-associative
            return op("pow", base, expo)
        return base

    def atom(self):
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            node = self.expr()
            self.expect(")")
            return node
        if ch and (ch.isdigit() or ch == "."):
            start = self.pos
            while self.pos < len(self.text) and (
                self.text[self.pos] in _NUMBER_CHARS
                or self.text[self.pos] in "eE"
                or (
                    self.text[self.pos] in "+-"
                    and self.text[self.pos - 1] in "eE"
                )
            ):
                self.pos += 1
            try:
                return literal(float(self.text[start : self.pos]))
            except ValueError:
                self.pos = start
                self.error("bad number literal")
        if ch and ch.isalpha():
            start = self.pos
            while self.pos < len(self.text) and (
                self.text[self.pos].isalnum() or self.text[self.pos] == "_"
            ):
                self.pos += 1
            name = self.text[start : self.pos]
            if name in ("cos", "sin"):
                self.expect("(")
                inner = self.expr()
                self.expect(")")
                return op(name, inner)
            return var(name)
        self.error("expected expression")


def parse_infix(text):
    """Parse report-format infix text into a literal-constant expression tree."""
    return ExprTree(_InfixParser(text).parse())


def split_separable(tree):
    """Split an expression into (T, V) by its top-level additive terms.

    Terms using only momenta go to T, only positions (or no variables) to V;
    a mixed term raises SeparabilityError.
    """
    terms = []

    def flatten(node, sign):
        if node.kind == _KIND_OP and node.symbol == "add":
            flatten(node.children[0], sign)
            flatten(node.children[1], sign)
        elif node.kind == _KIND_OP and node.symbol == "sub":
            flatten(node.children[0], sign)
            flatten(node.children[1], -sign)
        else:
            terms.append((sign, node))

    flatten(tree.root, +1)

    def assemble(parts):
        acc = None
        for sign, node in parts:
            if acc is None:
                acc = node if sign > 0 else op("sub", literal(0.0), node)
            else:
                acc = op("add", acc, node) if sign > 0 else op("sub", acc, node)
        return acc if acc is not None else literal(0.0)

    t_parts, v_parts = [], []
    for sign, node in terms:
        sub_vars = ExprTree(node).variables
        uses_p = any(v.startswith("p") for v in sub_vars)
        uses_q = any(v.startswith("q") for v in sub_vars)
        if uses_p and uses_q:
            raise SeparabilityError(
                "a single additive term mixes positions and momenta"
            )
        (t_parts if uses_p else v_parts).append((sign, node))

    return HamiltonianCandidate(
        ExprTree(assemble(t_parts)), ExprTree(assemble(v_parts))
    )


def parse_hamiltonian_text(text):
    """Parse infix text straight into a separable candidate."""
    return split_separable(parse_infix(text))
