"""Forward-mode tangent arithmetic for expression constants.

A :class:`Jet` carries a batch of values together with the derivatives of
those values with respect to every ephemeral constant slot of a candidate.
Propagating jets through the expression evaluator *and* through every
integrator substep yields exact constant gradients of a rollout loss by the
chain rule, without retaining any computation graph.

``val`` has shape ``(B,)`` (or is a 0-d array for broadcast scalars) and
``dc`` has shape ``(S, B)`` (or ``(S, 1)``), where ``S`` is the number of
constant slots. ``dc is None`` means the tangent block is identically zero;
most literals and raw data values take this fast path.

Invalid operations (0^-1, log of a negative, ...) are not raised here: they
produce NaN/inf entries that callers detect and translate into DomainError.
All arithmetic runs under ``np.errstate`` suppression for that reason.
"""

from __future__ import annotations

import numpy as np

_INT_TOL = 1e-9


class Jet:
    __slots__ = ("val", "dc")

    def __init__(self, val, dc=None):
        self.val = val
        self.dc = dc

    def __repr__(self):
        return f"Jet(val={self.val!r}, dc={'0' if self.dc is None else self.dc.shape})"

    # Operators so that generic integrator code (state + coef * field) works
    # on jets exactly as it does on plain arrays.
    def __add__(self, other):
        return jadd(self, other)

    def __sub__(self, other):
        return jsub(self, other)

    def __mul__(self, other):
        if isinstance(other, Jet):
            return jmul(self, other)
        return jscale(self, other)

    def __rmul__(self, other):
        return jscale(self, other)

    def __neg__(self):
        return jneg(self)


def jconst(x):
    """Jet for a value with zero constant tangents."""
    return Jet(np.asarray(x, dtype=float))


def jslot(value, slot, n_slots):
    """Jet for constant slot ``slot`` of ``n_slots`` (unit self-tangent)."""
    dc = np.zeros((n_slots, 1))
    dc[slot, 0] = 1.0
    return Jet(np.float64(value), dc)


def _add_dc(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def jadd(a, b):
    return Jet(a.val + b.val, _add_dc(a.dc, b.dc))


def jsub(a, b):
    if b.dc is None:
        return Jet(a.val - b.val, a.dc)
    if a.dc is None:
        return Jet(a.val - b.val, -b.dc)
    return Jet(a.val - b.val, a.dc - b.dc)


def jneg(a):
    return Jet(-a.val, None if a.dc is None else -a.dc)


def jscale(a, s):
    """Multiply by a python/numpy scalar."""
    return Jet(a.val * s, None if a.dc is None else a.dc * s)


def jmul(a, b):
    dc = None
    if a.dc is not None:
        dc = a.dc * b.val
    if b.dc is not None:
        dc = _add_dc(dc, b.dc * a.val)
    return Jet(a.val * b.val, dc)


def jdiv(a, b):
    with np.errstate(all="ignore"):
        inv = 1.0 / b.val
        val = a.val * inv
        dc = None
        if a.dc is not None:
            dc = a.dc * inv
        if b.dc is not None:
            dc = _add_dc(dc, b.dc * (-val * inv))
    return Jet(val, dc)


def jrecip(a):
    with np.errstate(all="ignore"):
        inv = 1.0 / a.val
        dc = None if a.dc is None else a.dc * (-inv * inv)
    return Jet(inv, dc)


def jsin(a):
    c = np.cos(a.val)
    return Jet(np.sin(a.val), None if a.dc is None else a.dc * c)


def jcos(a):
    s = np.sin(a.val)
    return Jet(np.cos(a.val), None if a.dc is None else a.dc * (-s))


def jlog(a):
    with np.errstate(all="ignore"):
        val = np.log(a.val)
        dc = None if a.dc is None else a.dc / a.val
    return Jet(val, dc)


def pow_values(base, expo):
    """Real power with the domain convention used throughout the package.

    Negative base is defined only for (numerically) integer exponents, in
    which case the sign alternates as usual; otherwise the entry is NaN.
    0^negative is inf, 0^0 follows numpy (= 1).
    """
    base = np.asarray(base, dtype=float)
    expo = np.asarray(expo, dtype=float)
    with np.errstate(all="ignore"):
        out = np.abs(base) ** expo
        neg = base < 0
        if np.any(neg):
            rounded = np.rint(expo)
            is_int = np.abs(expo - rounded) < _INT_TOL
            odd = np.broadcast_to(np.mod(rounded, 2.0) != 0.0, out.shape)
            neg_b = np.broadcast_to(neg, out.shape)
            int_b = np.broadcast_to(is_int, out.shape)
            out = np.where(neg_b & int_b & odd, -out, out)
            out = np.where(neg_b & ~int_b, np.nan, out)
    return out


def jpow(a, b):
    """a ** b with tangents; see :func:`pow_values` for the domain rules."""
    with np.errstate(all="ignore"):
        val = pow_values(a.val, b.val)
        dc = None
        if a.dc is not None:
            # d/dc a^b = b * a^(b-1) * a.dc -- valid on the negative-integer
            # branch as well because pow_values handles the sign.
            dc = a.dc * (b.val * pow_values(a.val, b.val - 1.0))
        if b.dc is not None:
            # The exponent-side derivative needs log(a); negative bases go
            # NaN here, which is the correct domain outcome.
            dc = _add_dc(dc, b.dc * (val * np.log(a.val)))
    return Jet(val, dc)


def jet_all_finite(a):
    if not np.all(np.isfinite(a.val)):
        return False
    return a.dc is None or bool(np.all(np.isfinite(a.dc)))


class JetVec:
    """Fixed-length vector of jets; supports the integrator's state algebra."""

    __slots__ = ("jets",)

    def __init__(self, jets):
        self.jets = list(jets)

    def __len__(self):
        return len(self.jets)

    def __getitem__(self, i):
        return self.jets[i]

    def __add__(self, other):
        return JetVec([jadd(a, b) for a, b in zip(self.jets, other.jets)])

    def __sub__(self, other):
        return JetVec([jsub(a, b) for a, b in zip(self.jets, other.jets)])

    def __rmul__(self, s):
        return JetVec([jscale(a, s) for a in self.jets])
