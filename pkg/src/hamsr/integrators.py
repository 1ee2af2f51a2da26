"""Fourth-order symplectic integration.

The stepper is the classic four-substep composition (Forest/Ruth,
Candy/Rozmus): per substep a position drift with coefficient c_j using
dT/dp, then a momentum kick with coefficient d_j using dV/dq.

Coefficient note: with s = 2^(1/3), the scheme uses
    c1 = c4 = 1/(2(2-s)),  c2 = c3 = (1-s)/(2(2-s)),
    d1 = d3 = 1/(2-s),     d2 = -s/(2-s),             d4 = 0.
Some write-ups print d2 with a positive sign; that variant does not sum to 1
and measures first-order convergence, so the negated value is used here (the
order-4 property test pins it). Similarly the kick applies p <- p - d h dV/dq,
the sign demanded by Hamilton's equations.

``step4`` is generic over the state algebra: anything supporting `+` between
states and `float * state` works, so the same stepper serves plain numpy
arrays (data generation), reverse-mode tensors (coupling-network training)
and jet vectors (constant fitting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .duals import Jet, JetVec
from .errors import DomainError, FieldError
from .expressions import grad_jets

_S = 2.0 ** (1.0 / 3.0)
DRIFT_COEFFS = (
    1.0 / (2.0 * (2.0 - _S)),
    (1.0 - _S) / (2.0 * (2.0 - _S)),
    (1.0 - _S) / (2.0 * (2.0 - _S)),
    1.0 / (2.0 * (2.0 - _S)),
)
KICK_COEFFS = (
    1.0 / (2.0 - _S),
    -_S / (2.0 - _S),
    1.0 / (2.0 - _S),
    0.0,
)


@dataclass(frozen=True)
class GradientField:
    """Callables returning dT/dp (momenta -> vector) and dV/dq."""

    dT_dp: callable
    dV_dq: callable


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled phase-space trajectory; q and p are (N, D)."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if not (len(self.times) == len(self.q) == len(self.p)):
            raise ValueError("times, q, p must have equal length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_points(self):
        return len(self.times)

    def states(self):
        """All coordinates as one flat array (for error metrics)."""
        return np.concatenate([np.ravel(self.q), np.ravel(self.p)])


def step4(q, p, h, field):
    """One fourth-order step of size h from (q, p)."""
    for c, d in zip(DRIFT_COEFFS, KICK_COEFFS):
        q = q + (c * h) * field.dT_dp(p)
        if d != 0.0:
            p = p - (d * h) * field.dV_dq(q)
    return q, p


def rollout(field, q0, p0, t0, t1, n_points, substeps=1):
    """Integrate to n_points uniform times, substeps steps per interval."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    times = np.linspace(t0, t1, n_points)
    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    qs = np.empty((n_points, q.size))
    ps = np.empty((n_points, p.size))
    qs[0], ps[0] = q, p
    h = (t1 - t0) / (n_points - 1) / substeps
    for i in range(1, n_points):
        for _ in range(substeps):
            try:
                q, p = step4(q, p, h, field)
            except Exception as exc:  # noqa: BLE001 - re-tag with position
                raise FieldError(f"gradient field failed at output step {i}", step=i) from exc
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise FieldError(f"state became non-finite at output step {i}", step=i)
        qs[i], ps[i] = q, p
    return Trajectory(times=times, q=qs, p=ps)


# ---------------------------------------------------------------------------
# Differentiable candidate rollouts (jet algebra)


def candidate_jet_field(candidate, q_names, p_names, const_jets):
    """Gradient field of a symbolic candidate over jet-vector states."""
    zero = Jet(np.float64(0.0))

    def dT_dp(p_vec):
        bind = dict(zip(p_names, p_vec.jets))
        grads = grad_jets(candidate.T, bind, const_jets)
        return JetVec([grads.get(name, zero) for name in p_names])

    def dV_dq(q_vec):
        bind = dict(zip(q_names, q_vec.jets))
        grads = grad_jets(candidate.V, bind, const_jets)
        return JetVec([grads.get(name, zero) for name in q_names])

    return GradientField(dT_dp=dT_dp, dV_dq=dV_dq)


def _window_states(dataset, horizon):
    n = dataset.n_points
    if n <= horizon:
        raise ValueError("dataset too short for the requested horizon")
    B = n - horizon
    starts = slice(0, B)
    return B, dataset.q[starts], dataset.p[starts]


def predict_windows(candidate, constants, dataset, horizon=1, substeps=1):
    """Predicted states from every window start; no tangents.

    Returns (pred_q, pred_p) of shape (horizon, B, D): the k-th entry is the
    prediction k intervals ahead of each start point. NaNs propagate.
    """
    q_names, p_names = dataset.variable_names()
    B, q0, p0 = _window_states(dataset, horizon)
    const_jets = [Jet(np.float64(c)) for c in np.asarray(constants, dtype=float)]
    field = candidate_jet_field(candidate, q_names, p_names, const_jets)
    h = dataset.dt / substeps
    q = JetVec([Jet(q0[:, i].copy()) for i in range(q0.shape[1])])
    p = JetVec([Jet(p0[:, i].copy()) for i in range(p0.shape[1])])
    pred_q = np.empty((horizon, B, q0.shape[1]))
    pred_p = np.empty((horizon, B, p0.shape[1]))
    with np.errstate(all="ignore"):
        for k in range(horizon):
            for _ in range(substeps):
                q, p = step4(q, p, h, field)
            for i, jet in enumerate(q.jets):
                pred_q[k, :, i] = np.broadcast_to(jet.val, (B,))
            for i, jet in enumerate(p.jets):
                pred_p[k, :, i] = np.broadcast_to(jet.val, (B,))
    return pred_q, pred_p


def rollout_loss_and_const_grads(candidate, dataset, horizon=1, substeps=1):
    """MSE of window predictions and its exact constant gradients.

    Every window of the dataset is integrated ``horizon`` intervals ahead
    from the observed start state; the loss is the mean squared error over
    all predicted coordinates, and its gradient with respect to every
    constant slot is obtained by chaining jet tangents through each substep.
    Raises DomainError if any evaluation leaves the real domain.
    """
    q_names, p_names = dataset.variable_names()
    B, q0, p0 = _window_states(dataset, horizon)
    S = candidate.n_slots
    const_jets = [
        Jet(np.float64(c), _unit_tangent(S, i))
        for i, c in enumerate(candidate.constants)
    ]
    field = candidate_jet_field(candidate, q_names, p_names, const_jets)
    h = dataset.dt / substeps
    q = JetVec([Jet(q0[:, i].copy()) for i in range(q0.shape[1])])
    p = JetVec([Jet(p0[:, i].copy()) for i in range(p0.shape[1])])

    D = q0.shape[1]
    total = horizon * B * 2 * D
    loss = 0.0
    grad = np.zeros(S)
    with np.errstate(all="ignore"):
        for k in range(horizon):
            for _ in range(substeps):
                q, p = step4(q, p, h, field)
            tq = dataset.q[k + 1 : k + 1 + B]
            tp = dataset.p[k + 1 : k + 1 + B]
            for vec, target in ((q, tq), (p, tp)):
                for i, jet in enumerate(vec.jets):
                    err = np.broadcast_to(jet.val, (B,)) - target[:, i]
                    loss += float(np.dot(err, err))
                    if jet.dc is not None:
                        dc = np.broadcast_to(jet.dc, (S, B))
                        grad += 2.0 * (dc @ err)
    loss /= total
    grad /= total
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DomainError("rollout left the expression's domain")
    return loss, grad


def _unit_tangent(n_slots, slot):
    dc = np.zeros((n_slots, 1))
    dc[slot, 0] = 1.0
    return dc
