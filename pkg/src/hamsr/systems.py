"""Benchmark systems, dataset generation, noise, and persistence.

Four built-in systems with their published initial-condition tables:

* oscillator:  H = p^2/(2m) + (1/2) m w^2 q^2          (30 pts, t in [0, 3])
* pendulum:    H = p^2/(2 m l^2) + m g l (1 - cos q)   (50 pts, t in [0, 5])
* two_body:    H = sum p_i^2/(2 m_i) - G m_i m_j / r_ij  (200 pts, t in [0, 20])
* three_body:  same form over three pairs               (200 pts, t in [0, 20])

Gravitational systems use equal masses and G = 1. The pair potential is
attractive (enters H with a minus sign): the repulsive variant unbinds the
published initial conditions and removes the sustained interaction that the
coupling-extraction benchmarks measure. The three-body tables state no time
span; [0, 20] matches the two-body setup and is configurable.

Default per-system noise levels follow the experiments: sigma = 0.001
everywhere except the pendulum's 0.005.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .expressions import (
    ExprTree,
    HamiltonianCandidate,
    literal,
    op,
    var,
)
from .integrators import GradientField, Trajectory, rollout

DIM_LETTERS = "xyz"

SYSTEM_KINDS = ("oscillator", "pendulum", "two_body", "three_body")

DEFAULT_NOISE_SIGMA = {
    "oscillator": 0.001,
    "pendulum": 0.005,
    "two_body": 0.001,
    "three_body": 0.001,
}

GENERATION_SUBSTEPS = 100


def variable_names(n_bodies, n_dims):
    qs = tuple(
        f"q{i + 1}{DIM_LETTERS[d]}" for i in range(n_bodies) for d in range(n_dims)
    )
    ps = tuple(
        f"p{i + 1}{DIM_LETTERS[d]}" for i in range(n_bodies) for d in range(n_dims)
    )
    return qs, ps


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    constants: dict
    q0: tuple
    p0: tuple
    t0: float
    t1: float
    n_points: int
    n_bodies: int
    n_dims: int

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS and self.kind != "custom":
            raise ConfigError(f"unknown system kind {self.kind!r}")
        D = self.n_bodies * self.n_dims
        if len(self.q0) != D or len(self.p0) != D:
            raise ConfigError("initial conditions do not match body/dim counts")
        for key, val in self.constants.items():
            if key.startswith("m") and val <= 0:
                raise ConfigError(f"mass {key} must be positive")

    def variable_names(self):
        return variable_names(self.n_bodies, self.n_dims)


# Initial-condition tables (three datasets per system).
_OSCILLATOR_TABLE = (
    dict(m=1.23, omega=1.65, q0=(-0.05,), p0=(0.42,)),
    dict(m=0.63, omega=1.30, q0=(0.27,), p0=(-0.29,)),
    dict(m=1.69, omega=0.83, q0=(0.06,), p0=(-0.54,)),
)
_PENDULUM_TABLE = (
    dict(m=0.47, l=1.23, g=1.95, q0=(1.32,), p0=(0.23,)),
    dict(m=1.10, l=0.73, g=1.02, q0=(1.37,), p0=(0.12,)),
    dict(m=0.68, l=0.33, g=1.59, q0=(0.87,), p0=(0.15,)),
)
_TWO_BODY_TABLE = (
    dict(q0=(0.0, 0.0, 1.0, 1.0), p0=(0.0, 1.0, 1.0, 0.0)),
    dict(q0=(0.0, 0.0, 0.5, 1.0), p0=(0.34, 0.30, 1.00, 0.21)),
    dict(q0=(0.0, 0.5, 0.3, -0.24), p0=(0.40, -1.00, -0.80, -2.10)),
)
_THREE_BODY_TABLE = (
    dict(
        q0=(0.0, 0.0, 1.0, 1.0, -1.0, -1.0),
        p0=(0.5, 0.3, 1.1, -0.4, -0.2, 0.5),
    ),
    dict(
        q0=(0.0, 0.0, -3.0, 0.0, 3.0, 0.0),
        p0=(0.0, -1.0, 0.5, 0.0, 0.5, 0.0),
    ),
    dict(
        q0=(0.25, 0.25, 2.0, 1.5, 3.0, -2.0),
        p0=(0.0, -1.0, 0.5, -0.15, 0.8, 0.25),
    ),
)


def paper_system(kind, dataset_index, t1_three_body=20.0):
    """SystemSpec for one of the twelve built-in datasets (index 1..3)."""
    if dataset_index not in (1, 2, 3):
        raise ConfigError("dataset index must be 1, 2 or 3")
    i = dataset_index - 1
    if kind == "oscillator":
        row = _OSCILLATOR_TABLE[i]
        return SystemSpec(
            kind="oscillator",
            constants={"m": row["m"], "omega": row["omega"]},
            q0=row["q0"],
            p0=row["p0"],
            t0=0.0,
            t1=3.0,
            n_points=30,
            n_bodies=1,
            n_dims=1,
        )
    if kind == "pendulum":
        row = _PENDULUM_TABLE[i]
        return SystemSpec(
            kind="pendulum",
            constants={"m": row["m"], "l": row["l"], "g": row["g"]},
            q0=row["q0"],
            p0=row["p0"],
            t0=0.0,
            t1=5.0,
            n_points=50,
            n_bodies=1,
            n_dims=1,
        )
    if kind == "two_body":
        row = _TWO_BODY_TABLE[i]
        return SystemSpec(
            kind="two_body",
            constants={"G": 1.0, "m1": 1.0, "m2": 1.0},
            q0=row["q0"],
            p0=row["p0"],
            t0=0.0,
            t1=20.0,
            n_points=200,
            n_bodies=2,
            n_dims=2,
        )
    if kind == "three_body":
        row = _THREE_BODY_TABLE[i]
        return SystemSpec(
            kind="three_body",
            constants={"G": 1.0, "m1": 1.0, "m2": 1.0, "m3": 1.0},
            q0=row["q0"],
            p0=row["p0"],
            t0=0.0,
            t1=t1_three_body,
            n_points=200,
            n_bodies=3,
            n_dims=2,
        )
    raise ConfigError(f"unknown system kind {kind!r}")


# ---------------------------------------------------------------------------
# Ground truths


def _nbody_candidate(spec):
    G = spec.constants["G"]
    n, m = spec.n_bodies, spec.n_dims
    qs, ps = spec.variable_names()
    kin = None
    for i in range(n):
        mass = spec.constants[f"m{i + 1}"]
        for d in range(m):
            p = var(ps[i * m + d])
            term = op("div", op("mul", p, p), literal(2.0 * mass))
            kin = term if kin is None else op("add", kin, term)
    pot = None
    for i in range(n):
        for j in range(i + 1, n):
            mi = spec.constants[f"m{i + 1}"]
            mj = spec.constants[f"m{j + 1}"]
            dist_sq = None
            for d in range(m):
                diff = op("sub", var(qs[i * m + d]), var(qs[j * m + d]))
                sq = op("mul", diff, diff)
                dist_sq = sq if dist_sq is None else op("add", dist_sq, sq)
            dist = op("pow", dist_sq, literal(0.5))
            term = op("div", literal(-G * mi * mj), dist)
            pot = term if pot is None else op("add", pot, term)
    return HamiltonianCandidate(ExprTree(kin), ExprTree(pot))


def _nbody_field(spec):
    G = spec.constants["G"]
    n, m = spec.n_bodies, spec.n_dims
    masses = np.array([spec.constants[f"m{i + 1}"] for i in range(n)])
    inv_m = np.repeat(1.0 / masses, m)

    def dT_dp(p):
        return p * inv_m

    def dV_dq(q):
        pts = q.reshape(n, m)
        out = np.zeros_like(pts)
        for i in range(n):
            for j in range(i + 1, n):
                d = pts[i] - pts[j]
                r = np.sqrt(np.sum(d * d))
                # dV/dq_i of -G mi mj / r; the pair is computed once so the
                # two contributions cancel exactly in total momentum.
                f = G * masses[i] * masses[j] * d / r**3
                out[i] += f
                out[j] -= f
        return out.ravel()

    return GradientField(dT_dp=dT_dp, dV_dq=dV_dq)


def ground_truth(spec):
    """Symbolic candidate and exact closed-form gradient field for a spec."""
    if spec.kind == "oscillator":
        m, w = spec.constants["m"], spec.constants["omega"]
        p, q = var("p1x"), var("q1x")
        T = ExprTree(op("div", op("mul", p, p), literal(2.0 * m)))
        V = ExprTree(op("mul", literal(0.5 * m * w * w), op("mul", q, q)))
        field = GradientField(
            dT_dp=lambda pv: pv / m,
            dV_dq=lambda qv: (m * w * w) * qv,
        )
        return HamiltonianCandidate(T, V), field
    if spec.kind == "pendulum":
        m, l, g = spec.constants["m"], spec.constants["l"], spec.constants["g"]
        p, q = var("p1x"), var("q1x")
        T = ExprTree(op("div", op("mul", p, p), literal(2.0 * m * l * l)))
        V = ExprTree(
            op("mul", literal(m * g * l), op("sub", literal(1.0), op("cos", q)))
        )
        field = GradientField(
            dT_dp=lambda pv: pv / (m * l * l),
            dV_dq=lambda qv: (m * g * l) * np.sin(qv),
        )
        return HamiltonianCandidate(T, V), field
    if spec.kind in ("two_body", "three_body"):
        return _nbody_candidate(spec), _nbody_field(spec)
    raise ConfigError(f"no ground truth for system kind {spec.kind!r}")


def hamiltonian_values(spec, trajectory):
    """Ground-truth H along a trajectory (for conservation diagnostics)."""
    candidate, _ = ground_truth(spec)
    qs, ps = spec.variable_names()
    values = np.empty(trajectory.n_points)
    for k in range(trajectory.n_points):
        bind = {name: trajectory.q[k, i] for i, name in enumerate(qs)}
        bind.update({name: trajectory.p[k, i] for i, name in enumerate(ps)})
        values[k] = candidate.value(bind)
    return values


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Dataset:
    spec: SystemSpec
    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def n_points(self):
        return len(self.times)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def variable_names(self):
        return self.spec.variable_names()

    def trajectory(self):
        return Trajectory(times=self.times, q=self.q, p=self.p)

    def state_ranges(self):
        """Observed per-variable (lo, hi), padded so no interval collapses."""
        qs, ps = self.variable_names()
        out = {}
        for names, arr in ((qs, self.q), (ps, self.p)):
            for i, name in enumerate(names):
                lo, hi = float(arr[:, i].min()), float(arr[:, i].max())
                pad = max(0.05 * (hi - lo), 1e-3)
                out[name] = (lo - pad, hi + pad)
        return out


def generate(spec, substeps=GENERATION_SUBSTEPS):
    """Noise-free dataset from the ground-truth field."""
    _, field = ground_truth(spec)
    traj = rollout(
        field, spec.q0, spec.p0, spec.t0, spec.t1, spec.n_points, substeps=substeps
    )
    return Dataset(spec=spec, times=traj.times, q=traj.q, p=traj.p)


def add_noise(dataset, sigma, seed):
    """Additive iid Gaussian noise on every q and p coordinate (t unchanged)."""
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    if sigma == 0:
        return dataset
    rng = np.random.default_rng(seed)
    return replace(
        dataset,
        q=dataset.q + rng.normal(0.0, sigma, size=dataset.q.shape),
        p=dataset.p + rng.normal(0.0, sigma, size=dataset.p.shape),
        noise_sigma=sigma,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Persistence (canonical JSON; one sample row per line)

FORMAT_VERSION = 1

_HEADER_KEYS = (
    "format_version",
    "system",
    "constants",
    "bodies",
    "dims",
    "initial_q",
    "initial_p",
    "t0",
    "t1",
    "n_points",
    "noise_sigma",
    "seed",
)


def dataset_to_text(dataset):
    spec = dataset.spec
    head = {
        "format_version": FORMAT_VERSION,
        "system": spec.kind,
        "constants": dict(sorted(spec.constants.items())),
        "bodies": spec.n_bodies,
        "dims": spec.n_dims,
        "initial_q": list(spec.q0),
        "initial_p": list(spec.p0),
        "t0": spec.t0,
        "t1": spec.t1,
        "n_points": spec.n_points,
        "noise_sigma": dataset.noise_sigma,
        "seed": dataset.seed,
    }
    lines = ["{"]
    for key in _HEADER_KEYS:
        lines.append(f' "{key}": {json.dumps(head[key], sort_keys=True)},')
    lines.append(' "samples": [')
    n = dataset.n_points
    for k in range(n):
        row = [float(dataset.times[k])] + [float(x) for x in dataset.q[k]] + [
            float(x) for x in dataset.p[k]
        ]
        comma = "," if k < n - 1 else ""
        lines.append(f"  {json.dumps(row)}{comma}")
    lines.append(" ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save(dataset, path):
    Path(path).write_text(dataset_to_text(dataset), encoding="utf-8")


def dataset_from_text(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
    missing = [k for k in _HEADER_KEYS + ("samples",) if k not in doc]
    if missing:
        raise FormatError(f"missing fields: {missing}")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {doc['format_version']}")
    n, m = doc["bodies"], doc["dims"]
    D = n * m
    spec = SystemSpec(
        kind=doc["system"],
        constants=dict(doc["constants"]),
        q0=tuple(doc["initial_q"]),
        p0=tuple(doc["initial_p"]),
        t0=float(doc["t0"]),
        t1=float(doc["t1"]),
        n_points=int(doc["n_points"]),
        n_bodies=n,
        n_dims=m,
    )
    rows = doc["samples"]
    if len(rows) != spec.n_points:
        raise FormatError(
            f"sample table has {len(rows)} rows, header declares {spec.n_points}"
        )
    times = np.empty(len(rows))
    q = np.empty((len(rows), D))
    p = np.empty((len(rows), D))
    for k, row in enumerate(rows):
        if len(row) != 1 + 2 * D:
            raise FormatError(
                f"sample row {k} has {len(row)} fields, expected {1 + 2 * D}"
            )
        times[k] = row[0]
        q[k] = row[1 : 1 + D]
        p[k] = row[1 + D :]
    return Dataset(
        spec=spec,
        times=times,
        q=q,
        p=p,
        noise_sigma=float(doc["noise_sigma"]),
        seed=int(doc["seed"]),
    )


def load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return dataset_from_text(text)
