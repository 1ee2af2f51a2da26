"""Coupling-structure extraction with prediction networks.

The kinetic and potential parts of a separable Hamiltonian are parameterized
as sums of per-subfunction MLPs whose input groups enforce a candidate
coupling structure (single network / one per variable / one per body / one
per body pair). Networks train by time-evolving the observed system through
the fourth-order integrator and taking loss against future observations, so
a structure that the true Hamiltonian violates shows up as a prediction
penalty.

The staged search mirrors the published procedure: train an unconstrained
baseline, probe the potential side from most to least constrained while the
kinetic network is held frozen, repeat for the kinetic side, then refine
with backward elimination over pairs, composite inner functions, and
parameter-tied symmetry. Coupling probes compare against the unconstrained
baseline; elimination/composite/symmetry stages compare against the current
accepted structure, matching how the published tables shift their baselines.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError
from .integrators import GradientField, step4
from .nn import Adam, Mlp, MlpConfig, ParamStore
from .rewards import nrmse_reward

FORM_KINDS = ("none", "complete_decoupling", "dimensional", "pairwise")
COMPOSITE_KINDS = ("none", "sum", "product", "manhattan", "euclidean")


def all_pairs(n_bodies):
    return tuple(
        (i + 1, j + 1) for i in range(n_bodies) for j in range(i + 1, n_bodies)
    )


@dataclass(frozen=True)
class CouplingForm:
    kind: str = "none"
    pairs: tuple = ()

    def __post_init__(self):
        if self.kind not in FORM_KINDS:
            raise ConfigError(f"unknown coupling form {self.kind!r}")
        if self.kind == "pairwise" and not self.pairs:
            raise ConfigError("pairwise form needs a nonempty pair set")
        if self.kind != "pairwise" and self.pairs:
            raise ConfigError("only the pairwise form carries pairs")

    def describe(self):
        if self.kind == "pairwise":
            pairs = ",".join(f"({i},{j})" for i, j in self.pairs)
            return f"pairwise[{pairs}]"
        return self.kind


@dataclass(frozen=True)
class CouplingSpec:
    """Extracted structural priors for one system."""

    T_form: CouplingForm = CouplingForm()
    V_form: CouplingForm = CouplingForm()
    T_composite: str = "none"
    V_composite: str = "none"
    T_symmetric: bool = False
    V_symmetric: bool = False

    def __post_init__(self):
        for comp, form in (
            (self.T_composite, self.T_form),
            (self.V_composite, self.V_form),
        ):
            if comp not in COMPOSITE_KINDS:
                raise ConfigError(f"unknown composite {comp!r}")
            if comp != "none" and form.kind in ("none", "complete_decoupling"):
                raise ConfigError(
                    "composites only apply to subfunctions with several inputs"
                )

    def describe(self, side):
        form = self.T_form if side == "T" else self.V_form
        comp = self.T_composite if side == "T" else self.V_composite
        sym = self.T_symmetric if side == "T" else self.V_symmetric
        bits = [form.describe()]
        if comp != "none":
            bits.append(comp)
        if sym:
            bits.append("symmetric")
        return "+".join(bits)


def no_priors():
    """The unconstrained spec used when no extraction has been run."""
    return CouplingSpec()


SPEC_FORMAT_VERSION = 1


def coupling_spec_to_json(spec):
    def side(form, comp, sym):
        return {
            "form": form.kind,
            "pairs": [list(p) for p in form.pairs],
            "composite": comp,
            "symmetric": sym,
        }

    return json.dumps(
        {
            "format_version": SPEC_FORMAT_VERSION,
            "T": side(spec.T_form, spec.T_composite, spec.T_symmetric),
            "V": side(spec.V_form, spec.V_composite, spec.V_symmetric),
        },
        indent=1,
        sort_keys=True,
    ) + "\n"


def coupling_spec_from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
    try:
        if doc["format_version"] != SPEC_FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {doc['format_version']}")
        sides = {}
        for key in ("T", "V"):
            s = doc[key]
            sides[key] = (
                CouplingForm(kind=s["form"], pairs=tuple(tuple(p) for p in s["pairs"])),
                s["composite"],
                bool(s["symmetric"]),
            )
    except KeyError as exc:
        raise FormatError(f"missing field {exc}") from exc
    return CouplingSpec(
        T_form=sides["T"][0],
        V_form=sides["V"][0],
        T_composite=sides["T"][1],
        V_composite=sides["V"][1],
        T_symmetric=sides["T"][2],
        V_symmetric=sides["V"][2],
    )


def save_coupling_spec(spec, path):
    Path(path).write_text(coupling_spec_to_json(spec), encoding="utf-8")


def load_coupling_spec(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return coupling_spec_from_json(text)


# ---------------------------------------------------------------------------
# Structure-enforcing model


def form_groups(form, n_bodies, n_dims):
    """Variable-index groups (into the flat body-major state vector)."""
    D = n_bodies * n_dims
    if form.kind == "none":
        return [tuple(range(D))]
    if form.kind == "complete_decoupling":
        return [(i,) for i in range(D)]
    if form.kind == "dimensional":
        return [tuple(range(b * n_dims, (b + 1) * n_dims)) for b in range(n_bodies)]
    groups = []
    for i, j in form.pairs:
        gi = tuple(range((i - 1) * n_dims, i * n_dims))
        gj = tuple(range((j - 1) * n_dims, j * n_dims))
        groups.append(gi + gj)
    return groups


@dataclass(frozen=True)
class SympNetConfig:
    hidden_dim: int = 128
    depth: int = 8


class SympNetModel:
    """Sum-of-subfunction networks for T and V with enforced structure."""

    def __init__(self, n_bodies, n_dims, spec, net_cfg, seed):
        self.n_bodies = n_bodies
        self.n_dims = n_dims
        self.spec = spec
        self.net_cfg = net_cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.sides = {}
        for side, form, comp, sym in (
            ("T", spec.T_form, spec.T_composite, spec.T_symmetric),
            ("V", spec.V_form, spec.V_composite, spec.V_symmetric),
        ):
            groups = form_groups(form, n_bodies, n_dims)
            if comp != "none" and any(len(g) < 2 for g in groups):
                raise ConfigError(f"{side} composite on single-variable subfunction")
            if sym and len({len(g) for g in groups}) > 1:
                raise ConfigError("cannot tie subfunctions of different arity")
            in_dim = 1 if comp != "none" else len(groups[0])
            if not sym and comp == "none":
                in_dims = [len(g) for g in groups]
            else:
                in_dims = [in_dim] * len(groups)
            mlps = []
            if sym:
                shared = Mlp(
                    MlpConfig(in_dims[0], 1, net_cfg.hidden_dim, net_cfg.depth),
                    self.store,
                    f"{side}_shared",
                    rng,
                )
                mlps = [shared] * len(groups)
            else:
                for gi, dim in enumerate(in_dims):
                    mlps.append(
                        Mlp(
                            MlpConfig(dim, 1, net_cfg.hidden_dim, net_cfg.depth),
                            self.store,
                            f"{side}{gi}",
                            rng,
                        )
                    )
            self.sides[side] = (groups, comp, mlps)

    def side_param_names(self, side):
        return [n for n in self.store.names() if n.startswith(side)]

    def copy_side_from(self, other, side):
        """Copy this model's ``side`` weights from a structurally equal model."""
        for name in self.side_param_names(side):
            self.store[name].value = other.store[name].value.copy()

    def freeze_side(self, side):
        for name in self.side_param_names(side):
            self.store[name].requires_grad = False

    def trainable(self):
        return [t for t in self.store.tensors() if t.requires_grad]

    def _group_gradient(self, state, group, comp, mlp):
        """d(subfunction)/d(state columns) scattered to full width, on tape."""
        D = self.n_bodies * self.n_dims
        x = ad.cols(state, list(group))
        if comp == "none":
            _, gx = mlp.forward_with_input_grad(x)
            return ad.scatter_cols(gx, list(group), D)
        half = len(group) // 2
        if comp == "sum":
            r = ad.tsum(x, axis=1, keepdims=True)
            _, gr = mlp.forward_with_input_grad(r)
            ones = Tensor(np.ones((1, len(group))))
            return ad.scatter_cols(ad.matmul(gr, ones), list(group), D)
        if comp == "product":
            r = ad.cols(x, [0])
            for k in range(1, len(group)):
                r = ad.mul(r, ad.cols(x, [k]))
            _, gr = mlp.forward_with_input_grad(r)
            parts = []
            for k in range(len(group)):
                rest = None
                for j in range(len(group)):
                    if j == k:
                        continue
                    c = ad.cols(x, [j])
                    rest = c if rest is None else ad.mul(rest, c)
                parts.append(ad.mul(gr, rest))
            return ad.scatter_cols(ad.hstack(parts), list(group), D)
        # Distance composites: pair groups reduce the two bodies' difference,
        # single-body (dimensional) groups reduce the vector itself.
        is_pair = self.spec.T_form.kind == "pairwise" or self.spec.V_form.kind == "pairwise"
        if len(group) % 2 == 0 and comp in ("manhattan", "euclidean") and _group_is_pair(group, self.n_dims):
            a = ad.cols(x, list(range(half)))
            b = ad.cols(x, list(range(half, len(group))))
            diff = ad.sub(a, b)
        else:
            diff = x
            half = len(group)
        if comp == "manhattan":
            r = ad.tsum(ad.absval(diff), axis=1, keepdims=True)
            _, gr = mlp.forward_with_input_grad(r)
            sgn = Tensor(np.sign(diff.value))
            dcols = ad.mul(ad.matmul(gr, Tensor(np.ones((1, diff.value.shape[1])))), sgn)
        else:  # euclidean
            r = ad.sqrt(ad.tsum(ad.square(diff), axis=1, keepdims=True))
            _, gr = mlp.forward_with_input_grad(r)
            dcols = ad.mul(ad.matmul(ad.div(gr, r), Tensor(np.ones((1, diff.value.shape[1])))), diff)
        if diff is x:
            return ad.scatter_cols(dcols, list(group), D)
        full = ad.hstack([dcols, ad.mul(dcols, Tensor(np.full((1, 1), -1.0)))])
        return ad.scatter_cols(full, list(group), D)

    def gradient_field(self):
        """GradientField over (B, D) tensors (taped when grads are enabled)."""

        def make(side):
            groups, comp, mlps = self.sides[side]

            def grad_fn(state):
                out = None
                for group, mlp in zip(groups, mlps):
                    g = self._group_gradient(state, group, comp, mlp)
                    out = g if out is None else ad.add(out, g)
                return out

            return grad_fn

        return GradientField(dT_dp=make("T"), dV_dq=make("V"))

    def side_value(self, side, state):
        """Scalar side output (B, 1): sum of subfunction values."""
        groups, comp, mlps = self.sides[side]
        out = None
        for group, mlp in zip(groups, mlps):
            x = ad.cols(state, list(group))
            r = _reduce_composite(x, comp, group, self.n_dims)
            y = mlp.forward(r)
            out = y if out is None else ad.add(out, y)
        return out


def _group_is_pair(group, n_dims):
    return len(group) == 2 * n_dims and len(group) >= 2


def _reduce_composite(x, comp, group, n_dims):
    if comp == "none":
        return x
    if comp == "sum":
        return ad.tsum(x, axis=1, keepdims=True)
    if comp == "product":
        r = ad.cols(x, [0])
        for k in range(1, len(group)):
            r = ad.mul(r, ad.cols(x, [k]))
        return r
    if _group_is_pair(group, n_dims):
        half = len(group) // 2
        a = ad.cols(x, list(range(half)))
        b = ad.cols(x, list(range(half, len(group))))
        diff = ad.sub(a, b)
    else:
        diff = x
    if comp == "manhattan":
        return ad.tsum(ad.absval(diff), axis=1, keepdims=True)
    return ad.sqrt(ad.tsum(ad.square(diff), axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Training through the integrator


@dataclass(frozen=True)
class SearchConfig:
    max_tolerable_decrease: float = 0.10
    elimination_tolerance: float = 0.01
    epochs: int = 3000
    lr: float = 0.0005
    horizon: int = 10
    test_points: int = 10
    seeds: int = 3
    hidden_dim: int = 128
    depth: int = 8
    substeps: int = 1

    def __post_init__(self):
        if not (0 < self.max_tolerable_decrease < 1):
            raise ConfigError("max_tolerable_decrease must lie in (0, 1)")
        if not (0 < self.elimination_tolerance < 1):
            raise ConfigError("elimination_tolerance must lie in (0, 1)")

    @property
    def net_cfg(self):
        return SympNetConfig(hidden_dim=self.hidden_dim, depth=self.depth)


def default_search_config(kind):
    tol = 0.05 if kind == "three_body" else 0.10
    return SearchConfig(max_tolerable_decrease=tol)


def _train_windows(dataset, cfg):
    n = dataset.n_points
    n_train = n - cfg.horizon - cfg.test_points
    if n_train < 1:
        raise ConfigError("dataset too short for the train/test split")
    test_start = n - 1 - cfg.horizon
    return n_train, test_start


def train_model(model, dataset, cfg, with_progress=None):
    """Full-batch Adam through the integrator; returns held-out reward.

    Memory stays bounded by step-level checkpointing: the forward rollout is
    untaped, and each interval's graph is rebuilt during the reverse sweep
    with the downstream state adjoint injected.
    """
    n_train, test_start = _train_windows(dataset, cfg)
    q0 = dataset.q[:n_train]
    p0 = dataset.p[:n_train]
    h = dataset.dt / cfg.substeps
    field = model.gradient_field()
    trainable = model.trainable()
    optimizer = Adam(lr=cfg.lr)
    B = n_train
    D = q0.shape[1]
    count = cfg.horizon * B * 2 * D

    for _ in range(cfg.epochs):
        # Forward, untaped, checkpointing the state at every observation time.
        states = [(q0, p0)]
        with ad.no_grad():
            q, p = Tensor(q0), Tensor(p0)
            diverged = False
            for k in range(cfg.horizon):
                for _ in range(cfg.substeps):
                    q, p = step4(q, p, h, field)
                if not (
                    np.all(np.isfinite(q.value)) and np.all(np.isfinite(p.value))
                ):
                    diverged = True
                    break
                states.append((q.value, p.value))
        if diverged:
            return 0.0
        # Reverse sweep with per-interval graphs.
        model.store.zero_grad()
        lam_q = np.zeros_like(q0)
        lam_p = np.zeros_like(p0)
        for k in range(cfg.horizon, 0, -1):
            tq = dataset.q[k : k + B]
            tp = dataset.p[k : k + B]
            lam_q = lam_q + (2.0 / count) * (states[k][0] - tq)
            lam_p = lam_p + (2.0 / count) * (states[k][1] - tp)
            qin = Tensor(states[k - 1][0], requires_grad=True)
            pin = Tensor(states[k - 1][1], requires_grad=True)
            q, p = qin, pin
            for _ in range(cfg.substeps):
                q, p = step4(q, p, h, field)
            scalar = ad.tsum(ad.mul(q, Tensor(lam_q))) + ad.tsum(
                ad.mul(p, Tensor(lam_p))
            )
            scalar.backward()
            lam_q = qin.grad if qin.grad is not None else np.zeros_like(lam_q)
            lam_p = pin.grad if pin.grad is not None else np.zeros_like(lam_p)
        optimizer.step(trainable)
        model.store.zero_grad()
        if with_progress is not None:
            with_progress()
    return score_model(model, dataset, cfg)


def score_model(model, dataset, cfg):
    """Held-out reward: rollout from the test start over the final points."""
    _, test_start = _train_windows(dataset, cfg)
    field = model.gradient_field()
    h = dataset.dt / cfg.substeps
    with ad.no_grad():
        q = Tensor(dataset.q[test_start : test_start + 1])
        p = Tensor(dataset.p[test_start : test_start + 1])
        pred = []
        for _ in range(cfg.horizon):
            for _ in range(cfg.substeps):
                q, p = step4(q, p, h, field)
            pred.append(np.concatenate([q.value[0], p.value[0]]))
    pred = np.asarray(pred)
    if not np.all(np.isfinite(pred)):
        return 0.0
    obs = np.concatenate(
        [
            dataset.q[test_start + 1 : test_start + 1 + cfg.horizon],
            dataset.p[test_start + 1 : test_start + 1 + cfg.horizon],
        ],
        axis=1,
    )
    return nrmse_reward(pred, obs)


def train_and_score(dataset, spec, cfg, seed, frozen=None):
    """Build, train, and score one structure.

    ``frozen`` optionally maps a side name to a donor SympNetModel whose
    weights are copied in and held constant during training.
    """
    model = SympNetModel(
        dataset.spec.n_bodies, dataset.spec.n_dims, spec, cfg.net_cfg, seed
    )
    if frozen:
        for side, donor in frozen.items():
            model.copy_side_from(donor, side)
            model.freeze_side(side)
    score = train_model(model, dataset, cfg)
    if not np.isfinite(score):
        score = 0.0
    return score, model


def _structure_seed(master_seed, label, attempt):
    digest = hashlib.sha256(f"{master_seed}|{label}|{attempt}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _train_best(dataset, spec, cfg, master_seed, label, frozen=None):
    best = (-np.inf, None)
    for attempt in range(cfg.seeds):
        seed = _structure_seed(master_seed, label, attempt)
        score, model = train_and_score(dataset, spec, cfg, seed, frozen=frozen)
        if score > best[0]:
            best = (score, model)
    return best


@dataclass
class SearchRow:
    stage: str
    T_desc: str
    V_desc: str
    score: float
    reference: float | None  # score the change is measured against
    note: str = ""

    @property
    def change(self):
        if self.reference is None or self.reference == 0:
            return None
        return (self.score - self.reference) / self.reference


@dataclass
class CouplingSearchResult:
    spec: CouplingSpec
    rows: list
    baseline_score: float
    note: str = ""

    def render_table(self):
        lines = [
            f"{'stage':<12} {'T structure':<28} {'V structure':<28} {'score':>8} {'change':>9}"
        ]
        for row in self.rows:
            change = "baseline" if row.change is None else f"{row.change * 100:+.2f}%"
            lines.append(
                f"{row.stage:<12} {row.T_desc:<28} {row.V_desc:<28} "
                f"{row.score:8.4f} {change:>9}"
                + (f"  [{row.note}]" if row.note else "")
            )
        if self.note:
            lines.append(f"note: {self.note}")
        return "\n".join(lines) + "\n"


def coupling_search(dataset, cfg, master_seed=0):
    """Full staged structure search; deterministic given data and seed."""
    n, m = dataset.spec.n_bodies, dataset.spec.n_dims
    if n == 1 and m == 1:
        spec = CouplingSpec(
            T_form=CouplingForm("complete_decoupling"),
            V_form=CouplingForm("complete_decoupling"),
        )
        return CouplingSearchResult(
            spec=spec,
            rows=[],
            baseline_score=float("nan"),
            note=(
                "single body, single dimension: every coupling form collapses "
                "to one univariate subfunction; search is degenerate"
            ),
        )

    rows = []
    tol = cfg.max_tolerable_decrease

    def desc(spec, side):
        return spec.describe(side)

    base_spec = CouplingSpec()
    base_score, base_model = _train_best(dataset, base_spec, cfg, master_seed, "baseline")
    rows.append(SearchRow("baseline", "none", "none", base_score, None))

    current = base_spec
    models = {"T": base_model, "V": base_model}
    current_score = base_score

    # Most-to-least constrained probes for one side, other side frozen.
    def probe_side(side, current, current_score):
        other = "V" if side == "T" else "T"
        candidates = [CouplingForm("complete_decoupling")]
        if n > 1 and m > 1:
            candidates.append(CouplingForm("dimensional"))
        if n > 1:
            candidates.append(CouplingForm("pairwise", all_pairs(n)))
        accepted_form = CouplingForm("none")
        accepted_model = models[side]
        accepted_score = current_score
        for form in candidates:
            probe = replace(
                current, **{f"{side}_form": form}
            )
            if form.kind == "pairwise" and n == 2:
                # A single pair spans every variable: identical to the
                # unconstrained model, so reuse its score and weights.
                score, model = current_score, models[side]
                note = "single pair = unconstrained; reused"
            else:
                score, model = _train_best(
                    dataset,
                    probe,
                    cfg,
                    master_seed,
                    f"{side}:{form.describe()}",
                    frozen={other: models[other]},
                )
                note = ""
            rows.append(
                SearchRow(
                    f"couple {side}",
                    desc(probe, "T"),
                    desc(probe, "V"),
                    score,
                    base_score,
                    note,
                )
            )
            if score >= base_score * (1.0 - tol):
                accepted_form = form
                accepted_model = model
                accepted_score = score
                break
        return accepted_form, accepted_model, accepted_score

    # Potential side first, then kinetic (the published order).
    v_form, v_model, v_score = probe_side("V", current, current_score)
    current = replace(current, V_form=v_form)
    models["V"] = v_model
    current_score = v_score

    t_form, t_model, t_score = probe_side("T", current, current_score)
    current = replace(current, T_form=t_form)
    models["T"] = t_model
    current_score = t_score

    # Backward elimination over pairs (only meaningful with > 1 pair).
    def eliminate(side, current, current_score):
        form = current.T_form if side == "T" else current.V_form
        if form.kind != "pairwise" or len(form.pairs) <= 1:
            return current, current_score
        other = "V" if side == "T" else "T"
        pairs = list(form.pairs)
        while len(pairs) > 1:
            best = None
            for drop in pairs:
                kept = tuple(p for p in pairs if p != drop)
                probe = replace(
                    current, **{f"{side}_form": CouplingForm("pairwise", kept)}
                )
                score, model = _train_best(
                    dataset,
                    probe,
                    cfg,
                    master_seed,
                    f"{side}:drop{drop}",
                    frozen={other: models[other]},
                )
                rows.append(
                    SearchRow(
                        f"eliminate {side}",
                        desc(probe, "T"),
                        desc(probe, "V"),
                        score,
                        current_score,
                    )
                )
                if best is None or score > best[0]:
                    best = (score, drop, model)
            score, drop, model = best
            if score >= current_score * (1.0 - cfg.elimination_tolerance):
                pairs.remove(drop)
                current = replace(
                    current, **{f"{side}_form": CouplingForm("pairwise", tuple(pairs))}
                )
                models[side] = model
                current_score = score
            else:
                break
        return current, current_score

    current, current_score = eliminate("V", current, current_score)
    current, current_score = eliminate("T", current, current_score)

    # Composite inner functions for sides whose subfunctions take > 1 input.
    def composite_stage(side, current, current_score):
        form = current.T_form if side == "T" else current.V_form
        groups = form_groups(form, n, m)
        if form.kind in ("none", "complete_decoupling") or len(groups[0]) < 2:
            return current, current_score
        other = "V" if side == "T" else "T"
        best = None
        for comp in ("sum", "product", "manhattan", "euclidean"):
            probe = replace(current, **{f"{side}_composite": comp})
            score, model = _train_best(
                dataset,
                probe,
                cfg,
                master_seed,
                f"{side}:comp:{comp}",
                frozen={other: models[other]},
            )
            rows.append(
                SearchRow(
                    f"composite {side}",
                    desc(probe, "T"),
                    desc(probe, "V"),
                    score,
                    current_score,
                )
            )
            if score >= current_score * (1.0 - tol) and (
                best is None or score > best[0]
            ):
                best = (score, comp, model)
        if best is not None:
            score, comp, model = best
            current = replace(current, **{f"{side}_composite": comp})
            models[side] = model
            current_score = score
        return current, current_score

    current, current_score = composite_stage("V", current, current_score)
    current, current_score = composite_stage("T", current, current_score)

    # Symmetry: tie all subfunctions of a side.
    def symmetry_stage(side, current, current_score):
        form = current.T_form if side == "T" else current.V_form
        groups = form_groups(form, n, m)
        if len(groups) <= 1:
            return current, current_score
        other = "V" if side == "T" else "T"
        probe = replace(current, **{f"{side}_symmetric": True})
        score, model = _train_best(
            dataset,
            probe,
            cfg,
            master_seed,
            f"{side}:symmetric",
            frozen={other: models[other]},
        )
        rows.append(
            SearchRow(
                f"symmetry {side}",
                desc(probe, "T"),
                desc(probe, "V"),
                score,
                current_score,
            )
        )
        if score >= current_score * (1.0 - tol):
            current = probe
            models[side] = model
            current_score = score
        return current, current_score

    current, current_score = symmetry_stage("V", current, current_score)
    current, current_score = symmetry_stage("T", current, current_score)

    return CouplingSearchResult(
        spec=current, rows=rows, baseline_score=base_score
    )
