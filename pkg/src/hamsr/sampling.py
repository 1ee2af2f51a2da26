"""Constrained autoregressive sampling of separable Hamiltonian candidates.

A two-layer LSTM emits token logits; before sampling, the distribution is
masked in situ so that only tokens consistent with the kinetic/potential
variable partition, the active coupling template, and the operator-length
budget survive. Masking is airtight by construction: every sampled sequence
parses into a valid separable candidate.

Coupling templates turn each T/V subfunction into a generation "slot" over
its own formal variables; symmetric subfunctions share one slot whose
sampled tree (and constant slots) instantiates for every tied group, and
composite inner functions expose their reduced value as a single
pseudo-variable token. Slots are generated kinetic-first under one
continuing LSTM state.

Length bounds count operator tokens per sampled sub-expression. Operators
are masked once the budget is spent; terminals are masked while closing the
tree would leave it under the minimum, so budgets can always be met.

Log-probability accounting always uses the masked RNN distribution, for
mutated tokens as well (mutation only changes which token is drawn).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coupling import CouplingSpec, form_groups
from .errors import ConfigError, TokenInvalidUnderMaskError
from .expressions import (
    ExprTree,
    HamiltonianCandidate,
    Node,
    TokenLibrary,
    literal,
    make_library,
    op,
    parse_preorder,
    shift_slots,
    var,
)
from .nn import Lstm, LstmConfig, ParamStore
from .systems import variable_names

_MASK_PENALTY = 1e9

DEFAULT_OPERATORS = ("add", "sub", "mul", "div", "pow")
TRIG_OPERATORS = ("add", "sub", "mul", "div", "pow", "cos", "sin")


def default_operator_set(kind):
    return TRIG_OPERATORS if kind == "pendulum" else DEFAULT_OPERATORS


def default_op_range(kind):
    """Per-sub-expression operator count bounds used in the experiments."""
    return {"two_body": (1, 12), "three_body": (1, 18)}.get(kind, (1, 8))


# ---------------------------------------------------------------------------
# Slots: what each sampled sub-expression means


@dataclass(frozen=True)
class SlotGroup:
    part: str  # "T" | "V"
    formals: tuple  # token names visible to the sampler
    instantiations: tuple  # tuple of {formal: replacement Node}
    label: str


def _composite_node(comp, names, n_dims):
    """Expression subtree computing a composite reduction of actual variables."""
    leaves = [var(n) for n in names]
    if comp == "sum":
        acc = leaves[0]
        for leaf in leaves[1:]:
            acc = op("add", acc, leaf)
        return acc
    if comp == "product":
        acc = leaves[0]
        for leaf in leaves[1:]:
            acc = op("mul", acc, leaf)
        return acc
    is_pair = len(names) == 2 * n_dims and len(names) >= 2
    if is_pair:
        half = len(names) // 2
        diffs = [
            op("sub", leaves[d], leaves[half + d]) for d in range(half)
        ]
    else:
        diffs = leaves
    if comp == "manhattan":
        # |x| spelled as (x^2)^0.5 (the grammar has no abs operator)
        terms = [
            op("pow", op("mul", d, d), literal(0.5)) for d in diffs
        ]
    else:  # euclidean
        terms = [op("mul", d, d) for d in diffs]
    acc = terms[0]
    for t in terms[1:]:
        acc = op("add", acc, t)
    if comp == "manhattan":
        return acc
    return op("pow", acc, literal(0.5))


_COMPOSITE_LETTER = {"sum": "s", "product": "w", "manhattan": "u", "euclidean": "r"}


def _side_slots(part, names, form, comp, symmetric, n_bodies, n_dims):
    groups = form_groups(form, n_bodies, n_dims)
    group_names = [tuple(names[i] for i in g) for g in groups]
    slots = []

    def group_tag(gnames):
        bodies = []
        for n in gnames:
            b = n[1:-1]
            if b not in bodies:
                bodies.append(b)
        return "".join(bodies)

    if comp != "none":
        letter = _COMPOSITE_LETTER[comp]
        if symmetric:
            formal = letter
            insts = tuple(
                {formal: _composite_node(comp, gnames, n_dims)}
                for gnames in group_names
            )
            slots.append(
                SlotGroup(part, (formal,), insts, f"{part}:{form.kind}:{comp}:tied")
            )
        else:
            for gnames in group_names:
                formal = letter + group_tag(gnames)
                slots.append(
                    SlotGroup(
                        part,
                        (formal,),
                        ({formal: _composite_node(comp, gnames, n_dims)},),
                        f"{part}:{form.kind}:{comp}",
                    )
                )
        return slots

    if symmetric:
        formals = group_names[0]
        insts = tuple(
            {f: var(a) for f, a in zip(formals, gnames)} for gnames in group_names
        )
        slots.append(SlotGroup(part, formals, insts, f"{part}:{form.kind}:tied"))
        return slots
    for gnames in group_names:
        slots.append(
            SlotGroup(
                part,
                gnames,
                ({f: var(f) for f in gnames},),
                f"{part}:{form.kind}",
            )
        )
    return slots


@dataclass(frozen=True)
class SampleConstraints:
    lib: TokenLibrary
    min_ops: int
    max_ops: int
    slots: tuple

    def __post_init__(self):
        if not (1 <= self.min_ops <= self.max_ops):
            raise ConfigError("need 1 <= min_ops <= max_ops")


def build_constraints(
    n_bodies,
    n_dims,
    operators=DEFAULT_OPERATORS,
    min_ops=1,
    max_ops=8,
    coupling=None,
):
    """Token library and generation slots for a system and its priors."""
    coupling = coupling if coupling is not None else CouplingSpec()
    q_names, p_names = variable_names(n_bodies, n_dims)
    slots = _side_slots(
        "T",
        p_names,
        coupling.T_form,
        coupling.T_composite,
        coupling.T_symmetric,
        n_bodies,
        n_dims,
    ) + _side_slots(
        "V",
        q_names,
        coupling.V_form,
        coupling.V_composite,
        coupling.V_symmetric,
        n_bodies,
        n_dims,
    )
    seen = []
    for slot in slots:
        for f in slot.formals:
            if f not in seen:
                seen.append(f)
    lib = make_library(operators, seen, has_const=True)
    return SampleConstraints(lib=lib, min_ops=min_ops, max_ops=max_ops, slots=tuple(slots))


# ---------------------------------------------------------------------------
# Traversal state machine (masking + parent/sibling bookkeeping)


class _LibMeta:
    def __init__(self, lib):
        tokens = lib.tokens
        self.size = len(tokens)
        self.symbols = [t.symbol for t in tokens]
        self.arity = np.array([t.arity for t in tokens])
        self.is_operator = np.array([t.kind == "operator" for t in tokens])
        self.const_id = lib.index("const") if lib.has_const else -1
        self.index = {t.symbol: i for i, t in enumerate(tokens)}


class TraversalState:
    """Drives one candidate's generation; shared by sampling and replay."""

    def __init__(self, constraints, meta=None):
        self.constraints = constraints
        self.meta = meta if meta is not None else _LibMeta(constraints.lib)
        self.slot_idx = 0
        self.tokens = []
        self.slot_bounds = []  # token count at the end of each slot
        self._begin_slot()

    def _begin_slot(self):
        self.stack = [[-1, -1, None]]  # parent id, sibling id, right-entry ref
        self.ops_used = 0
        slot = self.constraints.slots[self.slot_idx]
        self._formal_ids = [self.meta.index[f] for f in slot.formals]

    @property
    def finished(self):
        return self.slot_idx >= len(self.constraints.slots)

    def parent_sibling(self):
        top = self.stack[-1]
        return top[0], top[1]

    def valid_mask(self):
        m = np.zeros(self.meta.size, dtype=bool)
        if self.ops_used < self.constraints.max_ops:
            m |= self.meta.is_operator
        terminals_ok = not (
            len(self.stack) == 1 and self.ops_used < self.constraints.min_ops
        )
        if terminals_ok:
            for i in self._formal_ids:
                m[i] = True
            if self.meta.const_id >= 0:
                m[self.meta.const_id] = True
        if not m.any():  # pragma: no cover - impossible by budget construction
            raise AssertionError("no valid token under the current mask")
        return m

    def advance(self, token_id):
        entry = self.stack.pop()
        if entry[2] is not None:
            entry[2][1] = token_id  # this token roots the left sibling subtree
        arity = int(self.meta.arity[token_id])
        if arity > 0:
            self.ops_used += 1
            if arity == 2:
                right = [token_id, -1, None]
                left = [token_id, -1, right]
                self.stack.append(right)
                self.stack.append(left)
            else:
                self.stack.append([token_id, -1, None])
        self.tokens.append(token_id)
        if not self.stack:
            self.slot_bounds.append(len(self.tokens))
            self.slot_idx += 1
            if not self.finished:
                self._begin_slot()


def _substitute(node, mapping):
    if node.kind == 1 and node.symbol in mapping:  # variable leaf
        return mapping[node.symbol]
    if node.children:
        return Node(
            node.kind,
            node.symbol,
            [_substitute(c, mapping) for c in node.children],
            slot=node.slot,
            value=node.value,
        )
    return node


def candidate_from_sequences(constraints, slot_sequences):
    """Instantiate per-slot token sequences into a separable candidate.

    Tied slots share constant slots across instantiations; independent slots
    get disjoint slot ranges in one flat constant vector.
    """
    if len(slot_sequences) != len(constraints.slots):
        raise ConfigError(
            f"need {len(constraints.slots)} slot sequences, got {len(slot_sequences)}"
        )
    offset = 0
    parts = {"T": None, "V": None}
    for slot, seq in zip(constraints.slots, slot_sequences):
        tree = parse_preorder(seq, constraints.lib)
        root = shift_slots(tree.root, offset) if offset else tree.root
        offset += tree.n_slots
        for mapping in slot.instantiations:
            term = _substitute(root, mapping)
            prev = parts[slot.part]
            parts[slot.part] = term if prev is None else op("add", prev, term)
    T = ExprTree(parts["T"], n_slots=offset)
    V = ExprTree(parts["V"], n_slots=offset)
    return HamiltonianCandidate(T, V, np.zeros(offset))


# ---------------------------------------------------------------------------
# Policy network


class PolicyNet:
    """LSTM sampler state: parameters, token library, architecture.

    ``operator_bias`` initializes the logit-head bias of operator tokens
    below zero so that freshly initialized policies favor short expressions
    (uniform token sampling over a mostly-binary vocabulary is supercritical
    and nearly always runs to the operator budget). It is an initialization
    choice only; training is free to move the bias.
    """

    def __init__(self, lib, seed, hidden_dim=250, layers=2, operator_bias=-2.5):
        self.lib = lib
        self.store = ParamStore()
        cfg = LstmConfig(
            input_dim=2 * lib.size,
            output_dim=lib.size,
            hidden_dim=hidden_dim,
            layers=layers,
        )
        self.lstm = Lstm(cfg, self.store, "policy", np.random.default_rng(seed))
        # Zero logit head: the initial token distribution is exactly the bias
        # distribution, independent of the recurrent weight draw.
        self.store["policy.Wo"].value[:] = 0.0
        bias = self.store["policy.bo"].value
        for i, token in enumerate(lib.tokens):
            if token.kind == "operator":
                bias[i] = operator_bias

    def parameters(self):
        return self.store.tensors()


@dataclass(frozen=True)
class SampledCandidate:
    """One sampled candidate with its exact probability accounting."""

    tokens: tuple  # flat token symbols across slots
    slot_sequences: tuple
    chosen_ids: tuple
    mutated: tuple
    log_prob: float
    entropy: float
    candidate: HamiltonianCandidate

    @property
    def key(self):
        return " ".join(self.tokens)

    @property
    def n_mutated(self):
        return int(sum(self.mutated))


def _one_hot_inputs(meta, states, active):
    B = len(states)
    V = meta.size
    x = np.zeros((B, 2 * V))
    for b, state in enumerate(states):
        if not active[b]:
            continue
        parent, sibling = state.parent_sibling()
        if parent >= 0:
            x[b, parent] = 1.0
        if sibling >= 0:
            x[b, V + sibling] = 1.0
    return x


def _masked_log_probs(logits, mask):
    """Row-wise masked log-softmax (numpy, mirrors the taped formula)."""
    masked = logits + (mask.astype(float) - 1.0) * _MASK_PENALTY
    m = masked.max(axis=1, keepdims=True)
    z = np.exp(masked - m)
    logz = m + np.log(z.sum(axis=1, keepdims=True))
    return masked - logz


def sample_batch(policy, constraints, batch_size, mutation_rate, rng):
    """Sample a batch of candidates (vectorized across the batch)."""
    if not (0.0 <= mutation_rate <= 1.0):
        raise ConfigError("mutation rate must lie in [0, 1]")
    meta = _LibMeta(constraints.lib)
    states = [TraversalState(constraints, meta) for _ in range(batch_size)]
    per_logp = [[] for _ in range(batch_size)]
    per_ent = [[] for _ in range(batch_size)]
    per_mut = [[] for _ in range(batch_size)]
    with ad.no_grad():
        lstm_state = policy.lstm.initial_state(batch_size)
        while True:
            active = np.array([not s.finished for s in states])
            if not active.any():
                break
            x = _one_hot_inputs(meta, states, active)
            logits_t, lstm_state = policy.lstm.step(Tensor(x), lstm_state)
            logits = logits_t.value
            mask = np.zeros((batch_size, meta.size), dtype=bool)
            for b, state in enumerate(states):
                if active[b]:
                    mask[b] = state.valid_mask()
                else:
                    mask[b, 0] = True  # placeholder row; never used
            logp = _masked_log_probs(logits, mask)
            probs = np.exp(logp)
            mut_draw = rng.random(batch_size)
            tok_draw = rng.random(batch_size)
            for b, state in enumerate(states):
                if not active[b]:
                    continue
                valid_ids = np.flatnonzero(mask[b])
                if mut_draw[b] < mutation_rate:
                    choice = valid_ids[
                        min(int(tok_draw[b] * len(valid_ids)), len(valid_ids) - 1)
                    ]
                    mutated = True
                else:
                    cdf = np.cumsum(probs[b, valid_ids])
                    k = int(np.searchsorted(cdf, tok_draw[b] * cdf[-1], side="right"))
                    choice = valid_ids[min(k, len(valid_ids) - 1)]
                    mutated = False
                per_logp[b].append(float(logp[b, choice]))
                ent = -float(np.sum(probs[b, valid_ids] * logp[b, valid_ids]))
                per_ent[b].append(ent)
                per_mut[b].append(mutated)
                state.advance(int(choice))

    out = []
    for b, state in enumerate(states):
        symbols = tuple(meta.symbols[i] for i in state.tokens)
        bounds = [0] + state.slot_bounds
        slot_seqs = tuple(
            symbols[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)
        )
        cand = candidate_from_sequences(constraints, slot_seqs)
        out.append(
            SampledCandidate(
                tokens=symbols,
                slot_sequences=slot_seqs,
                chosen_ids=tuple(state.tokens),
                mutated=tuple(per_mut[b]),
                log_prob=float(sum(per_logp[b])),
                entropy=float(sum(per_ent[b])),
                candidate=cand,
            )
        )
    return out


def _replay_inputs(constraints, meta, sampled):
    """Recompute masks/inputs for stored sequences (validates them too)."""
    B = len(sampled)
    T = max(len(s.chosen_ids) for s in sampled)
    V = meta.size
    inputs = np.zeros((T, B, 2 * V))
    masks = np.zeros((T, B, V))
    chosen = np.zeros((T, B, V))
    step_mask = np.zeros((T, B))
    for b, cand in enumerate(sampled):
        state = TraversalState(constraints, meta)
        for t, token_id in enumerate(cand.chosen_ids):
            parent, sibling = state.parent_sibling()
            if parent >= 0:
                inputs[t, b, parent] = 1.0
            if sibling >= 0:
                inputs[t, b, V + sibling] = 1.0
            m = state.valid_mask()
            if not m[token_id]:
                raise TokenInvalidUnderMaskError(
                    f"token {meta.symbols[token_id]!r} at step {t} is masked out"
                )
            masks[t, b] = m
            chosen[t, b, token_id] = 1.0
            step_mask[t, b] = 1.0
            state.advance(token_id)
    return inputs, masks, chosen, step_mask


def replay_log_probs(policy, constraints, sampled):
    """Taped per-candidate (log_prob, entropy) tensors of shape (B, 1)."""
    meta = _LibMeta(constraints.lib)
    inputs, masks, chosen, step_mask = _replay_inputs(constraints, meta, sampled)
    T, B, V = masks.shape
    state = policy.lstm.initial_state(B)
    log_prob = None
    entropy = None
    for t in range(T):
        logits, state = policy.lstm.step(Tensor(inputs[t]), state)
        masked = ad.add(logits, Tensor((masks[t] - 1.0) * _MASK_PENALTY))
        logz = ad.logsumexp_rows(masked)
        logp = ad.sub(masked, logz)
        lp_t = ad.tsum(ad.mul(logp, Tensor(chosen[t])), axis=1, keepdims=True)
        probs = ad.exp(logp)
        ent_t = ad.tsum(
            ad.mul(ad.mul(probs, logp), Tensor(-masks[t])), axis=1, keepdims=True
        )
        sm = Tensor(step_mask[t][:, None])
        lp_t = ad.mul(lp_t, sm)
        ent_t = ad.mul(ent_t, sm)
        log_prob = lp_t if log_prob is None else ad.add(log_prob, lp_t)
        entropy = ent_t if entropy is None else ad.add(entropy, ent_t)
    return log_prob, entropy


def log_prob_and_entropy(policy, constraints, sampled_candidate):
    """Recompute one candidate's masked log-probability and entropy."""
    with ad.no_grad():
        lp, ent = replay_log_probs(policy, constraints, [sampled_candidate])
    return float(lp.value[0, 0]), float(ent.value[0, 0])
