"""Separable-Hamiltonian discovery from small noisy trajectory datasets.

The pipeline: generate or load position-momentum time series
(:mod:`hamsr.systems`), optionally extract coupling-structure priors with
prediction networks (:mod:`hamsr.coupling`), then search symbolic
Hamiltonians with a constrained LSTM sampler whose candidates are fitted by
backpropagation through a fourth-order symplectic integrator and scored by
prediction reward (:mod:`hamsr.engine`).
"""

from .coupling import (
    CouplingForm,
    CouplingSearchResult,
    CouplingSpec,
    SearchConfig,
    SympNetModel,
    coupling_search,
    default_search_config,
    load_coupling_spec,
    no_priors,
    save_coupling_spec,
    train_and_score,
)
from .engine import (
    RunReport,
    TrainingConfig,
    discover,
    optimize_constants,
    policy_update,
    risk_filter,
    single_step_reward,
    write_phase_csv,
    write_reward_curve_csv,
)
from .errors import (
    ConfigError,
    DomainError,
    EquivalenceSamplingError,
    ExpressionSyntaxError,
    FieldError,
    FormatError,
    HamsrError,
    IncompleteSequenceError,
    SeparabilityError,
    ShapeMismatchError,
    TokenInvalidUnderMaskError,
    TrailingTokensError,
    UnknownTokenError,
)
from .expressions import (
    ExprTree,
    HamiltonianCandidate,
    Token,
    TokenLibrary,
    combine_parsed,
    const_slot,
    const_tangents,
    evaluate,
    grad_vars,
    literal,
    make_library,
    numeric_equivalence,
    op,
    parse_hamiltonian_text,
    parse_infix,
    parse_preorder,
    render_infix,
    split_separable,
    var,
)
from .integrators import (
    DRIFT_COEFFS,
    KICK_COEFFS,
    GradientField,
    Trajectory,
    rollout,
    rollout_loss_and_const_grads,
    step4,
)
from .rewards import nrmse_reward
from .sampling import (
    PolicyNet,
    SampleConstraints,
    SampledCandidate,
    build_constraints,
    candidate_from_sequences,
    log_prob_and_entropy,
    replay_log_probs,
    sample_batch,
)
from .systems import (
    Dataset,
    SystemSpec,
    add_noise,
    generate,
    ground_truth,
    hamiltonian_values,
    load,
    paper_system,
    save,
)

__version__ = "0.1.0"
