"""Streaming differentially private ERM: training, noise, schedules, accounting."""

from .erm import (
    Dataset,
    DivergenceError,
    ErmError,
    ModelMeta,
    ModelWeights,
    RegularizerSpec,
    TrainConfig,
    biased_erm_minimize,
    clip_l1,
    evaluate_accuracy,
    lipschitz_data,
    lipschitz_public,
    loss_and_gradient,
    sgd_train,
)
from .harness import (
    EvalConfig,
    HarnessError,
    MetricsRecord,
    SchedulerConfig,
    StreamSource,
    SynthConfig,
    TheoryParams,
    export_metrics,
    load_csv,
    load_idx,
    replay,
    synth_stream,
    utility_bound,
)
from .ledger import BudgetReport, Charge, Ledger, LedgerError
from .mechanisms import (
    MechanismError,
    NoiseSpec,
    PerturbedModel,
    SamplingSpec,
    laplace_vector,
    noise_scale,
    output_perturb,
    pberm,
    psgd,
    sampling_probability,
    subsample,
)
from .schedulers import (
    ChainState,
    EventSpec,
    Schedule,
    ScheduleError,
    baseline_basic_cumulative_schedule,
    baseline_independent_schedule,
    build_schedule,
    continual_schedule,
    execute,
    ledger_from_events,
    multires_events_at,
    multires_schedule,
    sliding_schedule,
    window_shape,
)

__version__ = "0.1.0"
