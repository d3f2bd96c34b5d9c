"""glitchsim: a desk-scale simulator for DVFS glitch-induced bit-flip
attacks on CNN inference — sensitivity search, device fault model, attack
campaigns, and genetic parameter refinement."""

__version__ = "0.1.0"

from .bits import Granularity, bits_of, flip_bit
from .engine import (
    ElementAddr,
    InferenceTrace,
    Model,
    enumerate_elements,
    forward,
    loss,
)
from .sensitivity import (
    CandidateTarget,
    SensitivityTable,
    TargetSet,
    bit_gradient,
    evaluate_sensitivity,
    get_top_set,
    input_dependent_search,
    input_independent_search,
)
from .device import (
    DeviceProfile,
    ExecutionSchedule,
    FaultParams,
    GlitchOutcome,
    build_schedule,
    calibrate_sweep,
    default_profile,
    ideal_profile,
    safe_boundary_voltage,
    sample_glitch_outcome,
    stress,
)
from .attack import (
    CampaignReport,
    TrialResult,
    plan_injections,
    run_attack_trial,
    run_campaign,
    run_random_baseline,
)
from .genetic import Seed, crossover, fitness, mutate, refine_parameters
from .io_formats import (
    Dataset,
    load_idx,
    load_model,
    save_model,
    synth_dataset,
)
