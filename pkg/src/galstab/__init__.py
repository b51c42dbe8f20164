"""Isotropic steady states of self-gravitating collisionless matter:
construction from a Casimir function, energy/Casimir functionals, scaling
identities, and perturbed particle dynamics for nonlinear stability tests.
"""

from .casimir import (
    CasimirModel,
    EnergyCutoff,
    ValidationReport,
    invert_qprime,
    model_from_config,
    model_to_config,
    phi_of_depth,
    validate_model,
)
from .dynamics import (
    IntegratorConfig,
    ParticleEnsemble,
    dynamical_time,
    run,
    sample_steady_state,
    step,
)
from .errors import (
    ConvergenceError,
    DomainError,
    GalstabError,
    NumericalError,
    RangeError,
    UsageError,
)
from .functionals import (
    DistanceReport,
    FunctionalReport,
    evaluate_ensemble,
    evaluate_profile,
    field_difference,
    interpolation_ratio,
    pairwise_potential_energy,
    radial_potential_energy,
    recompute_lambda0,
    stability_distance,
    weighted_l2_lower_bound,
)
from .stability import (
    PerturbationSpec,
    StabilityRunConfig,
    StabilityTimeSeries,
    best_scale,
    best_shift,
    perturb,
    stability_run,
)
from .steadystate import (
    GridControl,
    ScalingTransform,
    SteadyStateProfile,
    apply_scaling,
    integrate_emden,
    match_target_mass,
    plummer_closed_form,
    solve_emden_fowler,
)

__version__ = "0.1.0"
