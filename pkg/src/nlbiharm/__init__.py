"""Nonlocal p-biharmonic evolution with Dirichlet volume constraints.

Implicit Rothe stepping via per-step energy minimization, kernel rescaling
with second-moment normalization, a clamped finite-difference reference
solver, and the studies that check energy dissipation, large-time decay, and
the nonlocal-to-local limit.
"""

__version__ = "0.1.0"

from .grid import (
    DomainSpec,
    Field,
    field_to_csv,
    inner_product,
    lp_norm,
    make_domain,
    zero_extend,
    zeros,
)
from .kernel import (
    Kernel,
    RescaledKernel,
    Stencil,
    discretize,
    get_kernel,
    normalization_constant,
    rescale,
    stencil_to_csv,
)
from .nlop import (
    NonlocalOperator,
    dirichlet_energy,
    nonlocal_laplacian,
    p_biharmonic_rhs,
    p_flux,
)
from .stepper import (
    InnerSolveFailed,
    StabilityViolation,
    StepperConfig,
    Trajectory,
    evolve,
    explicit_step,
    implicit_step,
    step_energy,
    step_gradient,
    trajectory_to_csv,
)
from .localref import LocalOperator, local_evolve, local_laplacian, weak_residual
from .analysis import (
    DecayFit,
    DecayFitDegenerate,
    StudyReport,
    consistency_study,
    contraction_study,
    decay_fit,
    default_bump,
    energy_audit,
    nonlocal_to_local_study,
    poincare_constant,
)
from .cli import ConfigError, parse_config, read_pgm, run, write_pgm
