"""1D pressureless Euler-Alignment system with weakly singular kernels.

Two cross-validating solvers (conservative upwind finite volumes and
Cucker-Smale alignment particles), threshold/blowup diagnostics with
closed-form comparison bounds, scenario builders, and a reproducible CLI.
"""

__version__ = "0.1.0"

from .kernels import (
    KernelSpec, KernelMoments, KernelError, eval_psi, kernel_l1,
    convolve_density, convolve_density_cellavg, convolve_at,
    nmp_bound, osgood_check, aggregation_velocity, validate_kernel,
)
from .fields import (
    Grid1D, FieldState, make_state, recover_velocity, VelocityField,
    ParticleEnsemble, particles_from_fields, deposit_density,
    Trajectory, Termination, ConstructionError, torus_compatibility_residual,
)

__all__ = [
    "KernelSpec", "KernelMoments", "KernelError", "eval_psi", "kernel_l1",
    "convolve_density", "convolve_density_cellavg", "convolve_at",
    "nmp_bound", "osgood_check", "aggregation_velocity", "validate_kernel",
    "Grid1D", "FieldState", "make_state", "recover_velocity", "VelocityField",
    "ParticleEnsemble", "particles_from_fields", "deposit_density",
    "Trajectory", "Termination", "ConstructionError",
    "torus_compatibility_residual",
    "__version__",
]
