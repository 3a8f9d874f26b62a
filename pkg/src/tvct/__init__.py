"""Total-variation CT reconstruction with projected gradient solvers (GP, GPBB, UPN)."""

from .geometry import (
    JosephProjector,
    ProjectionGeometry,
    Sinogram,
    Volume,
    back_project,
    forward_project,
    get_projector,
    make_geometry,
)
from .data import NoiseSpec, PhantomSpec, add_noise, generate_phantom, head_phantom
from .problem import (
    GradientMapResult,
    QuadraticProblem,
    TVProblem,
    gradient_map,
    objective_gradient,
    objective_value,
    project_feasible,
    stop_check,
)
from .regularizer import TVConfig, apply_D, tv_gradient, tv_value
from .solvers import (
    ConvergenceRecord,
    SolverError,
    SolverOptions,
    SolverResult,
    backtrack,
    estimate_mu,
    gp_solve,
    gpbb_solve,
    solve,
    upn_solve,
)

__version__ = "0.1.0"
