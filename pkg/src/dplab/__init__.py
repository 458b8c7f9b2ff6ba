"""dplab: a numerical laboratory for degenerate diffusion with dynamic
boundary coupling, driven through its viscous bulk-surface regularization."""

from .geometry import StripGrid, save_field, load_field
from .graphs import (Cubic, DoubleObstacle, Identity, MonotoneGraph,
                     NegIdentityPi, PiFunction, PowerLaw, Stefan, StefanPi,
                     ZeroPi, epsilon0, make_graph, make_pi)
from .operators import LinearSolveError, OperatorSet
from .dynamics import (CompatibilityError, NewtonDivergedError, NumericsError,
                       SolverConfig, State, Trajectory, run, step)
from .diagnostics import (CascadeMember, CascadeReport, EstimateRecord,
                          EstimateRecorder, cascade_study, discrete_energy,
                          weak_residual)

__version__ = "0.1.0"
