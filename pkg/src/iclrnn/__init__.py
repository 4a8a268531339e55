"""Input convex Lipschitz recurrent networks: constrained training,
verification, a CSTR simulator and Lyapunov-based MPC."""

__version__ = "0.1.0"

from .constraints import ProjectionConfig, project_iclrnn  # noqa: E402,F401
from .model import CellParams, ConstraintMode, NetConfig, forward, init_params  # noqa: E402,F401
from .training import AdamState, Scaler, predict, train  # noqa: E402,F401
