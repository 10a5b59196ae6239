"""Random billiards on periodic surfaces, their Markov operators and limiting diffusions."""
import os

# numba's default TBB layer warns on common installs; the workqueue layer is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .errors import (BilliardError, BudgetExceeded, ConfigError, DomainError, NoConvergence,  # noqa: E402
                     ResampleBudgetExceeded, SingularHit, SingularPoint, StalledMarch,
                     StuckAtBoundary, TrappedTrajectory)
from .geometry import (ArcProfile, FlatProfile, MovingWallProfile, ScaledProfile,  # noqa: E402
                       SurfaceProfile, TentProfile, TorusLattice, canonicalize, flatness,
                       normal_vector, scale_free_curvature_integral)
from .billiard import (FlightResult, NoHit, PhaseState, advance_to_boundary,  # noqa: E402
                       jacobian_det_rbar, reflect, return_map, single_collision_exit,
                       single_collision_radius)
from .scattering import (ChainConfig, ChainRun, ChainSample, HiddenLaw, detailed_balance_statistic,  # noqa: E402
                         estimate_P_phi, run_chain, run_chain_arrays, sample_scatter,
                         sample_stationary, scatter_many)
from .families import FAMILIES, ProfileFamily, arc_family, flat_family, moving_wall_family, \
    tent_family  # noqa: E402
from .operators import (ScatterMatrices, adjoint_pairings, compute_A, ellipticity_symbol,  # noqa: E402
                        fit_lambda, generator_convergence, kbig_apply, laguerre_apply,
                        laguerre_sturm_liouville_apply, lambda_from_family, legendre_apply,
                        mb_dstar_d_apply, mb_laplacian_apply, second_order_coefficients)
from .diffusion import (EulerConfig, Path, SDEModel, chain_vs_sde_compare, constant_model,  # noqa: E402
                        laguerre1d_model, laguerre_model, legendre_model, mb_model,
                        normalized_laguerre_model, simulate_ensemble, simulate_path)

__version__ = "0.1.0"
