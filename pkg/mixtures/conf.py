"""
Access to the numerical settings dictionary with built-in fallbacks
"""

from django.conf import settings

DEFAULTS = {
    'N_MAX_TABLE': 20,
    'N_MAX_COVARIANCE_CHECK': 6,
    'COVARIANCE_ALPHA': 1e-4,
    'PDE_GRID_POINTS': 2048,
    'PDE_QUADRATURE_ORDER': 64,
    'PDE_TIME_SUBSTEPS': 32,
    'PDE_MAX_STEP_STD': 1.0,
    'PDE_BOUNDARY_TOL': 1e-6,
    'PDE_BOUND_TOL': 1e-9,
    'FD_STEP_RATIO': 0.25,
    'FD_HALVING_TOL': 1e-3,
    'MIN_MC_PATHS': 1000,
    'MERGE_TOL': 1e-4,
    'ATOM_MASS_TOL': 1e-3,
    'MULTI_STARTS': 8,
    'GPREV_TOL': 1e-3,
    'OPTIMIZER_MAXITER': 400,
    'GRID_2D_POINTS': 256,
    'LAMBDA_WINDOW': 1.0,
    'LAMBDA_GRID_POINTS': 41,
    'GFEB_TOL': 1e-6,
    'ZERO_TOL': 1e-3,
    'SPHERICAL_RESIDUAL_TOL': 1e-6,
    'G_DIAGNOSTIC_POINTS': 4001,
    'EIGEN_DENSE_MAX': 4096,
    'EIGEN_TOL_DENSE': 1e-10,
    'EIGEN_TOL_ITERATIVE': 1e-8,
    'REPLICATED_MATERIALIZE_MAX_N': 7,
    'REPLICATED_MAX_N': 10,
    'OVERLAP_EXACT_MAX_N': 14,
    'DISORDER_SEEDS': 32,
    'SWAP_ACCEPTANCE_MIN': 0.05,
    'MCMC_MAX_N': 200,
    'MCMC_BATCHES': 20,
    'OUTPUT_DIR': 'runs',
    'RECORD_RUNS': True,
}


def get_setting(name):
    """Read a key of SPINGLASS_SETTINGS, falling back to the defaults"""
    overrides = getattr(settings, 'SPINGLASS_SETTINGS', {})
    if name in overrides:
        return overrides[name]
    return DEFAULTS[name]
