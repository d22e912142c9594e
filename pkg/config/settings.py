"""
Django settings for the spin glass barrier toolkit.
Numerical defaults, logging and the run ledger database are configured here;
every value can be overridden from the environment or a .env file.
"""

from pathlib import Path
import os
from decouple import config
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='spinglass-insecure-key-only-used-for-management-commands')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='localhost,127.0.0.1').split(',')

TOOLKIT_VERSION = '1.0.0'

# Application definition
INSTALLED_APPS = [
    'mixtures',
    'parisi',
    'statics',
    'guerra',
    'spherical',
    'dynamics',
    'experiments',
]

# The ledger of experiment runs is the only database user
DATABASES = {
    'default': dj_database_url.config(
        default='sqlite:///' + str(BASE_DIR / 'db.sqlite3'),
        conn_max_age=600,
    )
}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = config('TIME_ZONE', default='UTC')
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# =============================================================================
# NUMERICAL SETTINGS
# =============================================================================

SPINGLASS_SETTINGS = {
    # model
    'N_MAX_TABLE': config('SPINGLASS_N_MAX_TABLE', default=20, cast=int),
    'N_MAX_COVARIANCE_CHECK': 6,
    'COVARIANCE_ALPHA': 1e-4,
    # parisi PDE
    'PDE_GRID_POINTS': config('SPINGLASS_PDE_GRID_POINTS', default=2048, cast=int),
    'PDE_QUADRATURE_ORDER': config('SPINGLASS_PDE_QUADRATURE_ORDER', default=64, cast=int),
    'PDE_TIME_SUBSTEPS': config('SPINGLASS_PDE_TIME_SUBSTEPS', default=32, cast=int),
    'PDE_MAX_STEP_STD': 1.0,
    'PDE_BOUNDARY_TOL': config('SPINGLASS_PDE_BOUNDARY_TOL', default=1e-6, cast=float),
    'PDE_BOUND_TOL': 1e-9,
    'FD_STEP_RATIO': 0.25,
    'FD_HALVING_TOL': 1e-3,
    'MIN_MC_PATHS': 1000,
    # statics
    'MERGE_TOL': 1e-4,
    'ATOM_MASS_TOL': 1e-3,
    'MULTI_STARTS': config('SPINGLASS_MULTI_STARTS', default=8, cast=int),
    'GPREV_TOL': 1e-3,
    'OPTIMIZER_MAXITER': 400,
    # guerra
    'GRID_2D_POINTS': config('SPINGLASS_GRID_2D_POINTS', default=256, cast=int),
    'LAMBDA_WINDOW': 1.0,
    'LAMBDA_GRID_POINTS': 41,
    'GFEB_TOL': 1e-6,
    'ZERO_TOL': 1e-3,
    # spherical
    'SPHERICAL_RESIDUAL_TOL': 1e-6,
    'G_DIAGNOSTIC_POINTS': 4001,
    # dynamics
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
    # experiments
    'OUTPUT_DIR': config('SPINGLASS_OUTPUT_DIR', default=str(BASE_DIR / 'runs')),
    'RECORD_RUNS': config('SPINGLASS_RECORD_RUNS', default=True, cast=bool),
}

# =============================================================================
# LOGGING CONFIGURATION
# =============================================================================

LOG_LEVEL = config('SPINGLASS_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {process:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'class': 'logging.FileHandler',
            'filename': BASE_DIR / 'logs' / 'spinglass.log',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'WARNING',
        },
    },
}

for app_logger in ('mixtures', 'parisi', 'statics', 'guerra', 'spherical', 'dynamics', 'experiments'):
    LOGGING['loggers'][app_logger] = {
        'handlers': ['console', 'file'],
        'level': LOG_LEVEL,
        'propagate': False,
    }

# Create logs directory if it doesn't exist
LOGS_DIR = BASE_DIR / 'logs'
if not os.path.exists(LOGS_DIR):
    os.makedirs(LOGS_DIR)
