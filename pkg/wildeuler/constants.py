"""
Tolerances, defaults and format constants
"""

# Tolerance ladder
TOL_ALGEBRAIC = 1e-12
TOL_GEOMETRIC = 1e-10
TOL_DECOMPOSITION = 1e-6
TOL_DIVERGENCE = 1e-8
TOL_SUBSOLUTION = 1e-8
TOL_WEAK = 1e-6
TOL_ENERGY = 1e-6
TOL_REPLAY = 1e-12

# Hyperinterior acceptance floor for perturbed states
HINT_MARGIN_FLOOR = 1e-10

# Grid limits
MIN_POINTS_PER_AXIS = 8
MAX_DIMENSION = 3

# Segment search
SEGMENT_SAMPLES = 256
SEGMENT_SHRINK = 0.98
BISECTION_STEPS = 60

# Cutoff profile: plateau radius as a fraction of the ball radius
INNER_FRACTION = 0.5
CUTOFF_PROFILE = 'poly_c3'

# Cover construction
MIN_BALL_CELLS = 3

# Frequency caps: at most this many cycles per grid spacing, in space and in time (0.25 is half of Nyquist)
FREQUENCY_CAP_FRACTION = 0.25

# Test bases
STANDARD_TEST_COUNT = 16
STANDARD_TEST_SEED = 20240611
ENERGY_TEST_COUNT = 32

# ODE fallback
RK4_STEP = 1e-4

# WFLD binary dumps
DUMP_MAGIC = b'WFLD'
DUMP_VERSION = 1

# CSV schema
STEPS_CSV_VERSION = 1
STEPS_CSV_COLUMNS = ['step', 'deficit', 'gain', 'k_used', 'hint_margin_min', 'weak_drift']
TIMINGS_CSV_COLUMNS = ['step', 'wall_time']

# Fallback encodings for configuration files after UTF-8 and chardet's guess
ENCODING_DETECTION_ORDER = ['utf-16', 'latin-1']
MAX_CONFIG_SIZE = 1 * 1024 * 1024  # 1MB
