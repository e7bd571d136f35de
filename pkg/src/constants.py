# Exit codes of the command-line tool
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_UNKNOWN = 3
EXIT_FALSIFIED = 4

# central-difference step for Jacobians
JACOBIAN_STEP = 1e-6

# simulator defaults: step, horizon, convergence radius, divergence radius
DT = 0.01
T_MAX = 30.0
R_CONV = 1e-3
R_DIV = 50.0

# verifier defaults
EPSILON = 0.1
DELTA_MIN_FRACTION = 1e-4  # of diam(R2)
BOX_BUDGET = 10_000_000
LEVEL_TOL = 1e-3
AREA_SAMPLES = 100_000
VERIFY_CHUNK = 4096

# training defaults shared by every system (the per-system ones live in SYSTEM_DEFAULTS)
TRAJECTORIES = 8
BATCH_SIZE = 64
LAMBDA_0 = 5.0
LAMBDA_C = 0.5
LAMBDA_B = 5.0
ITERATIONS = 3000
LEARNING_RATE = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8
REGION_SCALE = 0.9
GRAD_GUARD = 1e-8
CHECKPOINT_EVERY = 500
LOG_EVERY = 100

# ||u||_inf <= 1 for every benchmark
ACTUATION_BOUND = 1.0

# plot data
GRID_POINTS = 201
FIELD_POINTS = 21
SAMPLE_TRAJECTORIES = 8

# Physical parameters are not given with the benchmarks; these are documented choices.
# Network sizes, alpha and the reference level c follow the published hyperparameter table.
SYSTEM_DEFAULTS = {
    "double-integrator": {
        "params": {},
        "certificate_dims": [2, 20, 20, 1],
        "policy_dims": [2, 10, 10, 1],
        "alpha": 0.05,
        "reference_c": 0.7,
        "r1": [[-2.5, 2.5], [-2.5, 2.5]],
    },
    "van-der-pol": {
        "params": {"mu": 1.0},
        "certificate_dims": [2, 30, 30, 1],
        "policy_dims": [2, 30, 30, 1],
        "alpha": 0.1,
        "reference_c": 0.5,
        "r1": [[-2.5, 2.5], [-2.5, 2.5]],
    },
    "inverted-pendulum": {
        "params": {"g": 9.81, "l_p": 0.5, "m": 0.15, "b": 0.1},
        "certificate_dims": [2, 20, 20, 1],
        "policy_dims": [2, 5, 5, 1],
        "alpha": 0.2,
        "reference_c": 0.7,
        "r1": [[-6.0, 6.0], [-6.0, 6.0]],
    },
    "bicycle-tracking": {
        "params": {"v": 1.0, "l_b": 1.0},
        "certificate_dims": [2, 20, 20, 1],
        "policy_dims": [2, 10, 10, 1],
        "alpha": 1.5,
        "reference_c": 0.4,
        # stays clear of the singular line d_e = 1
        "r1": [[-0.8, 0.8], [-0.8, 0.8]],
    },
    # x' = A x + B u, a sanity system that is stable without control
    "linear": {
        "params": {"A": [[-1.0, 0.0], [0.0, -1.0]], "B": [[0.0], [1.0]]},
        "certificate_dims": [2, 10, 1],
        "policy_dims": [2, 4, 1],
        "alpha": 1.0,
        "reference_c": 0.5,
        "r1": [[-1.0, 1.0], [-1.0, 1.0]],
    },
}
