"""Global constants for the BGR toolkit."""

# Numerics
DEFAULT_PRECISION = "float64"
SUPPORTED_PRECISIONS = ["float64", "float32"]
ADAM_EPSILON = 1e-8
RHO_INIT = -6.0  # softplus(-6) ~ 0.0025

# Architecture (MLP, 2 hidden layers of 256 units)
DEFAULT_HIDDEN_DIMS = [256, 256]
MNIST_INPUT_DIM = 784
MNIST_IMAGE_SHAPE = (28, 28)

# Methods
METHODS = ["SGD", "ALL_DATA", "EWC", "VCL", "GEN", "GEN_L2", "BGR"]

# Datasets
DATASETS = ["permuted", "split-mnist", "split-fashion", "synthetic"]
SPLIT_PAIRS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
VALIDATION_FRACTION = 0.1
DATA_ROOT_ENV = "BGR_DATA_ROOT"
LOG_LEVEL_ENV = "BGR_LOG_LEVEL"

# Hyperparameters per dataset column (learning rate, betas, models sampled,
# generation importance, buffer, SGLD step size, reinit rate, noise, SGLD steps)
DATASET_DEFAULTS = {
    "permuted": {
        "lr": 1e-3, "adam_betas": (0.0, 0.999), "posterior_samples": 10, "gamma": 1.0,
        "buffer_size": 10000, "sgld_step": 10.0, "reinit_rate": 0.05,
        "sgld_noise": 5e-3, "sgld_steps": 60,
    },
    "split-mnist": {
        "lr": 1e-3, "adam_betas": (0.0, 0.999), "posterior_samples": 10, "gamma": 1.0,
        "buffer_size": 10000, "sgld_step": 10.0, "reinit_rate": 0.5,
        "sgld_noise": 5e-3, "sgld_steps": 60,
    },
    "split-fashion": {
        "lr": 1e-3, "adam_betas": (0.0, 0.999), "posterior_samples": 10, "gamma": 1.0,
        "buffer_size": 10000, "sgld_step": 10.0, "reinit_rate": 0.05,
        "sgld_noise": 5e-3, "sgld_steps": 5,
    },
}
# Not part of the table; chosen for desk-scale runs
DEFAULT_EPOCHS = 10
DEFAULT_BATCH_SIZE = 128
DEFAULT_CHAIN_BATCH = 100
DEFAULT_EWC_LAMBDA = 100.0
DEFAULT_L2_LAMBDA = 1e-2
DEFAULT_FISHER_SAMPLES = 600

# Analysis
SALIENCY_TOP_FRACTION = 0.2
IG_STEPS = 50

# Output layout
METRICS_FILE = "metrics.csv"
RUN_FILE = "run.json"
EVAL_FILE = "eval.csv"
LOG_FILE = "train.log"
CHECKPOINT_DIR = "checkpoints"
SAMPLES_DIR = "samples"
SALIENCY_DIR = "saliency"
CHECKPOINT_EXTENSION = ".ckpt"


def kl_batch_scale(batch_size: int, n_examples: int) -> float:
    """Fraction of the task KL charged to one minibatch."""
    return batch_size / n_examples


def checkpoint_name(task: int) -> str:
    """File name of the checkpoint written after ``task``."""
    return f"task_{task}{CHECKPOINT_EXTENSION}"

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
