"""Class-incremental learning by amalgamating per-task teachers into one student."""

from .amalgamation import AmalgamationConfig, amalgamate, predict, stack_teacher_outputs
from .data import TaskSpec, TaskStream, generate_synthetic_stream, load_idx_split, read_idx, write_idx
from .errors import (
    CFAError,
    ConfigError,
    ContractError,
    DomainError,
    FormatError,
    GenerationError,
    LookaheadError,
    NonFiniteError,
    ShapeError,
    TrainingError,
)
from .harness import ExperimentConfig, run_cfa_experiment, run_joint_upper_bound, run_naive_baseline
from .memory import Exemplar, ReplayMemory
from .metrics import RMatrix, metric_acc, metric_bwt, metric_fwt
from .nn import Network

__version__ = "0.1.0"
