"""Online graph topology inference from stationary signals with hidden nodes."""

from .estimator import (
    BatchResult,
    ConfigError,
    EstimatorConfig,
    EstimatorState,
    NumericalError,
    batch_solve,
    grad_p,
    grad_s,
    initial_state,
    objective,
    online_step,
    prox_p,
    prox_s,
    step_size,
)
from .graph import Gso, KnownEdgeSet, NodePartition, extract_blocks, generate_er, partition_uniform
from .metrics import TrialTrace, edge_classification, normalized_error
from .signals import PolynomialFilter, StreamingCovariance, cov_update, polynomial_covariance, sample_signals

__version__ = "0.1.0"
