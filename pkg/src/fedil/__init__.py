"""Federated semi-supervised learning with a server-held labeled set,
client-side pseudo-labeling and cosine-gated aggregation."""

from .augment import AugmentConfig, augment_rows, reaugment, strong_augment, weak_augment
from .client import ClientSettings, ClientState, CredibilityTracker, PseudoLabelSet, client_round
from .convergence import ConvergenceTrace, banach_demo, contraction_verdict
from .data import Dataset, Example, PartitionPlan, UnlabeledShard, gen_synthetic, load_mnist_idx
from .errors import (ConfigurationError, FedILError, FormatError, InputError, InvariantViolation,
                     ProtocolError, TrainingError)
from .harness import ExperimentConfig, run_experiment
from .model import ModelArch, backward, forward, init_params, loss_and_grad
from .server import aggregate, cosine_gate, select_clients, server_supervised_update

__version__ = "0.1.0"
