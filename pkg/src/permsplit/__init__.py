"""permsplit: desk-scale simulator for split-federated multi-task learning
with randomly permuted patch features, plus FL/SL baselines, exact
communication-cost accounting and a feature-inversion oracle."""

__version__ = "0.1.0"

from . import attack, costs, engine, model, perm, protocol, tasks, transport
from .engine import Tensor, backward, no_grad
from .perm import PermutationKey, generate_key, inverse_permute, permute
from .protocol import RunConfig, Strategy, WorldConfig, run
from .tasks import SyntheticWorld, auc, dice, generate_world, mse
from .transport import Message, MessageKind, TrafficLedger, decode, encode

__all__ = [
    "engine", "model", "perm", "protocol", "transport", "costs", "tasks",
    "attack", "Tensor", "backward", "no_grad", "PermutationKey",
    "generate_key", "permute", "inverse_permute", "RunConfig", "WorldConfig",
    "Strategy", "run", "SyntheticWorld", "generate_world", "auc", "mse",
    "dice", "Message", "MessageKind", "TrafficLedger", "encode", "decode",
]
