from .buffer import StateBuffer
from .networks import PolicyNetwork, PolicyOutputs, QNetwork, ValueNetwork
from .trainer import LearnedPolicy, PolicySnapshot, PolicyTrainer, Transition, UpdateRecord, ema_update, train_policy

__all__ = [
    "LearnedPolicy",
    "PolicyNetwork",
    "PolicyOutputs",
    "PolicySnapshot",
    "PolicyTrainer",
    "QNetwork",
    "StateBuffer",
    "Transition",
    "UpdateRecord",
    "ValueNetwork",
    "ema_update",
    "train_policy",
]
