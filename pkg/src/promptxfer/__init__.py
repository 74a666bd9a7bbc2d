"""Transferable border visual prompts on frozen surrogate multimodal models."""

from .autodiff import Tape, Tensor, grad_check
from .evaluation import TransferReport, avg_delta, evaluate, transfer_matrix
from .losses import LossWeights
from .models import DualEncoder, SurrogateModel
from .persistence import RunConfig, load_prompt, parse_config, save_prompt
from .prompt import VisualPrompt, apply_prompt, init_prompt
from .tasks import TASKS, get_task
from .trainer import TrainConfig, train_prompt

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "grad_check", "TransferReport", "avg_delta", "evaluate", "transfer_matrix",
    "LossWeights", "DualEncoder", "SurrogateModel", "RunConfig", "load_prompt", "parse_config",
    "save_prompt", "VisualPrompt", "apply_prompt", "init_prompt", "TASKS", "get_task",
    "TrainConfig", "train_prompt",
]
