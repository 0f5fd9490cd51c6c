import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from app.core.numkernel import Tensor
from app.validators.errors import GcdValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CosineSchedule:
    # Cosine decay from initial_lr at step 0 to 0 at total_steps
    initial_lr: float
    total_steps: int

    def __call__(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.initial_lr
        progress = min(max(step, 0), self.total_steps) / self.total_steps
        return 0.5 * self.initial_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay on selected parameters."""

    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay: frozenset = frozenset()):
        frozen = [name for name, tensor in params.items() if not tensor.requires_grad]
        if frozen:
            raise GcdValidationError(f"optimizer got frozen parameters: {frozen}")
        self.params: Dict[str, Tensor] = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self.buffers: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self, lr: float) -> None:
        for name, tensor in self.params.items():
            grad = tensor.grad
            if self.weight_decay and name not in self.no_decay:
                grad = grad + self.weight_decay * tensor.data
            buffer = self.buffers[name]
            buffer *= self.momentum
            buffer += grad
            tensor.data -= lr * buffer
