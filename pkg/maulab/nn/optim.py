from typing import Dict, Text

import numpy as np
from loguru import logger

from maulab.exceptions import ContractError, TrainingDiverged
from maulab.models import ScheduleEnum, TrainConfig
from maulab.nn.modules import Parameter


def warmup_schedule(step: int, cfg: TrainConfig) -> float:
    """inverse square-root schedule with linear warm-up, peak at step = warmup_steps

    lr = base_lr * d^-0.5 * min(step^-0.5, step * warmup^-1.5)
    """
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    return (
        cfg.base_lr
        * cfg.model_dim_for_schedule ** -0.5
        * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)
    )


def learning_rate(step: int, cfg: TrainConfig) -> float:
    if cfg.schedule == ScheduleEnum.CONSTANT:
        return cfg.base_lr
    return warmup_schedule(step, cfg)


class AdamState(object):
    def __init__(self):
        self.first: Dict[Text, np.ndarray] = {}
        self.second: Dict[Text, np.ndarray] = {}


def clip_by_global_norm(grads: Dict[Text, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def adam_step(
    params: Dict[Text, Parameter],
    grads: Dict[Text, np.ndarray],
    step_index: int,
    cfg: TrainConfig,
    state: AdamState,
) -> Dict[Text, Parameter]:
    """apply one Adam update in place, moments start at zero before step 1"""
    if step_index < 1:
        raise ContractError(f"adam step_index must be >= 1, got {step_index}")

    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name} at step {step_index}")

    lr = learning_rate(step_index, cfg)
    beta1, beta2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - beta1 ** step_index
    correction2 = 1.0 - beta2 ** step_index

    for name, param in params.items():
        grad = grads[name]
        first = state.first.get(name)
        if first is None:
            first = np.zeros_like(param.data)
            state.second[name] = np.zeros_like(param.data)
        first = beta1 * first + (1.0 - beta1) * grad
        second = beta2 * state.second[name] + (1.0 - beta2) * grad ** 2
        state.first[name] = first
        state.second[name] = second

        update = lr * (first / correction1) / (np.sqrt(second / correction2) + cfg.adam_eps)
        param.data = param.data - update

    return params


class Adam(object):
    def __init__(self, params: Dict[Text, Parameter], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()
        self.step_index = 0

    @property
    def current_lr(self) -> float:
        return learning_rate(max(self.step_index, 1), self.cfg)

    def step(self, grads: Dict[Text, np.ndarray]) -> float:
        """returns the gradient global norm before clipping"""
        self.step_index += 1
        norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
        if self.cfg.grad_clip is not None:
            clip_by_global_norm(grads, self.cfg.grad_clip)
        adam_step(self.params, grads, self.step_index, self.cfg, self.state)
        if self.step_index == 1:
            logger.debug(
                f"adam initialised for {len(self.params)} parameters, first lr {self.current_lr:.3e}"
            )
        return norm
