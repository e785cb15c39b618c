from typing import Callable, Dict, List, Optional, Text, Tuple

import numpy as np
from loguru import logger

from maulab import loader, utils
from maulab.exceptions import TrainingDiverged
from maulab.models import ModelKind, TrainConfig
from maulab.nn.checkpoint import save_checkpoint
from maulab.nn.modules import Module
from maulab.nn.optim import Adam
from maulab.nn.tensor import Tensor, gradients

# step_fn(step, rng) -> (scalar loss, extra metrics logged as CSV columns)
StepFn = Callable[[int, np.random.Generator], Tuple[Tensor, Dict[Text, float]]]


class TrainRunner(object):
    """Seeded single-threaded optimisation loop.

    Logs one CSV row per step, keeps the last good checkpoint on disk and
    aborts with ``TrainingDiverged`` on a non-finite loss or gradient.
    """

    def __init__(self, name: Text, model: Module, cfg: TrainConfig):
        self.name = name
        self.model = model
        self.cfg = cfg
        self.params = model.named_parameters()
        self.optimizer = Adam(self.params, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.rows: List[Dict] = []

        self.__checkpoint_path: Optional[Text] = None
        self.__kind: Optional[ModelKind] = None
        self.__config: Dict = {}
        self.__digest: Text = ""
        self.__meta: Dict = {}
        self.__log_path: Optional[Text] = None
        self.__last_good: Optional[Text] = None

    def with_checkpoint(
        self, path: Text, kind: ModelKind, config: Dict, digest: Text = "", meta: Dict = None
    ) -> "TrainRunner":
        self.__checkpoint_path = path
        self.__kind = kind
        self.__config = config
        self.__digest = digest
        self.__meta = meta or {}
        return self

    def with_log(self, path: Text) -> "TrainRunner":
        self.__log_path = path
        return self

    def with_rng(self, rng: np.random.Generator) -> "TrainRunner":
        self.rng = rng
        return self

    @property
    def last_good_checkpoint(self) -> Optional[Text]:
        return self.__last_good

    def save(self, step: int):
        if not self.__checkpoint_path:
            return
        meta = dict(self.__meta, step=step, run=self.name)
        save_checkpoint(
            self.__checkpoint_path,
            self.__kind,
            self.model.state_dict(),
            self.__config,
            self.__digest,
            meta,
        )
        self.__last_good = self.__checkpoint_path

    def write_log(self):
        if not self.__log_path or not self.rows:
            return
        utils.atomic_write(self.__log_path, loader.dumps_csv_rows(self.rows, self.__digest))

    def __diverged(self, message: Text):
        logger.error(f"{self.name} diverged: {message}, last good checkpoint: {self.__last_good}")
        self.write_log()
        raise TrainingDiverged(message, self.__last_good)

    def run(self, step_fn: StepFn) -> List[Dict]:
        logger.info(
            f"start training {self.name}: {self.model.num_parameters()} parameters, "
            f"{self.cfg.max_steps} steps, batch {self.cfg.batch_size}"
        )
        self.save(0)

        for step in range(1, self.cfg.max_steps + 1):
            loss, metrics = step_fn(step, self.rng)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                self.__diverged(f"non-finite loss {loss_value} at step {step}")

            grads = gradients(loss, self.params)
            try:
                grad_norm = self.optimizer.step(grads)
                lr = self.optimizer.current_lr
            except TrainingDiverged as ex:
                self.__diverged(str(ex))

            row = {"step": step, "lr": lr, "loss": loss_value, "grad_norm": grad_norm}
            row.update(metrics)
            self.rows.append(row)

            if step % self.cfg.log_every == 0 or step == 1:
                extras = ", ".join(f"{k}: {v:.4f}" for k, v in metrics.items())
                logger.info(f"{self.name} step {step}, lr: {lr:.3e}, loss: {loss_value:.4f}, {extras}")

            if step % self.cfg.checkpoint_every == 0:
                self.save(step)

        if self.cfg.max_steps % self.cfg.checkpoint_every != 0:
            self.save(self.cfg.max_steps)
        self.write_log()
        logger.info(f"finished training {self.name}, final loss: {self.rows[-1]['loss']:.4f}")
        return self.rows
