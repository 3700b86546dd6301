"""Trainer Agent - SGD with momentum, poly decay and best-Dice checkpointing."""
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from pbeunet.checkpoint import CheckpointState, save_checkpoint
from pbeunet.console import echo
from pbeunet.data_io import batch_count, batch_samples
from pbeunet.errors import DatasetError, MissingGradientError, TrainingDivergedError
from pbeunet.evaluator import EvaluatorAgent
from pbeunet.layers import ModuleParams
from pbeunet.losses import total_loss
from pbeunet.models import EvalRecord, HistoryRecord, PbeOutput, RunConfig, Sample, TrainConfig, TrainingResult
from pbeunet.network import init_network, pbe_forward
from pbeunet.rng import make_rng, named_seed
from pbeunet.tensor import Tensor, backward

HISTORY_FILE = "history.csv"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


def poly_lr(iteration: int, max_iter: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return cfg.lr0 * (1.0 - iteration / max_iter) ** cfg.power


def max_iterations(n_samples: int, cfg: TrainConfig) -> int:
    if cfg.max_iters is not None:
        return cfg.max_iters
    return cfg.epochs * batch_count(n_samples, cfg.batch_size)


def decays(name: str) -> bool:
    """Weight decay applies to convolution weights and BN gamma only."""
    return name.endswith("weight") or name.endswith("gamma")


def init_velocity(params: ModuleParams) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(tensor.data) for name, tensor in params.learnable()}


def sgd_step(
    params: ModuleParams,
    velocity: Dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
) -> None:
    """g' = g + wd*w; v = momentum*v + g'; w = w - lr*v, in place."""
    for name, tensor in params.learnable():
        if tensor.grad is None:
            raise MissingGradientError(name)
        grad = tensor.grad + cfg.weight_decay * tensor.data if decays(name) else tensor.grad
        v = velocity.get(name)
        v = grad.copy() if v is None else cfg.momentum * v + grad
        velocity[name] = v.astype(tensor.dtype, copy=False)
        tensor.data -= (lr * velocity[name]).astype(tensor.dtype, copy=False)


def first_non_finite(params: ModuleParams, out: PbeOutput, loss: Tensor) -> str:
    """Name of the first tensor holding a NaN or infinity, parameters first."""
    for name, tensor, _ in params:
        if not np.all(np.isfinite(tensor.data)):
            return name
    candidates = [("mask_logit_map", out.mask_logit_map), ("mask_prob", out.mask_prob)]
    candidates += [(f"boundary_probs[{k}]", b) for k, b in enumerate(out.boundary_probs)]
    candidates.append(("loss", loss))
    for name, tensor in candidates:
        if not np.all(np.isfinite(tensor.data)):
            return name
    return "loss"


def append_history(path: Path, records: List[HistoryRecord]) -> None:
    if not records:
        return
    frame = pd.DataFrame([r.model_dump() for r in records], columns=["iter", "loss", "lr"])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


class TrainerAgent:
    """Agent responsible for optimizing the network parameters."""

    def __init__(self, verbose: bool = True):
        self.verbose = verbose

    def _say(self, message: str) -> None:
        if self.verbose:
            echo(message)

    def train(
        self,
        run: RunConfig,
        train_samples: Sequence[Sample],
        val_samples: Sequence[Sample] = (),
        out_dir: Optional[Union[str, Path]] = None,
        params: Optional[ModuleParams] = None,
        velocity: Optional[Dict[str, np.ndarray]] = None,
        start_iteration: int = 0,
    ) -> TrainingResult:
        """Runs the full schedule; writes history and checkpoints when `out_dir` is given.

        With `start_iteration` > 0 the run continues a checkpoint: the shuffle
        stream is replayed up to that step, and `params` and `velocity` should
        be the ones stored with it. History is then appended, not restarted.
        """
        if not train_samples:
            raise DatasetError("training set is empty")
        cfg, model, weights = run.train, run.model, run.loss
        params = init_network(model, cfg.seed) if params is None else params
        velocity = init_velocity(params) if velocity is None else velocity
        n = len(train_samples)
        max_iter = max_iterations(n, cfg)
        if not 0 <= start_iteration <= max_iter:
            raise ValueError(f"start iteration {start_iteration} outside [0, {max_iter}]")
        out_path = Path(out_dir) if out_dir is not None else None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            if start_iteration == 0:
                (out_path / HISTORY_FILE).unlink(missing_ok=True)
        evaluator = EvaluatorAgent(batch_size=cfg.batch_size, verbose=False)
        shuffler = make_rng(named_seed(cfg.seed, "shuffle"))

        self._say(f"🤖 Trainer Agent: {params.count():,} parameters, {n} samples, {max_iter} iterations")
        if start_iteration:
            self._say(f"   resuming at iter {start_iteration}")
        result = TrainingResult()
        iteration = start_iteration
        step = 0
        epoch = 0
        while iteration < max_iter:
            order = shuffler.permutation(n)
            epoch_records = []
            for start in range(0, n, cfg.batch_size):
                if iteration >= max_iter:
                    break
                step += 1
                if step <= start_iteration:
                    continue
                batch = [train_samples[k] for k in order[start:start + cfg.batch_size]]
                images, masks, boundaries = batch_samples(batch)
                lr = poly_lr(iteration, max_iter, cfg)
                params.zero_grad()
                out = pbe_forward(images, model, params, training=True)
                loss = total_loss(out, masks, boundaries, weights, require_boundary=model.enable_bd)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(first_non_finite(params, out, loss), iteration)
                backward(loss)
                sgd_step(params, velocity, lr, cfg)
                epoch_records.append(HistoryRecord(iter=iteration, loss=value, lr=lr))
                iteration += 1
            epoch += 1
            if not epoch_records:
                continue
            result.history.extend(epoch_records)
            if out_path is not None:
                append_history(out_path / HISTORY_FILE, epoch_records)
            self._say(f"   epoch {epoch}: iter {iteration}/{max_iter}, loss {epoch_records[-1].loss:.4f}")

            if val_samples and (epoch % cfg.eval_every == 0 or iteration >= max_iter):
                _, summary = evaluator.evaluate(params, model, val_samples)
                result.evaluations.append(EvalRecord(epoch=epoch, iter=iteration, aggregate=summary))
                self._say(f"📊 Trainer Agent: validation Dice {summary.dice:.4f} at iter {iteration}")
                if result.best_dice is None or summary.dice > result.best_dice:
                    result.best_dice = summary.dice
                    result.best_iteration = iteration
                    if out_path is not None:
                        state = CheckpointState(config=run, params=params, velocity=velocity, iteration=iteration)
                        save_checkpoint(out_path / BEST_CHECKPOINT, state)

        if out_path is not None:
            state = CheckpointState(config=run, params=params, velocity=velocity, iteration=iteration)
            save_checkpoint(out_path / LAST_CHECKPOINT, state)
        result.iterations = iteration
        result.params = params
        if result.best_dice is not None:
            self._say(f"✅ Trainer Agent: best validation Dice {result.best_dice:.4f} at iter {result.best_iteration}")
        else:
            self._say(f"✅ Trainer Agent: finished {iteration} iterations")
        return result
