import contextlib
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.models.config import ModelConfig, TrainConfig
from app.models.enhancer import Enhancer, build_model
from app.numcore.module import Parameter
from app.numcore.tensor import get_default_dtype
from app.services.checkpoint_service import Checkpoint, CheckpointService
from app.services.metrics_service import MetricsService
from app.services.synth_service import SynthDataSource, SynthExample, validation_set
from app.utils.helper import DimensionError, TrainingDivergedError, log, reproducible_mode

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
METRIC_COLUMNS = ["step", "lr", "loss", "grad_norm", "clipped", "si_snri_val", "wall_time_s"]


def lr_at(step: int, d_b: int, warmup: int = 25000) -> float:
    """D_b^-0.5 * min(n * warmup^-1.5, n^-0.5)"""
    if step < 1:
        raise ValueError(f"Learning-rate step must be >= 1, got {step}")
    return d_b ** -0.5 * min(step * warmup ** -1.5, step ** -0.5)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 5.0) -> Tuple[List[np.ndarray], float]:
    """Rescale all grads together when their joint l2 norm exceeds max_norm; returns (grads, pre-clip norm)."""
    total = global_norm(grads)
    if total > max_norm:
        factor = max_norm / total
        return [g * factor for g in grads], total
    return list(grads), total


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 1e-6, betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """Adam with bias correction and decoupled weight decay (p -= lr * wd * p)."""
    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for param, grad in zip(params, grads):
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape for {param.name} differs from parameter", grad.shape, param.shape)
        m = state.m.get(param.name)
        v = state.v.get(param.name)
        if m is None:
            m, v = np.zeros_like(param.data), np.zeros_like(param.data)
        elif m.shape != param.shape:
            raise DimensionError(f"optimizer state for {param.name} differs from parameter", m.shape, param.shape)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[param.name], state.v[param.name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.tensor.data = param.data - lr * (update + weight_decay * param.data)
    return state


def ema_update(shadow: Optional[np.ndarray], value: np.ndarray, decay: float = 0.9999) -> np.ndarray:
    """shadow <- decay * shadow + (1 - decay) * value; an empty shadow starts at value."""
    if shadow is None:
        return np.array(value, copy=True)
    if shadow.shape != value.shape:
        raise DimensionError("EMA shadow shape differs from parameter", shadow.shape, value.shape)
    return decay * shadow + (1.0 - decay) * value


def ema_update_parameters(params: Sequence[Parameter], decay: float) -> None:
    for param in params:
        param.ema_shadow = ema_update(param.ema_shadow, param.data, decay)


@contextlib.contextmanager
def ema_weights(model: Enhancer) -> Iterator[Enhancer]:
    """Temporarily swap EMA shadows into the model (eval mode), restoring raw weights afterwards."""
    params = model.parameters()
    saved = [p.tensor.data for p in params]
    was_training = model.training
    for p in params:
        if p.ema_shadow is not None:
            p.tensor.data = p.ema_shadow.astype(p.tensor.dtype)
    model.eval()
    try:
        yield model
    finally:
        for p, data in zip(params, saved):
            p.tensor.data = data
        model.train(was_training)


def append_metrics(path: str, rows: List[dict]) -> None:
    """Append rows, writing the header only when the file is new."""
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    frame.to_csv(path, mode="a", header=not os.path.exists(path), index=False)


class TrainerService:
    """Runs the optimization loop: sample, forward, loss, backward, clip, Adam, EMA"""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, data_source: SynthDataSource,
                 out_dir: str, preset: Optional[str] = None, dtype=None,
                 validation_examples: Optional[List[SynthExample]] = None):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.data = data_source
        self.out_dir = out_dir
        self.preset = preset or model_cfg.name
        self.dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.model = build_model(model_cfg, seed=train_cfg.seed, dtype=self.dtype)
        self.state = AdamState()
        self.checkpoints = CheckpointService()
        self.metrics = MetricsService()
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self.last_checkpoint: Optional[str] = None
        self.validation = validation_examples if validation_examples is not None else validation_set(
            data_source.duration_s, data_source.sample_rate, count=train_cfg.val_examples
        )
        os.makedirs(out_dir, exist_ok=True)
        log(
            "Trainer ready: "
            f"preset={self.preset}, params={self.model.num_params()}, steps={train_cfg.steps}, "
            f"batch={train_cfg.batch_size}, out_dir={out_dir}"
        )

    def validate(self) -> float:
        with ema_weights(self.model):
            value = self.metrics.mean_si_snri(self.model, self.validation)
        return float("nan") if value is None else value

    def _checkpoint(self, step: int) -> Checkpoint:
        ckpt = self.checkpoints.snapshot(self.model, step, self.preset)
        self.checkpoints.save(ckpt, os.path.join(self.out_dir, f"step_{step:06d}"))
        self.last_checkpoint = ckpt.path
        return ckpt

    def train_step(self, step: int) -> dict:
        cfg = self.train_cfg
        start = time.perf_counter()
        batch = self.data.next_batch()
        model = self.model
        model.train()
        model.zero_grad()
        s, n, x = (a.astype(self.dtype, copy=False) for a in (batch.s, batch.n, batch.x))
        loss = model.loss(s, n, x, alpha_db=cfg.alpha_db, speech_weight=cfg.speech_weight)
        value = loss.item()
        if not np.isfinite(value):
            log(f"Training diverged: step={step}, loss={value}, last_checkpoint={self.last_checkpoint}", "ERROR")
            raise TrainingDivergedError(step, self.last_checkpoint)
        loss.backward()

        params = model.parameters()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        grads, norm = clip_global_norm(grads, cfg.clip_norm)
        lr = lr_at(step, self.model_cfg.d_b, cfg.warmup_steps)
        adam_step(params, grads, self.state, lr, cfg.weight_decay)
        ema_update_parameters(params, cfg.ema_decay)
        for layer in model.attention_layers():
            if layer.maybe_redraw(step):
                log(f"Random features redrawn: step={step}", "DEBUG")

        return {
            "step": step,
            "lr": lr,
            "loss": value,
            "grad_norm": norm,
            "clipped": norm > cfg.clip_norm,
            "si_snri_val": float("nan"),
            "wall_time_s": 0.0 if reproducible_mode() else time.perf_counter() - start,
        }

    def train_loop(self) -> Iterator[Checkpoint]:
        """Yields a checkpoint every `checkpoint_every` steps and after the final step."""
        cfg = self.train_cfg
        pending: List[dict] = []
        for step in range(1, cfg.steps + 1):
            try:
                row = self.train_step(step)
            except TrainingDivergedError:
                append_metrics(self.metrics_path, pending)
                raise
            if step % cfg.validate_every == 0 or step == cfg.steps:
                row["si_snri_val"] = self.validate()
            pending.append(row)
            if step == 1 or step % 10 == 0:
                log(
                    "Training step: "
                    f"step={step}, loss={row['loss']:.3f}, lr={row['lr']:.3e}, "
                    f"grad_norm={row['grad_norm']:.3f}, si_snri_val={row['si_snri_val']:.2f}"
                )
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                append_metrics(self.metrics_path, pending)
                pending = []
                yield self._checkpoint(step)
        append_metrics(self.metrics_path, pending)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, data_source: SynthDataSource,
               out_dir: str) -> Iterator[Checkpoint]:
    return TrainerService(model_cfg, train_cfg, data_source, out_dir).train_loop()
