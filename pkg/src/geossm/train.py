"""Loss/gradient evaluation, Adam with global-norm clipping, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tape as T
from .tasks import SequenceBatch, TaskSpec, derive_seed, iter_batches

log = logging.getLogger(__name__)

EVAL_LENGTHS = (16, 32, 64, 128, 256, 512, 1024)


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient became NaN/inf; ``block`` names the first offending parameter."""

    def __init__(self, message: str, block: str | None = None, last_good: dict | None = None):
        super().__init__(message)
        self.block = block
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr: float = 3e-3
    batch: int = 64
    steps: int = 3000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0
    eval_lengths: list[int] = field(default_factory=lambda: list(EVAL_LENGTHS))
    eval_samples: int = 2000
    eval_every: int = 0
    mode: str = "fft"
    lr_decay: str = "none"  # or "cosine"
    warmup: int = 0  # linear ramp over the first steps
    # poles of learned LTI denominators are kept inside this radius after every
    # update (None disables); fft training cannot see instability on its own
    max_pole_radius: float | None = 0.999

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.steps < 0:
            raise ValueError("lr, batch must be positive and steps non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid optimizer moments")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def loss_and_grad(model, batch: SequenceBatch, mode: str = "fft", tape: T.Tape | None = None):
    """Mean cross-entropy of the model's logits and its gradient per parameter."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    tape = T.Tape() if tape is None else tape
    logits, _ = model.graph(tape, batch.tokens, mode)
    loss = T.softmax_xent(tape, logits, batch.target)
    grads = tape.backward(loss)
    value = float(loss.value)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = next((k for k, v in model.params.items() if not np.all(np.isfinite(v))), None)
        bad = bad or next((k for k, g in grads.items() if not np.all(np.isfinite(g))), None)
        raise NonFiniteLossError(f"non-finite loss {value} (block {bad})", block=bad)
    return value, grads


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> float:
        """Update ``params`` in place; returns the pre-clip global gradient norm."""
        cfg = self.cfg
        lr = cfg.lr if lr is None else lr
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if cfg.clip and norm > cfg.clip:
            scale = cfg.clip / norm
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)
        return norm


def accuracy(model, batch: SequenceBatch, mode: str = "fft", chunk: int = 500) -> float:
    hits = 0
    for i in range(0, len(batch), chunk):
        logits = model.logits(batch.tokens[i:i + chunk], mode)
        hits += int(np.sum(np.argmax(logits, axis=-1) == batch.target[i:i + chunk]))
    return hits / len(batch)


def eval_seed(seed: int, length: int) -> int:
    # held out from the training stream, which uses derive_seed(seed, step)
    return derive_seed(seed ^ 0x5EED_E7A1, length)


def evaluate(model, task: TaskSpec, lengths, n_samples: int = 2000, seed: int = 0,
             mode: str = "recurrent") -> dict[int, float]:
    """Exact-match accuracy of the recalled token on fresh samples per length.

    Evaluation samples always put the first trigger at the center.
    """
    return {int(L): accuracy(model, task.generate(n_samples, eval_seed(seed, L), L=int(L), placement="center"), mode)
            for L in lengths}


def _lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.lr_decay == "cosine" and cfg.steps:
        lr *= 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
    if step < cfg.warmup:
        lr *= (step + 1) / cfg.warmup
    return lr


def train(model, task: TaskSpec, cfg: TrainConfig, data: SequenceBatch | None = None,
          eval_fn: Callable | None = None, log_every: int = 100):
    """Train ``model`` in place; returns the metric history (list of row dicts).

    Synthetic tasks draw a fresh batch each step; pass ``data`` to iterate a
    fixed dataset instead. ``eval_fn(model) -> {name: value}`` is called every
    ``cfg.eval_every`` steps and at the end.
    """
    opt = Adam(model.params, cfg)
    history = []
    stream = iter_batches(data, cfg.batch, cfg.seed) if data is not None else None
    mode = cfg.mode if model.kind == "geometric_ssm" else None
    last_good = {k: v.copy() for k, v in model.params.items()}
    for step in range(1, cfg.steps + 1):
        batch = next(stream) if stream is not None else task.generate(cfg.batch, derive_seed(cfg.seed, step))
        try:
            loss, grads = loss_and_grad(model, batch, mode)
        except NonFiniteLossError as exc:
            exc.last_good = last_good
            raise
        opt.step(model.params, grads, _lr_at(cfg, step - 1))
        if cfg.max_pole_radius is not None and hasattr(model, "project_stable"):
            model.project_stable(cfg.max_pole_radius)
        row = {"step": step, "loss": loss}
        if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
            row.update(eval_fn(model))
            last_good = {k: v.copy() for k, v in model.params.items()}
        history.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    if eval_fn is not None:
        final = {"step": cfg.steps, "loss": history[-1]["loss"] if history else float("nan")}
        final.update(eval_fn(model))
        if history and history[-1]["step"] == cfg.steps:
            history[-1].update(final)
        else:
            history.append(final)
    return history
