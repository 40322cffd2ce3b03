"""Training loop: L2 reconstruction loss, AdamW with decoupled weight decay,
the per-epoch learning-rate decay, checkpointing, and a finite-difference
gradient checker.

One optimizer step is a serial forward/backward/update transaction over the
weights. Every random draw (shuffle order, timestamp, diffusion noise) is
derived from (seed, epoch, step, slot), so training is stateless with
respect to RNG and resuming from a checkpoint reproduces an uninterrupted
run bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .container import read_container, write_container
from .diffusion import NoiseSample, NoiseSchedule, forward_diffuse
from .exceptions import ConfigError, NumericsError, ShapeError
from .rng import rng_for

__all__ = [
    "TrainConfig",
    "mse_loss",
    "lr_schedule",
    "AdamW",
    "Trainer",
    "gradient_check",
    "save_checkpoint",
    "read_checkpoint",
    "restore_model",
    "restore_trainer",
]

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr0: float = 6e-5
    lr_decay: float = 0.993
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.1
    grad_clip: float | None = None
    hypotheses: int = 1  # single forward pass per sample during training
    iterations: int = 1

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.hypotheses, self.iterations) < 1:
            raise ConfigError("epochs, batch_size, hypotheses, iterations must be >= 1")
        if self.lr0 <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError(f"bad lr0={self.lr0} or lr_decay={self.lr_decay}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name}={v} outside [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay={self.weight_decay} must be >= 0")


def mse_loss(y0, y0_hat: Tensor) -> Tensor:
    """L2 reconstruction loss: sqrt of the mean squared coordinate error."""
    y0 = np.asarray(y0) if not isinstance(y0, Tensor) else y0
    target_shape = y0.shape if not isinstance(y0, Tensor) else y0.data.shape
    if tuple(target_shape) != tuple(y0_hat.shape):
        raise ShapeError(f"loss shapes differ: {target_shape} vs {y0_hat.shape}")
    diff = y0_hat - y0
    return (diff * diff).mean().sqrt()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at the start of `epoch`: lr0 * decay^epoch."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay**epoch


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    The decay term subtracts lr * wd * p directly from each parameter before
    the moment update, so decay acts even on parameters with zero gradient.
    """

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_global_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return total**0.5

    def clip_gradients(self, max_norm: float):
        norm = self.grad_global_norm()
        if norm > max_norm:
            factor = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= factor

    def step(self, lr: float):
        cfg = self.cfg
        self.step_count += 1
        bc1 = 1.0 - cfg.adam_beta1**self.step_count
        bc2 = 1.0 - cfg.adam_beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for {name!r}")
            if cfg.weight_decay:
                p.data -= lr * cfg.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            if g is None:
                g = 0.0
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if not np.isfinite(p.data).all():
                raise NumericsError(f"non-finite parameter {name!r} after update")


@dataclass
class StepLog:
    epoch: int
    step: int
    loss: float
    train_mpjpe: float
    lr: float
    wall_ms: float


class Trainer:
    """Binds denoiser, prompt bank, schedule and optimizer over a dataset.

    ``samples`` are (x_2d, y0_3d, action) triples in model units. Each batch
    draws a fresh timestamp and diffusion noise per sample, runs a single
    denoise pass, and minimizes the mean per-sample reconstruction loss.
    """

    def __init__(self, model, bank, sched: NoiseSchedule, cfg: TrainConfig, seed: int):
        self.model = model
        self.bank = bank
        self.sched = sched
        self.cfg = cfg
        self.seed = int(seed)
        params = dict(model.trainable())
        if bank is not None and model.config.use_fpp:
            params.update(bank.trainable())
        self.opt = AdamW(params, cfg)
        self.epoch = 0
        self.logs: list = []

    def _prompt(self, action):
        if self.bank is None or not self.model.config.use_fpp:
            return None
        return self.bank.assemble(action)

    def train_epoch(self, samples: list, max_steps: int | None = None) -> float:
        """One epoch over the shuffled dataset; returns the mean step loss."""
        if not samples:
            raise ConfigError("training dataset is empty")
        epoch = self.epoch
        lr = lr_schedule(epoch, self.cfg)
        order = rng_for(self.seed, "epoch", epoch, "shuffle").permutation(len(samples))
        dtype = self.model.dtype
        losses = []
        for step in range(0, len(order), self.cfg.batch_size):
            if max_steps is not None and self.opt.step_count >= max_steps:
                break
            t0 = time.perf_counter()
            batch = order[step : step + self.cfg.batch_size]
            self.opt.zero_grad()
            total = None
            err_sum, err_n = 0.0, 0
            for slot, idx in enumerate(batch):
                x, y0, action = samples[int(idx)]
                y0 = np.asarray(y0, dtype=dtype)
                t = int(
                    rng_for(self.seed, "epoch", epoch, "step", step, "t", slot).integers(
                        1, self.sched.T + 1
                    )
                )
                eps = NoiseSample.draw(
                    y0.shape, self.seed, "epoch", epoch, "step", step, "noise", slot,
                    dtype=dtype,
                )
                yt = forward_diffuse(y0, t, self.sched, eps)
                y0_hat = self.model.denoise(yt, np.asarray(x, dtype=dtype), t, self._prompt(action))
                term = mse_loss(y0, y0_hat)
                total = term if total is None else total + term
                err = np.linalg.norm(y0_hat.data - y0, axis=-1)
                err_sum += float(err.sum())
                err_n += err.size
            loss = total * (1.0 / len(batch))
            loss.backward()
            if self.cfg.grad_clip is not None:
                self.opt.clip_gradients(self.cfg.grad_clip)
            self.opt.step(lr)
            wall = (time.perf_counter() - t0) * 1e3
            value = float(loss.data)
            losses.append(value)
            self.logs.append(
                StepLog(epoch, self.opt.step_count, value, err_sum / err_n, lr, wall)
            )
        self.epoch += 1
        return float(np.mean(losses)) if losses else float("nan")

    def run(self, samples: list, epochs: int | None = None, max_steps: int | None = None):
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            self.train_epoch(samples, max_steps=max_steps)
            if max_steps is not None and self.opt.step_count >= max_steps:
                break
        return self.logs


# -- checkpointing ---------------------------------------------------------------


def save_checkpoint(path, trainer: Trainer, run_config: dict | None = None) -> None:
    tensors = {}
    for name, p in trainer.model.weights.items():
        tensors[f"weights/{name}"] = p.data
    if trainer.bank is not None:
        for k, mod in enumerate(trainer.bank.modifiers):
            tensors[f"prompt/{k}/modifier"] = mod.data
        for action, blocks in trainer.bank.cached_actions().items():
            for k, b in enumerate(blocks):
                if action == "motion":
                    tensors[f"prompt/{k}/frozen"] = b
                tensors[f"prompt_frozen/{action}/{k}"] = b
    for name in trainer.opt.params:
        tensors[f"opt/m/{name}"] = trainer.opt.m[name]
        tensors[f"opt/v/{name}"] = trainer.opt.v[name]
    meta = {
        "kind": "checkpoint",
        "epoch": trainer.epoch,
        "opt_step": trainer.opt.step_count,
        "seed": trainer.seed,
        "train_config": asdict(trainer.cfg),
        "run_config": run_config or {},
    }
    if run_config:
        from .config import config_hash

        meta["config_hash"] = config_hash(run_config)
    write_container(path, tensors, meta)


def read_checkpoint(path) -> tuple[dict, dict]:
    tensors, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ConfigError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    return tensors, meta


def restore_model(model, bank, tensors: dict) -> None:
    """Install checkpoint weights and prompt state (shared by train and infer)."""
    for name, p in model.weights.items():
        key = f"weights/{name}"
        if key not in tensors:
            raise ConfigError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise ConfigError(
                f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = tensors[key].astype(p.data.dtype)
    if bank is not None:
        for k, mod in enumerate(bank.modifiers):
            key = f"prompt/{k}/modifier"
            if key in tensors:
                mod.data = tensors[key].astype(mod.data.dtype)
        actions = {
            key.split("/")[1] for key in tensors if key.startswith("prompt_frozen/")
        }
        for action in sorted(actions):
            blocks = [
                tensors[f"prompt_frozen/{action}/{k}"]
                for k in range(len(bank.modifiers))
            ]
            bank.set_frozen_blocks(action, blocks)


def restore_trainer(trainer: Trainer, tensors: dict, meta: dict) -> Trainer:
    """Install checkpoint state into a freshly built trainer (bit-exact resume)."""
    restore_model(trainer.model, trainer.bank, tensors)
    # optimizer params were rebuilt from model/bank tensors; rebind them
    params = dict(trainer.model.trainable())
    if trainer.bank is not None and trainer.model.config.use_fpp:
        params.update(trainer.bank.trainable())
    trainer.opt = AdamW(params, trainer.cfg)
    trainer.opt.step_count = int(meta["opt_step"])
    for name in trainer.opt.params:
        mk, vk = f"opt/m/{name}", f"opt/v/{name}"
        if mk in tensors:
            trainer.opt.m[name] = tensors[mk].astype(trainer.opt.m[name].dtype)
            trainer.opt.v[name] = tensors[vk].astype(trainer.opt.v[name].dtype)
    trainer.epoch = int(meta["epoch"])
    return trainer


# -- gradient verification ---------------------------------------------------------


def gradient_check(
    build_loss,
    params: dict,
    *,
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss`` must rebuild the forward graph from the current parameter
    values. For each tensor, up to ``max_entries`` entries (all, when None)
    are perturbed by +-step. Returns {name: (max_abs_diff, max_ref)} and
    raises NumericsError when any entry violates atol + rtol * |grad|.
    """
    for p in params.values():
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise NumericsError(f"parameter {name!r} received no gradient")
        analytic[name] = p.grad.copy()

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        worst = (0.0, 0.0)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(build_loss().data)
            flat[i] = orig - step
            lo = float(build_loss().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            diff = abs(a - numeric)
            if diff > worst[0]:
                worst = (diff, max(abs(a), abs(numeric)))
            if diff > atol + rtol * max(abs(a), abs(numeric)):
                raise NumericsError(
                    f"gradient mismatch for {name!r}[{i}]: "
                    f"analytic={a:.3e} numeric={numeric:.3e}"
                )
        report[name] = worst
    return report
