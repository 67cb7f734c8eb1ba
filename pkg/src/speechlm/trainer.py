"""Optimization loop: AdamW, warmup/linear-decay schedule, freeze management,
deterministic batch scheduling, checkpointing with resume.

Freezing is structural: frozen parameters are rejected at optimizer
construction, so they can never receive state or updates.  The batch served
at step ``k`` is a pure function of (data seed, k), which makes resumed runs
reproduce the uninterrupted run exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_checkpoint, load_into_model, model_entries, save_checkpoint
from .errors import ContractError
from .nn import Module
from .tensor import Parameter, no_grad


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear warmup to the peak, then linear decay to zero at total_steps."""
    if schedule.warmup_steps > 0 and step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    tail = schedule.total_steps - schedule.warmup_steps
    if tail <= 0:
        return schedule.peak_lr
    return schedule.peak_lr * max(schedule.total_steps - step, 0) / tail


def adamw_step(
    params: list[Parameter],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One bias-corrected AdamW update with decoupled weight decay.

    ``state`` holds per-parameter first/second moments keyed by position plus
    the shared step counter; missing gradients count as zero.
    """
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, p in enumerate(params):
        if p.frozen:
            raise ContractError("frozen parameter reached the optimizer")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = state["m"][i], state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class AdamW:
    """Optimizer over the trainable (non-frozen) parameter registry."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.names: list[str] = []
        self.params: list[Parameter] = []
        for name, p in named_params:
            if p.frozen:
                raise ContractError(f"frozen parameter {name!r} passed to the optimizer")
            self.names.append(name)
            self.params.append(p)
        if not self.params:
            raise ContractError("optimizer needs at least one trainable parameter")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = {
            "step": 0,
            "m": [np.zeros_like(p.data) for p in self.params],
            "v": [np.zeros_like(p.data) for p in self.params],
        }

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr, self.beta1, self.beta2,
                   self.eps, self.weight_decay)

    def state_entries(self, prefix: str = "optim.") -> dict:
        entries = {}
        for name, m, v in zip(self.names, self.state["m"], self.state["v"]):
            entries[f"{prefix}m.{name}"] = (m, False)
            entries[f"{prefix}v.{name}"] = (v, False)
        return entries

    def load_state_entries(self, entries: dict, step: int, prefix: str = "optim.") -> None:
        for i, name in enumerate(self.names):
            self.state["m"][i] = entries[f"{prefix}m.{name}"][0].astype(
                self.params[i].data.dtype, copy=True)
            self.state["v"][i] = entries[f"{prefix}v.{name}"][0].astype(
                self.params[i].data.dtype, copy=True)
        self.state["step"] = step


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


# -- deterministic batch scheduling ---------------------------------------------


def bucket_batches(num_frames: list[int], batch_size: int) -> list[np.ndarray]:
    """Group example indices into frame-length buckets of one batch each."""
    order = np.argsort(np.asarray(num_frames), kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def batch_for_step(buckets: list[np.ndarray], seed: int, step: int) -> np.ndarray:
    """Pure function of (seed, step): resumed runs see the identical stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    return buckets[int(rng.integers(len(buckets)))]


@dataclass(frozen=True)
class StageConfig:
    name: str
    total_steps: int
    peak_lr: float
    warmup_frac: float = 0.1
    batch_size: int = 16
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    val_every: int = 200
    val_batches: int = 4
    seed: int = 0

    def schedule(self) -> Schedule:
        return Schedule(
            warmup_steps=max(1, int(self.total_steps * self.warmup_frac)),
            total_steps=self.total_steps,
            peak_lr=self.peak_lr,
        )


@dataclass(frozen=True)
class StagePlan:
    """Ordered training stages with their trainable-prefix sets.

    Stage 1 trains the audio side against a frozen LM and compressor; stage 2
    adds the adapter bank while keeping the audio encoder trainable.
    """

    stages: tuple = (
        ("stage1", ("audio_encoder.", "subsampler.")),
        ("stage2", ("lora.", "audio_encoder.")),
    )

    def trainable_prefixes(self, stage_name: str) -> tuple[str, ...]:
        for name, prefixes in self.stages:
            if name == stage_name:
                return prefixes
        raise ContractError(f"unknown stage {stage_name!r}")


def apply_freeze_plan(model: Module, trainable_prefixes: tuple[str, ...]) -> None:
    """Freeze everything outside the given name prefixes."""
    for name, p in model.named_parameters():
        if any(name.startswith(pre) for pre in trainable_prefixes):
            p.unfreeze()
        else:
            p.freeze()


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    best_val_loss: float
    final_val_loss: float
    history: list = field(default_factory=list)
    wall_seconds: float = 0.0


def run_training(
    model: Module,
    loss_fn: Callable,
    train_size: int,
    num_frames: list[int],
    stage: StageConfig,
    out_path: Optional[Path] = None,
    val_fn: Optional[Callable[[], float]] = None,
    resume_from: Optional[Path] = None,
    metadata: Optional[dict] = None,
    log: Optional[Callable[[str], None]] = None,
    stop_at_step: Optional[int] = None,
) -> TrainResult:
    """Generic loop: ``loss_fn(indices, rng)`` returns the scalar batch loss.

    Deterministic given the stage seed.  Saves a final checkpoint (with
    optimizer state, resumable) and a best-validation checkpoint when
    ``out_path`` is given.  ``stop_at_step`` interrupts mid-stage without
    altering the schedule, so a resumed run replays the uninterrupted one.
    """
    t0 = time.monotonic()
    named_trainable = list(model.trainable_parameters())
    opt = AdamW(named_trainable, weight_decay=stage.weight_decay)
    buckets = bucket_batches(num_frames[:train_size], stage.batch_size)
    schedule = stage.schedule()

    start_step = 0
    if resume_from is not None:
        entries, meta = load_checkpoint(resume_from)
        model_names = {n for n, _ in model.named_parameters()}
        load_into_model(model, {n: v for n, v in entries.items() if n in model_names})
        opt.load_state_entries(entries, meta["step"])
        start_step = meta["step"]

    best_val = np.inf
    last_val = np.inf
    history = []
    loss_value = np.nan
    end_step = stage.total_steps if stop_at_step is None else min(stop_at_step,
                                                                  stage.total_steps)
    for step in range(start_step, end_step):
        indices = batch_for_step(buckets, stage.seed, step)
        rng = np.random.default_rng(np.random.SeedSequence([stage.seed, step, 1]))
        for p in opt.params:  # frozen params never accumulate grads
            p.grad = None
        loss = loss_fn(indices, rng)
        loss.backward()
        clip_global_norm(opt.params, stage.clip_norm)
        opt.step(lr_at(schedule, step + 1))
        loss_value = loss.item()
        if val_fn is not None and ((step + 1) % stage.val_every == 0
                                   or step + 1 == stage.total_steps):
            with no_grad():
                last_val = val_fn()
            history.append({"step": step + 1, "loss": loss_value, "val_loss": last_val})
            if log:
                log(f"[{stage.name}] step {step + 1}/{stage.total_steps} "
                    f"loss {loss_value:.4f} val {last_val:.4f}")
            if last_val < best_val and out_path is not None:
                best_val = last_val
                save_checkpoint(
                    model_entries(model),
                    {"step": step + 1, "stage": stage.name, "val_loss": last_val,
                     **(metadata or {})},
                    Path(str(out_path) + ".best"),
                )

    if out_path is not None:
        entries = dict(model_entries(model))
        entries.update(opt.state_entries())
        save_checkpoint(
            entries,
            {"step": end_step, "stage": stage.name,
             "val_loss": last_val if val_fn else None, **(metadata or {})},
            out_path,
        )
        if val_fn is None or not np.isfinite(best_val):
            save_checkpoint(model_entries(model),
                            {"step": end_step, "stage": stage.name,
                             **(metadata or {})},
                            Path(str(out_path) + ".best"))
    return TrainResult(
        steps=end_step,
        final_loss=loss_value,
        best_val_loss=float(best_val),
        final_val_loss=float(last_val),
        history=history,
        wall_seconds=time.monotonic() - t0,
    )
