"""Supernet pretraining and MoLE/router training.

Every update is "lazy" with respect to weight entanglement: only the
parameter region a step actually read is touched by the optimizer, so
slices never sampled stay exactly where they were.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from . import gradcore as gc
from .labcli.data import Dataset
from .molekit import ExpertBank, ExpertMixture, MoleContext
from .routerkit import RouterState, route
from .spacekit import SearchSpace, SubnetConfig, sample_subnet
from .supernet import SupernetWeights, forward, init_supernet


@dataclass
class TrainConfig:
    supernet_epochs: int = 30
    supernet_lr: float = 2e-3
    supernet_warmup_epochs: int = 1
    mole_epochs: int = 50
    warmup_epochs: int = 5
    lora_lr_start: float = 1e-5
    lora_lr_peak: float = 5e-4
    router_lr: float = 1e-1
    router_momentum: float = 0.9
    finetune_lr: float = 5e-4
    batch_size: int = 64
    weight_decay: float = 5e-2
    seed: int = 0
    mole_forward: str = "merged"
    checkpoint_every: int = 0   # epochs between periodic checkpoints; 0 disables

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.mole_epochs:
            raise ValueError("warmup_epochs must be smaller than mole_epochs")
        for name in ("supernet_lr", "lora_lr_start", "lora_lr_peak", "router_lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")


# -- schedules ------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Linear warm-up from ``start`` to ``peak`` then cosine decay to zero.

    Warm-up step s in [0, warmup] runs at start + (peak - start) * s / warmup.
    Main-phase step t in [0, main] runs at peak * (1 + cos(pi * t / main)) / 2;
    training uses t = 1..main so the final update lands exactly on zero.
    """

    warmup_steps: int
    main_steps: int
    start: float
    peak: float

    def warmup(self, step: int) -> float:
        if not 0 <= step <= self.warmup_steps:
            raise ValueError(f"warm-up step {step} outside [0, {self.warmup_steps}]")
        if self.warmup_steps == 0:
            return self.peak
        return self.start + (self.peak - self.start) * step / self.warmup_steps

    def main(self, step: int) -> float:
        if not 0 <= step <= self.main_steps:
            raise ValueError(f"main step {step} outside [0, {self.main_steps}]")
        return max(0.0, self.peak * 0.5 * (1.0 + math.cos(math.pi * step / self.main_steps)))

    def at(self, global_step: int) -> tuple[str, float]:
        """Phase and rate of the update with this 0-based index."""
        if global_step < self.warmup_steps:
            return "warmup", self.warmup(global_step)
        return "main", self.main(global_step - self.warmup_steps + 1)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def mole_schedules(cfg: TrainConfig, spe: int) -> tuple[Schedule, Schedule]:
    W = cfg.warmup_epochs * spe
    M = (cfg.mole_epochs - cfg.warmup_epochs) * spe
    return Schedule(W, M, cfg.lora_lr_start, cfg.lora_lr_peak), Schedule(W, M, cfg.router_lr, cfg.router_lr)


def lr_at(step: int, phase: str, cfg: TrainConfig, spe: int, group: str = "expert") -> float:
    """Rate of ``group`` at ``step`` counted from the start of ``phase``."""
    expert, router = mole_schedules(cfg, spe)
    sched = expert if group == "expert" else router
    if phase == "warmup":
        return sched.warmup(step) if group == "expert" else 0.0
    if phase == "main":
        return sched.main(step)
    raise ValueError(f"unknown phase {phase!r}")


# -- optimizers -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay, updating only touched regions."""

    def __init__(self, params: dict[str, gc.Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay: Callable[[str, gc.Tensor], bool] | None = None):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = decay or (lambda name, p: p.ndim >= 2)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float, touched: dict[str, np.ndarray] | None = None):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            if name not in self.params:
                continue
            p = self.params[name]
            mask = None if touched is None else touched.get(name)
            if mask is not None and not mask.any():
                continue
            sel = slice(None) if mask is None or mask.all() else mask
            m, v, w = self.m[name], self.v[name], p.data
            gs = g[sel]
            m[sel] = self.b1 * m[sel] + (1 - self.b1) * gs
            v[sel] = self.b2 * v[sel] + (1 - self.b2) * gs * gs
            upd = (m[sel] / c1) / (np.sqrt(v[sel] / c2) + self.eps)
            if self.weight_decay and self.decay(name, p):
                w[sel] = w[sel] * (1 - lr * self.weight_decay)
            w[sel] = w[sel] - lr * upd

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.t], np.float32)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state(self, prefix: str, state: dict[str, np.ndarray]):
        self.t = int(state[f"{prefix}.step"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"{prefix}.m.{k}"])
            self.v[k] = np.array(state[f"{prefix}.v.{k}"])


class SGD:
    """Momentum SGD (dense updates)."""

    def __init__(self, params: dict[str, gc.Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            if name not in self.params:
                continue
            b = self.buf[name]
            b *= self.momentum
            b += g
            self.params[name].data -= lr * b

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.buf.{k}": v for k, v in self.buf.items()}

    def load_state(self, prefix: str, state: dict[str, np.ndarray]):
        for k in self.params:
            self.buf[k] = np.array(state[f"{prefix}.buf.{k}"])


def _supernet_decay(name: str, p: gc.Tensor) -> bool:
    return p.ndim >= 2 and name != "pos_embed"


# -- loops --------------------------------------------------------------------------

def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo: lo + batch_size]


Sampler = Callable[[np.random.Generator], SubnetConfig]


def _epoch_record(log: list, epoch: int, phase: str, losses: list[float], **extra):
    log.append({"epoch": epoch, "phase": phase, "step": None,
                "loss": float(np.mean(np.asarray(losses, dtype=np.float64))), **extra})


def _train_supernet_loop(weights: SupernetWeights, data: Dataset, epochs: int, lr: float, warmup_epochs: int,
                         cfg: TrainConfig, rng: np.random.Generator, sampler: Sampler, tag: str,
                         on_epoch: Callable[[int], None] | None = None) -> list[dict]:
    weights.set_trainable(True)
    opt = AdamW(weights.params, weight_decay=cfg.weight_decay, decay=_supernet_decay)
    spe = steps_per_epoch(len(data), cfg.batch_size)
    sched = Schedule(warmup_epochs * spe, (epochs - warmup_epochs) * spe, lr * 0.01, lr)
    log: list[dict] = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in iterate_batches(len(data), cfg.batch_size, rng):
            subnet = sampler(rng)
            phase, rate = sched.at(step)
            with gc.Tape() as tape:
                _, logits = forward(weights, subnet, data.images[idx])
                loss = gc.cross_entropy(logits, data.labels[idx])
                grads = tape.backward(loss)
            opt.step(grads, rate, tape.touched)
            losses.append(float(loss.data))
            step += 1
        _epoch_record(log, epoch, tag, losses, lr=rate)
        if on_epoch is not None:
            on_epoch(epoch)
    return log


def pretrain_supernet(weights: SupernetWeights, space: SearchSpace, data: Dataset, cfg: TrainConfig,
                      rng: np.random.Generator, sampler: Sampler | None = None,
                      on_epoch: Callable[[int], None] | None = None):
    """Single-path supernet training: one uniformly sampled subnet per step."""
    sampler = sampler or (lambda g: sample_subnet(space, g))
    warm = min(cfg.supernet_warmup_epochs, max(cfg.supernet_epochs - 1, 0))
    log = _train_supernet_loop(weights, data, cfg.supernet_epochs, cfg.supernet_lr, warm, cfg, rng,
                               sampler, "pretrain", on_epoch)
    return weights, log


def train_independent(subnet: SubnetConfig, space: SearchSpace, data: Dataset, cfg: TrainConfig,
                      rng: np.random.Generator) -> tuple[SupernetWeights, list[dict]]:
    """A fresh network trained on one architecture only."""
    weights = init_supernet(space, rng)
    return pretrain_supernet(weights, space, data, cfg, rng, sampler=lambda g: subnet)


def full_finetune_baseline(weights: SupernetWeights, space: SearchSpace, data: Dataset, cfg: TrainConfig,
                           rng: np.random.Generator, sampler: Sampler | None = None):
    """Fine-tune every supernet weight, without experts, for the MoLE epoch budget."""
    tuned = weights.copy()
    sampler = sampler or (lambda g: sample_subnet(space, g))
    log = _train_supernet_loop(tuned, data, cfg.mole_epochs, cfg.finetune_lr, cfg.warmup_epochs, cfg, rng,
                               sampler, "full_finetune")
    return tuned, log


def train_mole(weights: SupernetWeights, bank: ExpertBank, router: RouterState | None, data: Dataset,
               cfg: TrainConfig, rng: np.random.Generator, sampler: Sampler | None = None,
               on_step: Callable[[dict], None] | None = None,
               on_epoch: Callable[[int], None] | None = None):
    """Train experts (and, after warm-up, the router) on a frozen supernet.

    With ``router=None`` the bank must hold a single expert (the shared-LoRA
    baseline) and every mixture row is [1].
    """
    space = weights.space
    sampler = sampler or (lambda g: sample_subnet(space, g))
    if router is None and bank.num_experts != 1:
        raise ValueError("an unrouted bank must have exactly one expert")
    weights.set_trainable(False)
    bank.set_trainable(True)
    expert_opt = AdamW(bank.params, weight_decay=cfg.weight_decay, decay=lambda n, p: True)
    router_opt = None
    if router is not None:
        router_opt = SGD(router.params, momentum=cfg.router_momentum)
        router.set_trainable(False)

    spe = steps_per_epoch(len(data), cfg.batch_size)
    expert_sched, router_sched = mole_schedules(cfg, spe)
    log: list[dict] = []
    step = 0
    for epoch in range(cfg.mole_epochs):
        joint = epoch >= cfg.warmup_epochs
        if router is not None:
            router.set_trainable(joint)
        losses = []
        for idx in iterate_batches(len(data), cfg.batch_size, rng):
            subnet = sampler(rng)
            phase, lr_e = expert_sched.at(step)
            lr_r = router_sched.at(step)[1] if joint and router is not None else 0.0
            with gc.Tape() as tape:
                if router is None:
                    mixture = ExpertMixture(gc.constant(np.ones((4 * subnet.depth + 1, 1), gc.DTYPE)),
                                            subnet.depth, space.num_blocks)
                else:
                    mixture = route(router, subnet)
                ctx = MoleContext(bank, mixture, cfg.mole_forward)
                _, logits = forward(weights, subnet, data.images[idx], ctx)
                loss = gc.cross_entropy(logits, data.labels[idx])
                grads = tape.backward(loss)
            expert_opt.step({k: g for k, g in grads.items() if k in bank.params}, lr_e, tape.touched)
            if joint and router_opt is not None:
                router_opt.step({k: g for k, g in grads.items() if k in router_opt.params}, lr_r)
            rec = {"epoch": epoch, "phase": phase, "step": step, "loss": float(loss.data),
                   "lr_expert": lr_e, "lr_router": lr_r}
            log.append(rec)
            if on_step is not None:
                on_step(rec)
            losses.append(float(loss.data))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch)
    if router is not None:
        router.set_trainable(False)
    bank.set_trainable(False)
    return bank, router, log


def epoch_losses(log: list[dict]) -> list[float]:
    """float64 per-epoch mean of step records."""
    by_epoch: dict[int, list[float]] = {}
    for rec in log:
        if rec.get("step") is not None:
            by_epoch.setdefault(rec["epoch"], []).append(rec["loss"])
    return [float(np.mean(np.asarray(v, dtype=np.float64))) for _, v in sorted(by_epoch.items())]


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
