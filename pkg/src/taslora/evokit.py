"""Evolutionary subnet search under resource constraints, plus an exhaustive oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import TasLoraModel, mean_loss
from .spacekit import (SearchSpace, SubnetConfig, count_flops, count_params, count_subnets, enumerate_subnets,
                       sample_block, sample_subnet, validate)

MAX_TRIES = 10_000
BRUTE_FORCE_CAP = 10_000


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    population: int = 50
    iterations: int = 20
    top_k: int = 10
    mutation_prob: float = 0.2
    crossover_prob: float = 0.4
    max_params: int | None = None
    max_flops: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.population:
            raise ValueError("top_k must be in [1, population]")
        for name in ("mutation_prob", "crossover_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @property
    def constraints(self) -> "Constraints":
        return Constraints(self.max_params, self.max_flops)


@dataclass(frozen=True)
class Constraints:
    max_params: int | None = None
    max_flops: int | None = None

    def ok(self, subnet: SubnetConfig, space: SearchSpace) -> bool:
        if self.max_params is not None and count_params(subnet, space) > self.max_params:
            return False
        if self.max_flops is not None and count_flops(subnet, space) > self.max_flops:
            return False
        return True


@dataclass(order=True)
class Candidate:
    sort_key: tuple = field(init=False, repr=False)
    subnet: SubnetConfig = field(compare=False)
    val_loss: float = field(compare=False)
    params: int = field(compare=False)
    flops: int = field(compare=False)

    def __post_init__(self):
        if not math.isfinite(self.val_loss):
            raise SearchError(f"non-finite validation loss for {self.subnet.text()}")
        self.sort_key = (self.val_loss, self.subnet.text())

    def record(self) -> dict:
        return {"subnet": self.subnet.text(), "val_loss": self.val_loss, "params": self.params, "flops": self.flops}


EvalFn = Callable[[SubnetConfig], float]


def eval_subnet(subnet: SubnetConfig, model: TasLoraModel, val_images: np.ndarray, val_labels: np.ndarray,
                batch_size: int = 256) -> float:
    """Mean validation cross-entropy; routing is computed once for the subnet."""
    if len(val_labels) == 0:
        raise SearchError("empty validation set")
    _, logits = model.predict(subnet, val_images, batch_size)
    return mean_loss(logits, val_labels)


def make_eval_fn(model: TasLoraModel, val_images: np.ndarray, val_labels: np.ndarray) -> EvalFn:
    return lambda subnet: eval_subnet(subnet, model, val_images, val_labels)


def mutate(subnet: SubnetConfig, prob: float, space: SearchSpace, rng: np.random.Generator) -> SubnetConfig:
    """Resample each attribute with probability ``prob``.

    A depth change keeps the surviving leading blocks and appends fresh
    random blocks when the subnet grows.
    """
    v, e = subnet.depth, subnet.embed
    if rng.random() < prob:
        v = space.depth_candidates[rng.integers(len(space.depth_candidates))]
    if rng.random() < prob:
        e = space.embed_candidates[rng.integers(len(space.embed_candidates))]
    blocks = []
    for b in range(v):
        if b < subnet.depth:
            n, m = subnet.blocks[b]
        else:
            n, m = sample_block(space, rng)
        if rng.random() < prob:
            n = space.head_candidates[rng.integers(len(space.head_candidates))]
        if rng.random() < prob:
            m = space.mlp_ratio_candidates[rng.integers(len(space.mlp_ratio_candidates))]
        blocks.append((n, m))
    return SubnetConfig(v, e, tuple(blocks))


def crossover(a: SubnetConfig, b: SubnetConfig, rng: np.random.Generator) -> SubnetConfig:
    v = a.depth if rng.random() < 0.5 else b.depth
    e = a.embed if rng.random() < 0.5 else b.embed
    shared = min(a.depth, b.depth)
    longer = a if a.depth >= b.depth else b
    blocks = []
    for i in range(v):
        if i < shared:
            blocks.append(a.blocks[i] if rng.random() < 0.5 else b.blocks[i])
        else:
            blocks.append(longer.blocks[i])
    return SubnetConfig(v, e, tuple(blocks))


def random_candidates(count: int, space: SearchSpace, constraints: Constraints, rng: np.random.Generator,
                      exclude: set[str] | None = None) -> list[SubnetConfig]:
    out: list[SubnetConfig] = []
    seen = set(exclude or ())
    tries = 0
    while len(out) < count:
        if tries >= MAX_TRIES:
            if not out and not seen:
                raise SearchError(f"no constraint-satisfying subnet found in {MAX_TRIES} samples")
            break
        tries += 1
        s = sample_subnet(space, rng)
        if s.text() in seen or not constraints.ok(s, space):
            continue
        seen.add(s.text())
        out.append(s)
    if not out and count > 0:
        # every satisfying subnet may already be present; fall back to duplicates
        for _ in range(MAX_TRIES):
            s = sample_subnet(space, rng)
            if constraints.ok(s, space):
                return [s] * count
        raise SearchError(f"no constraint-satisfying subnet found in {MAX_TRIES} samples")
    return out


def _pool(make: Callable[[], SubnetConfig], size: int, space: SearchSpace, constraints: Constraints,
          seen: set[str]) -> list[SubnetConfig]:
    out = []
    for _ in range(MAX_TRIES):
        if len(out) >= size:
            break
        child = make()
        text = child.text()
        if text in seen or not constraints.ok(validate(child, space), space):
            continue
        seen.add(text)
        out.append(child)
    return out


def evolve(cfg: SearchConfig, space: SearchSpace, eval_fn: EvalFn, rng: np.random.Generator,
           trace: list | None = None) -> Candidate:
    """Population search; returns the lowest-loss candidate seen.

    Each subnet is evaluated at most once (memoized). The parent pool of
    every generation is the top-k of the evaluated population together with
    the previous parents.
    """
    constraints = cfg.constraints
    memo: dict[str, Candidate] = {}

    def evaluate(population: list[SubnetConfig]) -> list[Candidate]:
        out = []
        for s in population:
            key = s.text()
            if key not in memo:
                memo[key] = Candidate(s, float(eval_fn(s)), count_params(s, space), count_flops(s, space))
            out.append(memo[key])
        return out

    population = random_candidates(cfg.population, space, constraints, rng)
    parents: list[Candidate] = []
    n_mut = math.ceil(cfg.population * cfg.mutation_prob)
    n_cross = math.ceil(cfg.population * cfg.crossover_prob)
    for it in range(cfg.iterations + 1):
        scored = evaluate(population)
        pool = {c.subnet.text(): c for c in parents + scored}
        parents = sorted(pool.values())[: cfg.top_k]
        if trace is not None:
            for rank, c in enumerate(parents):
                trace.append({"iter": it, "rank": rank, **c.record()})
        if it == cfg.iterations:
            break
        seen: set[str] = set()

        def mutant():
            parent = parents[rng.integers(len(parents))].subnet
            return mutate(parent, cfg.mutation_prob, space, rng)

        def child():
            i, j = rng.integers(len(parents), size=2)
            return crossover(parents[i].subnet, parents[j].subnet, rng)

        nxt = _pool(mutant, n_mut, space, constraints, seen)
        nxt += _pool(child, n_cross, space, constraints, seen)
        nxt += random_candidates(cfg.population - len(nxt), space, constraints, rng, exclude=seen)
        population = nxt[: cfg.population]
    return min(memo.values())


def brute_force(space: SearchSpace, eval_fn: EvalFn, constraints: Constraints | None = None,
                cap: int = BRUTE_FORCE_CAP) -> list[Candidate]:
    """Every constraint-satisfying subnet, sorted by (val_loss, canonical text)."""
    total = count_subnets(space)
    if total > cap:
        raise SearchError(f"{total} subnets exceed the brute-force cap of {cap}")
    constraints = constraints or Constraints()
    out = [Candidate(s, float(eval_fn(s)), count_params(s, space), count_flops(s, space))
           for s in enumerate_subnets(space) if constraints.ok(s, space)]
    return sorted(out)
