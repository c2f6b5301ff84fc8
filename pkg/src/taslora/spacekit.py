"""Search spaces, subnet encoding, architecture groups and cost models."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np


class SpaceError(ValueError):
    """Raised when a space, subnet or attribute violates the space definition."""


def _ratio(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def format_ratio(m) -> str:
    f = _ratio(m)
    if f.denominator == 1:
        return str(f.numerator)
    return f"{float(f):g}"


def hidden_width(m, e: int) -> int:
    """MLP hidden width round(m * e), rounding half up."""
    return math.floor(_ratio(m) * e + Fraction(1, 2))


@dataclass(frozen=True)
class SearchSpace:
    head_candidates: tuple[int, ...]
    mlp_ratio_candidates: tuple[Fraction, ...]
    embed_candidates: tuple[int, ...]
    depth_candidates: tuple[int, ...]
    head_dim: int
    patch_size: int
    image_size: int
    num_classes: int
    in_chans: int = 1

    def __post_init__(self):
        object.__setattr__(self, "head_candidates", tuple(int(x) for x in self.head_candidates))
        object.__setattr__(self, "mlp_ratio_candidates", tuple(_ratio(x) for x in self.mlp_ratio_candidates))
        object.__setattr__(self, "embed_candidates", tuple(int(x) for x in self.embed_candidates))
        object.__setattr__(self, "depth_candidates", tuple(int(x) for x in self.depth_candidates))
        for name in ("head_candidates", "mlp_ratio_candidates", "embed_candidates", "depth_candidates"):
            values = getattr(self, name)
            if not values:
                raise SpaceError(f"{name} must be non-empty")
            if any(v <= 0 for v in values):
                raise SpaceError(f"{name} must be positive: {values}")
            if any(a >= b for a, b in zip(values, values[1:])):
                raise SpaceError(f"{name} must be strictly increasing: {values}")
        for name in ("head_dim", "patch_size", "image_size", "num_classes", "in_chans"):
            if int(getattr(self, name)) <= 0:
                raise SpaceError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise SpaceError("image_size must be a multiple of patch_size")

    # maxima define the physical supernet
    @property
    def num_blocks(self) -> int:
        return self.depth_candidates[-1]

    @property
    def embed_max(self) -> int:
        return self.embed_candidates[-1]

    @property
    def heads_max(self) -> int:
        return self.head_candidates[-1]

    @property
    def hidden_max(self) -> int:
        return max(hidden_width(m, self.embed_max) for m in self.mlp_ratio_candidates)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size**2

    @property
    def num_groups(self) -> int:
        return len(self.head_candidates) * len(self.mlp_ratio_candidates) * len(self.embed_candidates)

    @property
    def num_layers(self) -> int:
        """MoLE-bearing layers: four per physical block plus the classifier."""
        return 4 * self.num_blocks + 1

    def index(self, attribute: str, value) -> int:
        table = {
            "heads": self.head_candidates,
            "mlp_ratio": self.mlp_ratio_candidates,
            "embed": self.embed_candidates,
            "depth": self.depth_candidates,
        }[attribute]
        if attribute == "mlp_ratio":
            value = _ratio(value)
        try:
            return table.index(value)
        except ValueError:
            raise SpaceError(f"{attribute}={value!r} not in candidates {list(map(format_ratio, table))}") from None


@dataclass(frozen=True)
class SubnetConfig:
    depth: int
    embed: int
    blocks: tuple[tuple[int, Fraction], ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(n), _ratio(m)) for n, m in self.blocks))
        if len(self.blocks) != self.depth:
            raise SpaceError(f"depth {self.depth} but {len(self.blocks)} blocks given")

    def text(self) -> str:
        inner = ";".join(f"{n},{format_ratio(m)}" for n, m in self.blocks)
        return f"{self.depth}:{self.embed}:[{inner}]"

    __str__ = text

    @classmethod
    def parse(cls, text: str) -> "SubnetConfig":
        try:
            v, e, rest = text.strip().split(":", 2)
            if not (rest.startswith("[") and rest.endswith("]")):
                raise ValueError
            body = rest[1:-1]
            blocks = []
            if body:
                for item in body.split(";"):
                    n, m = item.split(",")
                    blocks.append((int(n), Fraction(m.strip())))
            return cls(int(v), int(e), tuple(blocks))
        except (ValueError, ZeroDivisionError):
            raise SpaceError(f"malformed subnet text {text!r}") from None


def validate(subnet: SubnetConfig, space: SearchSpace) -> SubnetConfig:
    if subnet.depth not in space.depth_candidates:
        raise SpaceError(f"depth={subnet.depth} not in candidates {list(space.depth_candidates)}")
    space.index("embed", subnet.embed)
    for n, m in subnet.blocks:
        space.index("heads", n)
        space.index("mlp_ratio", m)
    return subnet


def is_valid(subnet: SubnetConfig, space: SearchSpace) -> bool:
    try:
        validate(subnet, space)
    except SpaceError:
        return False
    return True


def count_subnets(space: SearchSpace) -> int:
    per_block = len(space.head_candidates) * len(space.mlp_ratio_candidates)
    return len(space.embed_candidates) * sum(per_block**v for v in space.depth_candidates)


def enumerate_subnets(space: SearchSpace) -> Iterator[SubnetConfig]:
    block_choices = list(itertools.product(space.head_candidates, space.mlp_ratio_candidates))
    for v in space.depth_candidates:
        for e in space.embed_candidates:
            for blocks in itertools.product(block_choices, repeat=v):
                yield SubnetConfig(v, e, blocks)


def sample_block(space: SearchSpace, rng: np.random.Generator) -> tuple[int, Fraction]:
    n = space.head_candidates[rng.integers(len(space.head_candidates))]
    m = space.mlp_ratio_candidates[rng.integers(len(space.mlp_ratio_candidates))]
    return n, m


def sample_subnet(space: SearchSpace, rng: np.random.Generator) -> SubnetConfig:
    v = space.depth_candidates[rng.integers(len(space.depth_candidates))]
    e = space.embed_candidates[rng.integers(len(space.embed_candidates))]
    return SubnetConfig(v, e, tuple(sample_block(space, rng) for _ in range(v)))


def max_subnet(space: SearchSpace) -> SubnetConfig:
    block = (space.heads_max, space.mlp_ratio_candidates[-1])
    return SubnetConfig(space.num_blocks, space.embed_max, (block,) * space.num_blocks)


# -- grouping -----------------------------------------------------------------

@dataclass(frozen=True)
class GroupAssignment:
    group_id: int
    num_groups: int


def group_of(n: int, m, e: int, space: SearchSpace) -> GroupAssignment:
    i_n = space.index("heads", n)
    i_m = space.index("mlp_ratio", m)
    i_e = space.index("embed", e)
    nh, nm = len(space.head_candidates), len(space.mlp_ratio_candidates)
    return GroupAssignment(i_n + nh * i_m + nh * nm * i_e, space.num_groups)


def group_attributes(group_id: int, space: SearchSpace) -> tuple[int, Fraction, int]:
    """Inverse of group_of."""
    if not 0 <= group_id < space.num_groups:
        raise SpaceError(f"group id {group_id} outside [0, {space.num_groups})")
    nh, nm = len(space.head_candidates), len(space.mlp_ratio_candidates)
    i_n = group_id % nh
    i_m = (group_id // nh) % nm
    i_e = group_id // (nh * nm)
    return space.head_candidates[i_n], space.mlp_ratio_candidates[i_m], space.embed_candidates[i_e]


@dataclass
class Grouping:
    """Maps (block position, heads, mlp ratio, embed) to a router head / expert id.

    ``architecture`` is the default mixed-radix grouping. ``random`` and
    ``params`` are the ablation strategies: a seeded random table per block
    position, and groups formed by equal per-block parameter counts.
    """

    space: SearchSpace
    strategy: str = "architecture"
    seed: int = 0
    _table: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.strategy not in ("architecture", "random", "params"):
            raise SpaceError(f"unknown grouping strategy {self.strategy!r}")
        K = self.space.num_groups
        if self.strategy == "random":
            rng = np.random.default_rng(self.seed)
            for b in range(self.space.num_blocks):
                for g in range(K):
                    self._table[(b, g)] = int(rng.integers(K))
        elif self.strategy == "params":
            counts = {}
            for g in range(K):
                n, m, e = group_attributes(g, self.space)
                counts[g] = block_params(n, m, e, self.space.head_dim)
            ranks = {c: i for i, c in enumerate(sorted(set(counts.values())))}
            for g in range(K):
                self._table[g] = ranks[counts[g]]

    @property
    def num_groups(self) -> int:
        return self.space.num_groups

    def __call__(self, block: int, n: int, m, e: int) -> int:
        g = group_of(n, m, e, self.space).group_id
        if self.strategy == "random":
            return self._table[(block, g)]
        if self.strategy == "params":
            return self._table[g]
        return g

    def groups_for(self, subnet: SubnetConfig) -> list[int]:
        return [self(b, n, m, subnet.embed) for b, (n, m) in enumerate(subnet.blocks)]


# -- cost models --------------------------------------------------------------

def block_params(n: int, m, e: int, head_dim: int) -> int:
    qk = n * head_dim
    h = hidden_width(m, e)
    return (
        2 * e                      # norm1
        + 3 * qk * e + 3 * qk      # qkv
        + e * qk + e               # proj
        + 2 * e                    # norm2
        + h * e + h                # fc1
        + e * h + e                # fc2
    )


def count_params(subnet: SubnetConfig, space: SearchSpace) -> int:
    """Parameters of the standalone (merged) subnet.

    patch embed e*(c*p*p) + e, cls token e, positional (N+1)*e, the blocks,
    final norm 2e and classifier C*e + C.
    """
    validate(subnet, space)
    e = subnet.embed
    total = e * space.patch_dim + e + e + (space.num_patches + 1) * e
    total += sum(block_params(n, m, e, space.head_dim) for n, m in subnet.blocks)
    total += 2 * e + space.num_classes * e + space.num_classes
    return total


def count_flops(subnet: SubnetConfig, space: SearchSpace, image_size: int | None = None) -> int:
    """Per-image FLOPs of all matrix products, 2 per multiply-accumulate."""
    validate(subnet, space)
    if subnet.depth < 1:
        raise SpaceError("depth must be at least 1")
    size = space.image_size if image_size is None else image_size
    if size % space.patch_size:
        raise SpaceError("image_size must be a multiple of patch_size")
    patches = (size // space.patch_size) ** 2
    tokens = patches + 1
    e = subnet.embed
    macs = patches * space.patch_dim * e
    for n, m in subnet.blocks:
        qk = n * space.head_dim
        h = hidden_width(m, e)
        macs += tokens * e * 3 * qk          # qkv
        macs += 2 * n * tokens * tokens * space.head_dim  # q k^T and attn v
        macs += tokens * qk * e              # proj
        macs += 2 * tokens * e * h           # fc1 + fc2
    macs += e * space.num_classes
    return 2 * macs


# -- reference spaces ---------------------------------------------------------

def desk_t(num_classes: int = 10, image_size: int = 16, patch_size: int = 4, in_chans: int = 1) -> SearchSpace:
    return SearchSpace((1, 2), (2, 4), (16, 24), (2, 3), head_dim=8, patch_size=patch_size,
                       image_size=image_size, num_classes=num_classes, in_chans=in_chans)


def autoformer(variant: str) -> SearchSpace:
    table = {
        "T": ((3, 4), ("3.5", "4"), (192, 216, 240), (12, 13, 14)),
        "S": ((5, 6, 7), ("3", "3.5", "4"), (320, 384, 448), (12, 13, 14)),
        "B": ((9, 10), ("3", "3.5", "4"), (512, 576, 624), (14, 15, 16)),
    }
    heads, mlps, embeds, depths = table[variant.upper()]
    return SearchSpace(heads, tuple(Fraction(m) for m in mlps), embeds, depths, head_dim=64,
                       patch_size=16, image_size=224, num_classes=1000, in_chans=3)


def subnets_from_text(lines: Sequence[str], space: SearchSpace) -> list[SubnetConfig]:
    return [validate(SubnetConfig.parse(t), space) for t in lines]
