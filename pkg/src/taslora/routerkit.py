"""Architecture-conditioned router producing per-layer expert mixtures.

The router never sees image data: block attributes are embedded, summed,
run through a single-layer LSTM over the active blocks, and each block's
hidden state is projected by the head belonging to that block's group.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .molekit import ExpertMixture
from .spacekit import Grouping, SearchSpace, SubnetConfig, validate
from .supernet import trunc_normal

EMBED_DIM = 256
HIDDEN_DIM = 128
DEFAULT_BETA = 3.0
ATTRIBUTES = ("mlp_ratio", "heads", "embed", "depth")
DEFAULT_ATTRIBUTES = ("mlp_ratio", "heads", "embed")


def routing_attribute_subset(attributes) -> tuple[str, ...]:
    """Validate and order a routing-attribute subset."""
    attrs = tuple(attributes)
    if not attrs:
        raise ValueError("routing needs at least one architectural attribute")
    unknown = [a for a in attrs if a not in ATTRIBUTES]
    if unknown:
        raise ValueError(f"unknown routing attributes {unknown}; choose from {ATTRIBUTES}")
    return tuple(a for a in ATTRIBUTES if a in attrs)


class BlockEmbedder:
    """One table per attribute; a block's vector is the sum of its lookups."""

    def __init__(self, space: SearchSpace, attributes, rng: np.random.Generator, dim: int = EMBED_DIM):
        self.space = space
        self.attributes = routing_attribute_subset(attributes)
        self.dim = dim
        sizes = {
            "heads": len(space.head_candidates),
            "mlp_ratio": len(space.mlp_ratio_candidates),
            "embed": len(space.embed_candidates),
            "depth": len(space.depth_candidates),
        }
        self.tables = {a: gc.parameter(trunc_normal(rng, (sizes[a], dim)), f"router.embed.{a}")
                       for a in self.attributes}

    def __call__(self, subnet: SubnetConfig) -> gc.Tensor:
        v = subnet.depth
        idx = {
            "heads": [self.space.index("heads", n) for n, _ in subnet.blocks],
            "mlp_ratio": [self.space.index("mlp_ratio", m) for _, m in subnet.blocks],
            "embed": [self.space.index("embed", subnet.embed)] * v,
            "depth": [self.space.index("depth", v)] * v,
        }
        out = None
        for a in self.attributes:
            term = gc.embedding(self.tables[a], idx[a])
            out = term if out is None else gc.add(out, term)
        return out


class RouterState:
    """Embedder, LSTM and K group-specific heads (R'_k, c'_k), plus a classifier head."""

    def __init__(self, space: SearchSpace, rng: np.random.Generator, attributes=DEFAULT_ATTRIBUTES,
                 grouping: Grouping | None = None, num_experts: int | None = None,
                 hidden: int = HIDDEN_DIM, embed_dim: int = EMBED_DIM):
        self.space = space
        self.grouping = grouping or Grouping(space)
        self.num_heads = self.grouping.num_groups
        self.num_experts = space.num_groups if num_experts is None else num_experts
        self.hidden = hidden
        self.embedder = BlockEmbedder(space, attributes, rng, embed_dim)
        d, B, K = hidden, space.num_blocks, self.num_experts
        self.w_ih = gc.parameter(trunc_normal(rng, (4 * d, embed_dim)), "router.lstm.w_ih")
        self.w_hh = gc.parameter(trunc_normal(rng, (4 * d, d)), "router.lstm.w_hh")
        self.b_lstm = gc.parameter(np.zeros(4 * d, gc.DTYPE), "router.lstm.bias")
        self.R = gc.parameter(np.zeros((self.num_heads, 4, B, d, K), gc.DTYPE), "router.head.R")
        self.c = gc.parameter(np.zeros((self.num_heads, 4, B, K), gc.DTYPE), "router.head.c")
        self.R_cls = gc.parameter(np.zeros((d, K), gc.DTYPE), "router.cls.R")
        self.c_cls = gc.parameter(np.zeros(K, gc.DTYPE), "router.cls.c")

    @property
    def params(self) -> dict[str, gc.Tensor]:
        out = {t.name: t for t in self.embedder.tables.values()}
        for t in (self.w_ih, self.w_hh, self.b_lstm, self.R, self.c, self.R_cls, self.c_cls):
            out[t.name] = t
        return out

    def tensors(self) -> list[gc.Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.tensors():
            p.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise gc.ShapeError(f"load {name}", p.shape, arr.shape)
            p.data = arr.astype(p.data.dtype).copy()

    def copy(self) -> "RouterState":
        clone = object.__new__(RouterState)
        clone.__dict__.update(self.__dict__)
        clone.embedder = object.__new__(BlockEmbedder)
        clone.embedder.__dict__.update(self.embedder.__dict__)
        clone.embedder.tables = {a: gc.Tensor(t.data.copy(), t.requires_grad, t.name)
                                 for a, t in self.embedder.tables.items()}
        for attr in ("w_ih", "w_hh", "b_lstm", "R", "c", "R_cls", "c_cls"):
            t = getattr(self, attr)
            setattr(clone, attr, gc.Tensor(t.data.copy(), t.requires_grad, t.name))
        return clone


def route_logits(router: RouterState, subnet: SubnetConfig) -> gc.Tensor:
    """Router logits O of shape (4v+1, K); last row drives the classifier."""
    validate(subnet, router.space)
    v = subnet.depth
    x = router.embedder(subnet)                                    # (v, 256)
    H = gc.lstm(x, router.w_ih, router.w_hh, router.b_lstm)       # (v, d)
    groups = np.asarray(router.grouping.groups_for(subnet), dtype=np.int64)
    blocks = np.arange(v)
    R = gc.getitem(router.R, (groups, slice(None), blocks))        # (v, 4, d, K)
    c = gc.getitem(router.c, (groups, slice(None), blocks))        # (v, 4, K)
    O = gc.add(gc.einsum("vd,vsdk->vsk", H, R), c)
    O = gc.reshape(O, (4 * v, router.num_experts))
    h_last = gc.getitem(H, slice(v - 1, v))                        # (1, d)
    cls = gc.add(gc.matmul(h_last, router.R_cls), router.c_cls)
    return gc.concat([O, cls], axis=0)


def route(router: RouterState, subnet: SubnetConfig) -> ExpertMixture:
    P = gc.softmax(route_logits(router, subnet), axis=-1)
    return ExpertMixture(P, subnet.depth, router.space.num_blocks)


def group_wise_init(router: RouterState, space: SearchSpace, beta: float = DEFAULT_BETA):
    """Zero every head, then bias head k toward expert k: c'_k[:, :, k] = beta."""
    if router.num_heads != space.num_groups or router.num_experts != router.num_heads:
        raise ValueError(f"group-wise init needs one head and one expert per group: "
                         f"{router.num_heads} heads, {router.num_experts} experts, {space.num_groups} groups")
    router.R.data[...] = 0
    router.c.data[...] = 0
    for k in range(router.num_heads):
        router.c.data[k, :, :, k] = beta
    router.R_cls.data[...] = 0
    router.c_cls.data[...] = 0


def random_init(router: RouterState, rng: np.random.Generator, std: float = 0.02):
    """Baseline: every head parameter small-random."""
    for t in (router.R, router.c, router.R_cls, router.c_cls):
        t.data[...] = trunc_normal(rng, t.shape, std)


def designated_weight(beta: float, K: int) -> float:
    return float(np.exp(beta) / (np.exp(beta) + K - 1))
