"""Mixture-of-LoRA-experts layers and weight merging."""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .spacekit import SearchSpace, SubnetConfig, validate
from .supernet import (SlicedLayerView, SupernetWeights, classifier_view, extract_standalone,
                       slice_for, trunc_normal)

DEFAULT_RANK = 8


def layer_shapes(space: SearchSpace) -> list[tuple[int, int]]:
    """Maximal (out, in) of every MoLE layer: 4 per block, then the classifier."""
    e, qk, h = space.embed_max, space.heads_max * space.head_dim, space.hidden_max
    block = [(3 * qk, e), (e, qk), (h, e), (e, h)]
    return block * space.num_blocks + [(space.num_classes, e)]


class ExpertBank:
    """Per-layer stacks U (K, out_max, r) and D (K, r, in_max)."""

    def __init__(self, space: SearchSpace, rank: int, num_experts: int, params: dict[str, gc.Tensor]):
        self.space = space
        self.rank = rank
        self.num_experts = num_experts
        self.params = params

    def U(self, layer: int) -> gc.Tensor:
        return self.params[f"lora.l{layer}.U"]

    def D(self, layer: int) -> gc.Tensor:
        return self.params[f"lora.l{layer}.D"]

    @property
    def num_layers(self) -> int:
        return self.space.num_layers

    def tensors(self) -> list[gc.Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def expert_matrix(self, layer: int, k: int) -> np.ndarray:
        """E_k = U_k D_k / r at maximal shape."""
        return (self.U(layer).data[k] @ self.D(layer).data[k]) / self.rank

    def copy(self) -> "ExpertBank":
        return ExpertBank(self.space, self.rank, self.num_experts,
                          {k: gc.Tensor(v.data.copy(), v.requires_grad, k) for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        """Checkpoint layout: one U and one D tensor per (layer, expert)."""
        out = {}
        for l in range(self.num_layers):
            for k in range(self.num_experts):
                out[f"lora.l{l}.k{k}.U"] = self.U(l).data[k]
                out[f"lora.l{l}.k{k}.D"] = self.D(l).data[k]
        return out

    @classmethod
    def from_state(cls, space: SearchSpace, state: dict[str, np.ndarray]) -> "ExpertBank":
        K = 0
        while f"lora.l0.k{K}.U" in state:
            K += 1
        if K == 0:
            raise KeyError("no lora tensors in state")
        rank = np.asarray(state["lora.l0.k0.U"]).shape[1]
        params = {}
        for l, (out_dim, in_dim) in enumerate(layer_shapes(space)):
            U = np.stack([state[f"lora.l{l}.k{k}.U"] for k in range(K)]).astype(gc.DTYPE)
            D = np.stack([state[f"lora.l{l}.k{k}.D"] for k in range(K)]).astype(gc.DTYPE)
            if U.shape != (K, out_dim, rank) or D.shape != (K, rank, in_dim):
                raise gc.ShapeError(f"lora layer {l}", (K, out_dim, rank), U.shape, D.shape)
            params[f"lora.l{l}.U"] = gc.parameter(U, f"lora.l{l}.U")
            params[f"lora.l{l}.D"] = gc.parameter(D, f"lora.l{l}.D")
        return cls(space, rank, K, params)


def init_experts(space: SearchSpace, rank: int, rng: np.random.Generator,
                 num_experts: int | None = None) -> ExpertBank:
    """D ~ truncated normal(0.02), U = 0, so every expert starts as an exact zero delta."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    K = space.num_groups if num_experts is None else num_experts
    params = {}
    for l, (out_dim, in_dim) in enumerate(layer_shapes(space)):
        params[f"lora.l{l}.U"] = gc.parameter(np.zeros((K, out_dim, rank), gc.DTYPE), f"lora.l{l}.U")
        params[f"lora.l{l}.D"] = gc.parameter(trunc_normal(rng, (K, rank, in_dim)), f"lora.l{l}.D")
    return ExpertBank(space, rank, K, params)


def single_lora_mode(bank: ExpertBank) -> ExpertBank:
    """Ablation baseline: one shared LoRA (expert 0 of the bank) for all subnets."""
    params = {}
    for name, p in bank.params.items():
        params[name] = gc.parameter(p.data[:1].copy(), name)
    return ExpertBank(bank.space, bank.rank, 1, params)


class ExpertMixture:
    """Routing weights for one subnet: rows for its 4v block layers, then the classifier."""

    def __init__(self, probs: gc.Tensor, depth: int, num_blocks: int):
        if probs.shape[0] != 4 * depth + 1:
            raise gc.ShapeError("mixture", probs.shape, (4 * depth + 1, -1))
        self.probs = probs
        self.depth = depth
        self.num_blocks = num_blocks

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    def row_index(self, layer: int) -> int:
        if layer == 4 * self.num_blocks:
            return 4 * self.depth
        if not 0 <= layer < 4 * self.depth:
            raise IndexError(f"layer {layer} inactive for depth {self.depth}")
        return layer

    def row(self, layer: int) -> gc.Tensor:
        return gc.getitem(self.probs, self.row_index(layer))

    def row_np(self, layer: int) -> np.ndarray:
        return self.probs.data[self.row_index(layer)]

    def full(self) -> np.ndarray:
        """(4B+1, K) layout; inactive layers get uniform rows."""
        K = self.num_experts
        out = np.full((4 * self.num_blocks + 1, K), 1.0 / K)
        out[: 4 * self.depth] = self.probs.data[: 4 * self.depth]
        out[-1] = self.probs.data[-1]
        return out

    @classmethod
    def uniform(cls, depth: int, num_blocks: int, num_experts: int, dtype=gc.DTYPE) -> "ExpertMixture":
        probs = np.full((4 * depth + 1, num_experts), 1.0 / num_experts, dtype=dtype)
        return cls(gc.constant(probs), depth, num_blocks)


def _sliced_factors(bank: ExpertBank, view: SlicedLayerView) -> tuple[gc.Tensor, gc.Tensor]:
    # only rows of U and columns of D are sliced; the rank axis never is
    K, r = bank.num_experts, bank.rank
    U = gc.slice_leading(bank.U(view.layer), (K, view.out_dim, r))
    D = gc.slice_leading(bank.D(view.layer), (K, r, view.in_dim))
    return U, D


def _check_row(p: gc.Tensor, K: int):
    if p.shape != (K,):
        raise gc.ShapeError("mixture row", p.shape, (K,))
    if abs(float(p.data.astype(np.float64).sum()) - 1.0) > 1e-6:
        raise ValueError(f"mixture row sums to {float(p.data.sum())}, expected 1")


def apply_mole(x: gc.Tensor, view: SlicedLayerView, bank: ExpertBank, p: gc.Tensor) -> gc.Tensor:
    """y = W x + sum_k p_k (U_k D_k / r) x + b, via the low-rank factors."""
    if x.shape[-1] != view.in_dim:
        raise gc.ShapeError("apply_mole", x.shape, (view.out_dim, view.in_dim))
    p = p if isinstance(p, gc.Tensor) else gc.constant(np.asarray(p, x.data.dtype))
    _check_row(p, bank.num_experts)
    U, D = _sliced_factors(bank, view)
    base = gc.linear(x, view.weight, view.bias)
    x2 = gc.reshape(x, (1, -1, view.in_dim) if x.ndim > 1 else (1, 1, view.in_dim))
    xd = gc.matmul(x2, gc.transpose(D, (0, 2, 1)))                 # (K, N, r)
    xu = gc.matmul(xd, gc.transpose(U, (0, 2, 1)))                 # (K, N, out)
    delta = gc.scale(gc.einsum("k,kno->no", p, xu), 1.0 / bank.rank)
    return gc.add(base, gc.reshape(delta, base.shape))


def merged_weight(view: SlicedLayerView, bank: ExpertBank, p: gc.Tensor) -> gc.Tensor:
    """W + sum_k p_k U_k D_k / r as a differentiable tensor."""
    U, D = _sliced_factors(bank, view)
    E = gc.matmul(U, D)                                            # (K, out, in)
    delta = gc.scale(gc.einsum("k,koi->oi", p, E), 1.0 / bank.rank)
    return gc.add(view.weight, delta)


def merge_weights(view: SlicedLayerView, bank: ExpertBank, p) -> np.ndarray:
    """Dense merged weight for the view's sliced region."""
    p = np.asarray(p.data if isinstance(p, gc.Tensor) else p)
    _check_row(gc.constant(p), bank.num_experts)
    W = view.weight.data
    U = bank.U(view.layer).data[:, : view.out_dim, :]
    D = bank.D(view.layer).data[:, :, : view.in_dim]
    delta = np.einsum("k,koi->oi", p.astype(W.dtype), U @ D) / W.dtype.type(bank.rank)
    return W + delta.astype(W.dtype)


class MoleContext:
    """Routes every supernet linear layer through the expert bank.

    mode "mole" applies the factored sum per layer; "merged" folds the
    experts into the weight first, which is cheaper for training and is the
    form used at inference.
    """

    def __init__(self, bank: ExpertBank, mixture: ExpertMixture, mode: str = "merged"):
        if mode not in ("mole", "merged"):
            raise ValueError(f"unknown MoLE mode {mode!r}")
        if mixture.num_experts != bank.num_experts:
            raise gc.ShapeError("mixture vs bank", mixture.probs.shape, (bank.num_experts,))
        self.bank = bank
        self.mixture = mixture
        self.mode = mode

    def linear(self, x: gc.Tensor, view: SlicedLayerView) -> gc.Tensor:
        p = self.mixture.row(view.layer)
        if self.mode == "mole":
            return apply_mole(x, view, self.bank, p)
        return gc.linear(x, merged_weight(view, self.bank, p), view.bias)


def merge_subnet(weights: SupernetWeights, bank: ExpertBank, mixture: ExpertMixture,
                 subnet: SubnetConfig) -> dict[str, np.ndarray]:
    """Standalone tensors of a subnet with every MoLE layer folded into its weight."""
    validate(subnet, weights.space)
    out = extract_standalone(weights, subnet)
    views = [v for b in range(subnet.depth) for v in slice_for(weights, subnet, b)]
    views.append(classifier_view(weights, subnet))
    for view in views:
        out[view.name + ".weight"] = merge_weights(view, bank, mixture.row_np(view.layer))
    return out
