"""Weight-entangled ViT supernet.

All parameters live at the space maxima; a subnet reads the leading
sub-block of every tensor, so two subnets that agree on a block's
(heads, mlp ratio, embed) read exactly the same region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Protocol

import numpy as np

from . import gradcore as gc
from .spacekit import SearchSpace, SpaceError, SubnetConfig, hidden_width, validate

LAYER_KINDS = ("qkv", "proj", "fc1", "fc2")
INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(gc.DTYPE)


class SupernetWeights:
    """Named maximal tensors for one search space."""

    def __init__(self, space: SearchSpace, params: dict[str, gc.Tensor]):
        self.space = space
        self.params = params

    def __getitem__(self, name: str) -> gc.Tensor:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def tensors(self) -> list[gc.Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def copy(self) -> "SupernetWeights":
        return SupernetWeights(self.space, {k: gc.Tensor(v.data.copy(), v.requires_grad, k)
                                            for k, v in self.params.items()})

    def numel(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, space: SearchSpace, state: dict[str, np.ndarray]) -> "SupernetWeights":
        ref = shapes(space)
        missing = set(ref) - set(state)
        if missing:
            raise KeyError(f"missing supernet tensors: {sorted(missing)[:5]}")
        params = {}
        for name, shape in ref.items():
            arr = np.asarray(state[name], dtype=gc.DTYPE)
            if arr.shape != shape:
                raise gc.ShapeError(f"load {name}", shape, arr.shape)
            params[name] = gc.parameter(arr.copy(), name)
        return cls(space, params)


def layer_dims(space: SearchSpace, kind: str, heads: int, mlp_ratio, embed: int) -> tuple[int, int]:
    """(out, in) of a block linear layer at the given attributes."""
    qk = heads * space.head_dim
    hidden = hidden_width(mlp_ratio, embed)
    return {
        "qkv": (3 * qk, embed),
        "proj": (embed, qk),
        "fc1": (hidden, embed),
        "fc2": (embed, hidden),
    }[kind]


def shapes(space: SearchSpace) -> dict[str, tuple[int, ...]]:
    e = space.embed_max
    qk = space.heads_max * space.head_dim
    h = space.hidden_max
    out = {
        "patch_embed.weight": (e, space.patch_dim),
        "patch_embed.bias": (e,),
        "cls_token": (e,),
        "pos_embed": (space.num_patches + 1, e),
    }
    for b in range(space.num_blocks):
        p = f"block{b}."
        out.update({
            p + "norm1.weight": (e,), p + "norm1.bias": (e,),
            p + "qkv.weight": (3 * qk, e), p + "qkv.bias": (3 * qk,),
            p + "proj.weight": (e, qk), p + "proj.bias": (e,),
            p + "norm2.weight": (e,), p + "norm2.bias": (e,),
            p + "fc1.weight": (h, e), p + "fc1.bias": (h,),
            p + "fc2.weight": (e, h), p + "fc2.bias": (e,),
        })
    out.update({
        "norm.weight": (e,), "norm.bias": (e,),
        "head.weight": (space.num_classes, e), "head.bias": (space.num_classes,),
    })
    return out


def init_supernet(space: SearchSpace, rng: np.random.Generator) -> SupernetWeights:
    params = {}
    for name, shape in shapes(space).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            data = np.ones(shape, gc.DTYPE)
        elif name.endswith(".bias"):
            data = np.zeros(shape, gc.DTYPE)
        else:
            data = trunc_normal(rng, shape)
        params[name] = gc.parameter(data, name)
    return SupernetWeights(space, params)


@dataclass
class SlicedLayerView:
    layer: int            # MoLE layer index: 4*block + position, classifier = 4*B
    name: str             # parent tensor prefix, e.g. "block0.qkv"
    out_dim: int
    in_dim: int
    weight: gc.Tensor     # (out_dim, in_dim) leading slice of the parent
    bias: gc.Tensor


def _view(weights: SupernetWeights, prefix: str, layer: int, out_dim: int, in_dim: int) -> SlicedLayerView:
    w = gc.slice_leading(weights[prefix + ".weight"], (out_dim, in_dim))
    b = gc.slice_leading(weights[prefix + ".bias"], (out_dim,))
    return SlicedLayerView(layer, prefix, out_dim, in_dim, w, b)


def slice_for(weights: SupernetWeights, subnet: SubnetConfig, block: int) -> list[SlicedLayerView]:
    """The four linear-layer views of an active block (0-based index)."""
    if not 0 <= block < subnet.depth:
        raise SpaceError(f"block {block} inactive for depth {subnet.depth}")
    n, m = subnet.blocks[block]
    views = []
    for s, kind in enumerate(LAYER_KINDS):
        out_dim, in_dim = layer_dims(weights.space, kind, n, m, subnet.embed)
        views.append(_view(weights, f"block{block}.{kind}", 4 * block + s, out_dim, in_dim))
    return views


def classifier_view(weights: SupernetWeights, subnet: SubnetConfig) -> SlicedLayerView:
    space = weights.space
    return _view(weights, "head", 4 * space.num_blocks, space.num_classes, subnet.embed)


class LinearHook(Protocol):
    def linear(self, x: gc.Tensor, view: SlicedLayerView) -> gc.Tensor: ...


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*p*p) in row-major patch order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * patch * patch)


def _layer(x: gc.Tensor, view: SlicedLayerView, hook: LinearHook | None) -> gc.Tensor:
    if hook is None:
        return gc.linear(x, view.weight, view.bias)
    return hook.linear(x, view)


def _norm(x: gc.Tensor, weights: SupernetWeights, prefix: str, e: int) -> gc.Tensor:
    g = gc.slice_leading(weights[prefix + ".weight"], (e,))
    b = gc.slice_leading(weights[prefix + ".bias"], (e,))
    return gc.layer_norm(x, g, b)


def forward(weights: SupernetWeights, subnet: SubnetConfig, images, mole_ctx: LinearHook | None = None,
            capture: dict | None = None) -> tuple[gc.Tensor, gc.Tensor]:
    """Pre-norm ViT forward of one subnet.

    Returns (penultimate cls feature (B, e), logits (B, classes)). When
    ``mole_ctx`` is given every linear layer is routed through it. If
    ``capture`` is a dict, inputs of every MoLE layer are stored under their
    layer index and attention maps under ("attn", block).
    """
    space = weights.space
    validate(subnet, space)
    images = np.asarray(images)
    expected = (space.in_chans, space.image_size, space.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise gc.ShapeError("forward.images", images.shape, (-1,) + expected)
    dtype = weights["patch_embed.weight"].data.dtype
    B = images.shape[0]
    e = subnet.embed
    hd = space.head_dim
    T = space.num_patches + 1

    patches = gc.constant(patchify(images.astype(dtype, copy=False), space.patch_size))
    w_pe = gc.slice_leading(weights["patch_embed.weight"], (e, space.patch_dim))
    b_pe = gc.slice_leading(weights["patch_embed.bias"], (e,))
    tokens = gc.linear(patches, w_pe, b_pe)                       # (B, N, e)
    cls = gc.slice_leading(weights["cls_token"], (e,))
    cls = gc.add(gc.constant(np.zeros((B, 1, e), dtype)), cls)
    x = gc.concat([cls, tokens], axis=1)
    x = gc.add(x, gc.slice_leading(weights["pos_embed"], (T, e)))

    for b in range(subnet.depth):
        n, _ = subnet.blocks[b]
        qkv_v, proj_v, fc1_v, fc2_v = slice_for(weights, subnet, b)
        p = f"block{b}"

        h = _norm(x, weights, p + ".norm1", e)
        if capture is not None:
            capture[qkv_v.layer] = h.data
        qkv = _layer(h, qkv_v, mole_ctx)                           # (B, T, 3*n*hd)
        qkv = gc.transpose(gc.reshape(qkv, (B, T, 3, n, hd)), (2, 0, 3, 1, 4))
        q = gc.getitem(qkv, 0)
        k = gc.getitem(qkv, 1)
        v = gc.getitem(qkv, 2)                                     # (B, n, T, hd)
        scores = gc.scale(gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))), hd**-0.5)
        attn = gc.softmax(scores, axis=-1)
        if capture is not None:
            capture[("attn", b)] = attn.data
        ctx = gc.matmul(attn, v)
        ctx = gc.reshape(gc.transpose(ctx, (0, 2, 1, 3)), (B, T, n * hd))
        if capture is not None:
            capture[proj_v.layer] = ctx.data
        x = gc.add(x, _layer(ctx, proj_v, mole_ctx))

        h = _norm(x, weights, p + ".norm2", e)
        if capture is not None:
            capture[fc1_v.layer] = h.data
        h = gc.gelu(_layer(h, fc1_v, mole_ctx))
        if capture is not None:
            capture[fc2_v.layer] = h.data
        x = gc.add(x, _layer(h, fc2_v, mole_ctx))

    x = _norm(x, weights, "norm", e)
    feat = gc.getitem(x, (slice(None), 0))                         # (B, e)
    head = classifier_view(weights, subnet)
    if capture is not None:
        capture[head.layer] = feat.data
    logits = _layer(feat, head, mole_ctx)
    return feat, logits


def standalone_names(subnet: SubnetConfig) -> list[str]:
    names = ["patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed"]
    for b in range(subnet.depth):
        for part in ("norm1", "qkv", "proj", "norm2", "fc1", "fc2"):
            names += [f"block{b}.{part}.weight", f"block{b}.{part}.bias"]
    return names + ["norm.weight", "norm.bias", "head.weight", "head.bias"]


def standalone_shapes(subnet: SubnetConfig, space: SearchSpace) -> dict[str, tuple[int, ...]]:
    """Shapes of every tensor a subnet reads, at its sliced dimensions."""
    e = subnet.embed
    out = {
        "patch_embed.weight": (e, space.patch_dim), "patch_embed.bias": (e,),
        "cls_token": (e,), "pos_embed": (space.num_patches + 1, e),
    }
    for b, (n, m) in enumerate(subnet.blocks):
        for kind in LAYER_KINDS:
            o, i = layer_dims(space, kind, n, m, e)
            out[f"block{b}.{kind}.weight"] = (o, i)
            out[f"block{b}.{kind}.bias"] = (o,)
        for part in ("norm1", "norm2"):
            out[f"block{b}.{part}.weight"] = (e,)
            out[f"block{b}.{part}.bias"] = (e,)
    out.update({"norm.weight": (e,), "norm.bias": (e,),
                "head.weight": (space.num_classes, e), "head.bias": (space.num_classes,)})
    return {k: out[k] for k in standalone_names(subnet)}


def extract_standalone(weights: SupernetWeights, subnet: SubnetConfig) -> dict[str, np.ndarray]:
    validate(subnet, weights.space)
    return {name: weights[name].data[tuple(slice(0, s) for s in shape)].copy()
            for name, shape in standalone_shapes(subnet, weights.space).items()}


def embed_standalone(tensors: dict[str, np.ndarray], subnet: SubnetConfig, space: SearchSpace) -> SupernetWeights:
    """Zero-pad a standalone subnet's tensors back into maximal shapes.

    Forwarding the returned weights with the same subnet reproduces the
    standalone network exactly, because only the leading regions are read.
    """
    ref = standalone_shapes(subnet, space)
    if set(tensors) != set(ref):
        raise KeyError(f"standalone tensor set mismatch: {sorted(set(ref) ^ set(tensors))[:5]}")
    dtype = np.float64 if any(np.asarray(t).dtype == np.float64 for t in tensors.values()) else gc.DTYPE
    params = {}
    for name, shape in shapes(space).items():
        data = np.zeros(shape, dtype)
        if name in tensors:
            arr = np.asarray(tensors[name], dtype=dtype)
            if arr.shape != ref[name]:
                raise gc.ShapeError(f"standalone {name}", ref[name], arr.shape)
            data[tuple(slice(0, s) for s in arr.shape)] = arr
        params[name] = gc.Tensor(data, False, name)
    return SupernetWeights(space, params)
