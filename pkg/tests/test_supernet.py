import numpy as np
import pytest
from hypothesis import given, strategies as st

from taslora import gradcore as gc
from taslora.spacekit import SpaceError, SubnetConfig, desk_t, max_subnet, sample_subnet
from taslora.supernet import (SupernetWeights, classifier_view, embed_standalone, extract_standalone, forward,
                              init_supernet, patchify, shapes, slice_for, standalone_shapes, trunc_normal)


def to64(weights):
    return SupernetWeights(weights.space, {k: gc.parameter(weights[k].data.astype(np.float64), k) for k in weights})


def reference_vit(t: dict, subnet: SubnetConfig, images: np.ndarray, head_dim: int, patch: int):
    """Plain numpy pre-norm ViT over standalone tensors."""
    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-6) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

    B = len(images)
    x = patchify(images, patch) @ t["patch_embed.weight"].T + t["patch_embed.bias"]
    x = np.concatenate([np.broadcast_to(t["cls_token"], (B, 1, subnet.embed)), x], 1) + t["pos_embed"]
    for b, (n, _) in enumerate(subnet.blocks):
        p = f"block{b}."
        h = ln(x, t[p + "norm1.weight"], t[p + "norm1.bias"])
        qkv = h @ t[p + "qkv.weight"].T + t[p + "qkv.bias"]
        T = qkv.shape[1]
        qkv = qkv.reshape(B, T, 3, n, head_dim)
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(head_dim)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, n * head_dim)
        x = x + ctx @ t[p + "proj.weight"].T + t[p + "proj.bias"]
        h = ln(x, t[p + "norm2.weight"], t[p + "norm2.bias"])
        h = gelu(h @ t[p + "fc1.weight"].T + t[p + "fc1.bias"])
        x = x + h @ t[p + "fc2.weight"].T + t[p + "fc2.bias"]
    feat = ln(x, t["norm.weight"], t["norm.bias"])[:, 0]
    return feat, feat @ t["head.weight"].T + t["head.bias"]


@given(st.integers(0, 10_000))
def test_forward_matches_reference_vit(seed):
    space = desk_t()
    rng = np.random.default_rng(seed)
    weights = to64(init_supernet(space, rng))
    for name in weights:  # non-trivial norms
        if "norm" in name:
            weights[name].data += rng.standard_normal(weights[name].shape) * 0.1
    subnet = sample_subnet(space, rng)
    images = rng.standard_normal((3, 1, 16, 16))
    feat, logits = forward(weights, subnet, images)
    t = extract_standalone(weights, subnet)
    ref_feat, ref_logits = reference_vit(t, subnet, images, space.head_dim, space.patch_size)
    np.testing.assert_allclose(feat.data, ref_feat, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(logits.data, ref_logits, rtol=1e-10, atol=1e-12)


def test_shapes_cover_maxima(space):
    s = shapes(space)
    assert s["block0.qkv.weight"] == (3 * 2 * 8, 24)
    assert s["block2.fc1.weight"] == (96, 24)
    assert s["pos_embed"] == (17, 24)
    assert s["head.weight"] == (10, 24)


def test_slice_views(space, rng):
    w = init_supernet(space, rng)
    s = SubnetConfig.parse("2:16:[1,2;2,4]")
    views = slice_for(w, s, 1)
    assert [v.layer for v in views] == [4, 5, 6, 7]
    assert [(v.out_dim, v.in_dim) for v in views] == [(48, 16), (16, 16), (64, 16), (16, 64)]
    np.testing.assert_array_equal(views[0].weight.data, w["block1.qkv.weight"].data[:48, :16])
    assert classifier_view(w, s).layer == 12
    with pytest.raises(SpaceError):
        slice_for(w, s, 2)


def test_forward_rejects_bad_images(space, rng):
    w = init_supernet(space, rng)
    with pytest.raises(gc.ShapeError):
        forward(w, max_subnet(space), np.zeros((2, 1, 8, 8)))


def test_trunc_normal_bounds(rng):
    x = trunc_normal(rng, (20000,), 0.02)
    assert np.abs(x).max() <= 0.04
    assert 0.015 < x.std() < 0.02


def test_init_norms(space, rng):
    w = init_supernet(space, rng)
    assert (w["block0.norm1.weight"].data == 1).all() and (w["norm.bias"].data == 0).all()


@given(st.integers(0, 10_000))
def test_standalone_round_trip_preserves_logits(seed):
    space = desk_t()
    rng = np.random.default_rng(seed)
    w = init_supernet(space, rng)
    s = sample_subnet(space, rng)
    t = extract_standalone(w, s)
    assert {k: v.shape for k, v in t.items()} == standalone_shapes(s, space)
    padded = embed_standalone(t, s, space)
    x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(forward(w, s, x)[1].data, forward(padded, s, x)[1].data)


def test_embed_standalone_rejects_wrong_set(space, rng):
    w = init_supernet(space, rng)
    s = max_subnet(space)
    t = extract_standalone(w, s)
    t.pop("head.bias")
    with pytest.raises(KeyError):
        embed_standalone(t, s, space)


def test_state_round_trip(space, rng):
    w = init_supernet(space, rng)
    w2 = SupernetWeights.from_state(space, w.state())
    assert gc.params_checksum(w.tensors()) == gc.params_checksum(w2.tensors())


def test_gradient_touches_only_the_active_slice(space, rng):
    w = init_supernet(space, rng)
    s = SubnetConfig.parse("2:16:[1,2;1,2]")
    with gc.Tape() as tape:
        _, logits = forward(w, s, rng.standard_normal((2, 1, 16, 16)))
        grads = tape.backward(gc.cross_entropy(logits, [0, 1]))
    assert (grads["block0.qkv.weight"][24:] == 0).all()
    assert (grads["block0.qkv.weight"][:, 16:] == 0).all()
    assert "block2.qkv.weight" not in grads
    assert tape.touched["block0.fc1.weight"][:32, :16].all()
    assert not tape.touched["block0.fc1.weight"][32:].any()
