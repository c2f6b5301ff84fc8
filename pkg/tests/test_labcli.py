import csv
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from taslora.labcli import checkpoint
from taslora.labcli.cli import EXIT_CORRUPT, EXIT_MISSING, EXIT_OK, EXIT_SCHEMA, main
from taslora.labcli.config import ConfigError, parse_config
from taslora.labcli.data import DataError, load_idx, synth_data, write_idx


# -- config ---------------------------------------------------------------------

def test_config_defaults_and_presets():
    cfg = parse_config("[space]\npreset = autoformer_s\n[data]\nclasses = 1000\n")
    assert cfg.space.num_groups == 27
    cfg = parse_config("")
    assert cfg.space.num_groups == 8 and cfg.train.batch_size == 64 and cfg.search.population == 50


def test_config_types_and_overrides():
    text = """
[run]
seed = 4   # inline comment
[space]
preset = custom
heads = 1, 2
mlp_ratios = 3.5, 4
embeds = 16
depths = 1, 2
num_classes = 3
[mole]
routing_attributes = heads, depth
router_init = random
[search]
max_params = none
"""
    cfg = parse_config(text, ["train.lora_lr_peak=1e-3", "search.top_k=5"])
    assert cfg.seed == 4 and cfg.train.seed == 4 and cfg.search.seed == 4
    assert cfg.space.mlp_ratio_candidates[0] == 3.5
    assert cfg.mole.routing_attributes == ("heads", "depth")
    assert cfg.train.lora_lr_peak == 1e-3 and cfg.search.top_k == 5
    assert cfg.search.max_params is None
    again = parse_config(cfg.dump())
    assert again.space == cfg.space and again.train == cfg.train


@pytest.mark.parametrize("text, overrides", [
    ("[train]\nbogus = 1\n", None),
    ("[nonsense]\na = 1\n", None),
    ("[train]\nbatch_size = many\n", None),
    ("[mole]\nmode = sometimes\n", None),
    ("", ["train.warmup_epochs=99"]),
    ("", ["notanoverride"]),
    ("[space]\npreset = custom\nheads = 1\n", None),
    ("[data]\nclasses = 3\n", None),
    ("[data]\nsource = idx\n", None),
    ("[space\n", None),
])
def test_config_rejects(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)


# -- checkpoint -----------------------------------------------------------------

tensor_dicts = st.dictionaries(
    st.text(min_size=1, max_size=12),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
    max_size=5)


@given(tensor_dicts)
def test_checkpoint_round_trip_is_bitwise(tensors):
    out = checkpoint.decode(checkpoint.encode(tensors))
    assert list(out) == list(tensors)
    for k in tensors:
        assert out[k].shape == tensors[k].shape
        assert out[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout():
    blob = checkpoint.encode({"ab": np.array([[1.5, -2.0]], np.float32)})
    assert blob[:4] == b"TLRA" and struct.unpack("<I", blob[4:8])[0] == 1
    assert struct.unpack("<I", blob[8:12])[0] == 2 and blob[12:14] == b"ab"
    assert struct.unpack("<I", blob[14:18])[0] == 2
    assert struct.unpack("<2Q", blob[18:34]) == (1, 2)
    assert np.frombuffer(blob[34:42], "<f4").tolist() == [1.5, -2.0]
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


@given(st.integers(0, 41), st.integers(1, 255))
def test_checkpoint_detects_any_flipped_byte(pos, flip):
    blob = bytearray(checkpoint.encode({"ab": np.array([[1.5, -2.0]], np.float32)}))
    pos = pos % len(blob)
    blob[pos] ^= flip
    with pytest.raises(checkpoint.CorruptCheckpoint):
        checkpoint.decode(bytes(blob))


def test_checkpoint_version_and_truncation():
    body = b"TLRA" + struct.pack("<I", 9)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(checkpoint.CorruptCheckpoint):
        checkpoint.decode(b"TLRA")


def test_checkpoint_files(tmp_path):
    checkpoint.save(tmp_path / "x.ckpt", {"a": np.ones(3, np.float32)})
    assert checkpoint.load(tmp_path / "x.ckpt")["a"].tolist() == [1, 1, 1]
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.ckpt")


# -- IDX ------------------------------------------------------------------------

def _fixture_bytes():
    images = struct.pack(">IIII", 0x00000803, 4, 2, 2) + bytes([0, 255, 51, 204,
                                                                 255, 255, 255, 255,
                                                                 0, 0, 0, 0,
                                                                 102, 153, 127, 128])
    labels = struct.pack(">II", 0x00000801, 4) + bytes([0, 1, 2, 1])
    return images, labels


def test_hand_built_idx_fixture(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "i.idx").write_bytes(images)
    (tmp_path / "l.idx").write_bytes(labels)
    data = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", 3)
    assert data.images.shape == (4, 1, 2, 2)
    expect = (np.array([0, 255, 51, 204]) / 255 - 0.5) / 0.5
    np.testing.assert_allclose(data.images[0, 0].ravel(), expect, rtol=1e-6)
    assert (data.images[1] == 1).all() and (data.images[2] == -1).all()
    assert data.labels.tolist() == [0, 1, 2, 1]


@pytest.mark.parametrize("mutate, match", [
    (lambda i, l: (b"\x00\x00\x08\x01" + i[4:], l), "magic"),
    (lambda i, l: (i[:-1], l), "truncated"),
    (lambda i, l: (i + b"\x00", l), "trailing"),
    (lambda i, l: (i, struct.pack(">II", 0x801, 3) + bytes([0, 1, 2])), "labels"),
    (lambda i, l: (i, struct.pack(">II", 0x801, 4) + bytes([0, 1, 7, 1])), "outside"),
])
def test_idx_errors(tmp_path, mutate, match):
    images, labels = mutate(*_fixture_bytes())
    (tmp_path / "i.idx").write_bytes(images)
    (tmp_path / "l.idx").write_bytes(labels)
    with pytest.raises(DataError, match=match):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx", 3)


def test_write_idx_round_trip(tmp_path):
    arr = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_idx(tmp_path / "i", arr)
    write_idx(tmp_path / "l", np.array([1, 0], np.uint8))
    data = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose((data.images[:, 0] * 0.5 + 0.5) * 255, arr, atol=1e-4)


# -- synthetic data ---------------------------------------------------------------

def test_synth_determinism_and_balance():
    a = synth_data(5, 100, 0.3, np.random.default_rng(2))
    b = synth_data(5, 100, 0.3, np.random.default_rng(2))
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert np.bincount(a.labels).tolist() == [20] * 5


def test_noise_free_two_class_is_linearly_separable():
    data = synth_data(2, 200, 0.0, np.random.default_rng(0))
    x = data.images.reshape(200, -1).astype(np.float64)
    y = data.labels
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(500):  # logistic-regression probe
        p = 1 / (1 + np.exp(-(x @ w + b)))
        w -= 0.5 * x.T @ (p - y) / len(y)
        b -= 0.5 * float((p - y).mean())
    assert (((x @ w + b) > 0) == y).mean() == 1.0


def test_split_is_seeded_and_disjoint():
    data = synth_data(4, 40, 0.1, np.random.default_rng(0))
    tr, va = data.split(0.25, np.random.default_rng(1))
    tr2, va2 = data.split(0.25, np.random.default_rng(1))
    assert len(va) == 10 and len(tr) == 30
    assert va.images.tobytes() == va2.images.tobytes()


# -- CLI ------------------------------------------------------------------------

TINY = """
[run]
seed = 3
output_dir = {out}

[data]
samples = 200
noise = 0.5

[train]
supernet_epochs = 1
mole_epochs = 2
warmup_epochs = 1

[search]
population = 6
iterations = 2
top_k = 3

[probe]
samples = 32
subnets = 2
heatmap_samples = 4
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY.format(out=root / "out"))
    for cmd in ("pretrain", "train-mole", "search", "merge"):
        assert main([cmd, "--config", str(cfg)]) == EXIT_OK
    return root, cfg


def _run_eval(cfg, *extra):
    return main(["eval", "--config", str(cfg), *extra])


def test_merge_output_is_standalone(pipeline):
    root, _ = pipeline
    out = root / "out"
    tensors = checkpoint.load(out / "merged.ckpt")
    manifest = json.loads((out / "manifest.merge.json").read_text())
    depth = int(manifest["subnet"].split(":")[0])
    assert len(tensors) == 4 + 12 * depth + 4
    assert not any(k.startswith("lora") or k.startswith("router") for k in tensors)
    assert manifest["subnet"] == (out / "best_subnet.txt").read_text().strip()
    assert (out / "config.ini").exists()


def test_eval_merged_agrees_with_mole(pipeline):
    root, cfg = pipeline
    out = root / "out"
    assert _run_eval(cfg, "--checkpoint", str(out / "merged.ckpt")) == EXIT_OK
    assert _run_eval(cfg) == EXIT_OK
    a = json.loads((out / "eval_merged.json").read_text())
    b = json.loads((out / "eval_mole.json").read_text())
    agree = np.mean(np.array(a["predictions"]) == np.array(b["predictions"]))
    assert agree >= 0.999
    assert abs(a["val_loss"] - b["val_loss"]) < 1e-4


def test_probe_and_bruteforce(pipeline):
    root, cfg = pipeline
    out = root / "out"
    assert main(["probe", "--config", str(cfg)]) == EXIT_OK
    assert main(["bruteforce", "--config", str(cfg)]) == EXIT_OK
    assert len((out / "bruteforce.csv").read_text().strip().splitlines()) == 161
    for name in ("sim_matrix.csv", "sim_matrix_frozen.csv", "accuracy_table.csv", "expert_sim_by_layer.csv",
                 "assignment.csv", "assignment.svg"):
        assert (out / name).exists()
    with open(out / "mixture.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["subnet", "block", "layer_in_block", "expert", "weight", "group"]
    for sub in {r["subnet"] for r in rows}:
        per_layer = {}
        for r in rows:
            if r["subnet"] == sub:
                key = (r["block"], r["layer_in_block"])
                per_layer[key] = per_layer.get(key, 0.0) + float(r["weight"])
        assert all(abs(v - 1.0) < 1e-5 for v in per_layer.values())


def test_exit_codes(pipeline, tmp_path):
    root, cfg = pipeline
    out = root / "out"
    assert _run_eval(cfg, "--supernet", str(tmp_path / "nope.ckpt")) == EXIT_MISSING
    assert main(["eval", "--config", str(tmp_path / "none.ini")]) == EXIT_SCHEMA
    assert _run_eval(cfg, "--set", "train.bogus=1") == EXIT_SCHEMA
    assert _run_eval(cfg, "--subnet", "9:16:[1,2]") == EXIT_SCHEMA
    bad = tmp_path / "bad.ckpt"
    blob = bytearray((out / "merged.ckpt").read_bytes())
    blob[100] ^= 0x01
    bad.write_bytes(bytes(blob))
    assert _run_eval(cfg, "--checkpoint", str(bad), "--subnet", "2:16:[1,2;1,2]") == EXIT_CORRUPT
    # a valid checkpoint of the wrong kind is a schema violation
    assert _run_eval(cfg, "--supernet", str(out / "mole.ckpt")) == EXIT_SCHEMA


def test_cli_pipeline_determinism(tmp_path):
    results = []
    for run in ("a", "b"):
        cfg = tmp_path / f"{run}.ini"
        cfg.write_text(TINY.format(out=tmp_path / run))
        for cmd in ("pretrain", "train-mole", "search", "merge"):
            assert main([cmd, "--config", str(cfg)]) == EXIT_OK
        assert _run_eval(cfg, "--checkpoint", str(tmp_path / run / "merged.ckpt")) == EXIT_OK
        results.append(json.loads((tmp_path / run / "eval_merged.json").read_text()))
    assert results[0]["val_loss"] == results[1]["val_loss"]
    assert (tmp_path / "a" / "merged.ckpt").read_bytes() == (tmp_path / "b" / "merged.ckpt").read_bytes()


def test_periodic_checkpoints(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(out=tmp_path / "o"))
    extra = ["--set", "train.checkpoint_every=1"]
    assert main(["pretrain", "--config", str(cfg), *extra]) == EXIT_OK
    assert main(["train-mole", "--config", str(cfg), *extra]) == EXIT_OK
    out = tmp_path / "o"
    assert (out / "supernet.e1.ckpt").read_bytes() == (out / "supernet.ckpt").read_bytes()
    assert (out / "mole.e2.ckpt").read_bytes() == (out / "mole.ckpt").read_bytes()
    assert (out / "mole.e1.ckpt").exists() and not (out / "mole.e3.ckpt").exists()
    with pytest.raises(ConfigError):
        parse_config("[train]\ncheckpoint_every = -1\n")
