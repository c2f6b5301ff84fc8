"""Command-line front end: ``taslora <command> --config FILE [--set section.key=value ...]``.

Each command writes its artifacts plus ``manifest.json`` and a frozen
``config.ini`` into the output directory. Exit codes: 0 success, 2 missing
checkpoint or input file, 3 schema violation, 4 corrupted checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from .. import gradcore as gc
from ..evokit import Constraints, brute_force, evolve, make_eval_fn
from ..model import TasLoraModel, accuracy, mean_loss
from ..molekit import ExpertBank, init_experts, merge_subnet, single_lora_mode
from ..probe import (accuracy_table, assignment_heatmap, expert_similarity_by_layer, heatmap_svg,
                     mixture_rows, subnet_feature_similarity, write_accuracy_csv, write_matrix_csv, write_rows)
from ..routerkit import RouterState, group_wise_init, random_init, route
from ..spacekit import Grouping, SpaceError, SubnetConfig, max_subnet, sample_subnet, validate
from ..supernet import SupernetWeights, embed_standalone, init_supernet
from ..trainkit import config_dict, full_finetune_baseline, pretrain_supernet, train_mole
from . import checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, Dataset, load_idx, synth_data

EXIT_OK, EXIT_MISSING, EXIT_SCHEMA, EXIT_CORRUPT = 0, 2, 3, 4

# stream ids so each stage draws from its own deterministic generator
_STREAMS = {"data": 1, "split": 2, "pretrain": 3, "mole": 4, "search": 5, "probe": 6}


class SchemaError(ValueError):
    """A checkpoint or input does not match what the config declares."""


def stream(cfg: ExperimentConfig, name: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _STREAMS[name]])


# -- data -----------------------------------------------------------------------

def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, val) as declared by the config."""
    d, space = cfg.data, cfg.space
    if d.source == "synthetic":
        full = synth_data(d.classes, d.samples, d.noise, stream(cfg, "data"), space.image_size, space.in_chans)
    else:
        full = load_idx(d.images, d.labels, d.classes)
    _check_images(full, cfg)
    if d.val_images:
        if not d.val_labels:
            raise ConfigError("data.val_images needs data.val_labels")
        val = load_idx(d.val_images, d.val_labels, d.classes)
        _check_images(val, cfg)
        return full, val
    return full.split(d.val_fraction, stream(cfg, "split"))


def _check_images(data: Dataset, cfg: ExperimentConfig):
    s = cfg.space
    want = (s.in_chans, s.image_size, s.image_size)
    got = data.images.shape[1:]
    if got != want:
        raise SchemaError(f"images have shape {got}, space expects {want}")


# -- model assembly ---------------------------------------------------------------

def build_router(cfg: ExperimentConfig, rng: np.random.Generator) -> RouterState:
    grouping = Grouping(cfg.space, cfg.mole.grouping, cfg.seed)
    router = RouterState(cfg.space, rng, cfg.mole.routing_attributes, grouping)
    if cfg.mole.router_init == "group_wise":
        group_wise_init(router, cfg.space, cfg.mole.beta)
    else:
        random_init(router, rng)
    return router


def load_supernet(cfg: ExperimentConfig, path) -> SupernetWeights:
    state = checkpoint.load(path)
    try:
        return SupernetWeights.from_state(cfg.space, state)
    except (KeyError, gc.ShapeError) as exc:
        raise SchemaError(f"{path}: not a supernet for this space ({exc})") from None


def load_mole(cfg: ExperimentConfig, path) -> tuple[ExpertBank, RouterState | None]:
    state = checkpoint.load(path)
    try:
        bank = ExpertBank.from_state(cfg.space, state)
        router_state = {k: v for k, v in state.items() if k.startswith("router.")}
        if not router_state:
            return bank, None
        router = RouterState(cfg.space, np.random.default_rng(0), cfg.mole.routing_attributes,
                             Grouping(cfg.space, cfg.mole.grouping, cfg.seed), bank.num_experts)
        if set(router_state) != set(router.params):
            raise KeyError(f"router tensors {sorted(set(router_state) ^ set(router.params))[:4]}")
        router.load_state(router_state)
    except (KeyError, gc.ShapeError) as exc:
        raise SchemaError(f"{path}: mole checkpoint does not match config ({exc})") from None
    return bank, router


def load_model(cfg: ExperimentConfig, args) -> TasLoraModel:
    out = Path(cfg.output_dir)
    weights = load_supernet(cfg, args.supernet or out / "supernet.ckpt")
    if cfg.mole.mode == "none":
        return TasLoraModel(weights)
    bank, router = load_mole(cfg, args.mole or out / "mole.ckpt")
    return TasLoraModel(weights, bank, router, cfg.train.mole_forward)


# -- manifests ------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, command: str, inputs: dict, outputs: list, **extra) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.dump())
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.dump(),
        "train": config_dict(cfg.train),
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items()},
        "outputs": {str(p): _sha256(out / p) for p in outputs if (out / p).is_file()},
        **extra,
    }
    path = out / (f"manifest.{command}.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _periodic(cfg: ExperimentConfig, stem: str, state_fn):
    """Epoch callback saving ``<stem>.e<epoch>.ckpt`` every ``train.checkpoint_every`` epochs."""
    every = cfg.train.checkpoint_every
    if not every:
        return None

    def save(epoch: int):
        if (epoch + 1) % every == 0:
            checkpoint.save(Path(cfg.output_dir) / f"{stem}.e{epoch + 1}.ckpt", state_fn())
    return save


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# -- commands -------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, args) -> dict:
    train, _ = build_data(cfg)
    rng = stream(cfg, "pretrain")
    weights = init_supernet(cfg.space, rng)
    weights, log = pretrain_supernet(weights, cfg.space, train, cfg.train, rng,
                                     on_epoch=_periodic(cfg, "supernet", weights.state))
    out = Path(cfg.output_dir)
    checkpoint.save(out / "supernet.ckpt", weights.state())
    _write_jsonl(out / "pretrain_log.jsonl", log)
    write_manifest(cfg, "pretrain", {}, ["supernet.ckpt", "pretrain_log.jsonl"])
    return {"final_loss": log[-1]["loss"] if log else None}


def cmd_train_mole(cfg: ExperimentConfig, args) -> dict:
    out = Path(cfg.output_dir)
    sup_path = Path(args.supernet or out / "supernet.ckpt")
    weights = load_supernet(cfg, sup_path)
    train, _ = build_data(cfg)
    rng = stream(cfg, "mole")
    if cfg.mole.mode == "none":
        tuned, log = full_finetune_baseline(weights, cfg.space, train, cfg.train, rng)
        checkpoint.save(out / "finetune.ckpt", tuned.state())
        _write_jsonl(out / "mole_log.jsonl", log)
        write_manifest(cfg, "train-mole", {"supernet": sup_path}, ["finetune.ckpt", "mole_log.jsonl"],
                       tag="full_finetune")
        return {"final_loss": log[-1]["loss"] if log else None}
    bank = init_experts(cfg.space, cfg.mole.rank, rng)
    router = None
    if cfg.mole.mode == "single_lora":
        bank = single_lora_mode(bank)
    else:
        router = build_router(cfg, rng)
    def mole_state():
        state = bank.state()
        if router is not None:
            state.update(router.state())
        return state

    bank, router, log = train_mole(weights, bank, router, train, cfg.train, rng,
                                   on_epoch=_periodic(cfg, "mole", mole_state))
    state = mole_state()
    checkpoint.save(out / "mole.ckpt", state)
    _write_jsonl(out / "mole_log.jsonl", log)
    write_manifest(cfg, "train-mole", {"supernet": sup_path}, ["mole.ckpt", "mole_log.jsonl"],
                   tag=cfg.mole.mode)
    return {"final_loss": log[-1]["loss"] if log else None}


def _model_inputs(cfg, args) -> dict:
    out = Path(cfg.output_dir)
    inputs = {"supernet": Path(args.supernet or out / "supernet.ckpt")}
    if cfg.mole.mode != "none":
        inputs["mole"] = Path(args.mole or out / "mole.ckpt")
    return inputs


def cmd_search(cfg: ExperimentConfig, args) -> dict:
    model = load_model(cfg, args)
    _, val = build_data(cfg)
    trace: list = []
    best = evolve(cfg.search, cfg.space, make_eval_fn(model, val.images, val.labels),
                  np.random.default_rng([cfg.search.seed, _STREAMS["search"]]), trace)
    out = Path(cfg.output_dir)
    _write_jsonl(out / "search_trace.jsonl", trace)
    (out / "best_subnet.txt").write_text(best.subnet.text() + "\n")
    write_manifest(cfg, "search", _model_inputs(cfg, args), ["search_trace.jsonl", "best_subnet.txt"],
                   result=best.record())
    return best.record()


def cmd_bruteforce(cfg: ExperimentConfig, args) -> dict:
    model = load_model(cfg, args)
    _, val = build_data(cfg)
    ranking = brute_force(cfg.space, make_eval_fn(model, val.images, val.labels), cfg.search.constraints)
    out = Path(cfg.output_dir)
    write_rows(out / "bruteforce.csv", [{"rank": i, **c.record()} for i, c in enumerate(ranking)])
    write_manifest(cfg, "bruteforce", _model_inputs(cfg, args), ["bruteforce.csv"], candidates=len(ranking))
    return ranking[0].record() if ranking else {}


def _subnet_arg(cfg: ExperimentConfig, text: str | None) -> SubnetConfig:
    if text is None:
        best = Path(cfg.output_dir) / "best_subnet.txt"
        if not best.exists():
            raise FileNotFoundError("no --subnet given and no best_subnet.txt from a search")
        text = best.read_text().strip()
    try:
        return validate(SubnetConfig.parse(text), cfg.space)
    except SpaceError as exc:
        raise ConfigError(f"subnet {text!r}: {exc}") from None


def cmd_merge(cfg: ExperimentConfig, args) -> dict:
    subnet = _subnet_arg(cfg, args.subnet)
    model = load_model(cfg, args)
    if model.bank is None:
        tensors = merge_subnet(model.weights, init_experts(cfg.space, 1, np.random.default_rng(0), 1),
                               _zero_mixture(subnet, cfg), subnet)
    else:
        tensors = merge_subnet(model.weights, model.bank, model.mixture(subnet), subnet)
    out = Path(cfg.output_dir)
    checkpoint.save(out / "merged.ckpt", tensors)
    write_manifest(cfg, "merge", _model_inputs(cfg, args), ["merged.ckpt"], subnet=subnet.text(),
                   tensors=len(tensors))
    return {"subnet": subnet.text(), "tensors": len(tensors)}


def _zero_mixture(subnet, cfg):
    from ..molekit import ExpertMixture
    return ExpertMixture.uniform(subnet.depth, cfg.space.num_blocks, 1)


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    if args.checkpoint:
        path = Path(args.checkpoint)
        tensors = checkpoint.load(path)
        subnet = _merged_subnet(cfg, args, path)
        try:
            weights = embed_standalone(tensors, subnet, cfg.space)
        except (KeyError, gc.ShapeError) as exc:
            raise SchemaError(f"{path}: not a standalone checkpoint for {subnet.text()} ({exc})") from None
        model, inputs, source = TasLoraModel(weights), {"checkpoint": path}, "merged"
    else:
        subnet = _subnet_arg(cfg, args.subnet)
        model, inputs, source = load_model(cfg, args), _model_inputs(cfg, args), "mole"
    _, val = build_data(cfg)
    _, logits = model.predict(subnet, val.images)
    result = {"subnet": subnet.text(), "source": source, "top1": accuracy(logits, val.labels),
              "val_loss": mean_loss(logits, val.labels), "samples": len(val)}
    out = Path(cfg.output_dir)
    name = args.name or f"eval_{source}"
    (out / f"{name}.json").write_text(json.dumps({**result, "predictions": logits.argmax(1).tolist()}))
    write_manifest(cfg, "eval", inputs, [f"{name}.json"], result=result)
    return result


def _merged_subnet(cfg, args, path: Path) -> SubnetConfig:
    if args.subnet:
        return _subnet_arg(cfg, args.subnet)
    for candidate in (path.parent / "manifest.merge.json", path.parent / "manifest.json"):
        if candidate.exists():
            subnet = json.loads(candidate.read_text()).get("subnet")
            if subnet:
                return _subnet_arg(cfg, subnet)
    raise ConfigError("merged checkpoint needs --subnet (no merge manifest next to it)")


def cmd_probe(cfg: ExperimentConfig, args) -> dict:
    model = load_model(cfg, args)
    _, val = build_data(cfg)
    rng = stream(cfg, "probe")
    out = Path(cfg.output_dir)
    images = val.images[: cfg.probe.samples]
    subnets = [sample_subnet(cfg.space, rng) for _ in range(cfg.probe.subnets)]
    frozen = TasLoraModel(model.weights)
    variants = {"frozen": frozen, "model": model}
    summary, outputs = {}, []
    for name, m in variants.items():
        sim = subnet_feature_similarity(subnets, m, images)
        stem = "sim_matrix" if name == "model" else "sim_matrix_frozen"
        sim.to_csv(out / f"{stem}.csv")
        outputs.append(f"{stem}.csv")
        summary[f"feature_similarity_{name}"] = sim.mean_off_diagonal()
        if cfg.probe.svg:
            heatmap_svg(sim.values, out / f"{stem}.svg", title=f"feature similarity ({name})", vmin=0.0, vmax=1.0)
            outputs.append(f"{stem}.svg")
    write_accuracy_csv(out / "accuracy_table.csv", accuracy_table(subnets, variants, val.images, val.labels))
    outputs.append("accuracy_table.csv")
    if model.bank is not None and model.bank.num_experts > 1:
        curve = expert_similarity_by_layer(model.bank, model.weights, max_subnet(cfg.space), images[:128])
        write_rows(out / "expert_sim_by_layer.csv",
                   [{"layer": i, "similarity": f"{v:.6f}"} for i, v in enumerate(curve)])
        outputs.append("expert_sim_by_layer.csv")
        summary["expert_similarity_mean"] = float(curve.mean())
    if model.router is not None:
        heat = assignment_heatmap(model.router, cfg.space, rng, cfg.probe.heatmap_samples)
        write_matrix_csv(out / "assignment.csv", heat)
        outputs.append("assignment.csv")
        if cfg.probe.svg:
            heatmap_svg(heat, out / "assignment.svg", title="group to expert assignment", vmin=0.0)
            outputs.append("assignment.svg")
        mix = [{"subnet": s.text(), **row} for s in subnets for row in mixture_rows(model.router, s)]
        write_rows(out / "mixture.csv", mix)
        outputs.append("mixture.csv")
    write_manifest(cfg, "probe", _model_inputs(cfg, args), outputs, subnets=[s.text() for s in subnets],
                   summary=summary)
    return summary


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-mole": cmd_train_mole,
    "search": cmd_search,
    "bruteforce": cmd_bruteforce,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taslora", description="Supernet + mixture-of-LoRA-experts pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")
        if name != "pretrain":
            p.add_argument("--supernet", help="supernet checkpoint (default: <out>/supernet.ckpt)")
        if name in ("search", "bruteforce", "merge", "eval", "probe"):
            p.add_argument("--mole", help="expert/router checkpoint (default: <out>/mole.ckpt)")
        if name in ("merge", "eval"):
            p.add_argument("--subnet", help="subnet text, e.g. 2:16:[1,2;2,4] (default: best_subnet.txt)")
        if name == "eval":
            p.add_argument("--checkpoint", help="standalone merged checkpoint to evaluate")
            p.add_argument("--name", help="result file stem")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"run.output_dir={args.out}")
        cfg = load_config(args.config, overrides)
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args)
    except checkpoint.CorruptCheckpoint as exc:
        print(f"error: corrupted checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, SchemaError, checkpoint.CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
