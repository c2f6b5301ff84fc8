"""Experiment configuration.

Grammar: INI-style sections holding ``key = value`` lines. ``#`` and ``;``
start comments. Lists are comma-separated. Every key is declared in
``SCHEMA``; anything else is rejected. Example::

    [run]
    seed = 0
    output_dir = runs/desk

    [space]
    preset = desk_t

    [data]
    source = synthetic
    classes = 10
    samples = 5000
    noise = 0.8
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from ..evokit import SearchConfig
from ..routerkit import ATTRIBUTES, DEFAULT_ATTRIBUTES, DEFAULT_BETA, routing_attribute_subset
from ..spacekit import SearchSpace, SpaceError, autoformer, desk_t
from ..trainkit import TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in _items(text))


def _ratios(text: str) -> tuple[Fraction, ...]:
    return tuple(Fraction(x) for x in _items(text))


def _items(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} not one of {options}")
        return t
    return parse


SCHEMA = {
    "run": {"seed": int, "output_dir": str},
    "space": {
        "preset": _choice("desk_t", "autoformer_t", "autoformer_s", "autoformer_b", "custom"),
        "heads": _ints, "mlp_ratios": _ratios, "embeds": _ints, "depths": _ints,
        "head_dim": int, "patch_size": int, "image_size": int, "in_chans": int, "num_classes": int,
    },
    "data": {
        "source": _choice("synthetic", "idx"),
        "classes": int, "samples": int, "noise": float, "val_fraction": float,
        "images": str, "labels": str, "val_images": str, "val_labels": str,
    },
    "train": {
        "supernet_epochs": int, "supernet_lr": float, "supernet_warmup_epochs": int, "mole_epochs": int,
        "warmup_epochs": int, "lora_lr_start": float, "lora_lr_peak": float, "router_lr": float,
        "router_momentum": float, "finetune_lr": float, "batch_size": int, "weight_decay": float,
        "seed": int, "mole_forward": _choice("mole", "merged"), "checkpoint_every": int,
    },
    "mole": {
        "mode": _choice("mole", "single_lora", "none"),
        "router_init": _choice("group_wise", "random"),
        "beta": float, "rank": int,
        "grouping": _choice("architecture", "random", "params"),
        "routing_attributes": lambda t: routing_attribute_subset(_items(t)),
    },
    "search": {
        "population": int, "iterations": int, "top_k": int, "mutation_prob": float, "crossover_prob": float,
        "max_params": _opt_int, "max_flops": _opt_int, "seed": int,
    },
    "probe": {"samples": int, "subnets": int, "heatmap_samples": int, "svg": _bool},
}

@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    samples: int = 5000
    noise: float = 0.8
    val_fraction: float = 0.2
    images: str | None = None
    labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None


@dataclass
class MoleConfig:
    mode: str = "mole"
    router_init: str = "group_wise"
    beta: float = DEFAULT_BETA
    rank: int = 8
    grouping: str = "architecture"
    routing_attributes: tuple[str, ...] = DEFAULT_ATTRIBUTES


@dataclass
class ProbeConfig:
    samples: int = 512
    subnets: int = 6
    heatmap_samples: int = 100
    svg: bool = True


@dataclass
class ExperimentConfig:
    space: SearchSpace
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    mole: MoleConfig = field(default_factory=MoleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict, repr=False)

    def dump(self) -> str:
        """Normalized config text; parsing it yields an identical config."""
        lines = []
        for section, values in self.raw.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


def _read_sections(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None,
                                       default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def apply_overrides(sections: dict[str, dict[str, str]], overrides) -> dict[str, dict[str, str]]:
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        sections.setdefault(section, {})[name] = value.strip()
    return sections


def _build_space(values: dict) -> SearchSpace:
    preset = values.get("preset", "desk_t" if not values.get("heads") else "custom")
    num_classes = values.get("num_classes")
    if preset == "desk_t":
        base = desk_t()
    elif preset.startswith("autoformer_"):
        base = autoformer(preset[-1])
    else:
        required = ("heads", "mlp_ratios", "embeds", "depths")
        missing = [k for k in required if k not in values]
        if missing:
            raise ConfigError(f"[space] custom space needs {missing}")
        base = None
    kwargs = dict(
        head_candidates=values.get("heads", base.head_candidates if base else None),
        mlp_ratio_candidates=values.get("mlp_ratios", base.mlp_ratio_candidates if base else None),
        embed_candidates=values.get("embeds", base.embed_candidates if base else None),
        depth_candidates=values.get("depths", base.depth_candidates if base else None),
        head_dim=values.get("head_dim", base.head_dim if base else 8),
        patch_size=values.get("patch_size", base.patch_size if base else 4),
        image_size=values.get("image_size", base.image_size if base else 16),
        num_classes=num_classes if num_classes is not None else (base.num_classes if base else 10),
        in_chans=values.get("in_chans", base.in_chans if base else 1),
    )
    try:
        return SearchSpace(**kwargs)
    except SpaceError as exc:
        raise ConfigError(f"[space] {exc}") from None


def parse_config(text: str, overrides=None) -> ExperimentConfig:
    sections = apply_overrides(_read_sections(text), overrides)
    parsed: dict[str, dict] = {}
    for section, values in sections.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        parsed[section] = {}
        for key, raw in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            try:
                parsed[section][key] = SCHEMA[section][key](raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from None

    run = parsed.get("run", {})
    seed = run.get("seed", 0)
    space = _build_space(parsed.get("space", {}))
    data = DataConfig(**parsed.get("data", {}))
    if data.source == "idx" and not (data.images and data.labels):
        raise ConfigError("[data] source = idx needs images and labels paths")
    if "classes" not in parsed.get("data", {}):
        data.classes = space.num_classes
    if data.classes != space.num_classes:
        raise ConfigError(f"data.classes={data.classes} but space.num_classes={space.num_classes}")
    if not 0 < data.val_fraction < 1:
        raise ConfigError("data.val_fraction must be in (0, 1)")
    try:
        train = TrainConfig(**{"seed": seed, **parsed.get("train", {})})
        search = SearchConfig(**{"seed": seed, **parsed.get("search", {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    mole = MoleConfig(**parsed.get("mole", {}))
    if mole.rank < 1:
        raise ConfigError("mole.rank must be >= 1")
    probe = ProbeConfig(**parsed.get("probe", {}))
    return ExperimentConfig(space=space, train=train, search=search, mole=mole, data=data, probe=probe,
                            seed=seed, output_dir=run.get("output_dir", "runs/default"), raw=sections)


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)


__all__ = ["ATTRIBUTES", "ConfigError", "DataConfig", "ExperimentConfig", "MoleConfig", "ProbeConfig",
           "load_config", "parse_config"]
