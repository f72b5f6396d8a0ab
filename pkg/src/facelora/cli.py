"""Command-line runs over the library.

    facelora synth --identities 10 --per-id 20 --out runs/toy
    facelora train --config toy.yaml --manifest runs/toy/manifest.csv --out runs/toy-train
    facelora merge --checkpoint runs/toy-train/adapters.npz --out runs/toy-merged
    facelora evaluate --weights runs/toy-merged/merged.npz --protocol runs/toy/pairs.csv \\
        --manifest runs/toy/eval_manifest.csv --out runs/toy-eval
    facelora report-bias --accuracies 75.25,75.68,84.75,78.58
    facelora validate --config toy.yaml --print

A config is a YAML mapping with optional sections ``paths``, ``train``,
``vit``, ``subset``, ``synth``, ``eval`` and ``data`` plus a top-level
``seed``. Flags override file values. Relative paths in a file are taken
relative to the file; on the command line, relative to the working directory.

Seeds: every section seed that is not set explicitly is derived from the
global seed as the first 4 bytes (little endian) of
``sha256(f"{seed}/{name}")`` with ``name`` one of ``train``, ``subset``,
``synth``, ``pairs`` or ``backbone`` (random base initialisation).

Every command except ``validate`` and ``report-bias`` writes
``resolved_config.yaml`` into its run directory before anything else. The run
directory is ``--out``, else ``paths.out``, else
``$FACELORA_RUN_ROOT/<command>-<digest>`` (run root defaults to ``runs``).

Exit status: 0 on success, 2 for usage and config errors, 1 for failures
while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import types
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

import numpy as np
import yaml

from . import __version__
from .data import (
    CLIP_MEAN,
    CLIP_STD,
    DINOV2_MEAN,
    DINOV2_STD,
    DatasetManifest,
    DepthMode,
    Normalization,
    SubsetSpec,
    SyntheticDataset,
    generate_synthetic_dataset,
    load_image,
    make_pairs,
    read_manifest,
    read_pairs,
    subset,
    write_manifest,
    write_pairs,
)
from .eval import bias_report, evaluate
from .train import TrainConfig, Trainer, backbone_embedder, load_adapters, prepare_model, save_adapters
from .vit import MappingTable, ViTBackbone, ViTConfig, config_from_container, load_backbone_weights, save_backbone_weights

log = logging.getLogger("facelora")

COMMANDS = ("train", "evaluate", "merge", "subset", "synth", "report-bias", "validate")
RUN_ROOT_ENV = "FACELORA_RUN_ROOT"
SNAPSHOT = "resolved_config.yaml"
BUILTIN_MAPPINGS = ("dinov2", "clip")
NORMALIZATIONS = {
    "default": Normalization(),
    "dinov2": Normalization(DINOV2_MEAN, DINOV2_STD),
    "clip": Normalization(CLIP_MEAN, CLIP_STD),
}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# -- config sections -------------------------------------------------------------


@dataclass(frozen=True)
class Paths:
    manifest: str | None = None
    protocol: str | None = None
    checkpoint: str | None = None
    weights: str | None = None
    base: str | None = None
    mapping: str | None = None
    resume: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class SubsetSettings:
    width: int | None = None
    depth_mode: DepthMode = DepthMode.RANDOM_IDENTITIES
    seed: int | None = None


@dataclass(frozen=True)
class SynthSettings:
    identities: int = 10
    per_id: int = 20
    # extra images per training identity kept out of training for the protocol
    heldout_images: int = 10
    # extra identities that only appear in the protocol
    heldout_identities: int = 0
    image_size: int = 56
    groups: int = 4
    pairs_per_fold: int = 20
    folds: int = 10
    within_group_pairs: bool = True
    seed: int | None = None
    pairs_seed: int | None = None

    def __post_init__(self):
        for name in ("identities", "per_id", "image_size", "pairs_per_fold", "folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("heldout_images", "heldout_identities", "groups"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class EvalSettings:
    far_targets: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    folds: int = 10
    batch_size: int = 128

    def __post_init__(self):
        if not all(0 < t < 1 for t in self.far_targets):
            raise ValueError("far_targets must lie in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")


@dataclass(frozen=True)
class DataSettings:
    normalization: str = "default"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {sorted(NORMALIZATIONS)}")


SECTIONS = {
    "paths": Paths,
    "train": TrainConfig,
    "vit": ViTConfig,
    "subset": SubsetSettings,
    "synth": SynthSettings,
    "eval": EvalSettings,
    "data": DataSettings,
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    train: TrainConfig = field(default_factory=TrainConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    subset: SubsetSettings = field(default_factory=SubsetSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def snapshot(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def digest(self) -> str:
        d = self.to_dict()
        d["paths"].pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    @property
    def norm(self) -> Normalization:
        return NORMALIZATIONS[self.data.normalization]


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj


# -- loading and validation --------------------------------------------------------


@dataclass
class _Source:
    """Where raw values came from, for error messages."""

    name: str
    lines: dict[tuple[str, ...], int] = field(default_factory=dict)
    flags: dict[tuple[str, ...], str] = field(default_factory=dict)

    def at(self, *key: str) -> str:
        if key in self.flags:
            return f"command line ({self.flags[key]})"
        for k in (key, key[:1]):
            if k in self.lines:
                return f"{self.name}:{self.lines[k]}"
        return self.name


def _key_lines(node, prefix: tuple[str, ...] = ()) -> dict[tuple[str, ...], int]:
    out: dict[tuple[str, ...], int] = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = prefix + (str(k.value),)
            out[key] = k.start_mark.line + 1
            out.update(_key_lines(v, key))
    return out


def _read_yaml(path: Path) -> tuple[dict, _Source]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(raw).__name__}")
    return raw, _Source(str(path), _key_lines(node))


def _coerce(value: Any, hint: Any, name: str) -> Any:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        if value is None:
            return None
        (inner,) = [a for a in get_args(hint) if a is not type(None)]
        return _coerce(value, inner, name)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        args = get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            args = (args[0],) * len(value)
        elif len(args) != len(value):
            raise ConfigError(f"{name}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, name) for v, a in zip(value, args))
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            raise ConfigError(f"{name}: expected one of {[m.value for m in hint]}, got {value!r}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def _build_section(section: str, cls: type, raw: Any, src: _Source):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{src.at(section)}: {section}: expected a mapping, got {type(raw).__name__}")
    hints = get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{src.at(section, key)}: unknown key {section}.{key} (allowed: {', '.join(names)})")
        try:
            kwargs[key] = _coerce(value, hints[key], f"{section}.{key}")
        except ConfigError as exc:
            raise ConfigError(f"{src.at(section, key)}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        # the dataclass checks name the field first, or quote the bad value
        msg = str(exc)
        culprit = next((k for k in raw if msg.startswith(k) or k in msg.split()[:3] or repr(raw[k]) in msg), None)
        where = src.at(section, culprit) if culprit else src.at(section)
        label = f"{section}.{culprit}" if culprit else section
        raise ConfigError(f"{where}: {label}: {msg}") from None


def _resolve_paths(raw: dict, relative_to: Path) -> dict:
    out = {}
    for key, value in raw.items():
        if isinstance(value, str) and value:
            if key == "mapping" and value in BUILTIN_MAPPINGS:
                out[key] = value
            else:
                p = Path(value).expanduser()
                out[key] = str((p if p.is_absolute() else relative_to / p).resolve())
        else:
            out[key] = value
    return out


def resolve_config(
    command: str,
    config_file: str | Path | None = None,
    overrides: dict[tuple[str, ...], tuple[Any, str]] | None = None,
) -> RunConfig:
    """File values, then flag overrides ``{(section, key): (value, flag)}``, then defaults and derived seeds."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if config_file is not None:
        path = Path(config_file)
        raw, src = _read_yaml(path)
        raw = dict(raw)
        if isinstance(raw.get("paths"), dict):
            raw["paths"] = _resolve_paths(raw["paths"], path.resolve().parent)
    else:
        raw, src = {}, _Source("<defaults>")
    allowed = {"seed", "command", *SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{src.at(key)}: unknown top-level key {key!r} (allowed: {', '.join(sorted(allowed))})")
    if raw.get("command", command) != command:
        raise ConfigError(f"{src.at('command')}: config was resolved for {raw['command']!r}, not {command!r}")
    for key, (value, flag) in (overrides or {}).items():
        if value is None:
            continue
        if key[0] == "paths" and isinstance(value, str):
            value = _resolve_paths({key[1]: value}, Path.cwd())[key[1]]
        target = raw
        for part in key[:-1]:
            existing = target.get(part)
            target[part] = dict(existing) if isinstance(existing, dict) else {}
            target = target[part]
        target[key[-1]] = value
        src.flags[key] = flag

    try:
        seed = _coerce(raw.get("seed", 0), int, "seed")
    except ConfigError as exc:
        raise ConfigError(f"{src.at('seed')}: {exc}") from None
    built = {name: _build_section(name, cls, raw.get(name), src) for name, cls in SECTIONS.items()}

    # derived seeds for sections that did not pin one
    derived = {}
    if "seed" not in (raw.get("train") or {}):
        derived["train"] = replace(built["train"], seed=derive_seed(seed, "train"))
    if built["subset"].seed is None:
        derived["subset"] = replace(built["subset"], seed=derive_seed(seed, "subset"))
    synth = built["synth"]
    if synth.seed is None:
        synth = replace(synth, seed=derive_seed(seed, "synth"))
    if synth.pairs_seed is None:
        synth = replace(synth, pairs_seed=derive_seed(seed, "pairs"))
    derived["synth"] = synth
    built.update(derived)
    return RunConfig(command=command, seed=seed, **built)


def check_inputs(cfg: RunConfig) -> None:
    """Read-side invariants: required inputs are given and exist."""
    p = cfg.paths
    need: dict[str, tuple[str, ...]] = {
        "train": ("manifest",),
        "subset": ("manifest",),
        "merge": ("checkpoint",),
        "evaluate": ("protocol",),
    }
    for key in need.get(cfg.command, ()):
        if getattr(p, key) is None:
            raise ConfigError(f"{cfg.command} needs paths.{key} (--{key})")
    if cfg.command == "evaluate" and p.weights is None and p.checkpoint is None:
        raise ConfigError("evaluate needs paths.weights (--weights) or paths.checkpoint (--checkpoint)")
    if cfg.command == "subset" and cfg.subset.width is None:
        raise ConfigError("subset needs subset.width (--width)")
    for f in fields(Paths):
        value = getattr(p, f.name)
        if f.name == "out" or value is None or (f.name == "mapping" and value in BUILTIN_MAPPINGS):
            continue
        if not Path(value).exists():
            raise ConfigError(f"paths.{f.name}: {value} does not exist")


def run_dir(cfg: RunConfig) -> Path:
    if cfg.paths.out is not None:
        return Path(cfg.paths.out)
    root = Path(os.environ.get(RUN_ROOT_ENV) or "runs")
    return root / f"{cfg.command}-{cfg.digest()}"


# -- commands ----------------------------------------------------------------------


def _mapping(cfg: RunConfig) -> MappingTable | None:
    m = cfg.paths.mapping
    if m is None:
        return None
    return MappingTable.builtin(m) if m in BUILTIN_MAPPINGS else MappingTable.from_file(m)


def _base_backbone(cfg: RunConfig, path: str | None = None) -> ViTBackbone:
    """Base weights from ``path`` (native or mapped) or a seeded random init."""
    path = path or cfg.paths.base
    if path is None:
        return ViTBackbone(cfg.vit, seed=derive_seed(cfg.seed, "backbone"))
    mapping = _mapping(cfg)
    vit = cfg.vit if mapping is not None else config_from_container(path)
    model, report = load_backbone_weights(path, vit, mapping)
    if report.missing_optional:
        log.warning("left at init: %s", ", ".join(report.missing_optional))
    if report.unused_source:
        log.info("unused source tensors: %s", ", ".join(report.unused_source))
    if report.interpolated:
        log.info("interpolated: %s", ", ".join(report.interpolated))
    return model


def _manifest_loader(manifest: DatasetManifest):
    return lambda p: load_image(manifest.resolve(p))


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    s = cfg.synth
    per = s.per_id + s.heldout_images
    train_ids = generate_synthetic_dataset(s.identities, per, s.image_size, seed=s.seed, n_groups=s.groups)
    extra = (
        generate_synthetic_dataset(
            s.heldout_identities, s.per_id, s.image_size, seed=s.seed, n_groups=s.groups, identity_offset=s.identities
        )
        if s.heldout_identities
        else SyntheticDataset(DatasetManifest(()), {})
    )
    recs = train_ids.manifest.records
    train = DatasetManifest(tuple(r for r in recs if int(Path(r.path).stem) < s.per_id), root=out)
    held = [r for r in recs if int(Path(r.path).stem) >= s.per_id] + list(extra.manifest.records)
    train_ids.write_images(out)
    extra.write_images(out)
    write_manifest(train, out / "manifest.csv")
    result = {"manifest": str(out / "manifest.csv"), "images": len(train)}
    if held:
        eval_manifest = DatasetManifest(tuple(held), root=out)
        write_manifest(eval_manifest, out / "eval_manifest.csv")
        within = s.within_group_pairs and s.groups > 0
        try:
            pairs = make_pairs(eval_manifest, s.pairs_per_fold, s.folds, seed=s.pairs_seed, within_group=within)
        except ValueError:
            if not within:
                raise
            log.warning("groups too small for within-group impostors; drawing them across groups")
            pairs = make_pairs(eval_manifest, s.pairs_per_fold, s.folds, seed=s.pairs_seed)
        write_pairs(pairs, out / "pairs.csv")
        result.update(eval_manifest=str(out / "eval_manifest.csv"), protocol=str(out / "pairs.csv"), pairs=len(pairs))
    return result


def cmd_subset(cfg: RunConfig, out: Path) -> dict:
    manifest = read_manifest(cfg.paths.manifest)
    spec = SubsetSpec(cfg.subset.width, cfg.subset.depth_mode, cfg.subset.seed)
    sub = subset(manifest, spec)
    # keep image references valid from the new location
    rel = tuple(
        replace(r, path=os.path.relpath(manifest.resolve(r.path).resolve(), out.resolve())) for r in sub.records
    )
    dst = write_manifest(DatasetManifest(rel), out / "manifest.csv")
    return {"manifest": str(dst), "identities": len(sub.identities), "images": len(sub)}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    manifest = read_manifest(cfg.paths.manifest)
    base = _base_backbone(cfg)
    save_backbone_weights(base, out / "base.npz")
    loader = _manifest_loader(manifest)
    if cfg.paths.resume is not None:
        trainer = Trainer.resume(cfg.paths.resume, base, manifest, loader, out, cfg.train, cfg.norm)
    else:
        model, head = prepare_model(base, len(manifest.identities), cfg.train)
        trainer = Trainer(model, head, manifest, loader, cfg.train, out, cfg.norm)
    history = trainer.run()
    if not history:
        raise RuntimeError("nothing to train: checkpoint is already at the final epoch")
    save_adapters(trainer.backbone, out / "adapters.npz", trainer.base_fingerprint)
    summary = {
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "initial_loss": history[0].loss,
        "final_loss": history[-1].loss,
        "identities": len(manifest.identities),
        "images": len(manifest),
        "base_fingerprint": trainer.base_fingerprint,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _checkpoint_base(cfg: RunConfig) -> str:
    if cfg.paths.base is not None:
        return cfg.paths.base
    sibling = Path(cfg.paths.checkpoint).parent / "base.npz"
    if not sibling.exists():
        raise ConfigError("paths.base is required (no base.npz next to the checkpoint)")
    return str(sibling)


def cmd_merge(cfg: RunConfig, out: Path) -> dict:
    base = _base_backbone(cfg, _checkpoint_base(cfg))
    merged = load_adapters(cfg.paths.checkpoint, base).merged()
    dst = save_backbone_weights(merged, out / "merged.npz")
    return {"weights": str(dst), "fingerprint": merged.fingerprint()}


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    if cfg.paths.weights is not None:
        model = _base_backbone(cfg, cfg.paths.weights)
    else:
        model = load_adapters(cfg.paths.checkpoint, _base_backbone(cfg, _checkpoint_base(cfg)))
    pairs = read_pairs(cfg.paths.protocol)
    if cfg.paths.manifest is not None:
        manifest = read_manifest(cfg.paths.manifest)
    else:
        manifest = DatasetManifest((), root=Path(cfg.paths.protocol).parent)
    embed = backbone_embedder(model, _manifest_loader(manifest), cfg.norm, cfg.eval.batch_size)
    report = evaluate(
        embed,
        pairs,
        manifest if cfg.paths.manifest is not None else None,
        far_targets=cfg.eval.far_targets,
        n_folds=cfg.eval.folds,
    )
    files = report.write(out)
    return {"accuracy": report.accuracy, "report": str(files["report"])}


HANDLERS = {
    "synth": cmd_synth,
    "subset": cmd_subset,
    "train": cmd_train,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
}


def _two_places(x: float) -> str:
    # half-up on the shortest decimal repr: 78.565 prints as 78.57, not 78.56
    return str(Decimal(repr(x)).quantize(Decimal("0.01"), ROUND_HALF_UP))


def _bias_line(accs: dict[str, float] | list[float]) -> str:
    rep = bias_report(accs)
    ser = "inf" if rep.ser_infinite else _two_places(rep.ser)
    return f"avg {_two_places(rep.average)}  STD {_two_places(rep.std)}  SER {ser}"


def cmd_report_bias(args: argparse.Namespace) -> int:
    if (args.accuracies is None) == (args.report is None):
        raise ConfigError("report-bias needs exactly one of --accuracies or --report")
    if args.report is not None:
        try:
            data = json.loads(Path(args.report).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--report: cannot read {args.report}: {exc}") from exc
        bias = data.get("bias")
        if not bias:
            raise ConfigError(f"--report: {args.report} has no per-group block")
        accs: dict[str, float] | list[float] = dict(zip(bias["groups"], bias["accuracies"]))
    else:
        try:
            values = [float(v) for v in args.accuracies.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--accuracies: expected comma-separated numbers, got {args.accuracies!r}") from None
        if args.groups:
            names = args.groups.split(",")
            if len(names) != len(values):
                raise ConfigError("--groups: need one name per accuracy")
            accs = dict(zip(names, values))
        else:
            accs = values
    try:
        print(_bias_line(accs))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return 0


# -- argument parsing --------------------------------------------------------------

_PATH_FLAGS = {
    "manifest": "image manifest (path,identity[,group])",
    "protocol": "pair protocol (pathA,pathB,label,fold)",
    "checkpoint": "training checkpoint or adapters.npz",
    "weights": "backbone weights container (e.g. merged.npz)",
    "base": "base backbone weights; random seeded init if omitted",
    "mapping": "weight-name mapping: dinov2, clip or a .map file",
    "resume": "training checkpoint to resume from",
}
_OVERRIDES = {
    "train": [
        ("--epochs", "train", "epochs", int),
        ("--batch-size", "train", "batch_size", int),
        ("--lr", "train", "base_lr", float),
        ("--weight-decay", "train", "weight_decay", float),
        ("--rank", "train", "rank", int),
        ("--alpha", "train", "alpha", float),
        ("--scaling", "train", "scaling_mode", str),
        ("--margin", "train", "margin", float),
        ("--scale", "train", "scale", float),
        ("--workers", "train", "workers", int),
        ("--train-seed", "train", "seed", int),
    ],
    "subset": [
        ("--width", "subset", "width", int),
        ("--depth-mode", "subset", "depth_mode", str),
        ("--subset-seed", "subset", "seed", int),
    ],
    "synth": [
        ("--identities", "synth", "identities", int),
        ("--per-id", "synth", "per_id", int),
        ("--heldout-images", "synth", "heldout_images", int),
        ("--heldout-identities", "synth", "heldout_identities", int),
        ("--image-size", "synth", "image_size", int),
        ("--groups", "synth", "groups", int),
        ("--pairs-per-fold", "synth", "pairs_per_fold", int),
    ],
    "evaluate": [("--batch-size", "eval", "batch_size", int)],
}
_COMMAND_PATHS = {
    "train": ("manifest", "base", "mapping", "resume"),
    "evaluate": ("protocol", "manifest", "weights", "checkpoint", "base", "mapping"),
    "merge": ("checkpoint", "base", "mapping"),
    "subset": ("manifest",),
    "synth": (),
    "validate": tuple(_PATH_FLAGS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facelora", description="LoRA face-verification runs.")
    parser.add_argument("--version", action="version", version=f"facelora {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train": "fine-tune adapters and a CosFace head on a manifest",
        "evaluate": "score a pair protocol and write report.json/summary.csv/roc.csv",
        "merge": "fold checkpoint adapters into the base weights",
        "subset": "write a width subset of a manifest",
        "synth": "generate a synthetic identity dataset and pair protocol",
        "validate": "resolve a config file and report problems",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="global seed")
        for key in _COMMAND_PATHS[name]:
            p.add_argument(f"--{key}", dest=f"path_{key}", help=_PATH_FLAGS[key])
        if name != "validate":
            p.add_argument("--out", dest="path_out", help="run directory")
        else:
            p.add_argument("--command-for", default="train", choices=[c for c in COMMANDS if c != "validate"],
                           help="command whose requirements to check")
            p.add_argument("--print", action="store_true", help="print the resolved config")
        for flag, section, key, typ in _OVERRIDES.get(name, ()):
            p.add_argument(flag, dest=f"ov_{section}_{key}", type=typ)
    p = sub.add_parser("report-bias", help="avg / STD / SER of per-group accuracies")
    p.add_argument("--accuracies", help="comma-separated per-group accuracies (percent)")
    p.add_argument("--groups", help="comma-separated group names for --accuracies")
    p.add_argument("--report", help="report.json with a per-group block")
    return parser


def _overrides(args: argparse.Namespace) -> dict[tuple[str, ...], tuple[Any, str]]:
    out: dict[tuple[str, ...], tuple[Any, str]] = {}
    if getattr(args, "seed", None) is not None:
        out[("seed",)] = (args.seed, "--seed")
    for name, value in vars(args).items():
        if value is None:
            continue
        if name.startswith("path_"):
            key = name[5:]
            out[("paths", key)] = (value, f"--{key}")
        elif name.startswith("ov_"):
            for flag, section, key, _ in _OVERRIDES.get(args.command, ()):
                if name == f"ov_{section}_{key}":
                    out[(section, key)] = (value, flag)
    return out


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "report-bias":
            return cmd_report_bias(args)
        command = args.command_for if args.command == "validate" else args.command
        cfg = resolve_config(command, args.config, _overrides(args))
        check_inputs(cfg)
        if args.command == "validate":
            if args.print:
                sys.stdout.write(cfg.snapshot())
            else:
                print("config ok")
            return 0
        out = run_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / SNAPSHOT).write_text(cfg.snapshot(), encoding="utf-8")
        result = HANDLERS[cfg.command](cfg, out)
    except ConfigError as exc:
        print(f"facelora: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to status 1
        log.debug("failure", exc_info=True)
        print(f"facelora: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(out), **_plain(result)}, sort_keys=True, default=_json_scalar))
    return 0


def _json_scalar(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def main() -> None:
    sys.exit(run())
