"""Command-line entry points: ``synth``, ``pretrain``, ``finetune`` and ``sweep``.

Every command resolves its configuration (JSON file, then flags), writes the
snapshot to ``<out>/config.json`` and only then starts working.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import __version__
from .alignment import PretrainConfig, pretrain
from .checkpoint import CheckpointError, read_checkpoint
from .downstream import (
    FinetuneConfig,
    data_efficiency_sweep,
    fine_tune_classification,
    fine_tune_segmentation,
    plot_efficiency,
    write_cls_csv,
    write_dice_csv,
    write_efficiency_csv,
)
from .embedders import (
    CaptionError,
    EmbedderSpec,
    ExternalCaptioner,
    ManifestCaptioner,
    MockDualEncoder,
    PretrainedDualEncoder,
    TemplateCaptioner,
)
from .encoder import EncoderConfig
from .psat import PsatConfig
from .volume_io import SyntheticDataset, generate_synthetic_dataset, load_dataset_dir, save_synthetic_dataset

logger = logging.getLogger("volalign")


class ConfigError(ValueError):
    """A configuration failed validation; ``problems`` lists every offending field."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass
class DataConfig:
    path: Optional[str] = None
    n: int = 200
    side: int = EncoderConfig().side
    seed: int = 0


@dataclass
class EmbedderConfig:
    kind: str = "mock"  # mock | pretrained
    embed_dim: int = 512
    image_input_side: int = 16
    seed: int = 1234
    model_path: Optional[str] = None
    captioner: str = "manifest"  # manifest | template | external
    prompt: str = "Describe this medical image slice."


@dataclass
class SweepConfig:
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    psat: PsatConfig = field(default_factory=PsatConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    init: Optional[str] = None
    out: str = "runs/default"
    seed: int = 0
    workers: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        problems: list[str] = []
        values = _collect(cls, raw, "", problems)
        if problems:
            raise ConfigError(problems)
        try:
            cfg = _build(cls, values)
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from exc
        _cross_check(cfg, problems)
        if problems:
            raise ConfigError(problems)
        return cfg


def _type_ok(value, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if origin is list:
        (inner,) = typing.get_args(tp)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, tp)


def _collect(cls, raw, prefix: str, problems: list[str]) -> dict:
    if not isinstance(raw, dict):
        problems.append(f"{prefix.rstrip('.') or '<root>'}: expected an object")
        return {}
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"{prefix}{key}: unknown field")
    out = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        tp, value = hints[f.name], raw[f.name]
        if is_dataclass(tp):
            out[f.name] = _collect(tp, value, f"{prefix}{f.name}.", problems)
        elif not _type_ok(value, tp):
            problems.append(f"{prefix}{f.name}: expected {getattr(tp, '__name__', tp)}, got {value!r}")
        else:
            out[f.name] = value
    return out


def _build(cls, values: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name in values:
            v = values[f.name]
            kwargs[f.name] = _build(hints[f.name], v) if is_dataclass(hints[f.name]) else v
    return cls(**kwargs)


def _cross_check(cfg: ExperimentConfig, problems: list[str]) -> None:
    if cfg.embedder.kind not in ("mock", "pretrained"):
        problems.append(f"embedder.kind: must be 'mock' or 'pretrained', got {cfg.embedder.kind!r}")
    if cfg.embedder.captioner not in ("manifest", "template", "external"):
        problems.append(f"embedder.captioner: unknown captioner {cfg.embedder.captioner!r}")
    if cfg.embedder.kind == "mock" and cfg.psat.dim != cfg.embedder.embed_dim:
        problems.append(f"psat.dim: {cfg.psat.dim} must equal embedder.embed_dim {cfg.embedder.embed_dim}")
    if cfg.encoder.side != cfg.data.side:
        problems.append(f"encoder.side: {cfg.encoder.side} must equal data.side {cfg.data.side}")
    if cfg.data.n < 1:
        problems.append(f"data.n: must be positive, got {cfg.data.n}")
    if cfg.workers < 0:
        problems.append(f"workers: must be >= 0, got {cfg.workers}")


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError([f"config file {path} does not exist"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path} is not valid JSON ({exc})"]) from exc
    return ExperimentConfig.from_dict(raw)


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list of {kind.__name__}") from exc

    return parse


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Fold command-line flags into ``cfg`` and re-validate the result."""
    raw = cfg.to_dict()
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        for section in ("data", "pretrain", "finetune"):
            raw[section]["seed"] = args.seed
    if getattr(args, "side", None) is not None:
        raw["data"]["side"] = raw["encoder"]["side"] = args.side
    if getattr(args, "n", None) is not None:
        raw["data"]["n"] = args.n
    if getattr(args, "data", None) is not None:
        raw["data"]["path"] = args.data
    if getattr(args, "epochs", None) is not None:
        raw["pretrain"]["epochs"] = args.epochs
    if getattr(args, "no_qtrans", False):
        raw["pretrain"]["use_query_transformer"] = raw["psat"]["use_query_transformer"] = False
    if getattr(args, "no_pspe", False):
        raw["pretrain"]["use_pspe"] = raw["psat"]["use_pspe"] = False
    if getattr(args, "init", None) is not None:
        raw["init"] = args.init
    if getattr(args, "fractions", None) is not None:
        raw["sweep"]["fractions"] = args.fractions
    if getattr(args, "seeds", None) is not None:
        raw["sweep"]["seeds"] = args.seeds
    if getattr(args, "workers", None) is not None:
        raw["workers"] = args.workers
    # the pretrain section's flags are authoritative for the ablation
    raw["psat"]["use_query_transformer"] = raw["pretrain"]["use_query_transformer"]
    raw["psat"]["use_pspe"] = raw["pretrain"]["use_pspe"]
    return ExperimentConfig.from_dict(raw)


def set_workers(workers: int) -> None:
    """``0`` selects deterministic single-threaded execution; ``n > 0`` uses n intra-op threads."""
    if workers == 0:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
        torch.set_num_threads(workers)


def write_snapshot(out: Path, command: str, cfg: ExperimentConfig, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"version": __version__, "command": command, "config": cfg.to_dict(), **(extra or {})}
    path = out / "config.json"
    path.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    return path


def _require_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    if cfg.data.path is None:
        raise ConfigError(["data.path: a dataset directory is required (use --data or the config file)"])
    if not (Path(cfg.data.path) / "manifest.jsonl").exists():
        raise ConfigError([f"data.path: {cfg.data.path} holds no manifest.jsonl"])
    return load_dataset_dir(cfg.data.path, cfg.data.side)


def _embedder(cfg: ExperimentConfig):
    e = cfg.embedder
    if e.kind == "pretrained":
        return PretrainedDualEncoder(model_path=e.model_path, image_input_side=e.image_input_side)
    return MockDualEncoder(EmbedderSpec(embed_dim=e.embed_dim, image_input_side=e.image_input_side), seed=e.seed)


def _captioner(cfg: ExperimentConfig, ds: SyntheticDataset):
    kind = cfg.embedder.captioner
    if kind == "external":
        return ExternalCaptioner(prompt=cfg.embedder.prompt)
    if kind == "manifest" and ds.captions:
        return ManifestCaptioner(ds.captions)
    if any(lab.any() for lab in ds.labels):
        return TemplateCaptioner({v.id: lab for v, lab in zip(ds.volumes, ds.labels)})
    raise ConfigError([f"embedder.captioner: {kind!r} needs cached captions or label maps in the dataset"])


def _checkpoint_encoder(cfg: ExperimentConfig) -> ExperimentConfig:
    """Adopt the encoder architecture stored in an ``--init`` checkpoint."""
    if cfg.init in (None, "scratch"):
        return cfg
    if not Path(cfg.init).exists():
        raise ConfigError([f"init: checkpoint {cfg.init} does not exist"])
    meta, _ = read_checkpoint(cfg.init)
    if "encoder_config" not in meta:
        raise CheckpointError(f"{cfg.init} holds no encoder")
    return replace(cfg, encoder=EncoderConfig(**meta["encoder_config"]))


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    write_snapshot(out, "synth", cfg)
    ds = generate_synthetic_dataset(cfg.data.n, cfg.data.side, cfg.data.seed)
    manifest = save_synthetic_dataset(ds, out)
    counts = {s: len(ds.indices(s)) for s in ("train", "val", "test")}
    logger.info("wrote %d volumes to %s (%s)", len(ds), out, counts)
    return {"manifest": str(manifest), "splits": counts}


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out)
    write_snapshot(out, "pretrain", cfg, {"ablation": cfg.psat.ablation})
    ds = _require_dataset(cfg)
    train = [ds.volumes[i] for i in ds.indices("train")]
    embedder = _embedder(cfg)
    trainer, trace = pretrain(train, embedder, _captioner(cfg, ds), cfg.encoder, cfg.psat, cfg.pretrain, out_dir=out)
    summary = {"ablation": cfg.psat.ablation, "steps": trainer.step,
               "final_loss": trace[-1].total_loss if trace else None, "checkpoint": str(out / "final.npz")}
    (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_finetune(cfg: ExperimentConfig, task: str) -> dict:
    cfg = _checkpoint_encoder(cfg)
    out = Path(cfg.out)
    write_snapshot(out, f"finetune-{task}", cfg)
    ds = _require_dataset(cfg)
    init = None if cfg.init in (None, "scratch") else cfg.init
    if task == "seg":
        res = fine_tune_segmentation(init, ds, cfg.finetune, cfg.encoder)
        write_dice_csv(out / "dice.csv", res)
        return {"mean_dice": res.mean_dice, "per_class": res.per_class}
    if not ds.class_labels or min(ds.class_labels) < 0:
        raise ConfigError(["task: 'cls' needs a class label for every volume in the dataset"])
    res = fine_tune_classification(init, ds, cfg.finetune, cfg.encoder)
    write_cls_csv(out / "cls.csv", res)
    return {"accuracy": res.accuracy, "auc": res.auc}


def cmd_sweep(cfg: ExperimentConfig) -> dict:
    if cfg.init in (None, "scratch"):
        raise ConfigError(["init: the sweep compares against a pre-trained checkpoint; pass --init"])
    cfg = _checkpoint_encoder(cfg)
    out = Path(cfg.out)
    write_snapshot(out, "sweep", cfg)
    if len(cfg.sweep.seeds) < 2:
        raise ConfigError(["sweep.seeds: at least two seeds are needed for a standard deviation"])
    ds = _require_dataset(cfg)
    curves = data_efficiency_sweep(cfg.init, ds, cfg.sweep.fractions, cfg.sweep.seeds, cfg.finetune, cfg.encoder)
    write_efficiency_csv(out / "efficiency.csv", curves)
    plot_efficiency(out / "efficiency.png", curves)
    return {c.label: {p.fraction: [p.mean, p.std] for p in c.points} for c in curves}


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--side", type=int, help="cubic volume side S")
    common.add_argument("--workers", type=int, help="intra-op threads; 0 = deterministic mode")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory written by 'synth'")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--n", type=int, help="number of volumes")

    p = sub.add_parser("pretrain", parents=[common, data], help="align the 3D encoder with the frozen embedders")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-qtrans", action="store_true", help="bypass the query transformer")
    p.add_argument("--no-pspe", action="store_true", help="disable the plane-slice position embedding")

    p = sub.add_parser("finetune", parents=[common, data], help="fine-tune on segmentation or classification")
    p.add_argument("task", choices=["seg", "cls"])
    p.add_argument("--init", help="checkpoint path or 'scratch'")

    p = sub.add_parser("sweep", parents=[common, data], help="data-efficiency sweep, pre-trained vs scratch")
    p.add_argument("--init", help="pre-trained checkpoint")
    p.add_argument("--fractions", type=_csv_list(float), help="e.g. 0.1,0.5,1.0")
    p.add_argument("--seeds", type=_csv_list(int), help="e.g. 0,1,2")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "synth" and args.n is not None and args.n < 1:
        parser.error(f"--n must be a positive integer, got {args.n}")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        set_workers(cfg.workers)
        if args.command == "synth":
            result = cmd_synth(cfg)
        elif args.command == "pretrain":
            result = cmd_pretrain(cfg)
        elif args.command == "finetune":
            result = cmd_finetune(cfg, args.task)
        else:
            result = cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"volalign {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CheckpointError, CaptionError, RuntimeError) as exc:
        print(f"volalign {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
