"""Command-line surface: training (interactive and semantic), the four
evaluation modes, synthetic data generation, and the checkpoint
compatibility check.

Exit codes: 0 success, 1 expected failure (bad data, incompatible
checkpoint, ...), 2 usage error. All reports are written atomically
(temp file + rename), so interrupted runs never leave half-written output.
Setting PROMPTFIT_CACHE to a directory caches image embeddings during
evaluation, keyed by checkpoint hash + image hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import interactive2d, interactive3d
from .data import (Dataset2D, Dataset3D, DatasetError, GenerationError,
                   SplitSpec, apply_split, flatten_to_2d, generate_synthetic,
                   load_dataset, make_split)
from .model import (CheckpointFormatError, CheckpointIntegrityError,
                    ModelConfig, PromptableSegmenter, check_compatibility,
                    load_checkpoint)
from .model.types import DimensionError, ImageEmbedding, PromptUsageError
from .objective import PRESETS, ObjectiveConfig, TrainSchedule, train
from .semantic import (build_semantic_2d, build_semantic_3d,
                       evaluate_semantic, load_semantic_checkpoint,
                       train_semantic)

CACHE_ENV = "PROMPTFIT_CACHE"

EXPECTED_ERRORS = (DatasetError, GenerationError, CheckpointFormatError,
                   CheckpointIntegrityError, DimensionError, PromptUsageError,
                   FloatingPointError, ValueError, OSError)


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# run configuration: flat key=value text
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DataConfig:
    root: str = ""
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    stratify: bool = True
    seed: int = 0


@dataclasses.dataclass
class EvalConfig:
    n_corrections: int = 7
    start_kinds: Tuple[str, ...] = ("point", "box")
    use_mask_prompt: bool = False
    strategy: str = "derive=box_and_mask,stop_iou=0.7,n_points=1"
    seed: int = 0


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    objective: ObjectiveConfig = dataclasses.field(
        default_factory=lambda: PRESETS["medicosam"])
    # schedule defaults mirror the full-scale recipe (lr 1e-5, decay 0.9,
    # batch 7); desk-scale runs set schedule.* explicitly
    schedule: TrainSchedule = dataclasses.field(
        default_factory=lambda: TrainSchedule(lr=1e-5, max_iterations=300_000,
                                              batch_size=7))
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)


_BOOL_KEYS = {"model.with_segmentation_decoder", "objective.e_sem",
              "data.stratify", "eval.use_mask_prompt"}
_INT_KEYS = {"model.image_size", "model.patch_size", "model.embed_dim",
             "model.encoder_depth", "model.decoder_channels",
             "objective.n_obj", "objective.n_steps",
             "schedule.max_iterations", "schedule.batch_size",
             "schedule.val_interval", "schedule.seed", "data.seed",
             "eval.n_corrections", "eval.seed"}
_FLOAT_KEYS = {"objective.p_box", "objective.p_mask",
               "objective.box_distortion", "schedule.lr", "schedule.lr_decay",
               "schedule.weight_decay", "data.train_fraction",
               "data.val_fraction", "data.test_fraction"}
_STR_KEYS = {"objective.preset", "objective.mask_loss", "objective.iou_loss",
             "data.root", "eval.start_kinds", "eval.strategy"}
KNOWN_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _parse_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_config_pairs(text: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, "
                             f"got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KNOWN_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: Dict[str, str]) -> RunConfig:
    def _coerce(key: str, value: str):
        if key in _BOOL_KEYS:
            return _parse_bool(value)
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        return value

    sections: Dict[str, Dict[str, object]] = {
        "model": {}, "objective": {}, "schedule": {}, "data": {}, "eval": {}}
    for key, value in pairs.items():
        section, _, name = key.partition(".")
        sections[section][name] = _coerce(key, value)

    objective_kwargs = dict(sections["objective"])
    preset_name = objective_kwargs.pop("preset", None)
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ValueError(f"unknown objective.preset {preset_name!r}; "
                             f"options: {sorted(PRESETS)}")
        objective = dataclasses.replace(PRESETS[preset_name],
                                        **objective_kwargs)
    else:
        objective = dataclasses.replace(PRESETS["medicosam"],
                                        **objective_kwargs)

    eval_kwargs = dict(sections["eval"])
    if "start_kinds" in eval_kwargs:
        kinds = tuple(k.strip() for k in str(eval_kwargs["start_kinds"]).split(",")
                      if k.strip())
        eval_kwargs["start_kinds"] = kinds

    return RunConfig(
        model=ModelConfig(**sections["model"]),
        objective=objective,
        schedule=dataclasses.replace(
            TrainSchedule(lr=1e-5, max_iterations=300_000, batch_size=7),
            **sections["schedule"]),
        data=DataConfig(**sections["data"]),
        eval=EvalConfig(**eval_kwargs),
    )


def load_config(path) -> RunConfig:
    return config_from_pairs(parse_config_pairs(Path(path).read_text()))


def serialize_config(cfg: RunConfig) -> str:
    """Normalized full key=value form; parse(serialize(cfg)) == cfg."""
    def _fmt(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return str(value)

    lines = []
    for section_name in ("data", "eval", "model", "objective", "schedule"):
        section = getattr(cfg, section_name)
        for f in sorted(dataclasses.fields(section), key=lambda f: f.name):
            key = f"{section_name}.{f.name}"
            if key not in KNOWN_KEYS:
                continue
            lines.append(f"{key}={_fmt(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

class CachedEncoderModel:
    """Wraps a model so encode_image memoizes embeddings on disk, keyed by
    checkpoint hash + image hash. Everything else delegates."""

    def __init__(self, model, cache_dir: Path, model_key: str):
        self._model = model
        self._dir = Path(cache_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._key = model_key

    def __getattr__(self, name):
        return getattr(self._model, name)

    def encode_image(self, image):
        import torch

        arr = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
        digest = hashlib.sha256(self._key.encode() + arr.tobytes()).hexdigest()
        path = self._dir / f"{digest}.npy"
        if path.is_file():
            return ImageEmbedding(grid=torch.from_numpy(np.load(path)))
        embedding = self._model.encode_image(image)
        grid = embedding.grid
        if hasattr(grid, "detach"):
            grid = grid.detach().cpu().numpy()
        fd, tmp = tempfile.mkstemp(dir=self._dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                np.save(f, np.asarray(grid))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return embedding


def _maybe_cache(model, checkpoint_path) -> object:
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return model
    digest = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
    return CachedEncoderModel(model, Path(cache_dir), digest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_2d(path) -> Dataset2D:
    dataset = load_dataset(path)
    if isinstance(dataset, Dataset3D):
        dataset = flatten_to_2d(dataset)  # 3D data split into separate images
    return dataset


def _split_dataset(dataset, data_cfg: DataConfig) -> None:
    spec = SplitSpec(fractions=(data_cfg.train_fraction,
                                data_cfg.val_fraction,
                                data_cfg.test_fraction),
                     stratify_by_modality=data_cfg.stratify,
                     seed=data_cfg.seed)
    apply_split(dataset, make_split(dataset, spec))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if not cfg.data.root:
        raise ValueError("config must set data.root")
    dataset = _load_2d(cfg.data.root)
    _split_dataset(dataset, cfg.data)
    model_cfg = cfg.model
    if cfg.objective.e_sem and not model_cfg.with_segmentation_decoder:
        model_cfg = dataclasses.replace(model_cfg,
                                        with_segmentation_decoder=True)
    model = PromptableSegmenter(model_cfg, seed=cfg.schedule.seed)
    result = train(model, dataset, cfg.objective, cfg.schedule, args.out,
                   resume=args.resume)
    write_atomic(Path(args.out) / "run_config.txt", serialize_config(cfg))
    print(f"trained {result.iterations} iterations; best val "
          f"{result.best_val}; checkpoints in {args.out}")
    return 0


def cmd_eval_2d(args) -> int:
    model = _maybe_cache(load_checkpoint(args.checkpoint), args.checkpoint)
    dataset = _load_2d(args.dataset)
    kinds = ("point", "box") if args.start == "both" else (args.start,)
    settings = interactive2d.EvalSettings(
        n_corrections=args.iterations, start_kinds=kinds,
        use_mask_prompt=args.use_mask_prompt, seed=args.seed,
        workers=args.workers)
    report = interactive2d.evaluate_dataset(
        model, dataset, settings, model_id=Path(args.checkpoint).stem,
        split=args.split)
    out = Path(args.out)
    write_atomic(out / "traces.csv", report.to_csv())
    write_atomic(out / "summary.json", report.summary_json())
    write_atomic(out / "plot_data.csv", report.plot_data_csv())
    if args.baseline_report:
        baseline = json.loads(Path(args.baseline_report).read_text())
        write_atomic(out / "delta.csv",
                     _summaries_delta_csv(report.summary(), baseline))
    print(f"evaluated {len(report.traces)} traces -> {out}")
    return 0


def _summaries_delta_csv(ours: List[dict], baseline: List[dict]) -> str:
    base = {(e["start_kind"], bool(e.get("use_mask_prompt", False))): e
            for e in baseline}
    lines = ["start_kind,iteration,delta_mean"]
    for entry in ours:
        key = (entry["start_kind"], bool(entry.get("use_mask_prompt", False)))
        other = base.get(key)
        if other is None:
            continue
        for i, (a, b) in enumerate(zip(entry["mean_dice"],
                                       other["mean_dice"])):
            lines.append(f"{entry['start_kind']},{i},{a - b!r}")
    return "\n".join(lines) + "\n"


def cmd_eval_3d(args) -> int:
    model = _maybe_cache(load_checkpoint(args.checkpoint), args.checkpoint)
    dataset = load_dataset(args.dataset)
    if not isinstance(dataset, Dataset3D):
        raise DatasetError(f"{args.dataset} is not a 3D dataset")
    kinds = ("point", "box") if args.start == "both" else (args.start,)
    out = Path(args.out)
    model_id = Path(args.checkpoint).stem
    for kind in kinds:
        if args.grid_search:
            val_dataset = load_dataset(args.val_dataset)
            if not isinstance(val_dataset, Dataset3D):
                raise DatasetError(f"{args.val_dataset} is not a 3D dataset")
            search = interactive3d.grid_search(
                model, val_dataset, start_kind=kind, seed=args.seed,
                workers=args.workers)
            write_atomic(out / f"grid_{kind}.csv", search.to_csv())
            strategy = search.best
        else:
            strategy = interactive3d.PropagationStrategy.from_string(
                args.strategy)
        report = interactive3d.evaluate_volume_dataset(
            model, dataset, strategy, kind, seed=args.seed, split=args.split,
            model_id=model_id, workers=args.workers)
        write_atomic(out / f"volumes_{kind}.csv", report.to_csv())
        write_atomic(out / f"summary_{kind}.json", report.summary_json())
        print(f"{kind}: mean dice {report.mean_dice():.4f} over "
              f"{len(report.results)} objects ({strategy.to_string()})")
    return 0


def cmd_train_semantic(args) -> int:
    if args.dim == 2:
        model = build_semantic_2d(args.checkpoint, args.classes,
                                  init_decoder=args.init_decoder)
    else:
        model = build_semantic_3d(args.checkpoint, args.classes,
                                  init_decoder=args.init_decoder)
    dataset = load_dataset(args.dataset)
    if args.dim == 2 and isinstance(dataset, Dataset3D):
        dataset = flatten_to_2d(dataset)
    schedule = TrainSchedule()
    data_cfg = DataConfig()
    if args.config:
        cfg = load_config(args.config)
        schedule, data_cfg = cfg.schedule, cfg.data
    _split_dataset(dataset, data_cfg)
    result = train_semantic(model, dataset, schedule, args.out)
    print(f"semantic training done; best val dice {result.best_val_dice}; "
          f"checkpoints in {args.out}")
    return 0


def cmd_eval_semantic(args) -> int:
    model = load_semantic_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    report = evaluate_semantic(model, dataset, split=args.split,
                               model_id=Path(args.checkpoint).stem)
    out = Path(args.out)
    write_atomic(out / "per_class.csv", report.to_csv())
    write_atomic(out / "summary.json", report.summary_json())
    print(f"mean foreground dice {report.mean_foreground:.4f} -> {out}")
    return 0


def cmd_check_compat(args) -> int:
    base = ModelConfig() if args.base_image_size is None else ModelConfig(
        image_size=args.base_image_size)
    report = check_compatibility(args.checkpoint, base_config=base)
    text = report.to_json()
    sys.stdout.write(text)
    if args.out:
        write_atomic(args.out, text)
    return 0 if report.compatible else 1


def cmd_synth(args) -> int:
    root = generate_synthetic(args.kind, args.n, args.seed, args.size,
                              args.out)
    print(f"wrote {args.n} {args.kind} samples to {root}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptfit",
        description="Finetune and evaluate promptable segmentation models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with the interactive objective")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true",
                   help="resume from <out>/latest.pfit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval2d", help="simulated interactive 2D evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=7,
                   help="number of correction iterations")
    p.add_argument("--start", choices=("point", "box", "both"),
                   default="both")
    p.add_argument("--use-mask-prompt", action="store_true")
    p.add_argument("--baseline-report",
                   help="summary.json of a baseline run; emits delta.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval_2d)

    p = sub.add_parser("eval3d", help="prompt-propagation 3D evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy",
                   default="derive=box_and_mask,stop_iou=0.7,n_points=1")
    p.add_argument("--grid-search", action="store_true",
                   help="pick the strategy by grid search on --val-dataset")
    p.add_argument("--val-dataset")
    p.add_argument("--start", choices=("point", "box", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval_3d)

    p = sub.add_parser("train-semantic",
                       help="finetune a semantic head on a pretrained encoder")
    p.add_argument("--checkpoint", required=True,
                   help="pretrained interactive checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, choices=(2, 3), required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--init-decoder", action="store_true",
                   help="load the jointly pretrained segmentation decoder")
    p.add_argument("--config", help="optional run config for schedule/data")
    p.set_defaults(func=cmd_train_semantic)

    p = sub.add_parser("eval-semantic", help="per-class Dice evaluation")
    p.add_argument("--checkpoint", required=True,
                   help="semantic checkpoint (from train-semantic)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_eval_semantic)

    p = sub.add_parser("check-compat",
                       help="architecture compatibility report (exit 1 if "
                            "incompatible)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base-image-size", type=int, default=None,
                   help="base architecture input size (default: reference)")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_check_compat)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--kind", choices=("shapes2d", "shapes3d"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "grid_search", False) and not args.val_dataset:
        parser.error("--grid-search requires --val-dataset")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
