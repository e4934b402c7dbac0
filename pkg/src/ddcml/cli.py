"""Command-line entry point.

Subcommands: phantom-gen, preprocess, train, evaluate, retrieve.  Every
option can come from a ``key = value`` config file via --config, with
command-line flags taking precedence.  All randomness flows from
explicit seeds, so every command is deterministic given its options.

Exit codes: 0 success, 2 data error, 64 usage error, 70 numeric failure.
The DDCML_LOG environment variable selects verbosity (quiet, info,
debug); messages go to stderr, results to files or stdout.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalx, retrieve
from .cae import DESK_SPEC, FULL_SPEC, NetworkSpec, build
from .errors import DataError, NumericError, UsageError
from .inorm import NormalizationConfig, normalize_intensity
from .loss import LossConfig
from .train import (
    TrainCase,
    TrainConfig,
    fit,
    group_kfold,
    load_checkpoint,
    save_checkpoint,
    select_training_extremes,
    write_trace,
)
from .volio import (
    crop_downsample,
    generate_corpus,
    load_manifest,
    read_volume,
    write_manifest,
    write_volume,
)

log = logging.getLogger("ddcml")


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def _channels(text: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"expected 4 comma-separated channels, got {text!r}")
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class Opt:
    """One merged option: CLI flag, config-file key, default."""

    name: str
    conv: type | object
    default: object = None
    help: str = ""
    required: bool = False


def _add_options(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    parser.add_argument("--config", help="key = value config file")
    for o in opts:
        flag = "--" + o.name.replace("_", "-")
        parser.add_argument(flag, dest=o.name, type=o.conv, default=None, help=o.help)


def parse_config(path) -> dict[str, str]:
    """Line-based ``key = value`` file; # starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _merge(args: argparse.Namespace, opts: list[Opt]) -> dict:
    """Flags win over config-file values; config wins over defaults."""
    from_file = parse_config(args.config) if args.config else {}
    known = {o.name for o in opts}
    unknown = sorted(set(from_file) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = {}
    for o in opts:
        value = getattr(args, o.name)
        if value is None and o.name in from_file:
            try:
                value = o.conv(from_file[o.name])
            except (ValueError, TypeError) as exc:
                raise UsageError(f"config key {o.name}: {exc}") from exc
        if value is None:
            value = o.default
        if value is None and o.required:
            raise UsageError(f"missing required option --{o.name.replace('_', '-')}")
        merged[o.name] = value
    return merged


def _resolve_spec(name: str, input_dims, channels) -> NetworkSpec:
    if input_dims is not None or channels is not None:
        if input_dims is None or channels is None:
            raise UsageError("custom spec needs both --input-dims and --channels")
        return NetworkSpec(input_dims=input_dims, block_channels=channels)
    named = {"desk": DESK_SPEC, "full": FULL_SPEC}
    if name not in named:
        raise UsageError(f"spec must be desk, full, or custom; got {name!r}")
    return named[name]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

PHANTOM_OPTS = [
    Opt("outdir", str, required=True, help="output directory"),
    Opt("count_per_class", int, 3, "subjects per severity grade"),
    Opt("dims", _dims, (32, 32, 32), "volume dimensions X,Y,Z"),
    Opt("seed", int, 0, "corpus seed"),
    Opt("texture_amplitude", float, 0.0, "per-subject ribbon texture strength"),
    Opt("gain_spread", float, 0.0, "per-subject intensity gain spread"),
    Opt("shape_jitter", float, 0.0, "per-subject brain semi-axis jitter"),
    Opt("position_jitter", float, 0.0, "per-subject head offset in voxels"),
    Opt("bias_field", float, 0.0, "per-subject intensity ramp slope bound"),
    Opt("edge_width", float, 0.0, "partial-volume edge ramp width in voxels"),
]


def cmd_phantom_gen(cfg: dict) -> int:
    outdir = Path(cfg["outdir"])
    records = generate_corpus(
        outdir,
        cfg["count_per_class"],
        cfg["dims"],
        cfg["seed"],
        texture_amplitude=cfg["texture_amplitude"],
        gain_spread=cfg["gain_spread"],
        shape_jitter=cfg["shape_jitter"],
        position_jitter=cfg["position_jitter"],
        bias_field=cfg["bias_field"],
        edge_width=cfg["edge_width"],
    )
    write_manifest(records, outdir / "manifest.csv")
    log.info("wrote %d volumes to %s", len(records), outdir)
    return 0


PREPROCESS_OPTS = [
    Opt("manifest", str, required=True, help="input manifest CSV"),
    Opt("outdir", str, required=True, help="output directory"),
    Opt("mu", float, 128.0, "target brain-mean intensity"),
    Opt("epsilon", float, 0.5, "convergence tolerance"),
    Opt("max_iter", int, 100, "iteration cap"),
    Opt("downsample_factor", int, None, "block-mean downsampling factor"),
    Opt("target_dims", _dims, None, "crop target after downsampling"),
]


def cmd_preprocess(cfg: dict) -> int:
    records = load_manifest(cfg["manifest"])
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    norm_cfg = NormalizationConfig(
        mu=cfg["mu"], epsilon=cfg["epsilon"], max_iter=cfg["max_iter"]
    )
    out_records, failures = [], []
    seen_names: set[str] = set()
    for rec in records:
        name = Path(rec.volume_path).stem + ".norm.vol"
        if name in seen_names:
            raise DataError(f"output name collision: {name}")
        seen_names.add(name)
        try:
            vol = read_volume(rec.volume_path)
            if cfg["downsample_factor"] is not None:
                vol = crop_downsample(
                    vol, cfg["downsample_factor"], cfg["target_dims"]
                )
            vol, iters = normalize_intensity(vol, norm_cfg)
        except (DataError, NumericError) as exc:
            log.error("%s: %s", rec.subject_id, exc)
            failures.append(rec.subject_id)
            continue
        out_path = outdir / name
        write_volume(vol, out_path)
        out_records.append(dataclasses.replace(rec, volume_path=out_path))
        log.debug("%s: normalized in %d iterations", rec.subject_id, iters)
    write_manifest(out_records, outdir / "manifest.csv")
    log.info("normalized %d/%d volumes", len(out_records), len(records))
    if failures:
        log.error("%d case(s) failed: %s", len(failures), ", ".join(failures))
        return 2
    return 0


TRAIN_OPTS = [
    Opt("manifest", str, required=True, help="preprocessed manifest CSV"),
    Opt("outdir", str, required=True, help="checkpoint directory"),
    Opt("spec", str, "desk", "network preset (desk or full)"),
    Opt("input_dims", _dims, None, "custom input dimensions"),
    Opt("channels", _channels, None, "custom block channels c1,c2,c3,c4"),
    Opt("alpha", float, 1.0, "metric-loss weight (0 = plain autoencoder)"),
    Opt("k_folds", int, 5, "cross-validation folds"),
    Opt("fold_seed", int, 0, "fold assignment seed"),
    Opt("init_seed", int, 0, "weight initialization seed base"),
    Opt("seed", int, 0, "training sampling seed base"),
    Opt("epochs", int, 30, "training epochs"),
    Opt("steps_per_epoch", int, 200, "optimizer steps per epoch"),
    Opt("learning_rate", float, 1e-3, "Adam learning rate"),
    Opt("jobs", int, 1, "concurrent fold training processes"),
]


def _train_fold_worker(task):
    fold_idx, spec, init_seed, cases, train_cfg = task
    model = build(spec, init_seed)
    model, trace = fit(model, cases, train_cfg)
    return fold_idx, model, trace


def cmd_train(cfg: dict) -> int:
    records = load_manifest(cfg["manifest"])
    spec = _resolve_spec(cfg["spec"], cfg["input_dims"], cfg["channels"])
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    if cfg["jobs"] < 1:
        raise UsageError(f"jobs must be >= 1, got {cfg['jobs']}")
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_steps_per_epoch=cfg["steps_per_epoch"],
        learning_rate=cfg["learning_rate"],
        rng_seed=cfg["seed"],
        loss=LossConfig(alpha=cfg["alpha"], class_count=2),
    )
    split = group_kfold(records, cfg["k_folds"], cfg["fold_seed"])
    tasks = []
    for fold_idx, (train_recs, _) in enumerate(split):
        extremes = select_training_extremes(list(train_recs))
        cases = [
            TrainCase(r.subject_id, r.class_label, read_volume(r.volume_path))
            for r in extremes
        ]
        fold_cfg = dataclasses.replace(train_cfg, rng_seed=cfg["seed"] + fold_idx)
        tasks.append((fold_idx, spec, cfg["init_seed"] + fold_idx, cases, fold_cfg))

    if cfg["jobs"] == 1:
        results = [_train_fold_worker(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=cfg["jobs"]
        ) as pool:
            results = list(pool.map(_train_fold_worker, tasks))
    for fold_idx, model, trace in sorted(results):
        save_checkpoint(model, outdir / f"fold{fold_idx}.ddck")
        write_trace(trace, outdir / f"fold{fold_idx}.trace.csv")
        final = trace[-1][3] if trace else float("nan")
        log.info("fold %d: %d steps, final loss %.6g", fold_idx, len(trace), final)
    return 0


EVALUATE_OPTS = [
    Opt("manifest", str, required=True, help="preprocessed manifest CSV"),
    Opt("checkpoints", str, required=True, help="directory of foldN.ddck files"),
    Opt("outdir", str, required=True, help="report directory"),
    Opt("k_folds", int, 5, "cross-validation folds (must match training)"),
    Opt("fold_seed", int, 0, "fold assignment seed (must match training)"),
    Opt("n_seeds", int, 10, "kmeans seeds per fold"),
    Opt("label", str, "ddcml", "row label in the summary table"),
]


def cmd_evaluate(cfg: dict) -> int:
    records = load_manifest(cfg["manifest"])
    ckpt_dir = Path(cfg["checkpoints"])
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    models = []
    for fold_idx in range(cfg["k_folds"]):
        path = ckpt_dir / f"fold{fold_idx}.ddck"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}")
        models.append(load_checkpoint(path))
    report, artifacts = evalx.evaluate_models(
        records,
        models,
        k_folds=cfg["k_folds"],
        fold_seed=cfg["fold_seed"],
        n_seeds=cfg["n_seeds"],
        log=log.info,
    )
    evalx.write_report(report, outdir / "report.csv")
    evalx.write_seed_accuracies(report, outdir / "seed_accuracies.csv")
    evalx.write_centroid_matrix(report.centroids, outdir / "centroids.csv")

    ids, labels, vecs = [], [], []
    for art in artifacts:
        ids.extend(art.val_all.case_ids)
        labels.extend(art.val_all.labels)
        vecs.extend(art.val_all.vectors)
    pooled = evalx.EmbeddingSet(tuple(ids), tuple(labels), np.stack(vecs))
    evalx.write_projection(pooled, outdir / "projection.csv")

    low, high = report.centroids.normalize_pair
    for art in artifacts:
        grades = [low if l == 0 else high for l in art.train_extremes.labels]
        index = retrieve.index_from_entries(
            art.train_extremes.case_ids, grades, art.train_extremes.vectors
        )
        retrieve.save_index(index, outdir / f"fold{art.fold}.ddix")

    summary = evalx.format_summary({cfg["label"]: report})
    (outdir / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return 0


RETRIEVE_OPTS = [
    Opt("index", str, required=True, help="DDIX index file"),
    Opt("volume", str, required=True, help="query volume (VOL1)"),
    Opt("checkpoint", str, required=True, help="encoder checkpoint (DDCK)"),
    Opt("k", int, 5, "neighbors to return"),
    Opt("mu", float, 128.0, "target brain-mean intensity"),
    Opt("epsilon", float, 0.5, "convergence tolerance"),
    Opt("max_iter", int, 100, "iteration cap"),
    Opt("downsample_factor", int, None, "block-mean downsampling factor"),
    Opt("target_dims", _dims, None, "crop target after downsampling"),
]


def cmd_retrieve(cfg: dict) -> int:
    if cfg["k"] < 1:
        raise UsageError(f"k must be >= 1, got {cfg['k']}")
    model = load_checkpoint(cfg["checkpoint"])
    index = retrieve.load_index(cfg["index"])
    vol = read_volume(cfg["volume"])
    if cfg["downsample_factor"] is not None:
        vol = crop_downsample(vol, cfg["downsample_factor"], cfg["target_dims"])
    norm_cfg = NormalizationConfig(
        mu=cfg["mu"], epsilon=cfg["epsilon"], max_iter=cfg["max_iter"]
    )
    vol, _ = normalize_intensity(vol, norm_cfg)
    z = model.encode(vol)
    results = retrieve.query(index, z, cfg["k"])
    print("rank,case_id,label,distance")
    for rank, (case_id, distance) in enumerate(results, start=1):
        print(f"{rank},{case_id},{index.label_of(case_id)},{distance:.10g}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "phantom-gen": (cmd_phantom_gen, PHANTOM_OPTS, "generate a phantom corpus"),
    "preprocess": (cmd_preprocess, PREPROCESS_OPTS, "normalize volume intensities"),
    "train": (cmd_train, TRAIN_OPTS, "train per-fold models"),
    "evaluate": (cmd_evaluate, EVALUATE_OPTS, "run the evaluation battery"),
    "retrieve": (cmd_retrieve, RETRIEVE_OPTS, "k-nearest-neighbor lookup"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddcml", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, opts, help_text) in _COMMANDS.items():
        cmd_parser = sub.add_parser(name, help=help_text)
        _add_options(cmd_parser, opts)
    return parser


class _StderrHandler(logging.StreamHandler):
    """Stream handler that follows reassignments of sys.stderr."""

    def __init__(self):
        super().__init__()

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging() -> None:
    level_name = os.environ.get("DDCML_LOG", "info").lower()
    level = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level_name, logging.INFO
    )
    log.setLevel(level)
    if not log.handlers:
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)


def main(argv=None) -> int:
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        command, opts, _ = _COMMANDS[args.command]
        merged = _merge(args, opts)
        return command(merged)
    except SystemExit as exc:  # argparse -h
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 70
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
