"""Command-line pipeline: gen-synthetic, tile, split, stats, train, eval, experiment.

Exit codes: 0 success, 2 usage or input error, 3 stratification failure,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots
from tqdm import tqdm

import data_pipeline as dp
import eval_metrics as em
import imbalance_losses as il
import tensor_core as tc
import vit_model as vm
from calculations import scene_footprint_km
from errors import IceClassifierError, InputError, NumericalError, ParameterError, StratificationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
TRAIN_LOG_HEADER = ["step", "loss", "train_acc", "wall_ms"]
EXPERIMENT_HEADER = ["config", "accuracy", "weighted_f1", "minority_recall", "minority_precision"]
PREDICTIONS_HEADER = ["scene_id", "row0", "col0", "true", "predicted"]
CHECKPOINT_NAME = "checkpoint.icevit"
TRAIN_LOG_NAME = "train_log.csv"
DEFAULT_MINORITY_CLASS = 4  # Old/Multi-Year Ice in the default taxonomy


class UsageError(InputError):
    """Flags or configuration are missing or contradictory."""


# Configuration


def _from_mapping(cls, values: Mapping[str, Any], what: str):
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise InputError(f"unknown {what} settings: {sorted(unknown)}")
    return cls(**values)


def load_json(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise InputError(f"{path}: expected a JSON object")
    return values


def merge_settings(*layers: Mapping[str, Any]) -> dict[str, Any]:
    """Later layers win; None values never override."""
    merged: dict[str, Any] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    return merged


@dataclass(frozen=True)
class TrainConfig:
    seed: int | None = None
    model: str = "vit_test"
    model_overrides: dict[str, Any] = field(default_factory=dict)
    loss: str = "ce"
    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    steps: int = 500
    log_every: int = 1
    clip_norm: float | None = None
    no_wall_time: bool = False
    scenes: str | None = None
    manifest: str | None = None
    stats: str | None = None
    taxonomy: str = str(dp.DEFAULT_TAXONOMY_PATH)

    def __post_init__(self):
        if self.loss not in il.LOSS_NAMES:
            raise ParameterError(f"unknown loss {self.loss!r}; choose from {il.LOSS_NAMES}")
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ParameterError(
                f"steps, batch_size and log_every must be >= 1 (got {self.steps}, {self.batch_size}, {self.log_every})"
            )
        if self.alpha is not None and self.loss != "focal":
            raise ParameterError(f"alpha only applies to the focal loss, not {self.loss!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ParameterError(f"clip_norm must be positive, got {self.clip_norm}")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        values = dict(values)
        if values.get("alpha") is not None:
            values["alpha"] = tuple(values["alpha"])
        return _from_mapping(cls, values, "training")

    def require_seed(self) -> int:
        if self.seed is None:
            raise UsageError("a seed is required: pass --seed or set 'seed' in the config")
        return int(self.seed)

    def focal_params(self) -> il.FocalParams:
        return il.FocalParams(self.gamma, self.alpha)

    def adam_state(self) -> tc.AdamState:
        return tc.AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


@dataclass(frozen=True)
class CorpusConfig:
    """Synthetic data preparation run ahead of an experiment."""

    num_scenes: int = 4
    generator: dict[str, Any] = field(default_factory=dict)
    patch_size: int = 8
    purity: float = 0.7
    block_size: int = 4
    ratio: float = 0.8
    tolerance: float = 0.02


@dataclass(frozen=True)
class TileConfig:
    patch_size: int = 64
    purity: float = 0.7
    block_size: int = 4
    workers: int = 1


@dataclass(frozen=True)
class SplitConfig:
    seed: int | None = None
    ratio: float = 0.8
    block_size: int = 4
    tolerance: float = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int | None = None
    runs: tuple[dict[str, Any], ...] = (
        {"name": "ce", "loss": "ce"},
        {"name": "wce", "loss": "wce"},
        {"name": "focal", "loss": "focal", "gamma": 2.0},
    )
    train: dict[str, Any] = field(default_factory=dict)
    corpus: dict[str, Any] | None = None
    scenes: str | None = None
    manifest: str | None = None
    stats: str | None = None
    taxonomy: str = str(dp.DEFAULT_TAXONOMY_PATH)
    minority_class: int | str = DEFAULT_MINORITY_CLASS
    eval_split: str = "val"

    def __post_init__(self):
        if not self.runs:
            raise ParameterError("an experiment needs at least one run")
        names = [r.get("name") for r in self.runs]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ParameterError(f"experiment runs need unique names, got {names}")
        if self.eval_split not in dp.SPLITS:
            raise ParameterError(f"eval_split must be one of {dp.SPLITS}, got {self.eval_split!r}")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        values = dict(values)
        if "runs" in values:
            values["runs"] = tuple(dict(r) for r in values["runs"])
        return _from_mapping(cls, values, "experiment")


def resolve_class(taxonomy: dp.ClassTaxonomy, value: int | str) -> int:
    if isinstance(value, str) and not value.isdigit():
        return taxonomy.index_of(value)
    index = int(value)
    if not 0 <= index < taxonomy.num_classes:
        raise InputError(f"class index {index} outside the {taxonomy.num_classes}-class taxonomy")
    return index


# Training


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    loss: float
    train_acc: float
    wall_ms: int

    def row(self) -> list[str]:
        return [str(self.step), f"{self.loss:.8g}", f"{self.train_acc:.6f}", str(self.wall_ms)]


@dataclass
class TrainResult:
    params: vm.ViTParams
    model_config: vm.ViTConfig
    log: list[TrainLogRecord]
    class_weights: il.ClassWeights | None = None


def _progress_enabled() -> bool:
    return logger.isEnabledFor(logging.INFO)


def train_loop(
    images: np.ndarray,
    labels: np.ndarray,
    model_config: vm.ViTConfig,
    config: TrainConfig,
    weights: il.ClassWeights | None = None,
) -> TrainResult:
    """Seeded-shuffle minibatch Adam loop over preloaded, normalised patches."""
    seed = config.require_seed()
    if len(images) != len(labels) or len(images) == 0:
        raise InputError(f"{len(images)} images for {len(labels)} labels")
    if config.loss == "wce" and weights is None:
        weights = il.class_weights_from_counts(np.bincount(labels, minlength=model_config.num_classes))
    params = vm.init_params(model_config, seed)
    state = config.adam_state()
    order_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    n = len(images)
    batch = min(config.batch_size, n)
    order = order_rng.permutation(n)
    cursor = 0
    log: list[TrainLogRecord] = []
    correct = seen = 0
    loss_value = 0.0
    start = time.perf_counter()
    for step in tqdm(range(1, config.steps + 1), desc="training", disable=not _progress_enabled()):
        if cursor + batch > n:
            order = order_rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch
        try:
            with tc.Tape() as tape:
                logits = vm.forward(params, model_config, images[idx], train_mode=True, rng=dropout_rng)
                loss = il.compute_loss(config.loss, logits, labels[idx], weights, config.focal_params())
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericalError(f"loss became {loss_value}", step)
            grads = tc.gradients(tape, loss, params)
        except NumericalError as exc:
            raise NumericalError(f"non-finite value at training step {step}: {exc}", step) from exc
        if config.clip_norm is not None:
            grads, _ = tc.clip_grad_norm(grads, config.clip_norm)
        params, state = tc.adam_step(params, grads, state)
        correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
        seen += len(idx)
        if step % config.log_every == 0 or step == config.steps:
            wall = 0 if config.no_wall_time else int(round(1000 * (time.perf_counter() - start)))
            log.append(TrainLogRecord(step, loss_value, correct / seen, wall))
            correct = seen = 0
    logger.info("trained %d steps, final loss %.5f", config.steps, loss_value)
    return TrainResult(params, model_config, log, weights)


def write_train_log(log: Sequence[TrainLogRecord], path: Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TRAIN_LOG_HEADER)
    for record in log:
        writer.writerow(record.row())
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


def read_train_log(path: str | Path) -> list[TrainLogRecord]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    return [TrainLogRecord(int(r["step"]), float(r["loss"]), float(r["train_acc"]), int(r["wall_ms"])) for r in rows]


def train_curve_figure(log: Sequence[TrainLogRecord], title: str = "Training curve") -> go.Figure:
    steps = [r.step for r in log]
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=steps, y=[r.loss for r in log], name="loss", mode="lines"), secondary_y=False)
    fig.add_trace(go.Scatter(x=steps, y=[r.train_acc for r in log], name="train accuracy", mode="lines"), secondary_y=True)
    fig.update_layout(title=title, xaxis_title="Step", margin=dict(l=0, r=0, t=50, b=0))
    fig.update_yaxes(title_text="Loss", secondary_y=False)
    fig.update_yaxes(title_text="Accuracy", range=[0, 1], secondary_y=True)
    return fig


@dataclass
class PatchSet:
    records: list[dp.PatchRecord]
    images: np.ndarray
    labels: np.ndarray


def load_patch_set(
    manifest: dp.SplitManifest, split: str, scenes: Mapping[str, dp.SceneRaster], stats: dp.NormalizationStats
) -> PatchSet:
    records = manifest.records(split)
    if not records:
        raise InputError(f"manifest has no {split!r} patches")
    images, labels = dp.extract_patches(records, scenes, stats)
    return PatchSet(records, images, labels)


def _require_path(value: str | None, flag: str) -> Path:
    if value is None:
        raise UsageError(f"{flag} is required")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist ({flag})")
    return path


def run_training(config: TrainConfig, out_dir: Path) -> Path:
    """Train from manifest/stats/scenes and write checkpoint, log and curve into out_dir."""
    seed = config.require_seed()
    taxonomy = dp.load_taxonomy(_require_path(config.taxonomy, "--taxonomy"))
    manifest = dp.read_manifest(_require_path(config.manifest, "--manifest"))
    stats = dp.read_stats(_require_path(config.stats, "--stats"))
    scenes = dp.SceneStore(_require_path(config.scenes, "--scenes"))

    train_records = manifest.records("train")
    if train_records and stats.manifest_hash and stats.manifest_hash != dp.manifest_hash(train_records):
        logger.warning("stats were computed from a different train split than %s", config.manifest)
    patches = load_patch_set(manifest, "train", scenes, stats)
    k = taxonomy.num_classes
    if patches.labels.max() >= k:
        raise InputError(f"manifest holds class {int(patches.labels.max())} but the taxonomy has {k} classes")
    patch_size = patches.records[0].patch_size
    model_config = vm.preset(config.model, **{"image_size": patch_size, "num_classes": k, **config.model_overrides})
    if model_config.image_size != patch_size or model_config.num_classes != k:
        raise UsageError(
            f"model expects {model_config.image_size}px / {model_config.num_classes} classes, "
            f"data has {patch_size}px / {k} classes"
        )
    logger.info(
        "training %s (%d parameters) with %s loss on %d patches",
        config.model,
        vm.count_params(model_config),
        config.loss,
        len(patches.labels),
    )
    weights = None
    if config.loss == "wce":
        weights = il.class_weights_from_counts(np.bincount(patches.labels, minlength=k))
    result = train_loop(patches.images, patches.labels, model_config, config, weights)

    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": seed,
        "steps": config.steps,
        "loss": config.loss,
        "gamma": config.gamma if config.loss == "focal" else None,
        "class_names": list(taxonomy.names),
        "patch_size": patch_size,
        "stats_hash": stats.manifest_hash,
        "class_weights": list(weights.weights) if weights else None,
    }
    checkpoint = vm.save_checkpoint(result.params, model_config, meta, out_dir / CHECKPOINT_NAME)
    write_train_log(result.log, out_dir / TRAIN_LOG_NAME)
    html = train_curve_figure(result.log).to_html(include_plotlyjs="cdn", full_html=True, div_id="train-curve")
    (out_dir / "train_curve.html").write_text(html, encoding="utf-8")
    return checkpoint


# Evaluation


@dataclass
class EvalResult:
    confusion: em.ConfusionMatrix
    report: em.MetricsReport


def run_evaluation(
    checkpoint_path: Path,
    manifest_path: Path,
    stats_path: Path,
    scenes_dir: Path,
    taxonomy_path: Path,
    split: str,
    out_dir: Path,
) -> EvalResult:
    checkpoint = vm.load_checkpoint(checkpoint_path)
    taxonomy = dp.load_taxonomy(taxonomy_path)
    config = checkpoint.config
    if config.num_classes != taxonomy.num_classes:
        raise UsageError(
            f"checkpoint has {config.num_classes} classes, taxonomy {taxonomy_path} has {taxonomy.num_classes}"
        )
    names = checkpoint.meta.get("class_names")
    if names is not None and tuple(names) != taxonomy.names:
        raise UsageError(f"checkpoint classes {names} differ from taxonomy classes {list(taxonomy.names)}")
    manifest = dp.read_manifest(manifest_path)
    stats = dp.read_stats(stats_path)
    patches = load_patch_set(manifest, split, dp.SceneStore(scenes_dir), stats)
    if patches.images.shape[-1] != config.image_size:
        raise UsageError(f"patches are {patches.images.shape[-1]}px, model expects {config.image_size}px")

    predicted = vm.predict_classes(checkpoint.params, config, patches.images)
    cm = em.confusion_matrix(patches.labels, predicted, taxonomy.num_classes, taxonomy.names)
    report = em.build_report(cm)
    em.render_report(cm, report, out_dir)
    write_predictions(patches.records, patches.labels, predicted, out_dir / "predictions.csv")
    return EvalResult(cm, report)


def write_predictions(records: Sequence[dp.PatchRecord], true: np.ndarray, predicted: np.ndarray, path: Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PREDICTIONS_HEADER)
    for record, t, p in zip(records, true, predicted):
        writer.writerow([record.scene_id, record.row0, record.col0, int(t), int(p)])
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


# Commands


def _seed(args: argparse.Namespace, settings: Mapping[str, Any] | None = None) -> int:
    seed = args.seed if args.seed is not None else (settings or {}).get("seed")
    if seed is None:
        raise UsageError("--seed is required")
    return int(seed)


def _out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _emit(payload: Mapping[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def write_corpus(corpus: Sequence[tuple[dp.SceneRaster, dp.LabelRaster]], out_dir: Path) -> None:
    for scene, labels in corpus:
        scene_path, label_path = dp.scene_paths(out_dir, scene.scene_id)
        dp.write_scene(scene, scene_path)
        dp.write_labels(labels, label_path)


def generator_config(settings: Mapping[str, Any]) -> dp.GeneratorConfig:
    return dp.GeneratorConfig.from_dict(settings)


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    settings = merge_settings(
        load_json(args.config),
        {"scene_size": args.scene_size, "looks": args.looks, "land_share": args.land_share},
    )
    num_scenes = settings.pop("num_scenes", None)
    if args.scenes is not None:
        num_scenes = args.scenes
    seed = _seed(args, settings)
    settings.pop("seed", None)
    if num_scenes is None or int(num_scenes) < 1:
        raise UsageError(f"--scenes must be >= 1, got {num_scenes}")
    config = generator_config(settings)
    out_dir = _out(args)
    corpus = dp.generate_synthetic_corpus(config, int(num_scenes), seed)
    write_corpus(corpus, out_dir)
    width_km, height_km = scene_footprint_km(config.scene_size, config.scene_size, config.pixel_spacing_m)
    logger.info("wrote %d scenes (%.1f x %.1f km each) to %s", len(corpus), width_km, height_km, out_dir)
    _emit({"scenes": len(corpus), "out": str(out_dir)})
    return 0


def cmd_tile(args: argparse.Namespace) -> int:
    flags = {"patch_size": args.patch_size, "purity": args.purity, "block_size": args.block_size, "workers": args.workers}
    config = _from_mapping(TileConfig, merge_settings(load_json(args.config), flags), "tiling")
    taxonomy = dp.load_taxonomy(args.taxonomy)
    records = dp.tile_directory(
        _require_path(args.scenes, "--scenes"),
        taxonomy,
        int(config.patch_size),
        float(config.purity),
        int(config.block_size),
        int(config.workers),
    )
    if not records:
        raise InputError("no patch passed the purity and validity filters")
    out = _out(args)
    dp.write_manifest(out, records)
    _emit({"patches": len(records), "out": str(out)})
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    flags = {"ratio": args.ratio, "block_size": args.block_size, "tolerance": args.tolerance}
    config = _from_mapping(SplitConfig, merge_settings(load_json(args.config), flags), "split")
    seed = _seed(args, {"seed": config.seed})
    taxonomy = dp.load_taxonomy(args.taxonomy)
    source = dp.read_manifest(_require_path(args.manifest, "--manifest"))
    records = [r for r, _ in source.entries]
    try:
        manifest = dp.stratified_block_split(
            records,
            float(config.ratio),
            int(config.block_size),
            seed,
            float(config.tolerance),
            taxonomy.num_classes,
        )
    except StratificationError as exc:
        _emit({"status": "failed", "divergence": round(exc.divergence, 6)})
        raise
    out = _out(args)
    dp.write_manifest(out, manifest)
    _emit({"status": "ok", **manifest.summary(taxonomy.num_classes)})
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    manifest = dp.read_manifest(_require_path(args.manifest, "--manifest"))
    stats = dp.compute_norm_stats(manifest, dp.SceneStore(_require_path(args.scenes, "--scenes")), args.split)
    out = _out(args)
    dp.write_stats(stats, out)
    _emit({"count": stats.count, "out": str(out)})
    return 0


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    flags = {
        "seed": args.seed,
        "loss": args.loss,
        "gamma": args.gamma,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "steps": args.steps,
        "log_every": args.log_every,
        "clip_norm": args.clip_norm,
        "model": args.model,
        "scenes": args.scenes,
        "manifest": args.manifest,
        "stats": args.stats,
        "taxonomy": args.taxonomy,
        "no_wall_time": True if args.no_wall_time else None,
    }
    return TrainConfig.from_dict(merge_settings(load_json(args.config), flags))


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config_from_args(args)
    config.require_seed()
    checkpoint = run_training(config, _out(args))
    _emit({"checkpoint": str(checkpoint), "steps": config.steps, "loss": config.loss})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    result = run_evaluation(
        _require_path(args.checkpoint, "--checkpoint"),
        _require_path(args.manifest, "--manifest"),
        _require_path(args.stats, "--stats"),
        _require_path(args.scenes, "--scenes"),
        _require_path(args.taxonomy, "--taxonomy"),
        args.split,
        _out(args),
    )
    _emit({"accuracy": result.report.accuracy, "weighted_f1": result.report.weighted_f1, "total": result.report.total})
    return 0


def prepare_corpus(corpus: CorpusConfig, taxonomy_path: Path, seed: int, data_dir: Path) -> tuple[Path, Path, Path]:
    """Generate, tile, split and compute stats for an experiment's synthetic data."""
    scenes_dir = data_dir / "scenes"
    write_corpus(dp.generate_synthetic_corpus(generator_config(corpus.generator), corpus.num_scenes, seed), scenes_dir)
    taxonomy = dp.load_taxonomy(taxonomy_path)
    records = dp.tile_directory(scenes_dir, taxonomy, corpus.patch_size, corpus.purity, corpus.block_size)
    manifest = dp.stratified_block_split(
        records, corpus.ratio, corpus.block_size, seed, corpus.tolerance, taxonomy.num_classes
    )
    manifest_path = dp.write_manifest(data_dir / "manifest.csv", manifest)
    stats = dp.compute_norm_stats(manifest, dp.SceneStore(scenes_dir))
    stats_path = dp.write_stats(stats, data_dir / "stats.json")
    return scenes_dir, manifest_path, stats_path


@dataclass(frozen=True)
class ExperimentRow:
    config: str
    accuracy: float
    weighted_f1: float
    minority_recall: float
    minority_precision: float

    def row(self) -> list[str]:
        return [
            self.config,
            f"{self.accuracy:.6f}",
            f"{self.weighted_f1:.6f}",
            f"{self.minority_recall:.6f}",
            f"{self.minority_precision:.6f}",
        ]


def run_experiment(
    config: ExperimentConfig, out_dir: Path, overrides: Mapping[str, Any] | None = None
) -> list[ExperimentRow]:
    """Train and evaluate each configured run on shared data and seed."""
    overrides = overrides or {}
    seed = config.seed
    if seed is None:
        raise UsageError("--seed is required")
    taxonomy_path = Path(config.taxonomy)
    taxonomy = dp.load_taxonomy(taxonomy_path)
    minority = resolve_class(taxonomy, config.minority_class)
    if config.corpus is not None:
        corpus = _from_mapping(CorpusConfig, config.corpus, "corpus")
        scenes_dir, manifest_path, stats_path = prepare_corpus(corpus, taxonomy_path, seed, out_dir / "data")
    else:
        scenes_dir = _require_path(config.scenes, "scenes")
        manifest_path = _require_path(config.manifest, "manifest")
        stats_path = _require_path(config.stats, "stats")

    rows = []
    for run in config.runs:
        name = run["name"]
        settings = merge_settings(
            config.train,
            {k: v for k, v in run.items() if k != "name"},
            overrides,
            {
                "seed": seed,
                "scenes": str(scenes_dir),
                "manifest": str(manifest_path),
                "stats": str(stats_path),
                "taxonomy": str(taxonomy_path),
            },
        )
        run_dir = out_dir / name
        logger.info("experiment run %r", name)
        checkpoint = run_training(TrainConfig.from_dict(settings), run_dir)
        result = run_evaluation(
            checkpoint, manifest_path, stats_path, scenes_dir, taxonomy_path, config.eval_split, run_dir
        )
        scores = result.report.scores_for(minority)
        rows.append(
            ExperimentRow(name, result.report.accuracy, result.report.weighted_f1, scores.recall, scores.precision)
        )
    write_experiment_table(rows, out_dir / "experiment.csv")
    return rows


def write_experiment_table(rows: Sequence[ExperimentRow], path: Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(EXPERIMENT_HEADER)
    for row in rows:
        writer.writerow(row.row())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


def cmd_experiment(args: argparse.Namespace) -> int:
    settings = merge_settings(load_json(args.config), {"seed": args.seed})
    config = ExperimentConfig.from_dict(settings)
    overrides = {"steps": args.steps, "no_wall_time": True if args.no_wall_time else None}
    rows = run_experiment(config, _out(args), {k: v for k, v in overrides.items() if v is not None})
    _emit({"runs": [dataclasses.asdict(r) for r in rows]})
    return 0


# Parser


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (required for randomised commands)")
    common.add_argument("--config", default=None, help="JSON run configuration; flags override its values")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="only log warnings; hide progress bars")
    common.add_argument("--checked", action="store_true", help="scan every tensor op for NaN/Inf")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="icevit", description="Sea-ice SAR patch classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write deterministic synthetic scenes")
    p.add_argument("--scenes", type=int, default=None, help="number of scenes")
    p.add_argument("--scene-size", type=int, default=None)
    p.add_argument("--looks", type=int, default=None, help="add Gamma speckle with this many looks")
    p.add_argument("--land-share", type=float, default=None)
    p.set_defaults(handler=cmd_gen_synthetic)

    p = sub.add_parser("tile", parents=[common], help="cut scenes into labelled patches")
    p.add_argument("--scenes", required=True, help="directory of scene/label files")
    p.add_argument("--taxonomy", default=str(dp.DEFAULT_TAXONOMY_PATH))
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--purity", type=float, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_tile)

    p = sub.add_parser("split", parents=[common], help="stratified, leakage-free train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", default=str(dp.DEFAULT_TAXONOMY_PATH))
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("stats", parents=[common], help="normalisation statistics from the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", default="train", choices=dp.SPLITS)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("train", parents=[common], help="train a ViT on the train split")
    p.add_argument("--manifest", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--scenes", default=None)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--model", default=None, choices=sorted(vm.PRESETS))
    p.add_argument("--loss", default=None, choices=il.LOSS_NAMES)
    p.add_argument("--gamma", type=float, default=None, help="focal loss gamma")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--no-wall-time", action="store_true", help="write 0 for wall_ms")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="confusion matrix and metrics for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--taxonomy", default=str(dp.DEFAULT_TAXONOMY_PATH))
    p.add_argument("--split", default="val", choices=dp.SPLITS)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="CE / W-CE / focal comparison table")
    p.add_argument("--steps", type=int, default=None, help="override steps for every run")
    p.add_argument("--no-wall-time", action="store_true")
    p.set_defaults(handler=cmd_experiment)
    return parser


def configure_logging(level: str, quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else getattr(logging, level),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level, args.quiet)
    handler: Callable[[argparse.Namespace], int] = args.handler
    checked = tc.checked_mode(True) if args.checked else contextlib.nullcontext()
    try:
        with checked:
            return handler(args)
    except IceClassifierError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
