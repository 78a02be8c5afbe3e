"""Command-line entry point.

Subcommands: ``partition`` (split a corpus into per-client manifests),
``pretrain-teacher`` (centralized teacher training), ``run`` (the
centralized / fed_unet / fed_ukd experiment matrix) and ``report``
(regenerate summary tables and plots from a finished run).  Every
command takes one YAML config; flags override config values.

Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import MODES, ConfigError, ExperimentConfig, PretrainConfig
from .data import (
    CorpusManifest,
    SegmentationSample,
    generate_synthetic_corpus,
    load_corpus,
    synthetic_legend,
    write_corpus,
)
from .federation import (
    ClientState,
    evaluate_mean_iou,
    evaluate_pixel_accuracy,
    run_centralized,
    run_federation,
)
from .metrics import (
    ClientRoundRecord,
    CompressionReport,
    MetricsCsvWriter,
    RoundRecord,
    compression_report,
    emit_report,
    parse_metrics_csv,
    write_metrics_csv,
)
from .models import build_student, build_teacher, load_weights, save_weights
from .partitioning import PartitionResult, partition_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _version_string() -> str:
    """Package version plus the git revision when one is discoverable."""
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=5,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return f"{__version__}+g{proc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_summary_record(
    config: ExperimentConfig, command: str, started: float, out_dir: Path
) -> Path:
    """The reproducibility record every command leaves behind."""
    record = {
        "command": command,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "version": _version_string(),
        "wall_time_seconds": round(time.monotonic() - started, 3),
        "mode": config.mode,
    }
    path = out_dir / f"{command.replace('-', '_')}_summary.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_corpora(
    config: ExperimentConfig,
) -> tuple[list[SegmentationSample], list[SegmentationSample], int]:
    """(train samples, validation samples, num_classes) per the corpus config."""
    if config.corpus.synthetic is not None:
        spec = config.corpus.synthetic
        train = generate_synthetic_corpus(
            spec.train_samples,
            spec.num_classes,
            (spec.height, spec.width),
            config.seed,
            class_cycle=spec.class_cycle,
            noise_sigma=spec.noise_sigma,
            prefix="syn",
        )
        val = generate_synthetic_corpus(
            spec.val_samples,
            spec.num_classes,
            (spec.height, spec.width),
            config.seed,
            class_cycle=spec.class_cycle,
            noise_sigma=spec.noise_sigma,
            index_offset=spec.train_samples,
            prefix="val",
        )
        return train, val, spec.num_classes
    manifest = CorpusManifest.load(config.corpus.manifest)
    train = load_corpus(manifest, target_size=config.corpus.resolution)
    val: list[SegmentationSample] = []
    if config.corpus.val_manifest is not None:
        val = load_corpus(
            CorpusManifest.load(config.corpus.val_manifest), target_size=config.corpus.resolution
        )
    return train, val, manifest.num_classes


def _write_client_manifests(
    result: PartitionResult, base: CorpusManifest, out_dir: Path
) -> list[Path]:
    """Per-client corpus manifests referencing the base corpus files."""
    by_id = {sample_id: (image, mask) for sample_id, image, mask in base.samples}
    legend_rel = os.path.relpath(base.root / base.legend_file, out_dir)
    written: list[Path] = []
    for client_id in sorted(result.assignments):
        rows = []
        for sample_id in result.assignments[client_id]:
            if sample_id not in by_id:
                raise RuntimeError(f"sample {sample_id!r} is not in the corpus manifest")
            image_rel, mask_rel = by_id[sample_id]
            rows.append(
                (
                    sample_id,
                    os.path.relpath(base.root / image_rel, out_dir),
                    os.path.relpath(base.root / mask_rel, out_dir),
                )
            )
        manifest = CorpusManifest(
            root=out_dir,
            legend_file=legend_rel,
            samples=tuple(rows),
            num_classes=base.num_classes,
        )
        written.append(manifest.save(out_dir / f"client_{client_id:02d}.manifest.json"))
    return written


def cmd_partition(config: ExperimentConfig, out_dir: Path) -> None:
    if config.partition is None:
        raise ConfigError("partition", "the partition command requires a partition spec")
    train, _, num_classes = _load_corpora(config)
    if not train:
        raise RuntimeError("corpus is empty; nothing to partition")
    if config.corpus.synthetic is not None:
        # Materialise the generated corpus so client manifests point at real files.
        base = write_corpus(train, synthetic_legend(num_classes), out_dir / "corpus")
    else:
        base = CorpusManifest.load(config.corpus.manifest)
    result = partition_dataset(train, config.partition, config.seed)
    result.save_manifest(out_dir / "partition_manifest.json")
    _write_client_manifests(result, base, out_dir)
    stats_payload = {
        "counts": {str(c): len(ids) for c, ids in sorted(result.assignments.items())},
        "unassigned": len(result.unassigned),
        "class_histograms": {
            str(c): {str(k): v for k, v in sorted(hist.items())}
            for c, hist in sorted(result.stats.items())
        },
    }
    (out_dir / "partition_stats.json").write_text(
        json.dumps(stats_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "partitioned %d samples across %d clients (%d unassigned)",
        len(train),
        len(result.assignments),
        len(result.unassigned),
    )


def _pretrain_teacher(
    config: ExperimentConfig,
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    num_classes: int,
    out_dir: Path,
):
    """Centralized teacher training; persists weights and a metrics CSV."""
    pretrain = config.pretrain if config.pretrain is not None else PretrainConfig()
    teacher_spec = config.teacher.to_spec(num_classes)
    # Pretraining keeps its own optimizer settings; see PretrainConfig.
    fed = dataclasses.replace(config.federation, momentum=pretrain.momentum)
    if pretrain.step_size is not None:
        fed = dataclasses.replace(fed, step_size=pretrain.step_size)
    weights, batches = run_centralized(fed, train, teacher_spec, epochs=pretrain.epochs)
    save_weights(weights, out_dir / "teacher.weights")
    if batches:
        validation_accuracy = (
            evaluate_pixel_accuracy(weights, val, batch_size=fed.batch_size) if val else None
        )
        history = [
            RoundRecord(
                round_index=0,
                clients=(
                    ClientRoundRecord.from_batches(
                        0, len(train), batches, bytes_down=0, bytes_up=0
                    ),
                ),
                validation_accuracy=validation_accuracy,
            )
        ]
    else:
        history = []
    write_metrics_csv(history, out_dir / "pretrain_metrics.csv")
    if history and history[0].validation_accuracy is not None:
        logger.info("teacher validation pixel accuracy: %.4f", history[0].validation_accuracy)
    return weights


def cmd_pretrain_teacher(config: ExperimentConfig, out_dir: Path) -> None:
    train, val, num_classes = _load_corpora(config)
    if not train:
        raise RuntimeError("corpus is empty; cannot pretrain")
    _pretrain_teacher(config, train, val, num_classes, out_dir)


def _run_centralized_mode(
    config: ExperimentConfig,
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    num_classes: int,
    out_dir: Path,
) -> None:
    if config.partition is not None:
        logger.warning("centralized mode ignores the partition spec")
    spec = (
        config.teacher.to_spec(num_classes)
        if config.train_model == "teacher"
        else config.student.to_spec(num_classes)
    )
    weights, batches = run_centralized(config.federation, train, spec)
    validation_accuracy = (
        evaluate_pixel_accuracy(weights, val, batch_size=config.federation.batch_size)
        if val
        else None
    )
    history = [
        RoundRecord(
            round_index=0,
            clients=(
                ClientRoundRecord.from_batches(0, len(train), batches, bytes_down=0, bytes_up=0),
            ),
            validation_accuracy=validation_accuracy,
        )
    ]
    weights_dir = out_dir / "weights"
    weights_dir.mkdir(parents=True, exist_ok=True)
    save_weights(weights, weights_dir / "final.weights")
    miou = (
        evaluate_mean_iou(weights, val, batch_size=config.federation.batch_size) if val else None
    )
    emit_report(
        history,
        out_dir,
        model_label=config.train_model,
        dataset_label=config.dataset_label,
        federated=False,
        accuracy=validation_accuracy,
        mean_iou_value=miou,
    )


def _run_federated_mode(
    config: ExperimentConfig,
    train: Sequence[SegmentationSample],
    val: Sequence[SegmentationSample],
    num_classes: int,
    out_dir: Path,
) -> None:
    assert config.partition is not None  # enforced by validate()
    result = partition_dataset(train, config.partition, config.seed)
    result.save_manifest(out_dir / "partition_manifest.json")
    if result.unassigned:
        logger.info("%d samples matched no client and stay unassigned", len(result.unassigned))

    teacher_weights = None
    if config.mode == "fed_ukd":
        teacher_spec = config.teacher.to_spec(num_classes)
        if config.teacher_weights is not None:
            teacher_weights = load_weights(config.teacher_weights, teacher_spec)
        else:
            logger.info("pretraining teacher (%d epochs)", (config.pretrain or PretrainConfig()).epochs)
            teacher_weights = _pretrain_teacher(config, train, val, num_classes, out_dir)

    student_spec = config.student.to_spec(num_classes)
    initial_student = build_student(student_spec, config.seed)
    by_id = {sample.sample_id: sample for sample in train}
    clients = [
        ClientState(
            client_id=client_id,
            dataset=[by_id[sample_id] for sample_id in result.assignments[client_id]],
            student=initial_student,
            teacher=teacher_weights,
        )
        for client_id in sorted(result.assignments)
    ]
    weights_dir = out_dir / "weights"
    weights_dir.mkdir(parents=True, exist_ok=True)

    writer = MetricsCsvWriter(out_dir / "metrics.csv")

    def on_round(record: RoundRecord, global_student) -> None:
        writer.append_round(record)
        save_weights(global_student, weights_dir / f"round_{record.round_index:03d}.weights")

    try:
        state = run_federation(
            config.federation,
            clients,
            initial_student,
            validation=val if val else None,
            on_round=on_round,
        )
    finally:
        writer.close()

    save_weights(state.global_student, weights_dir / "final.weights")
    accuracy = state.history[-1].validation_accuracy
    miou = (
        evaluate_mean_iou(state.global_student, val, batch_size=config.federation.batch_size)
        if val
        else None
    )
    compression: CompressionReport | None = None
    if teacher_weights is not None:
        compression = compression_report(teacher_weights, state.global_student)
    emit_report(
        state.history,
        out_dir,
        model_label="student",
        dataset_label=config.dataset_label,
        federated=True,
        compression=compression,
        accuracy=accuracy,
        mean_iou_value=miou,
    )


def cmd_run(config: ExperimentConfig, out_dir: Path) -> None:
    train, val, num_classes = _load_corpora(config)
    if not train:
        raise RuntimeError("corpus is empty; nothing to train on")
    if config.mode == "centralized":
        _run_centralized_mode(config, train, val, num_classes, out_dir)
    else:
        _run_federated_mode(config, train, val, num_classes, out_dir)


def cmd_report(config: ExperimentConfig, out_dir: Path) -> None:
    metrics_path = out_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise RuntimeError(f"no metrics.csv under {out_dir}; run an experiment first")
    history = parse_metrics_csv(metrics_path)
    if not history:
        raise RuntimeError(f"{metrics_path} has no data rows to report on")
    _, val, num_classes = _load_corpora(config)
    federated = config.mode != "centralized"
    model_label = "student" if federated else config.train_model
    accuracy = miou = None
    compression: CompressionReport | None = None
    final_path = out_dir / "weights" / "final.weights"
    if final_path.is_file():
        spec = (
            config.teacher.to_spec(num_classes)
            if (not federated and config.train_model == "teacher")
            else config.student.to_spec(num_classes)
        )
        weights = load_weights(final_path, spec)
        if val:
            accuracy = evaluate_pixel_accuracy(
                weights, val, batch_size=config.federation.batch_size
            )
            miou = evaluate_mean_iou(weights, val, batch_size=config.federation.batch_size)
        if config.mode == "fed_ukd":
            # Sizes depend only on the specs, so a fresh teacher suffices.
            compression = compression_report(
                build_teacher(config.teacher.to_spec(num_classes), config.seed), weights
            )
    emit_report(
        history,
        out_dir,
        model_label=model_label,
        dataset_label=config.dataset_label,
        federated=federated,
        compression=compression,
        accuracy=accuracy,
        mean_iou_value=miou,
    )


_COMMANDS = {
    "partition": cmd_partition,
    "pretrain-teacher": cmd_pretrain_teacher,
    "run": cmd_run,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedukd",
        description="Communication-efficient federated semantic segmentation experiments.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "partition": "split a corpus into per-client manifests",
        "pretrain-teacher": "train the teacher centrally and save its weights",
        "run": "execute a centralized, fed_unet, or fed_ukd experiment",
        "report": "regenerate summary tables and plots from a finished run",
    }
    for name, help_text in descriptions.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="experiment config file (YAML)")
        sub.add_argument("--seed", type=int, help="override the experiment seed")
        sub.add_argument("--out", help="override the output directory")
        sub.add_argument("--mode", choices=MODES, help="override the experiment mode")
        sub.add_argument("--rounds", type=int, help="override the number of federated rounds")
        sub.add_argument("--epochs", type=int, help="override local epochs per round")
        sub.add_argument("--alpha", type=float, help="override the loss blend weight")
        sub.add_argument("--temperature", type=float, help="override the distillation temperature")
        sub.add_argument("--clients", type=int, help="override the client count (quantity skew)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = ExperimentConfig.from_file(args.config).with_overrides(
            seed=args.seed,
            out=args.out,
            mode=args.mode,
            rounds=args.rounds,
            epochs=args.epochs,
            alpha=args.alpha,
            temperature=args.temperature,
            clients=args.clients,
        )
        config.validate(check_paths=True)
    except ConfigError as exc:
        logger.error("invalid config: %s", exc)
        return EXIT_CONFIG

    started = time.monotonic()
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](config, out_dir)
        _write_summary_record(config, args.command, started, out_dir)
    except ConfigError as exc:
        logger.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        logger.error("interrupted; partial outputs remain under %s", out_dir)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK
