"""Evaluation metrics, training records and report emission.

Records are plain frozen dataclasses nested batch -> client-round ->
round; report emission flattens them into CSV files with one batch per
row plus a compact per-round summary and loss-curve plots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .data import IGNORE_INDEX
from .models import WeightSet, count_parameters, serialized_size

METRICS_CSV_COLUMNS = (
    "round",
    "client",
    "epoch",
    "batch",
    "L_P",
    "L_C",
    "L_t",
    "pixel_accuracy",
    "bytes_up",
    "bytes_down",
)


def _to_numpy(values: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def _pred_class_map(predicted: np.ndarray, target: np.ndarray) -> np.ndarray:
    if predicted.ndim == target.ndim + 1:
        predicted = predicted.argmax(axis=-3)
    if predicted.shape != target.shape:
        raise ValueError(
            f"prediction shape {predicted.shape} does not match target shape {target.shape}"
        )
    return predicted


def pixel_accuracy(
    predicted: torch.Tensor | np.ndarray, target: torch.Tensor | np.ndarray
) -> float:
    """Fraction of non-ignored pixels whose predicted class matches.

    ``predicted`` may be logits (one extra leading class axis) or a
    class-id map.  A target with no valid pixels is an error.
    """
    pred = _pred_class_map(_to_numpy(predicted), _to_numpy(target))
    tgt = _to_numpy(target)
    valid = tgt != IGNORE_INDEX
    total = int(valid.sum())
    if total == 0:
        raise ValueError("every pixel is ignored; accuracy is undefined")
    return float((pred[valid] == tgt[valid]).sum() / total)


def mean_iou(
    predicted: torch.Tensor | np.ndarray,
    target: torch.Tensor | np.ndarray,
    num_classes: int,
) -> float:
    """Mean intersection-over-union across classes present or predicted.

    Classes with an empty union are skipped rather than counted as 0 or
    1, so absent classes do not distort the mean.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    pred = _pred_class_map(_to_numpy(predicted), _to_numpy(target))
    tgt = _to_numpy(target)
    valid = tgt != IGNORE_INDEX
    if int(valid.sum()) == 0:
        raise ValueError("every pixel is ignored; IoU is undefined")
    scores: list[float] = []
    for class_id in range(num_classes):
        pred_c = (pred == class_id) & valid
        tgt_c = (tgt == class_id) & valid
        union = int((pred_c | tgt_c).sum())
        if union == 0:
            continue
        scores.append(int((pred_c & tgt_c).sum()) / union)
    return float(np.mean(scores))


@dataclass(frozen=True)
class BatchRecord:
    """Loss and accuracy trace for one optimisation step."""

    epoch: int
    batch: int
    distillation: float
    criterion: float
    combined: float
    pixel_accuracy: float

    def __post_init__(self) -> None:
        if self.epoch < 0 or self.batch < 0:
            raise ValueError(f"epoch/batch indices must be >= 0, got {self.epoch}/{self.batch}")
        for label, value in (
            ("distillation", self.distillation),
            ("criterion", self.criterion),
            ("combined", self.combined),
        ):
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{label} loss must be finite and >= 0, got {value}")
        if not 0.0 <= self.pixel_accuracy <= 1.0:
            raise ValueError(f"pixel_accuracy must lie in [0, 1], got {self.pixel_accuracy}")


@dataclass(frozen=True)
class ClientRoundRecord:
    """One client's local-training outcome for one round."""

    client_id: int
    num_samples: int
    mean_distillation: float
    mean_criterion: float
    mean_combined: float
    train_pixel_accuracy: float
    bytes_down: int
    bytes_up: int
    batches: tuple[BatchRecord, ...]

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.bytes_up < 0 or self.bytes_down < 0:
            raise ValueError("byte counts must be >= 0")

    @classmethod
    def from_batches(
        cls,
        client_id: int,
        num_samples: int,
        batches: Sequence[BatchRecord],
        *,
        bytes_down: int,
        bytes_up: int,
    ) -> "ClientRoundRecord":
        if not batches:
            raise ValueError("cannot summarise an empty batch trace")
        return cls(
            client_id=client_id,
            num_samples=num_samples,
            mean_distillation=float(np.mean([b.distillation for b in batches])),
            mean_criterion=float(np.mean([b.criterion for b in batches])),
            mean_combined=float(np.mean([b.combined for b in batches])),
            train_pixel_accuracy=float(np.mean([b.pixel_accuracy for b in batches])),
            bytes_down=bytes_down,
            bytes_up=bytes_up,
            batches=tuple(batches),
        )


@dataclass(frozen=True)
class RoundRecord:
    """All client records for one federated round plus optional validation."""

    round_index: int
    clients: tuple[ClientRoundRecord, ...]
    validation_accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.round_index < 0:
            raise ValueError(f"round_index must be >= 0, got {self.round_index}")
        if not self.clients:
            raise ValueError("a round must record at least one client")

    @property
    def bytes_transferred(self) -> int:
        return sum(c.bytes_up + c.bytes_down for c in self.clients)


@dataclass(frozen=True)
class CompressionReport:
    """Teacher-vs-student size comparison from exact counts."""

    teacher_parameters: int
    student_parameters: int
    teacher_bytes: int
    student_bytes: int

    def __post_init__(self) -> None:
        for label, value in (
            ("teacher_parameters", self.teacher_parameters),
            ("student_parameters", self.student_parameters),
            ("teacher_bytes", self.teacher_bytes),
            ("student_bytes", self.student_bytes),
        ):
            if value < 1:
                raise ValueError(f"{label} must be >= 1, got {value}")

    @property
    def parameter_ratio(self) -> float:
        return self.teacher_parameters / self.student_parameters

    @property
    def space_ratio(self) -> float:
        return self.teacher_bytes / self.student_bytes


def compression_report(teacher: WeightSet, student: WeightSet) -> CompressionReport:
    """Size comparison of two weight containers (parameters and serialised bytes)."""
    return CompressionReport(
        teacher_parameters=count_parameters(teacher),
        student_parameters=count_parameters(student),
        teacher_bytes=serialized_size(teacher),
        student_bytes=serialized_size(student),
    )


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


class MetricsCsvWriter:
    """Streams batch rows to disk one round at a time.

    Rows are flushed after every round so an interrupted run still
    leaves a well-formed (if shorter) CSV behind.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._handle: IO[str] = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle)
        self._writer.writerow(METRICS_CSV_COLUMNS)
        self._handle.flush()

    def append_round(self, record: RoundRecord) -> None:
        for client in record.clients:
            for batch in client.batches:
                self._writer.writerow(
                    [
                        record.round_index,
                        client.client_id,
                        batch.epoch,
                        batch.batch,
                        _fmt(batch.distillation),
                        _fmt(batch.criterion),
                        _fmt(batch.combined),
                        _fmt(batch.pixel_accuracy),
                        client.bytes_up,
                        client.bytes_down,
                    ]
                )
        self._handle.flush()

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "MetricsCsvWriter":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def write_metrics_csv(rounds: Sequence[RoundRecord], path: str | Path) -> Path:
    """One row per batch across all rounds; see METRICS_CSV_COLUMNS."""
    with MetricsCsvWriter(path) as writer:
        for record in rounds:
            writer.append_round(record)
    return Path(path)


def parse_metrics_csv(path: str | Path) -> list[RoundRecord]:
    """Rebuild round records from a metrics CSV (inverse of the writer).

    Per-client means are recomputed from the batch rows; validation
    accuracy is not part of the CSV schema and comes back as None.
    """
    grouped: dict[int, dict[int, tuple[list[BatchRecord], list[int]]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != list(METRICS_CSV_COLUMNS):
            raise ValueError(
                f"{path}: unexpected columns {reader.fieldnames}, wanted {list(METRICS_CSV_COLUMNS)}"
            )
        for row in reader:
            round_index = int(row["round"])
            client_id = int(row["client"])
            batches, byte_cols = grouped.setdefault(round_index, {}).setdefault(
                client_id, ([], [0, 0])
            )
            batches.append(
                BatchRecord(
                    epoch=int(row["epoch"]),
                    batch=int(row["batch"]),
                    distillation=float(row["L_P"]),
                    criterion=float(row["L_C"]),
                    combined=float(row["L_t"]),
                    pixel_accuracy=float(row["pixel_accuracy"]),
                )
            )
            byte_cols[0] = int(row["bytes_up"])
            byte_cols[1] = int(row["bytes_down"])
    rounds: list[RoundRecord] = []
    for round_index in sorted(grouped):
        clients = tuple(
            ClientRoundRecord.from_batches(
                client_id,
                num_samples=1,  # sample counts are not in the CSV schema
                batches=batches,
                bytes_up=byte_cols[0],
                bytes_down=byte_cols[1],
            )
            for client_id, (batches, byte_cols) in sorted(grouped[round_index].items())
        )
        rounds.append(RoundRecord(round_index=round_index, clients=clients))
    return rounds


def write_round_summary_csv(rounds: Sequence[RoundRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "round",
                "client",
                "mean_L_P",
                "mean_L_C",
                "mean_L_t",
                "train_pixel_accuracy",
                "bytes_up",
                "bytes_down",
                "validation_accuracy",
            ]
        )
        for record in rounds:
            for client in record.clients:
                writer.writerow(
                    [
                        record.round_index,
                        client.client_id,
                        _fmt(client.mean_distillation),
                        _fmt(client.mean_criterion),
                        _fmt(client.mean_combined),
                        _fmt(client.train_pixel_accuracy),
                        client.bytes_up,
                        client.bytes_down,
                        _fmt(record.validation_accuracy),
                    ]
                )
    return path


@dataclass(frozen=True)
class SummaryRow:
    """One line of the final results table."""

    model: str
    dataset: str
    federated: bool
    accuracy: float | None
    mean_iou: float | None
    parameter_ratio: float | None
    space_ratio: float | None


def write_summary_csv(rows: Sequence[SummaryRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["model", "dataset", "federated", "accuracy", "mean_iou", "parameter_ratio", "space_ratio"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.model,
                    row.dataset,
                    "yes" if row.federated else "no",
                    _fmt(row.accuracy),
                    _fmt(row.mean_iou),
                    _fmt(row.parameter_ratio),
                    _fmt(row.space_ratio),
                ]
            )
    return path


def write_compression_csv(report: CompressionReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "teacher_parameters",
                "student_parameters",
                "teacher_bytes",
                "student_bytes",
                "parameter_ratio",
                "space_ratio",
            ]
        )
        writer.writerow(
            [
                report.teacher_parameters,
                report.student_parameters,
                report.teacher_bytes,
                report.student_bytes,
                _fmt(report.parameter_ratio),
                _fmt(report.space_ratio),
            ]
        )
    return path


def _epoch_loss_series(rounds: Sequence[RoundRecord]) -> dict[int, list[tuple[int, float]]]:
    """Per client: (cumulative epoch, mean combined loss) points."""
    series: dict[int, list[tuple[int, float]]] = {}
    for record in rounds:
        for client in record.clients:
            epochs_seen = sorted({b.epoch for b in client.batches})
            for epoch in epochs_seen:
                losses = [b.combined for b in client.batches if b.epoch == epoch]
                cumulative = record.round_index * len(epochs_seen) + epoch + 1
                series.setdefault(client.client_id, []).append(
                    (cumulative, float(np.mean(losses)))
                )
    return series


def plot_loss_curves(rounds: Sequence[RoundRecord], path: str | Path) -> Path:
    """Per-client combined-loss curve over cumulative local epochs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = _epoch_loss_series(rounds)
    validation = [
        (r.round_index + 1, r.validation_accuracy)
        for r in rounds
        if r.validation_accuracy is not None
    ]
    ncols = 2 if validation else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4))
    loss_ax = axes[0] if ncols == 2 else axes
    for client_id in sorted(series):
        points = series[client_id]
        loss_ax.plot([p[0] for p in points], [p[1] for p in points], label=f"client {client_id}")
    loss_ax.set_xlabel("cumulative local epoch")
    loss_ax.set_ylabel("combined loss")
    loss_ax.legend()
    loss_ax.set_title("per-client training loss")
    if validation:
        val_ax = axes[1]
        val_ax.plot([p[0] for p in validation], [p[1] for p in validation], marker="o")
        val_ax.set_xlabel("round")
        val_ax.set_ylabel("validation pixel accuracy")
        val_ax.set_ylim(0.0, 1.0)
        val_ax.set_title("global model validation accuracy")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def emit_report(
    rounds: Sequence[RoundRecord],
    out_dir: str | Path,
    *,
    model_label: str,
    dataset_label: str,
    federated: bool,
    compression: CompressionReport | None = None,
    accuracy: float | None = None,
    mean_iou_value: float | None = None,
) -> list[Path]:
    """Write the full report bundle for a finished run.

    Produces metrics.csv (per batch), round_summary.csv, summary.csv
    (one results-table row), loss_curves.png, and compression.csv when
    a comparison is supplied.  Returns the written paths.
    """
    if not rounds:
        raise ValueError("cannot emit a report for an empty run history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if accuracy is None:
        with_validation = [r.validation_accuracy for r in rounds if r.validation_accuracy is not None]
        if with_validation:
            accuracy = with_validation[-1]
        else:
            accuracy = float(np.mean([c.train_pixel_accuracy for c in rounds[-1].clients]))
    written = [
        write_metrics_csv(rounds, out_dir / "metrics.csv"),
        write_round_summary_csv(rounds, out_dir / "round_summary.csv"),
        write_summary_csv(
            [
                SummaryRow(
                    model=model_label,
                    dataset=dataset_label,
                    federated=federated,
                    accuracy=accuracy,
                    mean_iou=mean_iou_value,
                    parameter_ratio=compression.parameter_ratio if compression else None,
                    space_ratio=compression.space_ratio if compression else None,
                )
            ],
            out_dir / "summary.csv",
        ),
        plot_loss_curves(rounds, out_dir / "loss_curves.png"),
    ]
    if compression is not None:
        written.append(write_compression_csv(compression, out_dir / "compression.csv"))
    return written
