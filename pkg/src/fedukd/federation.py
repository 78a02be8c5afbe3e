"""Federated distillation training.

One round: the server broadcasts the global student, every client runs
a few epochs of local training (distilling its private teacher into the
student when one is present), and the server averages the returned
weights.  Only student-sized containers ever cross the wire, which is
the entire communication saving; the ledger in each round record counts
exactly those bytes.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import IGNORE_INDEX, SegmentationSample
from .losses import (
    DistillationConfig,
    combined_loss,
    criterion_loss,
    pixelwise_distillation_loss,
)
from .metrics import BatchRecord, ClientRoundRecord, RoundRecord, pixel_accuracy
from .models import (
    WeightSet,
    forward,
    forward_logits,
    initialize_weights,
    same_structure,
    serialized_size,
    weight_set_to_bytes,
)
from .seeding import shuffle_rng

logger = logging.getLogger(__name__)

WEIGHTING_MODES = ("sample_count", "uniform")


@dataclass(frozen=True)
class FederationConfig:
    """Hyperparameters shared by the server and every client."""

    num_clients: int
    rounds: int = 10
    local_epochs: int = 2
    batch_size: int = 8
    step_size: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    weighting: str = "sample_count"
    distill: DistillationConfig = DistillationConfig()

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.step_size > 0.0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting must be one of {WEIGHTING_MODES}, got {self.weighting!r}")
        if not isinstance(self.distill, DistillationConfig):
            raise TypeError("distill must be a DistillationConfig")


class ClientFailure(RuntimeError):
    """A client's local step failed; carries round and client ids."""

    def __init__(self, round_index: int, client_id: int, message: str) -> None:
        super().__init__(f"round {round_index}, client {client_id}: {message}")
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class ClientState:
    """One participant: private data, private teacher, current student."""

    client_id: int
    dataset: list[SegmentationSample]
    student: WeightSet
    teacher: WeightSet | None = None


@dataclass
class GlobalState:
    """Server view after some number of completed rounds.

    ``server_copy`` is the server's retained reference to the latest
    aggregate; after a completed round it is the same value that was
    (or would be) broadcast as ``global_student``.
    """

    round_index: int
    global_student: WeightSet
    server_copy: WeightSet
    history: list[RoundRecord] = field(default_factory=list)


def _stack(dataset: Sequence[SegmentationSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in dataset]))
    masks = torch.from_numpy(np.stack([s.mask for s in dataset]))
    return images, masks


def _train_epochs(
    start: WeightSet,
    teacher: WeightSet | None,
    dataset: Sequence[SegmentationSample],
    config: FederationConfig,
    *,
    epochs: int,
    epoch_offset: int = 0,
) -> tuple[WeightSet, list[BatchRecord]]:
    """Plain SGD over shuffled batches; the shared inner loop.

    The batch permutation for epoch e is a function of (seed,
    epoch_offset + e) only, so resuming at an offset replays exactly
    the epochs a single continuous run would have used.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if teacher is not None:
        if (
            teacher.spec.in_channels != start.spec.in_channels
            or teacher.spec.num_classes != start.spec.num_classes
        ):
            raise ValueError(
                "teacher and student disagree on input channels or class count: "
                f"{teacher.spec.in_channels}ch/{teacher.spec.num_classes}cls vs "
                f"{start.spec.in_channels}ch/{start.spec.num_classes}cls"
            )
    if epochs == 0:
        return start, []
    spec = start.spec
    params = {name: t.clone().requires_grad_(True) for name, t in start.entries}
    images, masks = _stack(dataset)
    n = len(dataset)
    records: list[BatchRecord] = []
    # Optimizer state is local to this call: a client starting from a fresh
    # broadcast starts with zero velocity.
    velocity = None
    if config.momentum > 0.0:
        velocity = {name: torch.zeros_like(t) for name, t in params.items()}
    for local_epoch in range(epochs):
        perm = shuffle_rng(config.seed, epoch_offset + local_epoch).permutation(n)
        for batch_index, lo in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(perm[lo : lo + config.batch_size].copy())
            xb = images[idx]
            yb = masks[idx]
            logits = forward_logits(spec, params, xb)
            lc = criterion_loss(logits, yb)
            if teacher is not None:
                with torch.no_grad():
                    teacher_logits = forward(teacher, xb)
                lp = pixelwise_distillation_loss(logits, teacher_logits, config.distill.temperature)
                total = combined_loss(lp, lc, config.distill.alpha)
                lp_value = float(lp.detach())
            else:
                total = lc
                lp_value = 0.0
            total.backward()
            with torch.no_grad():
                for name, t in params.items():
                    if velocity is None:
                        t -= config.step_size * t.grad
                    else:
                        v = velocity[name]
                        v.mul_(config.momentum).add_(t.grad)
                        t -= config.step_size * v
                    t.grad = None
            records.append(
                BatchRecord(
                    epoch=local_epoch,
                    batch=batch_index,
                    distillation=lp_value,
                    criterion=float(lc.detach()),
                    combined=float(total.detach()),
                    pixel_accuracy=pixel_accuracy(logits.detach(), yb),
                )
            )
    final = WeightSet(spec, tuple((name, params[name].detach().clone()) for name in params))
    return final, records


def ukd_learning(
    client: ClientState,
    global_student: WeightSet,
    config: FederationConfig,
    *,
    epoch_offset: int = 0,
) -> tuple[WeightSet, list[BatchRecord]]:
    """One client's local pass over the freshly received global student.

    With a teacher present the objective is the alpha-blend of the
    distillation and criterion terms; without one it is the criterion
    alone.  ``epoch_offset`` threads the global epoch counter through
    rounds so shuffles continue rather than repeat.
    """
    if not client.dataset:
        raise ValueError(f"client {client.client_id} has an empty dataset")
    if client.student.spec != global_student.spec:
        raise ValueError(
            f"client {client.client_id} student spec differs from the broadcast global student"
        )
    trained, records = _train_epochs(
        global_student,
        client.teacher,
        client.dataset,
        config,
        epochs=config.local_epochs,
        epoch_offset=epoch_offset,
    )
    return trained, records


def fedavg(contributions: Sequence[tuple[WeightSet, int]]) -> WeightSet:
    """Sample-count weighted average of structurally identical weights.

    Contributions are accumulated in a canonical order (sample count,
    then container digest) in float64 and divided once, which makes the
    result independent of list order and bit-exact when every
    contribution is identical.
    """
    if not contributions:
        raise ValueError("cannot average an empty contribution list")
    for index, (weights, count) in enumerate(contributions):
        if count < 1:
            raise ValueError(f"contribution {index} has sample count {count}, must be >= 1")
    first = contributions[0][0]
    for weights, _ in contributions[1:]:
        if not same_structure(weights, first):
            raise ValueError("contributions are not structurally identical")
    ordered = sorted(
        contributions,
        key=lambda item: (item[1], hashlib.sha256(weight_set_to_bytes(item[0])).digest()),
    )
    total = float(sum(count for _, count in ordered))
    accum = [torch.zeros(t.shape, dtype=torch.float64) for _, t in first.entries]
    for weights, count in ordered:
        for acc, (_, tensor) in zip(accum, weights.entries):
            acc += tensor.to(torch.float64) * float(count)
    entries = tuple(
        (name, (acc / total).to(torch.float32))
        for acc, (name, _) in zip(accum, first.entries)
    )
    return WeightSet(first.spec, entries)


def evaluate_pixel_accuracy(
    weights: WeightSet, dataset: Sequence[SegmentationSample], *, batch_size: int = 8
) -> float:
    """Counting-based pixel accuracy of a model over a dataset."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    images, masks = _stack(dataset)
    correct = 0
    total = 0
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            xb = images[lo : lo + batch_size]
            yb = masks[lo : lo + batch_size]
            pred = forward(weights, xb).argmax(dim=1)
            valid = yb != IGNORE_INDEX
            correct += int((pred[valid] == yb[valid]).sum())
            total += int(valid.sum())
    if total == 0:
        raise ValueError("every pixel is ignored; accuracy is undefined")
    return correct / total


def evaluate_mean_iou(
    weights: WeightSet, dataset: Sequence[SegmentationSample], *, batch_size: int = 8
) -> float:
    """Mean IoU of a model over a dataset, accumulated per class."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    num_classes = weights.spec.num_classes
    intersection = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    images, masks = _stack(dataset)
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            xb = images[lo : lo + batch_size]
            yb = masks[lo : lo + batch_size]
            pred = forward(weights, xb).argmax(dim=1)
            valid = yb != IGNORE_INDEX
            for class_id in range(num_classes):
                pred_c = (pred == class_id) & valid
                target_c = (yb == class_id) & valid
                intersection[class_id] += int((pred_c & target_c).sum())
                union[class_id] += int((pred_c | target_c).sum())
    present = union > 0
    if not present.any():
        raise ValueError("every pixel is ignored; IoU is undefined")
    return float(np.mean(intersection[present] / union[present]))


def run_federation(
    config: FederationConfig,
    clients: Sequence[ClientState],
    initial_student: WeightSet,
    *,
    validation: Sequence[SegmentationSample] | None = None,
    on_round: Callable[[RoundRecord, WeightSet], None] | None = None,
) -> GlobalState:
    """Run the full broadcast/train/aggregate loop for ``config.rounds``.

    Clients are processed in client-id order.  Client exceptions are
    re-raised as :class:`ClientFailure` with the round and client
    attached.  ``on_round`` fires after each aggregation with the round
    record and the new global student (used for incremental reporting
    and checkpointing).
    """
    if not clients:
        raise ValueError("at least one client is required")
    if len(clients) != config.num_clients:
        raise ValueError(f"config expects {config.num_clients} clients, got {len(clients)}")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"client ids must be unique, got {sorted(ids)}")
    for client in clients:
        if client.student.spec != initial_student.spec:
            raise ValueError(f"client {client.client_id} student spec differs from the initial student")
    with_teacher = [c.teacher is not None for c in clients]
    if any(with_teacher) and not all(with_teacher):
        raise ValueError("either every client must hold a teacher or none may")

    ordered = sorted(clients, key=lambda c: c.client_id)
    global_student = initial_student
    history: list[RoundRecord] = []
    for round_index in range(config.rounds):
        bytes_down = serialized_size(global_student)
        contributions: list[tuple[WeightSet, int]] = []
        client_records: list[ClientRoundRecord] = []
        for client in ordered:
            try:
                trained, batches = ukd_learning(
                    client,
                    global_student,
                    config,
                    epoch_offset=round_index * config.local_epochs,
                )
            except Exception as exc:
                raise ClientFailure(round_index, client.client_id, str(exc)) from exc
            client.student = trained
            weight = len(client.dataset) if config.weighting == "sample_count" else 1
            contributions.append((trained, weight))
            if batches:
                record = ClientRoundRecord.from_batches(
                    client.client_id,
                    len(client.dataset),
                    batches,
                    bytes_down=bytes_down,
                    bytes_up=serialized_size(trained),
                )
            else:  # zero local epochs: nothing trained, nothing to summarise
                record = ClientRoundRecord(
                    client_id=client.client_id,
                    num_samples=len(client.dataset),
                    mean_distillation=0.0,
                    mean_criterion=0.0,
                    mean_combined=0.0,
                    train_pixel_accuracy=0.0,
                    bytes_down=bytes_down,
                    bytes_up=serialized_size(trained),
                    batches=(),
                )
            client_records.append(record)
        global_student = fedavg(contributions)
        validation_accuracy = (
            evaluate_pixel_accuracy(global_student, validation, batch_size=config.batch_size)
            if validation
            else None
        )
        round_record = RoundRecord(
            round_index=round_index,
            clients=tuple(client_records),
            validation_accuracy=validation_accuracy,
        )
        history.append(round_record)
        logger.info(
            "round %d/%d: mean combined loss %.4f%s",
            round_index + 1,
            config.rounds,
            float(np.mean([c.mean_combined for c in client_records])),
            "" if validation_accuracy is None else f", validation accuracy {validation_accuracy:.4f}",
        )
        if on_round is not None:
            on_round(round_record, global_student)
    return GlobalState(
        round_index=config.rounds,
        global_student=global_student,
        server_copy=global_student,
        history=history,
    )


def run_centralized(
    config: FederationConfig,
    dataset: Sequence[SegmentationSample],
    spec,
    *,
    epochs: int | None = None,
    initial: WeightSet | None = None,
    teacher: WeightSet | None = None,
) -> tuple[WeightSet, list[BatchRecord]]:
    """Train one model on a pooled dataset; the non-federated baseline.

    Defaults to ``rounds * local_epochs`` epochs so a centralized run
    consumes the same optimisation budget as its federated twin.  With
    ``teacher`` given, local training distils exactly as a client would.
    """
    if epochs is None:
        epochs = config.rounds * config.local_epochs
    start = initial if initial is not None else initialize_weights(spec, config.seed)
    if start.spec != spec:
        raise ValueError("initial weights were built for a different spec")
    return _train_epochs(start, teacher, dataset, config, epochs=epochs)
