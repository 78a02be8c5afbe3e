"""Experiment configuration: one YAML file per experiment.

Parsing is strict (unknown keys are errors, every failure names the
offending field) and total: a parsed config serialises back to an equal
config.  Command-line flag overrides are applied through
:meth:`ExperimentConfig.with_overrides` so flags always win over the
file.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .federation import FederationConfig
from .losses import DistillationConfig
from .models import ModelSpec
from .partitioning import ClientConstraint, PartitionMode, PartitionSpec

MODES = ("centralized", "fed_unet", "fed_ukd")
TRAIN_MODELS = ("teacher", "student")


class ConfigError(Exception):
    """A config field failed validation; ``field`` names it."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


def _require_mapping(value: Any, field: str) -> dict[str, Any]:
    if not isinstance(value, Mapping):
        raise ConfigError(field, f"expected a mapping, got {type(value).__name__}")
    return dict(value)


def _check_keys(mapping: Mapping[str, Any], allowed: Sequence[str], field: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(field, f"unknown keys {unknown}; allowed: {sorted(allowed)}")


def _get_int(mapping: Mapping[str, Any], key: str, field: str, default: int | None = None) -> Any:
    if key not in mapping or mapping[key] is None:
        if default is not None:
            return default
        raise ConfigError(f"{field}.{key}", "required integer is missing")
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{field}.{key}", f"expected an integer, got {value!r}")
    return value


def _get_float(
    mapping: Mapping[str, Any], key: str, field: str, default: float | None = None
) -> float:
    if key not in mapping or mapping[key] is None:
        if default is not None:
            return default
        raise ConfigError(f"{field}.{key}", "required number is missing")
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field}.{key}", f"expected a number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class ModelShape:
    """Architecture knobs that combine with the corpus class count into a ModelSpec."""

    encoder_filters: tuple[int, ...]
    decoder_filters: tuple[int, ...]
    kernel_size: int = 3
    bottleneck_filters: int | None = None

    def to_spec(self, num_classes: int, in_channels: int = 3) -> ModelSpec:
        return ModelSpec(
            in_channels=in_channels,
            num_classes=num_classes,
            encoder_filters=tuple(self.encoder_filters),
            decoder_filters=tuple(self.decoder_filters),
            kernel_size=self.kernel_size,
            bottleneck_filters=self.bottleneck_filters,
        )

    @classmethod
    def parse(cls, raw: Any, field: str) -> "ModelShape":
        mapping = _require_mapping(raw, field)
        _check_keys(
            mapping,
            ["encoder_filters", "decoder_filters", "kernel_size", "bottleneck_filters"],
            field,
        )
        for key in ("encoder_filters", "decoder_filters"):
            if key not in mapping or not isinstance(mapping[key], (list, tuple)):
                raise ConfigError(f"{field}.{key}", "expected a list of filter widths")
        bottleneck = mapping.get("bottleneck_filters")
        try:
            return cls(
                encoder_filters=tuple(int(v) for v in mapping["encoder_filters"]),
                decoder_filters=tuple(int(v) for v in mapping["decoder_filters"]),
                kernel_size=_get_int(mapping, "kernel_size", field, default=3),
                bottleneck_filters=None if bottleneck is None else int(bottleneck),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(field, str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "encoder_filters": list(self.encoder_filters),
            "decoder_filters": list(self.decoder_filters),
            "kernel_size": self.kernel_size,
            "bottleneck_filters": self.bottleneck_filters,
        }


DEFAULT_TEACHER_SHAPE = ModelShape(
    encoder_filters=(64, 128, 256, 512),
    decoder_filters=(512, 256, 128, 64),
    kernel_size=3,
    bottleneck_filters=384,
)
DEFAULT_STUDENT_SHAPE = ModelShape(
    encoder_filters=(16, 32), decoder_filters=(32, 16), kernel_size=3
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in corpus generator."""

    train_samples: int
    val_samples: int = 0
    num_classes: int = 3
    height: int = 64
    width: int = 64
    noise_sigma: float = 8.0
    class_cycle: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.train_samples < 1:
            raise ValueError(f"train_samples must be >= 1, got {self.train_samples}")
        if self.val_samples < 0:
            raise ValueError(f"val_samples must be >= 0, got {self.val_samples}")
        if self.class_cycle is not None:
            object.__setattr__(
                self, "class_cycle", tuple(tuple(int(c) for c in entry) for entry in self.class_cycle)
            )

    @classmethod
    def parse(cls, raw: Any, field: str) -> "SyntheticSpec":
        mapping = _require_mapping(raw, field)
        _check_keys(
            mapping,
            [
                "train_samples",
                "val_samples",
                "num_classes",
                "height",
                "width",
                "noise_sigma",
                "class_cycle",
            ],
            field,
        )
        cycle = mapping.get("class_cycle")
        if cycle is not None and not isinstance(cycle, (list, tuple)):
            raise ConfigError(f"{field}.class_cycle", "expected a list of class-id lists")
        try:
            return cls(
                train_samples=_get_int(mapping, "train_samples", field),
                val_samples=_get_int(mapping, "val_samples", field, default=0),
                num_classes=_get_int(mapping, "num_classes", field, default=3),
                height=_get_int(mapping, "height", field, default=64),
                width=_get_int(mapping, "width", field, default=64),
                noise_sigma=_get_float(mapping, "noise_sigma", field, default=8.0),
                class_cycle=None if cycle is None else tuple(tuple(entry) for entry in cycle),
            )
        except ValueError as exc:
            raise ConfigError(field, str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "train_samples": self.train_samples,
            "val_samples": self.val_samples,
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "noise_sigma": self.noise_sigma,
            "class_cycle": None
            if self.class_cycle is None
            else [list(entry) for entry in self.class_cycle],
        }


@dataclass(frozen=True)
class CorpusConfig:
    """Where training data comes from: a manifest on disk or the generator."""

    manifest: str | None = None
    val_manifest: str | None = None
    synthetic: SyntheticSpec | None = None
    resolution: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if (self.manifest is None) == (self.synthetic is None):
            raise ValueError("exactly one of manifest/synthetic must be set")
        if self.val_manifest is not None and self.manifest is None:
            raise ValueError("val_manifest requires manifest")
        if self.resolution is not None:
            object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))

    @classmethod
    def parse(cls, raw: Any, field: str) -> "CorpusConfig":
        mapping = _require_mapping(raw, field)
        _check_keys(mapping, ["manifest", "val_manifest", "synthetic", "resolution"], field)
        synthetic = mapping.get("synthetic")
        resolution = mapping.get("resolution")
        if resolution is not None and (
            not isinstance(resolution, (list, tuple)) or len(resolution) != 2
        ):
            raise ConfigError(f"{field}.resolution", "expected [height, width]")
        try:
            return cls(
                manifest=mapping.get("manifest"),
                val_manifest=mapping.get("val_manifest"),
                synthetic=None if synthetic is None else SyntheticSpec.parse(synthetic, f"{field}.synthetic"),
                resolution=None if resolution is None else tuple(resolution),
            )
        except ValueError as exc:
            raise ConfigError(field, str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest": self.manifest,
            "val_manifest": self.val_manifest,
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "resolution": None if self.resolution is None else list(self.resolution),
        }


@dataclass(frozen=True)
class PretrainConfig:
    """Teacher pretraining stanza (centralized, on the pooled corpus).

    Optimizer settings here are deliberately independent of the
    federation stanza: momentum defaults to 0 even when the federated
    phase uses it, and step_size falls back to the federation's only
    when unset.
    """

    epochs: int = 2
    step_size: float | None = None
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"pretrain epochs must be >= 0, got {self.epochs}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"pretrain step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"pretrain momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def parse(cls, raw: Any, field: str) -> "PretrainConfig":
        mapping = _require_mapping(raw, field)
        _check_keys(mapping, ["epochs", "step_size", "momentum"], field)
        step = mapping.get("step_size")
        try:
            return cls(
                epochs=_get_int(mapping, "epochs", field, default=2),
                step_size=None if step is None else float(step),
                momentum=_get_float(mapping, "momentum", field, default=0.0),
            )
        except ValueError as exc:
            raise ConfigError(field, str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return {"epochs": self.epochs, "step_size": self.step_size, "momentum": self.momentum}


def _parse_partition(raw: Any, field: str) -> PartitionSpec:
    mapping = _require_mapping(raw, field)
    _check_keys(mapping, ["mode", "clients", "proportions", "num_clients"], field)
    mode_raw = mapping.get("mode")
    try:
        mode = PartitionMode(mode_raw)
    except ValueError:
        raise ConfigError(
            f"{field}.mode", f"expected one of {[m.value for m in PartitionMode]}, got {mode_raw!r}"
        ) from None
    try:
        if mode is PartitionMode.LABEL_SKEW:
            clients_raw = mapping.get("clients")
            if not isinstance(clients_raw, list) or not clients_raw:
                raise ConfigError(f"{field}.clients", "label_skew needs a non-empty client list")
            constraints = []
            for i, entry in enumerate(clients_raw):
                entry = _require_mapping(entry, f"{field}.clients[{i}]")
                _check_keys(
                    entry,
                    ["id", "required_present", "required_absent", "max_count"],
                    f"{field}.clients[{i}]",
                )
                max_count = entry.get("max_count")
                constraints.append(
                    ClientConstraint(
                        client_id=_get_int(entry, "id", f"{field}.clients[{i}]"),
                        required_present=frozenset(entry.get("required_present") or ()),
                        required_absent=frozenset(entry.get("required_absent") or ()),
                        max_count=None if max_count is None else int(max_count),
                    )
                )
            return PartitionSpec(mode=mode, constraints=tuple(constraints))
        proportions = mapping.get("proportions")
        if proportions is None:
            count = _get_int(mapping, "num_clients", field)
            if count < 1:
                raise ConfigError(f"{field}.num_clients", f"must be >= 1, got {count}")
            proportions = [1.0 / count] * count
        if not isinstance(proportions, (list, tuple)):
            raise ConfigError(f"{field}.proportions", "expected a list of fractions")
        return PartitionSpec(mode=mode, proportions=tuple(float(p) for p in proportions))
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from exc


def _partition_to_dict(spec: PartitionSpec) -> dict[str, Any]:
    if spec.mode is PartitionMode.LABEL_SKEW:
        return {
            "mode": spec.mode.value,
            "clients": [
                {
                    "id": c.client_id,
                    "required_present": sorted(c.required_present),
                    "required_absent": sorted(c.required_absent),
                    "max_count": c.max_count,
                }
                for c in spec.constraints
            ],
        }
    assert spec.proportions is not None
    return {"mode": spec.mode.value, "proportions": list(spec.proportions)}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, resolved and validated."""

    mode: str
    seed: int
    out_dir: str
    corpus: CorpusConfig
    teacher: ModelShape = DEFAULT_TEACHER_SHAPE
    student: ModelShape = DEFAULT_STUDENT_SHAPE
    federation: FederationConfig = FederationConfig(num_clients=1)
    partition: PartitionSpec | None = None
    train_model: str = "student"
    teacher_weights: str | None = None
    pretrain: PretrainConfig | None = None
    dataset_label: str = "synthetic"

    _TOP_KEYS = (
        "mode",
        "seed",
        "out_dir",
        "corpus",
        "teacher",
        "student",
        "federation",
        "distillation",
        "partition",
        "train_model",
        "teacher_weights",
        "pretrain",
        "dataset_label",
    )

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        mapping = _require_mapping(raw, "config")
        _check_keys(mapping, cls._TOP_KEYS, "config")
        mode = mapping.get("mode")
        if mode not in MODES:
            raise ConfigError("mode", f"expected one of {list(MODES)}, got {mode!r}")
        seed = _get_int(mapping, "seed", "config")
        out_dir = mapping.get("out_dir")
        if not out_dir or not isinstance(out_dir, str):
            raise ConfigError("out_dir", "required output directory is missing")
        if "corpus" not in mapping:
            raise ConfigError("corpus", "required section is missing")
        corpus = CorpusConfig.parse(mapping["corpus"], "corpus")
        teacher = (
            ModelShape.parse(mapping["teacher"], "teacher")
            if mapping.get("teacher") is not None
            else DEFAULT_TEACHER_SHAPE
        )
        student = (
            ModelShape.parse(mapping["student"], "student")
            if mapping.get("student") is not None
            else DEFAULT_STUDENT_SHAPE
        )
        partition = (
            _parse_partition(mapping["partition"], "partition")
            if mapping.get("partition") is not None
            else None
        )

        distill_raw = _require_mapping(mapping.get("distillation") or {}, "distillation")
        _check_keys(distill_raw, ["alpha", "temperature"], "distillation")
        try:
            distill = DistillationConfig(
                temperature=_get_float(distill_raw, "temperature", "distillation", default=5.0),
                alpha=_get_float(distill_raw, "alpha", "distillation", default=0.3),
            )
        except ValueError as exc:
            raise ConfigError("distillation", str(exc)) from exc

        fed_raw = _require_mapping(mapping.get("federation") or {}, "federation")
        _check_keys(
            fed_raw,
            ["rounds", "local_epochs", "batch_size", "step_size", "momentum", "weighting", "num_clients"],
            "federation",
        )
        if partition is not None:
            num_clients = _get_int(fed_raw, "num_clients", "federation", default=partition.num_clients)
            if num_clients != partition.num_clients:
                raise ConfigError(
                    "federation.num_clients",
                    f"{num_clients} does not match the partition's {partition.num_clients} clients",
                )
        else:
            num_clients = _get_int(fed_raw, "num_clients", "federation", default=1)
        try:
            federation = FederationConfig(
                num_clients=num_clients,
                rounds=_get_int(fed_raw, "rounds", "federation", default=10),
                local_epochs=_get_int(fed_raw, "local_epochs", "federation", default=2),
                batch_size=_get_int(fed_raw, "batch_size", "federation", default=8),
                step_size=_get_float(fed_raw, "step_size", "federation", default=0.1),
                momentum=_get_float(fed_raw, "momentum", "federation", default=0.0),
                seed=seed,
                weighting=str(fed_raw.get("weighting", "sample_count")),
                distill=distill,
            )
        except ValueError as exc:
            raise ConfigError("federation", str(exc)) from exc

        train_model = mapping.get("train_model", "student")
        if train_model not in TRAIN_MODELS:
            raise ConfigError("train_model", f"expected one of {list(TRAIN_MODELS)}, got {train_model!r}")
        pretrain = (
            PretrainConfig.parse(mapping["pretrain"], "pretrain")
            if mapping.get("pretrain") is not None
            else None
        )
        teacher_weights = mapping.get("teacher_weights")
        if teacher_weights is not None and not isinstance(teacher_weights, str):
            raise ConfigError("teacher_weights", f"expected a path string, got {teacher_weights!r}")
        return cls(
            mode=mode,
            seed=seed,
            out_dir=out_dir,
            corpus=corpus,
            teacher=teacher,
            student=student,
            federation=federation,
            partition=partition,
            train_model=train_model,
            teacher_weights=teacher_weights,
            pretrain=pretrain,
            dataset_label=str(mapping.get("dataset_label", "synthetic")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "corpus": self.corpus.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "federation": {
                "num_clients": self.federation.num_clients,
                "rounds": self.federation.rounds,
                "local_epochs": self.federation.local_epochs,
                "batch_size": self.federation.batch_size,
                "step_size": self.federation.step_size,
                "momentum": self.federation.momentum,
                "weighting": self.federation.weighting,
            },
            "distillation": {
                "alpha": self.federation.distill.alpha,
                "temperature": self.federation.distill.temperature,
            },
            "partition": None if self.partition is None else _partition_to_dict(self.partition),
            "train_model": self.train_model,
            "teacher_weights": self.teacher_weights,
            "pretrain": None if self.pretrain is None else self.pretrain.to_dict(),
            "dataset_label": self.dataset_label,
        }

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"invalid YAML: {exc}") from exc
        if raw is None:
            raise ConfigError("config", f"config file is empty: {path}")
        return cls.from_dict(raw)

    def to_file(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False),
            encoding="utf-8",
        )
        return path

    def config_hash(self) -> str:
        canonical = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def num_classes(self) -> int | None:
        """Class count when statically known (synthetic corpora only)."""
        if self.corpus.synthetic is not None:
            return self.corpus.synthetic.num_classes
        return None

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        out: str | None = None,
        mode: str | None = None,
        rounds: int | None = None,
        epochs: int | None = None,
        alpha: float | None = None,
        temperature: float | None = None,
        clients: int | None = None,
    ) -> "ExperimentConfig":
        """Apply command-line overrides; flags win over file values."""
        config = self
        if mode is not None:
            if mode not in MODES:
                raise ConfigError("mode", f"expected one of {list(MODES)}, got {mode!r}")
            config = dataclasses.replace(config, mode=mode)
        if out is not None:
            config = dataclasses.replace(config, out_dir=out)
        federation = config.federation
        distill = federation.distill
        try:
            if alpha is not None or temperature is not None:
                distill = DistillationConfig(
                    temperature=temperature if temperature is not None else distill.temperature,
                    alpha=alpha if alpha is not None else distill.alpha,
                )
            federation = dataclasses.replace(
                federation,
                rounds=rounds if rounds is not None else federation.rounds,
                local_epochs=epochs if epochs is not None else federation.local_epochs,
                seed=seed if seed is not None else federation.seed,
                distill=distill,
            )
        except ValueError as exc:
            raise ConfigError("federation", str(exc)) from exc
        config = dataclasses.replace(config, federation=federation)
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
        if clients is not None:
            config = config._override_clients(clients)
        return config

    def _override_clients(self, clients: int) -> "ExperimentConfig":
        if clients < 1:
            raise ConfigError("clients", f"must be >= 1, got {clients}")
        partition = self.partition
        if partition is None:
            if clients != 1:
                raise ConfigError("clients", "no partition spec; only --clients 1 is meaningful")
            return self
        if partition.mode is PartitionMode.LABEL_SKEW:
            if clients != partition.num_clients:
                raise ConfigError(
                    "clients",
                    "label_skew clients are defined by constraints; edit the config instead",
                )
            return self
        new_partition = PartitionSpec(
            mode=PartitionMode.QUANTITY_SKEW, proportions=tuple([1.0 / clients] * clients)
        )
        federation = dataclasses.replace(self.federation, num_clients=clients)
        return dataclasses.replace(self, partition=new_partition, federation=federation)

    def validate(self, *, check_paths: bool = True) -> None:
        """Cross-field checks; raises :class:`ConfigError` on the first failure."""
        if self.mode not in MODES:
            raise ConfigError("mode", f"expected one of {list(MODES)}, got {self.mode!r}")
        if self.train_model not in TRAIN_MODELS:
            raise ConfigError("train_model", f"expected one of {list(TRAIN_MODELS)}")
        if self.mode in ("fed_unet", "fed_ukd"):
            if self.partition is None:
                raise ConfigError("partition", f"{self.mode} requires a partition spec")
            if self.federation.num_clients != self.partition.num_clients:
                raise ConfigError(
                    "federation.num_clients",
                    f"{self.federation.num_clients} does not match the partition's "
                    f"{self.partition.num_clients} clients",
                )
        if self.mode == "fed_ukd" and self.teacher_weights is None and self.pretrain is None:
            raise ConfigError(
                "teacher_weights", "fed_ukd needs teacher_weights or a pretrain stanza"
            )
        if self.federation.seed != self.seed:
            raise ConfigError("federation.seed", "must equal the experiment seed")
        known_classes = self.num_classes()
        if known_classes is not None:
            for label, shape in (("teacher", self.teacher), ("student", self.student)):
                try:
                    shape.to_spec(known_classes)
                except ValueError as exc:
                    raise ConfigError(label, str(exc)) from exc
        resolution = self.training_resolution()
        if resolution is not None:
            height, width = resolution
            for label, shape in (("teacher", self.teacher), ("student", self.student)):
                factor = 2 ** len(shape.encoder_filters)
                if height % factor or width % factor:
                    raise ConfigError(
                        "corpus",
                        f"resolution {height}x{width} not divisible by {factor} "
                        f"({label} has {len(shape.encoder_filters)} encoder stages)",
                    )
        if check_paths:
            if self.corpus.manifest is not None and not Path(self.corpus.manifest).is_file():
                raise ConfigError("corpus.manifest", f"file not found: {self.corpus.manifest}")
            if self.corpus.val_manifest is not None and not Path(self.corpus.val_manifest).is_file():
                raise ConfigError(
                    "corpus.val_manifest", f"file not found: {self.corpus.val_manifest}"
                )
            if self.teacher_weights is not None and not Path(self.teacher_weights).is_file():
                raise ConfigError("teacher_weights", f"file not found: {self.teacher_weights}")

    def training_resolution(self) -> tuple[int, int] | None:
        if self.corpus.synthetic is not None:
            return (self.corpus.synthetic.height, self.corpus.synthetic.width)
        return self.corpus.resolution
