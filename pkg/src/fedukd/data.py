"""Segmentation corpora: colour-legend masks, disk IO and synthesis.

Masks travel on disk as lossless colour PNGs plus a legend file mapping
each colour to a class id.  In memory they are uint8 class-id maps with
255 reserved as the ignore sentinel.  The synthetic corpus generator is
split into a geometry-planning step and a rasterisation step so tests
can re-render a plan and compare masks bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .seeding import corpus_rng

IGNORE_INDEX = 255
"""Mask value excluded from losses and accuracy; never a valid class id."""

MAX_CLASSES = 255
"""Class ids must stay below the ignore sentinel."""


@dataclass(frozen=True)
class LegendMap:
    """Bidirectional colour <-> class-id mapping.

    Class ids are contiguous from 0; colours must be unique.  Index i
    of ``colors``/``names`` describes class i.
    """

    colors: tuple[tuple[int, int, int], ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "colors", tuple(tuple(int(v) for v in c) for c in self.colors))
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.colors) != len(self.names):
            raise ValueError(
                f"{len(self.colors)} colors but {len(self.names)} names in legend"
            )
        if not 2 <= len(self.colors) <= MAX_CLASSES:
            raise ValueError(f"legend must define 2..{MAX_CLASSES} classes, got {len(self.colors)}")
        for color in self.colors:
            if len(color) != 3 or any(not 0 <= v <= 255 for v in color):
                raise ValueError(f"invalid RGB triple {color}")
        if len(set(self.colors)) != len(self.colors):
            raise ValueError("duplicate colors in legend")
        for name in self.names:
            if not name or "," in name or "\n" in name:
                raise ValueError(f"invalid class name {name!r}")

    @property
    def num_classes(self) -> int:
        return len(self.colors)

    def color_of(self, class_id: int) -> tuple[int, int, int]:
        return self.colors[class_id]

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    @property
    def ignore_color(self) -> tuple[int, int, int]:
        """A grey not claimed by any class, used to paint ignored pixels."""
        used = set(self.colors)
        for value in range(255, -1, -1):
            grey = (value, value, value)
            if grey not in used:
                return grey
        raise AssertionError("unreachable: fewer than 256 classes")

    def to_file(self, path: str | Path) -> None:
        lines = [
            f"{r},{g},{b},{class_id},{name}"
            for class_id, ((r, g, b), name) in enumerate(zip(self.colors, self.names))
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path: str | Path) -> "LegendMap":
        """Parse ``R,G,B,class_id,name`` lines; ids may appear in any order."""
        by_id: dict[int, tuple[tuple[int, int, int], str]] = {}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",", maxsplit=4)
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected R,G,B,class_id,name, got {raw!r}")
            try:
                r, g, b, class_id = (int(p) for p in parts[:4])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-integer field in {raw!r}") from exc
            if class_id in by_id:
                raise ValueError(f"{path}:{lineno}: duplicate class id {class_id}")
            by_id[class_id] = ((r, g, b), parts[4].strip())
        if not by_id:
            raise ValueError(f"{path}: empty legend")
        expected = set(range(len(by_id)))
        if set(by_id) != expected:
            raise ValueError(f"{path}: class ids must be contiguous from 0, got {sorted(by_id)}")
        ordered = [by_id[i] for i in range(len(by_id))]
        return cls(colors=tuple(c for c, _ in ordered), names=tuple(n for _, n in ordered))


def synthetic_legend(num_classes: int) -> LegendMap:
    """Standard bit-interleaved palette; class 0 is named background."""
    colors = tuple(_palette_color(i) for i in range(num_classes))
    names = ("background",) + tuple(f"class{i:02d}" for i in range(1, num_classes))
    return LegendMap(colors=colors, names=names)


def _palette_color(index: int) -> tuple[int, int, int]:
    r = g = b = 0
    value = index
    for shift in range(8):
        r |= ((value >> 0) & 1) << (7 - shift)
        g |= ((value >> 1) & 1) << (7 - shift)
        b |= ((value >> 2) & 1) << (7 - shift)
        value >>= 3
    return r, g, b


@dataclass(frozen=True)
class SegmentationSample:
    """One image/mask pair.

    ``image`` is float32 (channels, height, width) in [0, 1]; ``mask``
    is uint8 (height, width) holding class ids or the ignore sentinel.
    """

    sample_id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        if self.image.ndim != 3:
            raise ValueError(f"image must be (channels, height, width), got {self.image.shape}")
        if self.image.dtype != np.float32:
            raise ValueError(f"image dtype must be float32, got {self.image.dtype}")
        if self.mask.ndim != 2 or self.mask.dtype != np.uint8:
            raise ValueError(
                f"mask must be 2d uint8, got shape {self.mask.shape} dtype {self.mask.dtype}"
            )
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image spatial dims {self.image.shape[1:]} != mask dims {self.mask.shape}"
            )
        if self.image.size and (float(self.image.min()) < 0.0 or float(self.image.max()) > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])


def _pack_rgb(pixels: np.ndarray) -> np.ndarray:
    p = pixels.astype(np.int32)
    return (p[..., 0] << 16) | (p[..., 1] << 8) | p[..., 2]


def decode_mask(pixels: np.ndarray, legend: LegendMap, *, strict: bool = False) -> np.ndarray:
    """Colour image (height, width, 3) -> class-id map.

    Colours absent from the legend become the ignore sentinel; with
    ``strict`` they raise instead, naming the first offending pixel.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (height, width, 3) color mask, got {pixels.shape}")
    keys = np.array([(r << 16) | (g << 8) | b for r, g, b in legend.colors], dtype=np.int32)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    ids_for_key = np.arange(legend.num_classes, dtype=np.uint8)[order]
    packed = _pack_rgb(pixels)
    pos = np.searchsorted(sorted_keys, packed).clip(0, len(sorted_keys) - 1)
    matched = sorted_keys[pos] == packed
    if strict and not matched.all():
        y, x = (int(v) for v in np.argwhere(~matched)[0])
        raise ValueError(f"unknown mask color {tuple(int(v) for v in pixels[y, x])} at pixel ({y}, {x})")
    out = np.where(matched, ids_for_key[pos], np.uint8(IGNORE_INDEX))
    return out.astype(np.uint8)


def encode_mask(mask: np.ndarray, legend: LegendMap) -> np.ndarray:
    """Class-id map -> colour image; inverse of :func:`decode_mask`."""
    if mask.ndim != 2:
        raise ValueError(f"expected 2d class-id mask, got shape {mask.shape}")
    bad = (mask >= legend.num_classes) & (mask != IGNORE_INDEX)
    if bad.any():
        y, x = (int(v) for v in np.argwhere(bad)[0])
        raise ValueError(
            f"class id {int(mask[y, x])} at pixel ({y}, {x}) exceeds legend size {legend.num_classes}"
        )
    lut = np.zeros((256, 3), dtype=np.uint8)
    for class_id, color in enumerate(legend.colors):
        lut[class_id] = color
    lut[IGNORE_INDEX] = legend.ignore_color
    return lut[mask]


@dataclass(frozen=True)
class CorpusManifest:
    """Index of a corpus directory: legend file plus per-sample paths."""

    root: Path
    legend_file: str
    samples: tuple[tuple[str, str, str], ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(
            self, "samples", tuple((str(a), str(b), str(c)) for a, b, c in self.samples)
        )
        ids = [s[0] for s in self.samples]
        if len(set(ids)) != len(ids):
            dupe = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate sample id {dupe!r} in manifest")

    def validate_files(self) -> None:
        missing = [self.legend_file] if not (self.root / self.legend_file).is_file() else []
        for sample_id, image_rel, mask_rel in self.samples:
            for rel in (image_rel, mask_rel):
                if not (self.root / rel).is_file():
                    missing.append(rel)
        if missing:
            raise FileNotFoundError(f"manifest references missing files under {self.root}: {missing[:5]}")

    def save(self, path: str | Path | None = None) -> Path:
        target = Path(path) if path is not None else self.root / "manifest.json"
        payload = {
            "num_classes": self.num_classes,
            "legend": self.legend_file,
            "samples": [
                {"id": sid, "image": img, "mask": msk} for sid, img, msk in self.samples
            ],
        }
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            root=path.parent,
            legend_file=payload["legend"],
            samples=tuple((s["id"], s["image"], s["mask"]) for s in payload["samples"]),
            num_classes=int(payload["num_classes"]),
        )


def write_corpus(
    samples: Sequence[SegmentationSample],
    legend: LegendMap,
    root: str | Path,
) -> CorpusManifest:
    """Write images, colour masks, legend and manifest under ``root``.

    Images are stored as 8-bit PNGs (values round(pixel*255)); masks as
    lossless colour PNGs via :func:`encode_mask`.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records: list[tuple[str, str, str]] = []
    for sample in samples:
        image_rel = f"images/{sample.sample_id}.png"
        mask_rel = f"masks/{sample.sample_id}.png"
        pixels = np.round(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pixels, mode="RGB").save(root / image_rel)
        Image.fromarray(encode_mask(sample.mask, legend), mode="RGB").save(root / mask_rel)
        records.append((sample.sample_id, image_rel, mask_rel))
    legend.to_file(root / "legend.csv")
    manifest = CorpusManifest(
        root=root, legend_file="legend.csv", samples=tuple(records), num_classes=legend.num_classes
    )
    manifest.save()
    return manifest


def load_corpus(
    manifest: CorpusManifest | str | Path,
    *,
    target_size: tuple[int, int] | None = None,
    strict_colors: bool = False,
) -> list[SegmentationSample]:
    """Load every sample in a manifest, ordered by sample id.

    ``target_size`` (height, width) resizes images bilinearly and masks
    by nearest neighbour; masks are decoded to class ids before
    resizing so interpolation can never invent colours.
    """
    if not isinstance(manifest, CorpusManifest):
        manifest = CorpusManifest.load(manifest)
    manifest.validate_files()
    legend = LegendMap.from_file(manifest.root / manifest.legend_file)
    if legend.num_classes != manifest.num_classes:
        raise ValueError(
            f"manifest declares {manifest.num_classes} classes but legend defines {legend.num_classes}"
        )
    out: list[SegmentationSample] = []
    for sample_id, image_rel, mask_rel in sorted(manifest.samples, key=lambda s: s[0]):
        with Image.open(manifest.root / image_rel) as img:
            image = img.convert("RGB")
            with Image.open(manifest.root / mask_rel) as msk:
                mask_rgb = msk.convert("RGB")
                if image.size != mask_rgb.size:
                    raise ValueError(
                        f"sample {sample_id!r}: image size {image.size} != mask size {mask_rgb.size}"
                    )
                class_map = decode_mask(np.asarray(mask_rgb), legend, strict=strict_colors)
                if target_size is not None:
                    height, width = target_size
                    image = image.resize((width, height), Image.BILINEAR)
                    class_map = np.asarray(
                        Image.fromarray(class_map, mode="L").resize((width, height), Image.NEAREST)
                    )
                array = np.asarray(image, dtype=np.float32) / 255.0
                out.append(
                    SegmentationSample(
                        sample_id=sample_id,
                        image=np.ascontiguousarray(array.transpose(2, 0, 1)),
                        mask=np.ascontiguousarray(class_map),
                    )
                )
    return out


@dataclass(frozen=True)
class ShapeSpec:
    """One painted region: axis-aligned box plus a fill rule."""

    kind: str
    class_id: int
    box: tuple[int, int, int, int]  # y0, x0, y1, x1 (half-open)
    stripe_period: int = 3
    stripe_phase: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("rectangle", "ellipse", "stripes"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        y0, x0, y1, x1 = self.box
        if y1 <= y0 or x1 <= x0:
            raise ValueError(f"degenerate box {self.box}")
        if self.stripe_period < 2:
            raise ValueError("stripe_period must be >= 2")


@dataclass(frozen=True)
class SamplePlan:
    """Deterministic recipe for one synthetic sample."""

    sample_id: str
    height: int
    width: int
    num_classes: int
    shapes: tuple[ShapeSpec, ...]
    noise_seed: int


def rasterize_mask(plan: SamplePlan) -> np.ndarray:
    """Paint the plan's shapes (in order) over a class-0 background."""
    mask = np.zeros((plan.height, plan.width), dtype=np.uint8)
    for shape in plan.shapes:
        y0, x0, y1, x1 = shape.box
        if shape.kind == "rectangle":
            mask[y0:y1, x0:x1] = shape.class_id
        elif shape.kind == "ellipse":
            cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
            ry, rx = (y1 - y0) / 2.0, (x1 - x0) / 2.0
            yy = np.arange(plan.height, dtype=np.float64)[:, None]
            xx = np.arange(plan.width, dtype=np.float64)[None, :]
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            mask[inside] = shape.class_id
        else:  # stripes: period rows with the last row of each period left unpainted
            rows = np.arange(y0, y1)
            on = ((rows - y0 + shape.stripe_phase) % shape.stripe_period) != shape.stripe_period - 1
            mask[rows[on], x0:x1] = shape.class_id
    return mask


def render_sample(
    plan: SamplePlan, legend: LegendMap, *, noise_sigma: float = 8.0
) -> SegmentationSample:
    """Rasterise the mask and paint the image as legend colours + noise.

    The image is quantised to the 8-bit grid before scaling to [0, 1],
    so writing the corpus to disk and reloading it is lossless.
    """
    if legend.num_classes != plan.num_classes:
        raise ValueError(
            f"plan expects {plan.num_classes} classes, legend defines {legend.num_classes}"
        )
    mask = rasterize_mask(plan)
    lut = np.zeros((256, 3), dtype=np.float64)
    for class_id, color in enumerate(legend.colors):
        lut[class_id] = color
    base = lut[mask]
    rng = np.random.default_rng(plan.noise_seed)
    noisy = base + rng.normal(0.0, noise_sigma, size=base.shape)
    pixels = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    image = (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return SegmentationSample(
        sample_id=plan.sample_id, image=np.ascontiguousarray(image), mask=mask
    )


_SHAPE_KINDS = ("rectangle", "ellipse", "stripes")
# Fraction of a grid cell each shape kind spans, chosen so any class drawn in
# at least ~1/7 of the samples clears 1% of total corpus pixels.
_SIZE_RANGES = {"rectangle": (0.55, 0.90), "ellipse": (0.70, 0.95), "stripes": (0.75, 0.95)}


def plan_synthetic_corpus(
    count: int,
    num_classes: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    *,
    class_cycle: Sequence[Sequence[int]] | None = None,
    index_offset: int = 0,
    prefix: str = "syn",
) -> list[SamplePlan]:
    """Geometry plans for ``count`` samples.

    Four shapes per sample, one per quadrant so later shapes never
    occlude earlier ones.  Shape classes walk a rolling cursor over the
    allowed classes, guaranteeing every allowed class recurs with the
    same frequency.  ``class_cycle`` restricts sample i to the class
    set ``class_cycle[i % len(class_cycle)]`` (an empty set means a
    background-only sample), which is how label-skewed corpora are
    produced on purpose.
    """
    height, width = size
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in 2..{MAX_CLASSES}, got {num_classes}")
    if height % 4 or width % 4 or height < 8 or width < 8:
        raise ValueError(f"size must be at least 8x8 and divisible by 4, got {size}")
    if class_cycle is not None:
        if not class_cycle:
            raise ValueError("class_cycle must not be empty")
        for entry in class_cycle:
            for class_id in entry:
                if not 1 <= class_id < num_classes:
                    raise ValueError(
                        f"class_cycle entries must name foreground classes 1..{num_classes - 1}, "
                        f"got {class_id}"
                    )
    cell_h, cell_w = height // 2, width // 2
    plans: list[SamplePlan] = []
    for i in range(count):
        index = index_offset + i
        rng = corpus_rng(seed, index)
        if class_cycle is None:
            allowed = list(range(1, num_classes))
        else:
            allowed = sorted(set(class_cycle[i % len(class_cycle)]))
        shapes: list[ShapeSpec] = []
        for j, (cy, cx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            if not allowed:
                break
            class_id = allowed[(4 * index + j) % len(allowed)]
            kind = _SHAPE_KINDS[int(rng.integers(0, len(_SHAPE_KINDS)))]
            lo, hi = _SIZE_RANGES[kind]
            shape_h = max(2, int(round(rng.uniform(lo, hi) * cell_h)))
            shape_w = max(2, int(round(rng.uniform(lo, hi) * cell_w)))
            y0 = cy * cell_h + int(rng.integers(0, cell_h - shape_h + 1))
            x0 = cx * cell_w + int(rng.integers(0, cell_w - shape_w + 1))
            phase = int(rng.integers(0, 3))
            shapes.append(
                ShapeSpec(
                    kind=kind,
                    class_id=class_id,
                    box=(y0, x0, y0 + shape_h, x0 + shape_w),
                    stripe_phase=phase,
                )
            )
        noise_seed = int(rng.integers(0, 2**31))
        plans.append(
            SamplePlan(
                sample_id=f"{prefix}-{index:05d}",
                height=height,
                width=width,
                num_classes=num_classes,
                shapes=tuple(shapes),
                noise_seed=noise_seed,
            )
        )
    return plans


def generate_synthetic_corpus(
    count: int,
    num_classes: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    *,
    class_cycle: Sequence[Sequence[int]] | None = None,
    noise_sigma: float = 8.0,
    index_offset: int = 0,
    prefix: str = "syn",
) -> list[SegmentationSample]:
    """Plan and render ``count`` synthetic samples (see the two stages)."""
    plans = plan_synthetic_corpus(
        count,
        num_classes,
        size,
        seed,
        class_cycle=class_cycle,
        index_offset=index_offset,
        prefix=prefix,
    )
    legend = synthetic_legend(num_classes)
    return [render_sample(plan, legend, noise_sigma=noise_sigma) for plan in plans]
