"""Dataset handling: procedural scene generation, corruption, disk round-trips.

A sample is an image plus disjoint per-instance boolean masks. Generated
scenes place textured geometric shapes (disc, rectangle, triangle, ring; the
class ids count up from 1) over a textured background with occlusion: later
shapes overpaint earlier ones and each pixel belongs to the topmost instance.
Instances reduced to fewer than MIN_VISIBLE_PIXELS visible pixels are dropped.

On disk a split lives under ``<root>/<role>/images/<id>.png`` and
``<root>/<role>/annotations/<id>.json`` with a shared ``<root>/manifest.json``.
Masks serialize as row-major run-length arrays of alternating background and
foreground runs, starting with a (possibly zero-length) background run; the
run lengths sum to exactly H*W.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .distortions import DistortionSpec, apply
from .imagecore import RandomSource, load_png, psnr, save_png

MIN_VISIBLE_PIXELS = 16
MAX_CLASSES = 4

__all__ = [
    "MIN_VISIBLE_PIXELS",
    "InstanceAnnotation",
    "Sample",
    "DatasetSplit",
    "generate_scenes",
    "corrupt_split",
    "encode_mask",
    "decode_mask",
    "save_split",
    "load_split",
    "load_cityscapes_format",
    "load_image_dir",
]


@dataclass
class InstanceAnnotation:
    class_id: int
    instance_id: int
    mask: np.ndarray  # bool, (H, W)


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    annotations: list[InstanceAnnotation]


@dataclass
class DatasetSplit:
    role: str  # "train" or "test"
    domain_tag: str  # "pristine", a distortion key, or a loader tag
    samples: list[Sample]
    provenance: DistortionSpec | None = None
    psnr_by_id: dict[str, float] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float | None:
        if not self.psnr_by_id:
            return None
        vals = list(self.psnr_by_id.values())
        if any(math.isinf(v) for v in vals):
            return math.inf
        return float(np.mean(vals))

    def images(self) -> list[np.ndarray]:
        return [s.image for s in self.samples]


# ---------------------------------------------------------------------------
# generation


def _coord_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = np.arange(size, dtype=np.float64)
    return np.meshgrid(ax, ax, indexing="ij")


def _shape_mask(class_id: int, size: int, gen: np.random.Generator) -> np.ndarray:
    yy, xx = _coord_grid(size)
    margin = 0.12 * size
    cy = gen.uniform(margin, size - margin)
    cx = gen.uniform(margin, size - margin)
    r = gen.uniform(0.08, 0.22) * size
    theta = gen.uniform(0.0, 2.0 * math.pi)
    dy, dx = yy - cy, xx - cx
    if class_id == 1:  # disc
        return dy * dy + dx * dx <= r * r
    if class_id == 2:  # rotated rectangle
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (np.abs(u) <= r) & (np.abs(v) <= gen.uniform(0.4, 0.8) * r)
    if class_id == 3:  # triangle from three half-planes
        angles = theta + np.array([0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0])
        vy = cy + 1.3 * r * np.sin(angles)
        vx = cx + 1.3 * r * np.cos(angles)
        mask = np.ones((size, size), dtype=bool)
        for k in range(3):
            ey, ex = vy[(k + 1) % 3] - vy[k], vx[(k + 1) % 3] - vx[k]
            py, px = yy - vy[k], xx - vx[k]
            mask &= (ex * py - ey * px) >= 0
        return mask
    if class_id == 4:  # ring
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"class_id must be in 1..{MAX_CLASSES}, got {class_id}")


def _texture(size: int, base: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Striped or checkered fine texture around a base color."""
    yy, xx = _coord_grid(size)
    period = gen.uniform(3.0, 8.0)
    angle = gen.uniform(0.0, math.pi)
    phase = gen.uniform(0.0, 2.0 * math.pi)
    wave = np.sin(2.0 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    if gen.random() < 0.5:
        wave = np.sign(wave)  # checker-like hard stripes
    amp = gen.uniform(0.08, 0.18)
    tint = gen.uniform(0.6, 1.0, size=3)
    return np.clip(base[None, None, :] + amp * wave[:, :, None] * tint[None, None, :], 0.0, 1.0)


def _background(size: int, gen: np.random.Generator) -> np.ndarray:
    c0 = gen.uniform(0.15, 0.45, size=3)
    c1 = gen.uniform(0.15, 0.45, size=3)
    t = np.linspace(0.0, 1.0, size, dtype=np.float64)
    grad = (1 - t)[:, None, None] * c0[None, None, :] + t[:, None, None] * c1[None, None, :]
    return _texture(size, np.zeros(3), gen) * 0.35 + grad * 0.75


def generate_scenes(
    count: int, classes: int, img_size: int, rng: RandomSource, role: str = "train"
) -> DatasetSplit:
    """Procedural dataset of ``count`` scenes with ``classes`` shape classes.

    Deterministic given (rng.seed, rng.stream_id, count, classes, img_size,
    role); each sample derives its own stream from its id, so per-sample
    content does not depend on generation order. Class counts stay balanced
    via a global round-robin assignment.
    """
    if not (1 <= classes <= MAX_CLASSES):
        raise ValueError(f"classes must be in 1..{MAX_CLASSES}, got {classes}")
    if img_size < 32:
        raise ValueError(f"img_size must be >= 32, got {img_size}")
    samples = []
    class_cursor = 0
    for i in range(count):
        sample_id = f"{role}-{i:05d}"
        gen = rng.spawn(f"scene/{sample_id}").gen
        img = _background(img_size, gen)
        n_shapes = int(gen.integers(3, 7))
        owner = np.full((img_size, img_size), -1, dtype=np.int32)
        shape_classes = []
        for k in range(n_shapes):
            cls = class_cursor % classes + 1
            class_cursor += 1
            mask = _shape_mask(cls, img_size, gen)
            base = gen.uniform(0.25, 0.9, size=3)
            tex = _texture(img_size, base, gen)
            img = np.where(mask[:, :, None], tex, img)
            owner[mask] = k
            shape_classes.append(cls)
        annotations = []
        for k, cls in enumerate(shape_classes):
            visible = owner == k
            if int(visible.sum()) < MIN_VISIBLE_PIXELS:
                continue
            annotations.append(
                InstanceAnnotation(class_id=cls, instance_id=len(annotations) + 1, mask=visible)
            )
        samples.append(Sample(sample_id=sample_id, image=np.clip(img, 0.0, 1.0), annotations=annotations))
    return DatasetSplit(role=role, domain_tag="pristine", samples=samples)


# ---------------------------------------------------------------------------
# corruption


def _corrupt_one(payload: tuple) -> tuple[str, np.ndarray, float]:
    seed, stream_id, sample_id, image, spec_dict = payload
    spec = DistortionSpec.from_dict(spec_dict)
    srng = RandomSource(seed, f"{stream_id}/corrupt/{sample_id}")
    out = apply(spec, image, srng)
    return sample_id, out, psnr(image, out)


def corrupt_split(
    split: DatasetSplit, spec: DistortionSpec, rng: RandomSource, workers: int = 1
) -> DatasetSplit:
    """Apply one distortion to every image; annotations carry over unchanged.

    Each sample uses a stream derived from its id and results merge by id, so
    the output is identical for any worker count or processing order. Records
    per-image psnr(original, corrupted).
    """
    payloads = [
        (rng.seed, rng.stream_id, s.sample_id, s.image, spec.to_dict()) for s in split.samples
    ]
    if workers > 1 and len(payloads) > 1:
        import concurrent.futures
        import multiprocessing

        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = {sid: (img, p) for sid, img, p in pool.map(_corrupt_one, payloads, chunksize=4)}
    else:
        results = {}
        for payload in payloads:
            sid, img, p = _corrupt_one(payload)
            results[sid] = (img, p)
    out_samples = [
        Sample(sample_id=s.sample_id, image=results[s.sample_id][0], annotations=s.annotations)
        for s in split.samples
    ]
    psnr_by_id = {s.sample_id: results[s.sample_id][1] for s in split.samples}
    return DatasetSplit(
        role=split.role,
        domain_tag=spec.key(),
        samples=out_samples,
        provenance=spec,
        psnr_by_id=psnr_by_id,
    )


# ---------------------------------------------------------------------------
# mask RLE


def encode_mask(mask: np.ndarray) -> dict:
    """Row-major RLE: alternating background/foreground run lengths, starting
    with background (zero-length when the first pixel is foreground)."""
    if mask.dtype != bool or mask.ndim != 2:
        raise ValueError("mask must be a 2-d boolean array")
    flat = mask.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "runs": [int(r) for r in runs]}


def decode_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    runs = rle["runs"]
    if sum(runs) != h * w:
        raise ValueError(f"RLE runs sum to {sum(runs)}, expected {h * w}")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(h, w)


# ---------------------------------------------------------------------------
# disk round-trip


def _float_out(v) -> float | str | None:
    if v is None:
        return None
    return "inf" if math.isinf(v) else float(v)


def _float_in(v) -> float | None:
    if v is None:
        return None
    return math.inf if v == "inf" else float(v)


def save_split(split: DatasetSplit, root) -> None:
    """Write images, annotation JSONs, and merge this split into the root manifest."""
    root = Path(root)
    img_dir = root / split.role / "images"
    ann_dir = root / split.role / "annotations"
    img_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for s in split.samples:
        save_png(s.image, img_dir / f"{s.sample_id}.png")
        h, w = s.image.shape[:2]
        record = {
            "image_id": s.sample_id,
            "height": int(h),
            "width": int(w),
            "instances": [
                {
                    "class_id": int(a.class_id),
                    "instance_id": int(a.instance_id),
                    "mask_rle": encode_mask(a.mask),
                }
                for a in s.annotations
            ],
        }
        (ann_dir / f"{s.sample_id}.json").write_text(json.dumps(record))
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"version": 1, "splits": {}}
    manifest["splits"][split.role] = {
        "role": split.role,
        "domain_tag": split.domain_tag,
        "count": len(split.samples),
        "provenance": split.provenance.to_dict() if split.provenance else None,
        "psnr_by_id": {k: _float_out(v) for k, v in split.psnr_by_id.items()},
        "mean_psnr": _float_out(split.mean_psnr),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_split(root, role: str) -> DatasetSplit:
    root = Path(root)
    img_dir = root / role / "images"
    ann_dir = root / role / "annotations"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no images directory at {img_dir}")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        sid = img_path.stem
        ann_path = ann_dir / f"{sid}.json"
        if not ann_path.exists():
            raise FileNotFoundError(f"missing annotation file for image {sid!r}: {ann_path}")
        record = json.loads(ann_path.read_text())
        annotations = [
            InstanceAnnotation(
                class_id=int(inst["class_id"]),
                instance_id=int(inst["instance_id"]),
                mask=decode_mask(inst["mask_rle"]),
            )
            for inst in record["instances"]
        ]
        samples.append(Sample(sample_id=sid, image=load_png(img_path), annotations=annotations))
    manifest_path = root / "manifest.json"
    domain_tag = "pristine"
    provenance = None
    psnr_by_id: dict[str, float] = {}
    if manifest_path.exists():
        entry = json.loads(manifest_path.read_text()).get("splits", {}).get(role)
        if entry:
            domain_tag = entry.get("domain_tag", domain_tag)
            if entry.get("provenance"):
                provenance = DistortionSpec.from_dict(entry["provenance"])
            psnr_by_id = {k: _float_in(v) for k, v in entry.get("psnr_by_id", {}).items()}
    return DatasetSplit(
        role=role, domain_tag=domain_tag, samples=samples, provenance=provenance, psnr_by_id=psnr_by_id
    )


# ---------------------------------------------------------------------------
# external dataset ingestion


def load_cityscapes_format(root, class_mapping: dict | str | Path, role: str = "test") -> DatasetSplit:
    """Load a directory tree in the Cityscapes instance-label convention.

    Images end in ``_leftImg8bit.png``; each must have a matching
    ``_gtFine_instanceIds.png`` somewhere under ``root`` whose pixels encode
    ``raw_class_id * 1000 + instance_index`` for instance pixels. Pixels below
    1000 are semantic-only regions and are ignored. ``class_mapping`` maps raw
    class ids (as ints or digit strings) to contiguous ids starting at 1;
    instances of unmapped classes are skipped.
    """
    root = Path(root)
    if isinstance(class_mapping, (str, Path)):
        class_mapping = json.loads(Path(class_mapping).read_text())
    mapping = {int(k): int(v) for k, v in dict(class_mapping).items()}
    image_suffix = "_leftImg8bit.png"
    label_suffix = "_gtFine_instanceIds.png"
    labels = {p.name[: -len(label_suffix)]: p for p in root.rglob(f"*{label_suffix}")}
    samples = []
    for img_path in sorted(root.rglob(f"*{image_suffix}")):
        stem = img_path.name[: -len(image_suffix)]
        label_path = labels.get(stem)
        if label_path is None:
            raise FileNotFoundError(f"image {img_path.name!r} has no {label_suffix} companion under {root}")
        with PILImage.open(img_path) as im:
            raster = np.asarray(im.convert("RGB"), dtype=np.uint8)
        image = raster.astype(np.float64) / 255.0
        with PILImage.open(label_path) as im:
            ids = np.asarray(im, dtype=np.int64)
        if ids.shape != image.shape[:2]:
            raise ValueError(f"label shape {ids.shape} does not match image {image.shape[:2]} for {stem!r}")
        annotations = []
        for uid in np.unique(ids):
            if uid < 1000:
                continue
            raw_cls = int(uid) // 1000
            if raw_cls not in mapping:
                continue
            mask = ids == uid
            annotations.append(
                InstanceAnnotation(class_id=mapping[raw_cls], instance_id=len(annotations) + 1, mask=mask)
            )
        samples.append(Sample(sample_id=stem, image=image, annotations=annotations))
    return DatasetSplit(role=role, domain_tag="cityscapes", samples=samples)


def load_image_dir(path) -> list[np.ndarray]:
    """All PNGs in a directory as in-memory images, sorted by filename."""
    path = Path(path)
    files = sorted(path.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png files in {path}")
    return [load_png(p) for p in files]
