"""Instance-segmentation evaluation: pooled AP over overlap thresholds.

Predictions from all images pool into one ranked list per class (rank key:
score descending, then mask size descending, then insertion order, where
insertion order walks images by sorted id and each image's predictions in
list order). For every overlap threshold in 0.50..0.95 the ranked list is
greedily matched against each image's unmatched ground truths, a pooled
precision/recall curve is built, and AP is its all-point-interpolated area
with the monotone precision envelope. Classes with at least one ground-truth
instance average into mAP.

``brute_force_average_precision`` recomputes AP by enumerating every feasible
prediction-to-ground-truth assignment and taking the best achievable AP with
an independent, loop-based AP routine. Greedy matching can never beat it, and
equals it whenever no prediction has two candidate ground truths above the
threshold. Enumeration is exponential in the instance count; only use it on
scenes with a handful of instances.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distortions import DistortionSpec, severity

DEFAULT_OVERLAPS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

__all__ = [
    "DEFAULT_OVERLAPS",
    "EvalReport",
    "average_precision",
    "brute_force_average_precision",
    "brute_force_map",
    "gain_table",
    "instance_iou",
    "map_cityscapes",
    "map_over_psnr",
    "write_csv",
]


def instance_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 0.0 when both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def _ap_from_flags(flags: np.ndarray, npos: int) -> float:
    """All-point interpolated AP from ranked hit flags (vectorized route)."""
    if npos <= 0:
        raise ValueError("AP undefined without ground-truth instances")
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags.astype(np.float64))
    fp = np.cumsum((~flags).astype(np.float64))
    recall = tp / npos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _ap_reference(flags: list[bool], npos: int) -> float:
    """Same quantity as :func:`_ap_from_flags` via the plain textbook loop.

    Kept separate on purpose: the brute-force oracle must not share code with
    the path it checks.
    """
    tp = 0
    fp = 0
    points = []
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        points.append((tp / npos, tp / (tp + fp)))
    ap = 0.0
    last_recall = 0.0
    for i, (r, _) in enumerate(points):
        if r > last_recall:
            best = max(p for _, p in points[i:])
            ap += (r - last_recall) * best
            last_recall = r
    return ap


@dataclass
class _Group:
    """One image's predictions and ground truths for one class."""

    image_id: str
    ious: np.ndarray  # (n_pred, n_gt)
    order_keys: list[tuple]  # global sort key per local prediction


def _build_groups(preds_by_image: dict, gts_by_image: dict, class_id: int) -> tuple[list[_Group], int]:
    unknown = set(preds_by_image) - set(gts_by_image)
    if unknown:
        raise ValueError(f"predictions reference unknown image ids: {sorted(unknown)}")
    groups = []
    npos = 0
    insertion = 0
    for image_id in sorted(gts_by_image):
        gt_masks = [g.mask for g in gts_by_image[image_id] if g.class_id == class_id]
        npos += len(gt_masks)
        preds = [p for p in preds_by_image.get(image_id, []) if p.class_id == class_id]
        ious = np.zeros((len(preds), len(gt_masks)), dtype=np.float64)
        keys = []
        for i, p in enumerate(preds):
            size = int(p.mask.sum())
            keys.append((-float(p.score), -size, insertion))
            insertion += 1
            for j, gm in enumerate(gt_masks):
                ious[i, j] = instance_iou(p.mask, gm)
        if preds or gt_masks:
            groups.append(_Group(image_id=image_id, ious=ious, order_keys=keys))
    return groups, npos


def _ranked(groups: list[_Group]) -> list[tuple[tuple, int, int]]:
    """Global rank order as (key, group index, local prediction index)."""
    entries = [
        (g.order_keys[i], gi, i) for gi, g in enumerate(groups) for i in range(len(g.order_keys))
    ]
    entries.sort(key=lambda e: e[0])
    return entries


def _greedy_flags(groups: list[_Group], tau: float) -> np.ndarray:
    """Hit flags in global rank order from greedy highest-IoU matching."""
    matched = [np.zeros(g.ious.shape[1], dtype=bool) for g in groups]
    flags = []
    for _, gi, i in _ranked(groups):
        row = groups[gi].ious[i]
        open_j = np.flatnonzero(~matched[gi] & (row >= tau))
        if open_j.size:
            j = open_j[np.argmax(row[open_j])]
            matched[gi][j] = True
            flags.append(True)
        else:
            flags.append(False)
    return np.array(flags, dtype=bool)


def average_precision(preds_by_image: dict, gts_by_image: dict, class_id: int, tau: float) -> float:
    """Pooled single-class AP at one overlap threshold with greedy matching."""
    groups, npos = _build_groups(preds_by_image, gts_by_image, class_id)
    return _ap_from_flags(_greedy_flags(groups, tau), npos)


def _enumerate_assignments(ious: np.ndarray, tau: float):
    """All maximal-feasibility assignments for one image: per local prediction,
    a ground-truth index or None, ground truths used at most once."""
    n_pred, n_gt = ious.shape

    def rec(i: int, used: frozenset):
        if i == n_pred:
            yield ()
            return
        for rest in rec(i + 1, used):
            yield (None,) + rest
        for j in range(n_gt):
            if j not in used and ious[i, j] >= tau:
                for rest in rec(i + 1, used | {j}):
                    yield (j,) + rest

    yield from rec(0, frozenset())


def brute_force_average_precision(
    preds_by_image: dict, gts_by_image: dict, class_id: int, tau: float
) -> float:
    """Best achievable pooled AP over every feasible assignment (oracle)."""
    groups, npos = _build_groups(preds_by_image, gts_by_image, class_id)
    if npos <= 0:
        raise ValueError("AP undefined without ground-truth instances")
    ranked = _ranked(groups)
    per_group = [list(_enumerate_assignments(g.ious, tau)) for g in groups]
    best = 0.0
    for combo in itertools.product(*per_group) if per_group else [()]:
        flags = [combo[gi][i] is not None for _, gi, i in ranked]
        best = max(best, _ap_reference(flags, npos))
    return best


@dataclass
class EvalReport:
    """mAP evaluation result for one (model, test split) pair."""

    overlaps: list[float]
    per_class_ap: dict[int, dict[float, float]]
    per_class_mean: dict[int, float]
    map: float
    counts: dict[str, int]
    mean_psnr: float | None = None
    tag: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            return "inf" if math.isinf(v) else float(v)

        return {
            "overlaps": list(self.overlaps),
            "per_class_ap": {
                str(c): {f"{t:.2f}": enc(a) for t, a in taus.items()}
                for c, taus in self.per_class_ap.items()
            },
            "per_class_mean": {str(c): enc(v) for c, v in self.per_class_mean.items()},
            "map": enc(self.map),
            "counts": dict(self.counts),
            "mean_psnr": enc(self.mean_psnr),
            "tag": self.tag,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def dec(v):
            if v is None:
                return None
            return math.inf if v == "inf" else float(v)

        return cls(
            overlaps=[float(t) for t in d["overlaps"]],
            per_class_ap={
                int(c): {float(t): dec(a) for t, a in taus.items()}
                for c, taus in d["per_class_ap"].items()
            },
            per_class_mean={int(c): dec(v) for c, v in d["per_class_mean"].items()},
            map=dec(d["map"]),
            counts={k: int(v) for k, v in d["counts"].items()},
            mean_psnr=dec(d.get("mean_psnr")),
            tag=d.get("tag", ""),
            extras=d.get("extras", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def map_cityscapes(
    preds_by_image: dict,
    gts_by_image: dict,
    classes: int | list[int],
    overlaps=DEFAULT_OVERLAPS,
    tag: str = "",
) -> EvalReport:
    """Pooled mAP over classes and overlap thresholds.

    ``preds_by_image`` maps image id to objects with class_id/mask/score;
    ``gts_by_image`` maps image id to objects with class_id/mask. Classes
    without any ground-truth instance are reported as None and excluded from
    the mean; at least one class must have ground truth.
    """
    class_ids = list(range(1, classes + 1)) if isinstance(classes, int) else list(classes)
    overlaps = [float(t) for t in overlaps]
    per_class_ap: dict[int, dict[float, float]] = {}
    per_class_mean: dict[int, float] = {}
    n_preds = sum(len(v) for v in preds_by_image.values())
    n_gts = sum(len(v) for v in gts_by_image.values())
    for c in class_ids:
        groups, npos = _build_groups(preds_by_image, gts_by_image, c)
        if npos == 0:
            per_class_ap[c] = {t: None for t in overlaps}
            per_class_mean[c] = None
            continue
        aps = {t: _ap_from_flags(_greedy_flags(groups, t), npos) for t in overlaps}
        per_class_ap[c] = aps
        per_class_mean[c] = float(np.mean(list(aps.values())))
    valid = [v for v in per_class_mean.values() if v is not None]
    if not valid:
        raise ValueError("no class has ground-truth instances; mAP undefined")
    return EvalReport(
        overlaps=overlaps,
        per_class_ap=per_class_ap,
        per_class_mean=per_class_mean,
        map=float(np.mean(valid)),
        counts={"images": len(gts_by_image), "predictions": n_preds, "ground_truths": n_gts},
        tag=tag,
    )


def brute_force_map(
    preds_by_image: dict, gts_by_image: dict, classes: int | list[int], overlaps=DEFAULT_OVERLAPS
) -> float:
    """Oracle counterpart of :func:`map_cityscapes` (enumerative matching)."""
    class_ids = list(range(1, classes + 1)) if isinstance(classes, int) else list(classes)
    means = []
    for c in class_ids:
        _, npos = _build_groups(preds_by_image, gts_by_image, c)
        if npos == 0:
            continue
        aps = [brute_force_average_precision(preds_by_image, gts_by_image, c, t) for t in overlaps]
        means.append(float(np.mean(aps)))
    if not means:
        raise ValueError("no class has ground-truth instances; mAP undefined")
    return float(np.mean(means))


# ---------------------------------------------------------------------------
# tables


def map_over_psnr(reports: dict[DistortionSpec | None, EvalReport]) -> list[dict]:
    """Rows (kind, level, mean_psnr, map); the key None is the pristine row
    (infinite PSNR). Sorted by kind, then mean PSNR ascending (severe first)."""
    rows = []
    for spec, report in reports.items():
        mean_psnr = report.mean_psnr if report.mean_psnr is not None else math.inf
        rows.append(
            {
                "kind": spec.kind if spec else "pristine",
                "level": float(spec.level) if spec else "",
                "mean_psnr": mean_psnr,
                "map": report.map,
            }
        )
    rows.sort(key=lambda r: (r["kind"], r["mean_psnr"]))
    return rows


def gain_table(maps: dict[tuple[str, float, str], float]) -> list[dict]:
    """Per-kind mAP gains over the baseline, averaged across levels.

    ``maps`` maps (kind, level, branch) to mAP, with branches baseline,
    oracle, learned. Rows: kind, levels, baseline_map, oracle_gain,
    learned_gain, oracle_minus_learned; kinds sorted alphabetically.
    """
    kinds: dict[str, list[float]] = {}
    for kind, level, _ in maps:
        kinds.setdefault(kind, [])
    for kind in kinds:
        levels = sorted({lvl for (k, lvl, _) in maps if k == kind})
        kinds[kind] = levels
    rows = []
    for kind in sorted(kinds):
        base, ogain, lgain = [], [], []
        for lvl in kinds[kind]:
            b = maps.get((kind, lvl, "baseline"))
            o = maps.get((kind, lvl, "oracle"))
            g = maps.get((kind, lvl, "learned"))
            if b is None or o is None or g is None:
                raise ValueError(f"gain table needs all three branches for {kind}@{lvl}")
            base.append(b)
            ogain.append(o - b)
            lgain.append(g - b)
        rows.append(
            {
                "kind": kind,
                "levels": len(kinds[kind]),
                "baseline_map": float(np.mean(base)),
                "oracle_gain": float(np.mean(ogain)),
                "learned_gain": float(np.mean(lgain)),
                "oracle_minus_learned": float(np.mean(ogain) - np.mean(lgain)),
            }
        )
    return rows


def sort_specs_mild_to_severe(specs: list[DistortionSpec]) -> list[DistortionSpec]:
    return sorted(specs, key=lambda s: (s.kind, severity(s)))


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6f}"
    return str(v)


def write_csv(rows: list[dict], path) -> None:
    """Deterministic CSV: fixed column order from the first row, floats at six
    decimals, infinities as the string 'inf'."""
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt_cell(row[f]) for f in fields])
