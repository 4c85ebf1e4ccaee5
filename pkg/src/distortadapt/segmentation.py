"""Compact instance segmentation via per-pixel classification plus centroid offsets.

The network predicts, for every pixel, class logits (background + C shape
classes) and a 2-channel offset pointing at the owning instance's centroid
(normalized by max(H, W)). Decoding shifts each foreground pixel by its
offset and groups the shifted points with grid-linkage clustering (cells of
side cluster_radius; occupied neighboring cells merge), giving disjoint
instance masks. An instance's score is the mean predicted probability of its
majority class over its pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as TF

from .imagecore import RandomSource, validate_image
from .scenes import DatasetSplit, Sample

__all__ = [
    "PredictionInstance",
    "SegConfig",
    "SegModel",
    "SegNet",
    "TrainingDivergedError",
    "build_seg_model",
    "load_seg_checkpoint",
    "predict",
    "pretrain_baseline",
    "save_seg_checkpoint",
    "step_lr",
    "train_or_finetune",
]


class TrainingDivergedError(RuntimeError):
    """Raised when the segmentation loss goes non-finite."""


@dataclass
class SegConfig:
    classes: int = 4
    base_filters: int = 16
    batch_size: int = 4
    max_iterations: int = 2000
    lr_initial: float = 0.005
    lr_drop_at: int = 1500
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    offset_loss_weight: float = 1.0
    cluster_radius: float = 5.0
    min_pixels: int = 16
    log_every: int = 100

    @classmethod
    def full_scale(cls, classes: int = 4) -> "SegConfig":
        """Publication-scale recipe: batch 4, 24000 iterations, lr 0.01
        stepped to 0.001 at iteration 18000."""
        return cls(
            classes=classes,
            base_filters=32,
            max_iterations=24000,
            lr_initial=0.01,
            lr_drop_at=18000,
        )

    @classmethod
    def toy(cls, classes: int = 4) -> "SegConfig":
        """Desk-scale recipe: 2000 iterations, lr 0.005 stepped at 1500."""
        return cls(classes=classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        return cls(**d)


def step_lr(cfg: SegConfig, iteration: int) -> float:
    """Two-level step schedule: lr_initial until lr_drop_at, then scaled."""
    if not (0 <= iteration < cfg.max_iterations):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iterations})")
    if iteration < cfg.lr_drop_at:
        return cfg.lr_initial
    return cfg.lr_initial * cfg.lr_drop_factor


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(4, cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Small U-shaped backbone with class and offset heads."""

    def __init__(self, classes: int, base_filters: int):
        super().__init__()
        f = base_filters
        self.enc0 = _block(3, f)
        self.enc1 = _block(f, 2 * f)
        self.enc2 = _block(2 * f, 4 * f)
        self.pool = nn.MaxPool2d(2)
        self.dec1 = _block(4 * f + 2 * f, 2 * f)
        self.dec0 = _block(2 * f + f, f)
        self.head_cls = nn.Conv2d(f, classes + 1, 1)
        self.head_off = nn.Conv2d(f, 2, 1)

    def forward(self, x):
        e0 = self.enc0(x)
        e1 = self.enc1(self.pool(e0))
        e2 = self.enc2(self.pool(e1))
        u1 = TF.interpolate(e2, scale_factor=2, mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        u0 = TF.interpolate(d1, scale_factor=2, mode="bilinear", align_corners=False)
        d0 = self.dec0(torch.cat([u0, e0], dim=1))
        return self.head_cls(d0), self.head_off(d0)


@dataclass
class SegModel:
    net: SegNet
    config: SegConfig
    iteration: int = 0
    loss_log: list = field(default_factory=list)


@dataclass
class PredictionInstance:
    class_id: int
    score: float
    mask: np.ndarray  # bool, (H, W)


def build_seg_model(cfg: SegConfig, torch_seed: int | None = None) -> SegModel:
    if torch_seed is not None:
        torch.manual_seed(torch_seed)
    return SegModel(net=SegNet(cfg.classes, cfg.base_filters), config=cfg)


def _sample_targets(sample: Sample, classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel class map and normalized centroid-offset field."""
    h, w = sample.image.shape[:2]
    cls_map = np.zeros((h, w), dtype=np.int64)
    offsets = np.zeros((2, h, w), dtype=np.float32)
    scale = float(max(h, w))
    for ann in sample.annotations:
        if not (1 <= ann.class_id <= classes):
            raise ValueError(f"annotation class {ann.class_id} outside 1..{classes} in {sample.sample_id}")
        ys, xs = np.nonzero(ann.mask)
        if ys.size == 0:
            continue
        cls_map[ann.mask] = ann.class_id
        offsets[0][ann.mask] = (ys.mean() - ys) / scale
        offsets[1][ann.mask] = (xs.mean() - xs) / scale
    return cls_map, offsets


def _batch_loss(model: SegModel, images, cls_maps, offset_maps, cfg: SegConfig) -> torch.Tensor:
    logits, off = model.net(images)
    loss = TF.cross_entropy(logits, cls_maps)
    fg = cls_maps > 0
    if bool(fg.any()):
        mask = fg.unsqueeze(1).expand_as(off)
        loss = loss + cfg.offset_loss_weight * TF.l1_loss(off[mask], offset_maps[mask])
    return loss


def train_or_finetune(
    init: SegModel | str | Path | None,
    split: DatasetSplit,
    cfg: SegConfig,
    rng: RandomSource,
) -> SegModel:
    """Train from scratch (init None) or continue from a model/checkpoint.

    Runs cfg.max_iterations batches of cfg.batch_size samples drawn uniformly
    with replacement, SGD with momentum and weight decay, step learning-rate
    schedule. Every parameter updates; the schedule restarts for fine-tuning.
    """
    if not split.samples:
        raise ValueError("training split is empty")
    if init is None:
        model = build_seg_model(cfg, torch_seed=rng.torch_seed())
    elif isinstance(init, (str, Path)):
        loaded = load_seg_checkpoint(init)
        model = SegModel(net=loaded.net, config=cfg)
        torch.manual_seed(rng.torch_seed())
    else:
        model = SegModel(net=init.net, config=cfg)
        torch.manual_seed(rng.torch_seed())
    if model.net.head_cls.out_channels != cfg.classes + 1:
        raise ValueError("class count of the initial model does not match the config")
    images = torch.stack(
        [torch.from_numpy(s.image.astype(np.float32)).permute(2, 0, 1) for s in split.samples]
    )
    targets = [_sample_targets(s, cfg.classes) for s in split.samples]
    cls_maps = torch.stack([torch.from_numpy(c) for c, _ in targets])
    offset_maps = torch.stack([torch.from_numpy(o) for _, o in targets])
    opt = torch.optim.SGD(
        model.net.parameters(),
        lr=cfg.lr_initial,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    order = rng.spawn("batches")
    model.net.train()
    running = 0.0
    for it in range(cfg.max_iterations):
        lr = step_lr(cfg, it)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = order.gen.integers(len(split.samples), size=cfg.batch_size)
        batch = torch.as_tensor(np.asarray(idx))
        loss = _batch_loss(model, images[batch], cls_maps[batch], offset_maps[batch], cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        val = float(loss.detach())
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        running += val
        if (it + 1) % cfg.log_every == 0:
            model.loss_log.append({"iteration": it + 1, "lr": lr, "loss": running / cfg.log_every})
            running = 0.0
    model.iteration = cfg.max_iterations
    return model


def pretrain_baseline(split: DatasetSplit, cfg: SegConfig, rng: RandomSource) -> SegModel:
    """Train the segmenter from scratch on a pristine split."""
    return train_or_finetune(None, split, cfg, rng)


def _cluster_cells(cell_ids: np.ndarray) -> np.ndarray:
    """Union-find over occupied grid cells; neighbors (Chebyshev distance 1)
    merge. Returns a component label per input point."""
    cells, inverse = np.unique(cell_ids, axis=0, return_inverse=True)
    index = {tuple(c): i for i, c in enumerate(cells)}
    parent = list(range(len(cells)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, (cy, cx) in enumerate(cells):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                j = index.get((cy + dy, cx + dx))
                if j is not None and j != i:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(cells))])
    return roots[inverse]


def predict(model: SegModel, img: np.ndarray) -> list[PredictionInstance]:
    """Decode instance masks for one image; masks are pairwise disjoint,
    scores in [0, 1], instances below min_pixels dropped."""
    validate_image(img)
    cfg = model.config
    h, w = img.shape[:2]
    t = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    model.net.eval()
    with torch.no_grad():
        logits, off = model.net(t)
    model.net.train()
    probs = torch.softmax(logits[0], dim=0).numpy()
    offsets = off[0].numpy()
    cls_map = probs.argmax(axis=0)
    fg = cls_map > 0
    if not fg.any():
        return []
    scale = float(max(h, w))
    ys, xs = np.nonzero(fg)
    cy = ys + offsets[0][fg] * scale
    cx = xs + offsets[1][fg] * scale
    cells = np.stack(
        [np.floor(cy / cfg.cluster_radius), np.floor(cx / cfg.cluster_radius)], axis=1
    ).astype(np.int64)
    labels = _cluster_cells(cells)
    instances = []
    for lab in np.unique(labels):
        pick = labels == lab
        if int(pick.sum()) < cfg.min_pixels:
            continue
        mask = np.zeros((h, w), dtype=bool)
        mask[ys[pick], xs[pick]] = True
        pixel_classes = cls_map[mask]
        class_id = int(np.bincount(pixel_classes).argmax())
        score = float(probs[class_id][mask].mean())
        instances.append(PredictionInstance(class_id=class_id, score=score, mask=mask))
    instances.sort(key=lambda p: (-p.score, -int(p.mask.sum())))
    return instances


def save_seg_checkpoint(model: SegModel, path) -> None:
    arrays = {
        f"net.{name}": tensor.detach().numpy() for name, tensor in model.net.state_dict().items()
    }
    meta = json.dumps({"config": model.config.to_dict(), "iteration": model.iteration})
    np.savez_compressed(path, __meta__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **arrays)


def load_seg_checkpoint(path) -> SegModel:
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    cfg = SegConfig.from_dict(meta["config"])
    model = build_seg_model(cfg)
    state = {
        key[len("net.") :]: torch.from_numpy(np.array(data[key]))
        for key in data.files
        if key.startswith("net.")
    }
    model.net.load_state_dict(state)
    model.iteration = int(meta["iteration"])
    return model
