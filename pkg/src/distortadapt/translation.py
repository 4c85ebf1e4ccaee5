"""Unpaired image-to-image translation for learning a distortion emulator.

Two generators (G: clean domain to distorted domain, F: reverse) and two
patch discriminators train on unpaired image sets with least-squares
adversarial losses, cycle-consistency, and an identity term. Generators are
fully convolutional encoder/residual/decoder stacks with a bounded output
head, so a model trained on crops emulates the learned distortion on images
of any size.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as TF

from .imagecore import RandomSource, random_crop, validate_image

__all__ = [
    "DivergenceError",
    "Generator",
    "Discriminator",
    "ImagePool",
    "TranslationConfig",
    "TranslationModel",
    "build_model",
    "emulate",
    "load_checkpoint",
    "loss_terms",
    "lr_schedule",
    "save_checkpoint",
    "train",
]


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite; carries the last checkpoint."""

    def __init__(self, message: str, last_checkpoint=None, epoch: int = -1, step: int = -1):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.epoch = epoch
        self.step = step


@dataclass
class TranslationConfig:
    crop_size: int = 64
    base_filters: int = 16
    residual_blocks: int = 3
    disc_layers: int = 2
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.5
    # Reference convention: the identity weight multiplies lambda_cycle
    # (effective weight 0.5 * 10 = 5). Set False to use lambda_identity as-is.
    identity_scaled_by_cycle: bool = True
    lr_initial: float = 2e-4
    epochs_constant: int = 100
    epochs_decay: int = 100
    steps_per_epoch: int | None = None
    batch_size: int = 1
    pool_size: int = 50
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    init_std: float = 0.02
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    @classmethod
    def full_scale(cls) -> "TranslationConfig":
        """Training profile at publication scale: 256px crops, 9 residual
        blocks, 64 base filters, 100 constant + 100 decay epochs."""
        return cls(crop_size=256, base_filters=64, residual_blocks=9, disc_layers=3)

    @classmethod
    def toy(cls) -> "TranslationConfig":
        """Desk-scale profile that trains in minutes on one CPU core."""
        return cls(
            crop_size=64,
            base_filters=16,
            residual_blocks=3,
            disc_layers=2,
            epochs_constant=20,
            epochs_decay=20,
            steps_per_epoch=150,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TranslationConfig":
        return cls(**d)

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


def lr_schedule(cfg: TranslationConfig, epoch: int) -> float:
    """Constant for epochs_constant epochs, then linear decay:
    lr_initial * (1 - (epoch - epochs_constant + 1) / epochs_decay)."""
    if not (0 <= epoch < cfg.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.epochs_constant:
        return cfg.lr_initial
    return cfg.lr_initial * (1.0 - (epoch - cfg.epochs_constant + 1) / cfg.epochs_decay)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder (stride-2 x2), residual trunk, decoder (stride-2 transposed x2).

    Input and output are (N, 3, H, W) in [0, 1]; the tanh head is rescaled so
    the output stays bounded in [0, 1]. H and W must be multiples of 4.
    """

    def __init__(self, base_filters: int, residual_blocks: int):
        super().__init__()
        ch = base_filters
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, ch, 7),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(residual_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return (self.net(x) + 1.0) * 0.5


class Discriminator(nn.Module):
    """Patch discriminator: a map of real/fake scores, one per receptive patch."""

    def __init__(self, base_filters: int, n_layers: int):
        super().__init__()
        ch = base_filters
        layers: list[nn.Module] = [nn.Conv2d(3, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(n_layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers += [
            nn.Conv2d(ch, ch * 2, 4, stride=1, padding=1),
            nn.InstanceNorm2d(ch * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch * 2, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_weights(module: nn.Module, std: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class TranslationModel:
    G: nn.Module  # source (clean) to target (distorted)
    F: nn.Module  # target to source
    D_X: nn.Module  # discriminates the source domain
    D_Y: nn.Module  # discriminates the target domain
    config: TranslationConfig
    epoch: int = 0
    loss_log: list = field(default_factory=list)

    def generator_parameters(self):
        return itertools.chain(self.G.parameters(), self.F.parameters())

    def discriminator_parameters(self):
        return itertools.chain(self.D_X.parameters(), self.D_Y.parameters())

    def eval(self) -> "TranslationModel":
        for net in (self.G, self.F, self.D_X, self.D_Y):
            net.eval()
        return self


def build_model(cfg: TranslationConfig, torch_seed: int | None = None) -> TranslationModel:
    if torch_seed is not None:
        torch.manual_seed(torch_seed)
    nets = [
        Generator(cfg.base_filters, cfg.residual_blocks),
        Generator(cfg.base_filters, cfg.residual_blocks),
        Discriminator(cfg.base_filters, cfg.disc_layers),
        Discriminator(cfg.base_filters, cfg.disc_layers),
    ]
    for net in nets:
        _init_weights(net, cfg.init_std)
    return TranslationModel(G=nets[0], F=nets[1], D_X=nets[2], D_Y=nets[3], config=cfg)


class ImagePool:
    """History buffer of generated samples shown to the discriminators.

    Holds up to ``capacity`` past fakes; a query either passes the fresh
    sample through or (with probability 1/2 once full) swaps it against a
    stored one. Stabilizes discriminator training on batch-1 streams.
    """

    def __init__(self, capacity: int, rng: RandomSource):
        self.capacity = capacity
        self.rng = rng
        self.items: list[torch.Tensor] = []

    def query(self, sample: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return sample
        if len(self.items) < self.capacity:
            self.items.append(sample.detach().clone())
            return sample
        if self.rng.gen.random() < 0.5:
            return sample
        idx = int(self.rng.gen.integers(len(self.items)))
        old = self.items[idx]
        self.items[idx] = sample.detach().clone()
        return old


def _identity_weight(cfg: TranslationConfig) -> float:
    if cfg.identity_scaled_by_cycle:
        return cfg.lambda_identity * cfg.lambda_cycle
    return cfg.lambda_identity


def loss_terms(
    model: TranslationModel,
    x: torch.Tensor,
    y: torch.Tensor,
    pool_x: ImagePool | None = None,
    pool_y: ImagePool | None = None,
) -> dict[str, torch.Tensor]:
    """Every training loss term for one (x, y) batch pair.

    Least-squares adversarial targets (real 1, fake 0), L1 cycle and identity
    terms. Discriminator terms see pooled fakes when pools are given, fresh
    detached fakes otherwise. total_G and total_D are the two optimized
    scalars; their graphs are disjoint, so both can be backpropagated from
    one call.
    """
    cfg = model.config
    fake_y = model.G(x)
    fake_x = model.F(y)
    rec_x = model.F(fake_y)
    rec_y = model.G(fake_x)
    idt_y = model.G(y)
    idt_x = model.F(x)

    def adv(pred: torch.Tensor, real: bool) -> torch.Tensor:
        target = torch.ones_like(pred) if real else torch.zeros_like(pred)
        return TF.mse_loss(pred, target)

    adv_g = adv(model.D_Y(fake_y), True)
    adv_f = adv(model.D_X(fake_x), True)
    cycle = TF.l1_loss(rec_x, x) + TF.l1_loss(rec_y, y)
    identity = TF.l1_loss(idt_y, y) + TF.l1_loss(idt_x, x)
    total_g = adv_g + adv_f + cfg.lambda_cycle * cycle + _identity_weight(cfg) * identity

    fx = pool_x.query(fake_x.detach()) if pool_x is not None else fake_x.detach()
    fy = pool_y.query(fake_y.detach()) if pool_y is not None else fake_y.detach()
    adv_d_x = 0.5 * (adv(model.D_X(x), True) + adv(model.D_X(fx), False))
    adv_d_y = 0.5 * (adv(model.D_Y(y), True) + adv(model.D_Y(fy), False))
    return {
        "adv_G": adv_g,
        "adv_F": adv_f,
        "cycle": cycle,
        "identity": identity,
        "total_G": total_g,
        "adv_D_X": adv_d_x,
        "adv_D_Y": adv_d_y,
        "total_D": adv_d_x + adv_d_y,
    }


def _to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).to(dtype).permute(2, 0, 1).unsqueeze(0)


def _to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
    return np.clip(arr, 0.0, 1.0)


def train(
    cfg: TranslationConfig,
    source_images: list[np.ndarray],
    target_images: list[np.ndarray],
    rng: RandomSource,
    checkpoint_dir=None,
) -> TranslationModel:
    """Train the translation pair on unpaired image sets.

    Fully deterministic given (cfg, images, rng). Source images cycle through
    a fresh permutation each epoch; target images are drawn independently.
    Appends one row per epoch to model.loss_log. Non-finite losses raise
    DivergenceError carrying the most recent checkpoint path.
    """
    if not source_images or not target_images:
        raise ValueError("source and target image sets must be non-empty")
    model = build_model(cfg, torch_seed=rng.torch_seed())
    opt_g = torch.optim.Adam(
        model.generator_parameters(), lr=cfg.lr_initial, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    opt_d = torch.optim.Adam(
        model.discriminator_parameters(), lr=cfg.lr_initial, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    pool_x = ImagePool(cfg.pool_size, rng.spawn("pool_x"))
    pool_y = ImagePool(cfg.pool_size, rng.spawn("pool_y"))
    order = rng.spawn("order")
    crops = rng.spawn("crops")
    steps = cfg.steps_per_epoch or len(source_images)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt = None
    track = ("adv_G", "adv_F", "adv_D_X", "adv_D_Y", "cycle", "identity", "total_G", "total_D")
    for epoch in range(cfg.total_epochs):
        lr = lr_schedule(cfg, epoch)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        perm = order.gen.permutation(len(source_images))
        sums = dict.fromkeys(track, 0.0)
        for step in range(steps):
            xs, ys = [], []
            for _ in range(cfg.batch_size):
                src = source_images[perm[step % len(source_images)]]
                tgt = target_images[int(order.gen.integers(len(target_images)))]
                xs.append(_to_tensor(random_crop(src, cfg.crop_size, crops)))
                ys.append(_to_tensor(random_crop(tgt, cfg.crop_size, crops)))
            x = torch.cat(xs, dim=0)
            y = torch.cat(ys, dim=0)
            terms = loss_terms(model, x, y, pool_x, pool_y)
            opt_g.zero_grad(set_to_none=True)
            terms["total_G"].backward()
            opt_g.step()
            opt_d.zero_grad(set_to_none=True)
            terms["total_D"].backward()
            opt_d.step()
            g_val = float(terms["total_G"].detach())
            d_val = float(terms["total_D"].detach())
            if not (math.isfinite(g_val) and math.isfinite(d_val)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(total_G={g_val}, total_D={d_val})",
                    last_checkpoint=last_ckpt,
                    epoch=epoch,
                    step=step,
                )
            for k in track:
                sums[k] += float(terms[k].detach())
        model.epoch = epoch + 1
        model.loss_log.append(
            {"epoch": epoch, "lr": lr, **{k: sums[k] / steps for k in track}}
        )
        if ckpt_dir is not None and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            last_ckpt = ckpt_dir / f"epoch-{epoch + 1:04d}.npz"
            save_checkpoint(model, last_ckpt)
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir / "final.npz")
    return model


def emulate(model: TranslationModel, img: np.ndarray) -> np.ndarray:
    """Run the learned distortion on a full image of any size.

    The image is reflect-padded to the generator stride (4), translated, and
    cropped back; values clip to [0, 1]."""
    validate_image(img)
    h, w = img.shape[:2]
    dtype = next(model.G.parameters()).dtype
    t = _to_tensor(img, dtype)
    ph = (-h) % 4
    pw = (-w) % 4
    if ph or pw:
        t = TF.pad(t, (0, pw, 0, ph), mode="reflect")
    model.G.eval()
    with torch.no_grad():
        out = model.G(t)
    model.G.train()
    return _to_image(out[:, :, :h, :w])


# Column order of the loss-log CSV; left names are loss_log keys.
_LOSS_COLUMNS = (
    ("epoch", "epoch"),
    ("adv_G", "adv_G"),
    ("adv_F", "adv_F"),
    ("adv_D_X", "adv_DX"),
    ("adv_D_Y", "adv_DY"),
    ("cycle", "cyc"),
    ("identity", "idt"),
    ("total_G", "total_G"),
    ("total_D", "total_D"),
    ("lr", "lr"),
)


def save_loss_log(loss_log: list[dict], path) -> None:
    """Write per-epoch loss rows to CSV, one row per epoch."""
    lines = [",".join(name for _, name in _LOSS_COLUMNS)]
    for row in loss_log:
        lines.append(
            ",".join(
                str(row[key]) if key == "epoch" else repr(float(row[key]))
                for key, _ in _LOSS_COLUMNS
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_checkpoint(model: TranslationModel, path) -> None:
    arrays = {}
    for prefix, net in (("G", model.G), ("F", model.F), ("D_X", model.D_X), ("D_Y", model.D_Y)):
        for name, tensor in net.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().numpy()
    meta = json.dumps({"config": model.config.to_dict(), "epoch": model.epoch})
    np.savez_compressed(path, __meta__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TranslationModel:
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    cfg = TranslationConfig.from_dict(meta["config"])
    model = build_model(cfg)
    for prefix, net in (("G", model.G), ("F", model.F), ("D_X", model.D_X), ("D_Y", model.D_Y)):
        state = {
            key[len(prefix) + 1 :]: torch.from_numpy(np.array(data[key]))
            for key in data.files
            if key.startswith(f"{prefix}.")
        }
        net.load_state_dict(state)
    model.epoch = int(meta["epoch"])
    return model
