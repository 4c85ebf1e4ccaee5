"""Three-branch adaptation experiment with content-addressed stage caching.

For every (distortion kind, level) cell the experiment evaluates up to three
segmenters on the distorted test split:

* ``baseline``  the pristine-trained model, unchanged;
* ``oracle``    the baseline fine-tuned on the truly distorted train split;
* ``learned``   the baseline fine-tuned on train images pushed through a
                distortion emulator trained on unpaired data (pristine train
                images vs distorted test images; no test annotations touch
                any training stage).

Every stage writes its artifacts under ``<out_root>/cache/<stage>-<hash>``
where the hash covers the stage inputs (upstream stage keys, parameters,
seed); re-running a finished experiment loads everything from cache and
retrains nothing.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__, evaluation, scenes, segmentation, translation
from .distortions import TOY_GRIDS, DistortionSpec, severity
from .evaluation import DEFAULT_OVERLAPS, EvalReport
from .imagecore import RandomSource, psnr

BRANCHES = ("baseline", "oracle", "learned")
WORKERS_ENV = "DISTORTADAPT_WORKERS"

__all__ = [
    "BRANCHES",
    "WORKERS_ENV",
    "ExperimentConfig",
    "ExperimentResult",
    "ExperimentRunner",
    "PipelineError",
    "run_branch",
    "run_experiment",
]


class PipelineError(RuntimeError):
    """A stage failed; the partial manifest has been written."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_root: str = "runs/experiment"
    dataset: dict = field(
        default_factory=lambda: {
            "kind": "generate",
            "train": 400,
            "test": 100,
            "classes": 4,
            "img_size": 128,
        }
    )
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in TOY_GRIDS.items()})
    branches: list = field(default_factory=lambda: list(BRANCHES))
    translation: dict | str = "toy"
    segmentation: dict | str = "toy"
    overlaps: list = field(default_factory=lambda: list(DEFAULT_OVERLAPS))

    def __post_init__(self) -> None:
        bad = [b for b in self.branches if b not in BRANCHES]
        if bad:
            raise ValueError(f"unknown branches {bad}; valid: {list(BRANCHES)}")
        if self.dataset.get("kind") not in ("generate", "cityscapes"):
            raise ValueError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        for kind, levels in self.grid.items():
            for level in levels:
                DistortionSpec(kind, float(level))  # validates kind and range

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_root": str(self.out_root),
            "dataset": dict(self.dataset),
            "grid": {k: [float(v) for v in vs] for k, vs in self.grid.items()},
            "branches": list(self.branches),
            "translation": self.translation,
            "segmentation": self.segmentation,
            "overlaps": [float(t) for t in self.overlaps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)

    def translation_config(self) -> translation.TranslationConfig:
        return _resolve_profile(
            self.translation, translation.TranslationConfig, {"toy", "full_scale"}
        )

    def segmentation_config(self) -> segmentation.SegConfig:
        cfg = _resolve_profile(self.segmentation, segmentation.SegConfig, {"toy", "full_scale"})
        if self.dataset.get("kind") == "generate":
            cfg.classes = int(self.dataset.get("classes", cfg.classes))
        return cfg


def _resolve_profile(value, cls, names):
    """Profile spec: a profile name, or a dict of field overrides with an
    optional 'profile' base name."""
    if isinstance(value, str):
        if value not in names:
            raise ValueError(f"unknown profile {value!r}; valid: {sorted(names)}")
        return getattr(cls, value)()
    overrides = dict(value)
    base = overrides.pop("profile", "toy")
    if base not in names:
        raise ValueError(f"unknown profile {base!r}; valid: {sorted(names)}")
    cfg = getattr(cls, base)()
    for key, val in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        setattr(cfg, key, val)
    return cfg


def _stage_key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentResult:
    out_root: Path
    maps: dict  # (kind, level, branch) -> mAP
    reports: dict  # report tag -> EvalReport
    gain_rows: list | None
    files: dict  # logical name -> Path


class ExperimentRunner:
    """Materializes experiment stages on demand, with caching."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out_root = Path(config.out_root)
        self.cache_root = self.out_root / "cache"
        self.cache_root.mkdir(parents=True, exist_ok=True)
        self.rng = RandomSource(config.seed, "experiment")
        self.stage_log: list[dict] = []
        self._memo: dict[str, object] = {}
        self.trans_cfg = config.translation_config()
        self.seg_cfg = config.segmentation_config()

    # -- stage plumbing ----------------------------------------------------

    def _stage(self, name: str, payload: dict, build, load):
        """Run or reload one cached stage; returns (artifact, key)."""
        key = _stage_key({"stage": name, **payload})
        memo_key = f"{name}-{key}"
        if memo_key in self._memo:
            return self._memo[memo_key], key
        stage_dir = self.cache_root / memo_key
        marker = stage_dir / "stage.json"
        t0 = time.monotonic()
        if marker.exists():
            artifact = load(stage_dir)
            cached = True
        else:
            stage_dir.mkdir(parents=True, exist_ok=True)
            try:
                artifact = build(stage_dir)
            except Exception as exc:
                self.stage_log.append({"stage": name, "key": key, "error": repr(exc)})
                self._write_manifest(status="failed")
                raise PipelineError(f"stage {name} failed: {exc}") from exc
            marker.write_text(json.dumps({"stage": name, "key": key, "payload": payload}, default=str))
            cached = False
        self.stage_log.append(
            {
                "stage": name,
                "key": key,
                "cached": cached,
                "seconds": round(time.monotonic() - t0, 3),
            }
        )
        self._memo[memo_key] = artifact
        return artifact, key

    def _write_manifest(self, status: str) -> None:
        manifest = {
            "version": __version__,
            "status": status,
            "config": self.config.to_dict(),
            "stages": self.stage_log,
        }
        self.out_root.mkdir(parents=True, exist_ok=True)
        (self.out_root / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))

    # -- stages ------------------------------------------------------------

    def dataset(self):
        ds = self.config.dataset

        def build(stage_dir):
            if ds["kind"] == "generate":
                train = scenes.generate_scenes(
                    int(ds["train"]), int(ds["classes"]), int(ds["img_size"]),
                    self.rng.spawn("dataset/train"), role="train",
                )
                test = scenes.generate_scenes(
                    int(ds["test"]), int(ds["classes"]), int(ds["img_size"]),
                    self.rng.spawn("dataset/test"), role="test",
                )
            else:
                train = scenes.load_cityscapes_format(ds["path_train"], ds["mapping"], role="train")
                test = scenes.load_cityscapes_format(ds["path_test"], ds["mapping"], role="test")
            scenes.save_split(train, stage_dir)
            scenes.save_split(test, stage_dir)
            return train, test

        def load(stage_dir):
            return scenes.load_split(stage_dir, "train"), scenes.load_split(stage_dir, "test")

        return self._stage("dataset", {"dataset": ds, "seed": self.config.seed}, build, load)

    def baseline(self):
        (train, _), data_key = self.dataset()
        payload = {"data": data_key, "seg": self.seg_cfg.to_dict(), "seed": self.config.seed}

        def build(stage_dir):
            model = segmentation.pretrain_baseline(train, self.seg_cfg, self.rng.spawn("baseline"))
            path = stage_dir / "seg.npz"
            segmentation.save_seg_checkpoint(model, path)
            (stage_dir / "loss_log.json").write_text(json.dumps(model.loss_log))
            return path

        return self._stage("baseline", payload, build, lambda d: d / "seg.npz")

    def corrupted(self, spec: DistortionSpec, role: str):
        (train, test), data_key = self.dataset()
        split = train if role == "train" else test
        payload = {"data": data_key, "spec": spec.to_dict(), "role": role, "seed": self.config.seed}

        def build(stage_dir):
            out = scenes.corrupt_split(
                split, spec, self.rng.spawn(f"corrupt/{role}/{spec.key()}"), workers=_workers()
            )
            scenes.save_split(out, stage_dir)
            return out

        return self._stage(f"corrupt-{role}", payload, build, lambda d: scenes.load_split(d, role))

    def translation_ckpt(self, spec: DistortionSpec):
        (train, _), data_key = self.dataset()
        corrupt_test, corrupt_key = self.corrupted(spec, "test")
        payload = {
            "data": data_key,
            "target": corrupt_key,
            "translation": self.trans_cfg.to_dict(),
            "seed": self.config.seed,
        }

        def build(stage_dir):
            # Training sees images only: pristine train images against
            # distorted test images, unpaired.
            model = translation.train(
                self.trans_cfg,
                train.images(),
                corrupt_test.images(),
                self.rng.spawn(f"translation/{spec.key()}"),
                checkpoint_dir=stage_dir,
            )
            translation.save_loss_log(model.loss_log, stage_dir / "loss_log.csv")
            return stage_dir / "final.npz"

        return self._stage("translation", payload, build, lambda d: d / "final.npz")

    def emulated_train(self, spec: DistortionSpec):
        (train, _), data_key = self.dataset()
        ckpt, trans_key = self.translation_ckpt(spec)
        payload = {"data": data_key, "translation": trans_key}

        def build(stage_dir):
            model = translation.load_checkpoint(ckpt)
            out_samples = []
            psnr_by_id = {}
            for s in train.samples:
                img = translation.emulate(model, s.image)
                psnr_by_id[s.sample_id] = psnr(s.image, img)
                out_samples.append(
                    scenes.Sample(sample_id=s.sample_id, image=img, annotations=s.annotations)
                )
            out = scenes.DatasetSplit(
                role="train",
                domain_tag=f"emulated/{spec.key()}",
                samples=out_samples,
                provenance=spec,
                psnr_by_id=psnr_by_id,
            )
            scenes.save_split(out, stage_dir)
            return out

        return self._stage("emulated-train", payload, build, lambda d: scenes.load_split(d, "train"))

    def finetuned(self, branch: str, spec: DistortionSpec):
        baseline_path, base_key = self.baseline()
        if branch == "oracle":
            data, data_key = self.corrupted(spec, "train")
        elif branch == "learned":
            data, data_key = self.emulated_train(spec)
        else:
            raise ValueError(f"branch {branch!r} does not fine-tune")
        payload = {
            "baseline": base_key,
            "data": data_key,
            "seg": self.seg_cfg.to_dict(),
            "branch": branch,
            "seed": self.config.seed,
        }

        def build(stage_dir):
            model = segmentation.train_or_finetune(
                baseline_path, data, self.seg_cfg, self.rng.spawn(f"finetune/{branch}/{spec.key()}")
            )
            path = stage_dir / "seg.npz"
            segmentation.save_seg_checkpoint(model, path)
            (stage_dir / "loss_log.json").write_text(json.dumps(model.loss_log))
            return path

        return self._stage("finetune", payload, build, lambda d: d / "seg.npz")

    def evaluate(self, model_path, model_key: str, test_split, test_key: str, tag: str):
        payload = {"model": model_key, "test": test_key, "overlaps": list(self.config.overlaps)}

        def build(stage_dir):
            model = segmentation.load_seg_checkpoint(model_path)
            preds = {s.sample_id: segmentation.predict(model, s.image) for s in test_split.samples}
            gts = {s.sample_id: s.annotations for s in test_split.samples}
            report = evaluation.map_cityscapes(
                preds, gts, self.seg_cfg.classes, self.config.overlaps, tag=tag
            )
            report.mean_psnr = test_split.mean_psnr if test_split.psnr_by_id else math.inf
            report.save(stage_dir / "report.json")
            return report

        report, _ = self._stage("evaluate", payload, build, lambda d: EvalReport.load(d / "report.json"))
        report.tag = tag
        return report

    # -- branches ----------------------------------------------------------

    def run_branch(self, branch: str, spec: DistortionSpec) -> EvalReport:
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}; valid: {list(BRANCHES)}")
        (_, test), _ = self.dataset()
        corrupt_test, test_key = self.corrupted(spec, "test")
        if branch == "baseline":
            model_path, model_key = self.baseline()
        else:
            model_path, model_key = self.finetuned(branch, spec)
        return self.evaluate(
            model_path, model_key, corrupt_test, test_key, tag=f"{branch}|{spec.key()}"
        )

    def evaluate_pristine(self) -> EvalReport:
        (_, test), data_key = self.dataset()
        model_path, model_key = self.baseline()
        return self.evaluate(model_path, model_key, test, f"{data_key}/pristine", tag="baseline|pristine")

    # -- whole experiment ----------------------------------------------------

    def run(self) -> ExperimentResult:
        cfg = self.config
        reports: dict[str, EvalReport] = {}
        maps: dict[tuple, float] = {}
        pristine = self.evaluate_pristine()
        reports["baseline|pristine"] = pristine
        specs = evaluation.sort_specs_mild_to_severe(
            [DistortionSpec(kind, float(lvl)) for kind, levels in cfg.grid.items() for lvl in levels]
        )
        for spec in specs:
            for branch in cfg.branches:
                report = self.run_branch(branch, spec)
                reports[report.tag] = report
                maps[(spec.kind, float(spec.level), branch)] = report.map
        report_dir = self.out_root / "reports"
        report_dir.mkdir(parents=True, exist_ok=True)
        files: dict[str, Path] = {}
        for tag, report in reports.items():
            path = report_dir / (tag.replace("|", "-").replace(":", "-") + ".json")
            report.save(path)
            files[tag] = path
        level_rows = [
            {
                "kind": spec.kind,
                "level": float(spec.level),
                "branch": branch,
                "mean_psnr": reports[f"{branch}|{spec.key()}"].mean_psnr,
                "map": maps[(spec.kind, float(spec.level), branch)],
            }
            for spec in specs
            for branch in cfg.branches
        ]
        files["map_over_level"] = report_dir / "map_over_level.csv"
        evaluation.write_csv(level_rows, files["map_over_level"])
        psnr_rows = []
        for branch in cfg.branches:
            keyed = {spec: reports[f"{branch}|{spec.key()}"] for spec in specs}
            if branch == "baseline":
                keyed[None] = pristine
            rows = evaluation.map_over_psnr(keyed)
            for row in rows:
                row["branch"] = branch
            psnr_rows.extend(rows)
        files["map_over_psnr"] = report_dir / "map_over_psnr.csv"
        evaluation.write_csv(psnr_rows, files["map_over_psnr"])
        gain_rows = None
        if all(b in cfg.branches for b in BRANCHES):
            gain_rows = evaluation.gain_table(maps)
            files["gain_table"] = report_dir / "gain_table.csv"
            evaluation.write_csv(gain_rows, files["gain_table"])
        self._write_manifest(status="complete")
        files["manifest"] = self.out_root / "manifest.json"
        return ExperimentResult(
            out_root=self.out_root, maps=maps, reports=reports, gain_rows=gain_rows, files=files
        )


def run_branch(config: ExperimentConfig, branch: str, spec: DistortionSpec) -> EvalReport:
    """Evaluate one branch on one distortion cell (stages cache under out_root)."""
    return ExperimentRunner(config).run_branch(branch, spec)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full grid and emit reports, curve CSVs, gain table, manifest."""
    return ExperimentRunner(config).run()
