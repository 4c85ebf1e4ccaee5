"""Command-line interface.

Subcommands cover dataset generation, corruption, translation training,
emulation, segmenter training, evaluation, and the full experiment. Exit
codes: 0 success, 1 usage or configuration error, 2 stage failure at runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import evaluation, pipeline, scenes, segmentation, translation
from .distortions import ConvergenceError, DistortionSpec
from .imagecore import RandomSource, load_png, save_png

USAGE_EXIT = 1
FAILURE_EXIT = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1 here
        raise _UsageError(message)


def _load_profile_file(path, cls):
    if path is None:
        return cls.toy()
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        return cls.toy()
    if not isinstance(data, dict):
        raise ValueError(f"profile config {path} must hold a mapping")
    return pipeline._resolve_profile(data, cls, {"toy", "full_scale"})


def _build_parser() -> _Parser:
    parser = _Parser(prog="distortadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a procedural scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--img-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("corrupt", help="apply one distortion to a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--role", choices=("train", "test"), default="test")
    p.add_argument("--kind", required=True)
    p.add_argument("--level", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-translation", help="train the distortion emulator on unpaired images")
    p.add_argument("--source", required=True, help="directory of clean-domain PNGs")
    p.add_argument("--target", required=True, help="directory of distorted-domain PNGs")
    p.add_argument("--config", default=None, help="YAML translation profile/overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("emulate", help="run a trained emulator over a directory of PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-seg", help="train or fine-tune the instance segmenter")
    p.add_argument("--data", required=True)
    p.add_argument("--role", choices=("train", "test"), default="train")
    p.add_argument("--config", default=None, help="YAML segmentation profile/overrides")
    p.add_argument("--init", default=None, help="checkpoint to fine-tune from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="evaluate a segmenter checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--role", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-predictions", action="store_true")

    p = sub.add_parser("experiment", help="run the full three-branch experiment grid")
    p.add_argument("--config", default=None, help="YAML experiment config")
    p.add_argument("--out", default=None, help="override out_root")
    p.add_argument("--seed", type=int, default=None, help="override seed")

    p = sub.add_parser("report", help="re-emit CSV tables from a finished experiment")
    p.add_argument("--experiment", required=True, help="experiment out_root")
    return parser


def _cmd_generate(args) -> int:
    rng = RandomSource(args.seed)
    out = Path(args.out)
    train = scenes.generate_scenes(args.train, args.classes, args.img_size, rng.spawn("dataset/train"), role="train")
    test = scenes.generate_scenes(args.test, args.classes, args.img_size, rng.spawn("dataset/test"), role="test")
    scenes.save_split(train, out)
    scenes.save_split(test, out)
    print(f"wrote {len(train.samples)} train and {len(test.samples)} test scenes to {out}")
    return 0


def _cmd_corrupt(args) -> int:
    spec = DistortionSpec(args.kind, args.level)
    split = scenes.load_split(args.data, args.role)
    out = scenes.corrupt_split(split, spec, RandomSource(args.seed), workers=pipeline._workers())
    scenes.save_split(out, Path(args.out))
    mean = out.mean_psnr
    print(f"corrupted {len(out.samples)} images with {spec.key()} (mean PSNR {mean:.2f} dB)")
    return 0


def _cmd_train_translation(args) -> int:
    cfg = _load_profile_file(args.config, translation.TranslationConfig)
    source = scenes.load_image_dir(args.source)
    target = scenes.load_image_dir(args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = translation.train(cfg, source, target, RandomSource(args.seed, "translation"), checkpoint_dir=out)
    translation.save_loss_log(model.loss_log, out / "loss_log.csv")
    print(f"trained {model.epoch} epochs; checkpoint at {out / 'final.npz'}")
    return 0


def _cmd_emulate(args) -> int:
    model = translation.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(Path(args.input).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png files in {args.input}")
    for f in files:
        save_png(translation.emulate(model, load_png(f)), out / f.name)
    print(f"emulated {len(files)} images into {out}")
    return 0


def _cmd_train_seg(args) -> int:
    cfg = _load_profile_file(args.config, segmentation.SegConfig)
    split = scenes.load_split(args.data, args.role)
    model = segmentation.train_or_finetune(args.init, split, cfg, RandomSource(args.seed, "seg"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    segmentation.save_seg_checkpoint(model, out / "seg.npz")
    (out / "loss_log.json").write_text(json.dumps(model.loss_log))
    print(f"trained {model.iteration} iterations; checkpoint at {out / 'seg.npz'}")
    return 0


def _cmd_evaluate(args) -> int:
    model = segmentation.load_seg_checkpoint(args.checkpoint)
    split = scenes.load_split(args.data, args.role)
    preds = {s.sample_id: segmentation.predict(model, s.image) for s in split.samples}
    gts = {s.sample_id: s.annotations for s in split.samples}
    report = evaluation.map_cityscapes(preds, gts, model.config.classes)
    report.mean_psnr = split.mean_psnr if split.psnr_by_id else float("inf")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    if args.dump_predictions:
        dump_dir = out / "predictions"
        dump_dir.mkdir(exist_ok=True)
        for sid, instances in preds.items():
            rows = [
                {
                    "class_id": p.class_id,
                    "score": p.score,
                    "mask_rle": scenes.encode_mask(p.mask),
                }
                for p in instances
            ]
            (dump_dir / f"{sid}.json").write_text(json.dumps(rows))
    print(f"mAP {report.map:.4f} over {report.counts['images']} images; report at {out / 'report.json'}")
    return 0


def _cmd_experiment(args) -> int:
    if args.config is not None:
        cfg = pipeline.ExperimentConfig.from_yaml(args.config)
    else:
        cfg = pipeline.ExperimentConfig()
    if args.out is not None:
        cfg.out_root = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    result = pipeline.run_experiment(cfg)
    for (kind, level, branch), value in sorted(result.maps.items()):
        print(f"{kind:>14} level {level:g} {branch:>8}: mAP {value:.4f}")
    if result.gain_rows:
        for row in result.gain_rows:
            print(
                f"{row['kind']:>14}: oracle gain {row['oracle_gain']:+.4f}, "
                f"learned gain {row['learned_gain']:+.4f}"
            )
    print(f"artifacts under {result.out_root}")
    return 0


def _cmd_report(args) -> int:
    root = Path(args.experiment)
    report_dir = root / "reports"
    if not report_dir.is_dir():
        raise FileNotFoundError(f"no reports directory under {root}")
    reports = {}
    for path in sorted(report_dir.glob("*.json")):
        report = evaluation.EvalReport.load(path)
        if report.tag:
            reports[report.tag] = report
    maps = {}
    specs = {}
    for tag, report in reports.items():
        branch, _, key = tag.partition("|")
        if key == "pristine":
            continue
        kind, _, level = key.partition(":")
        spec = DistortionSpec(kind, float(level))
        specs[spec.key()] = spec
        maps[(kind, float(level), branch)] = report.map
    rows = [
        {"kind": k, "level": lvl, "branch": b, "map": m} for (k, lvl, b), m in sorted(maps.items())
    ]
    evaluation.write_csv(rows, report_dir / "map_over_level.csv")
    branches = {b for (_, _, b) in maps}
    if all(b in branches for b in pipeline.BRANCHES):
        evaluation.write_csv(evaluation.gain_table(maps), report_dir / "gain_table.csv")
    print(f"re-emitted tables for {len(reports)} reports under {report_dir}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "corrupt": _cmd_corrupt,
    "train-translation": _cmd_train_translation,
    "emulate": _cmd_emulate,
    "train-seg": _cmd_train_seg,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (
        pipeline.PipelineError,
        ConvergenceError,
        translation.DivergenceError,
        segmentation.TrainingDivergedError,
    ) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
