"""``prior-talker`` command line. Exit codes: 0 ok, 2 config, 3 data, 4 numeric."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, PriorTalkerError

TRAIN_VERBS = {
    "pretrain-conre": "conre",
    "compute-prior": "prior",
    "train-portrait": "portrait",
    "train-motion": "motion",
    "finetune-codebook": "motion_hr",
    "train-motion-diffusion": "motion_diffusion",
}


def _config(args) -> pipeline.ExperimentConfig:
    if args.config is None:
        return pipeline.ExperimentConfig()
    return pipeline.load_config(args.config)


def _paths(args, cfg) -> pipeline.RunPaths:
    return pipeline.RunPaths.for_config(cfg, args.output_root)


def cmd_preprocess(args) -> None:
    cfg = _config(args)
    if args.audio is None and args.video is None and args.out is None:
        written = pipeline.run_preprocess(cfg, _paths(args, cfg))
    else:
        if args.audio is None or args.video is None:
            raise ConfigError("--audio and --video are both required")
        out = Path(args.out) if args.out else _paths(args, cfg).data
        written = pipeline.preprocess(args.audio, args.video, out, cfg.data.image_size, cfg.data.max_frames,
                                      cfg.seed)
    for path in written:
        print(path)


def cmd_train(args) -> None:
    cfg = _config(args)
    print(pipeline.run_stage(TRAIN_VERBS[args.verb], cfg, _paths(args, cfg)))


def cmd_generate(args) -> None:
    cfg = _config(args)
    paths = _paths(args, cfg)
    out = Path(args.out) if args.out else paths.root / "generated" / Path(args.speech).stem
    record = pipeline.generate(cfg, paths, args.speech, out, seed=args.seed)
    print(json.dumps(record, indent=2))


def cmd_evaluate(args) -> None:
    report = pipeline.evaluate(args.gen, args.ref, model=args.model or "")
    pipeline.write_report(report, args.report)
    print(report.to_json())


def cmd_run(args) -> None:
    report = pipeline.run_experiment(_config(args), args.output_root)
    print(report.to_json())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prior-talker", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="YAML experiment config")
            p.add_argument("--output-root", help=f"overrides ${pipeline.OUTPUT_ROOT_ENV}")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "WAV + video clips -> per-clip containers")
    p.add_argument("--audio", help="directory of <stem>.wav files")
    p.add_argument("--video", help="directory of <stem>.npz videos or <stem>/ PNG directories")
    p.add_argument("--out", help="output directory (default: <run>/data)")
    for verb in TRAIN_VERBS:
        add(verb, cmd_train, f"run the {TRAIN_VERBS[verb]} stage")
    p = add("generate", cmd_generate, "speech WAV -> PNG frames at 25 fps")
    p.add_argument("--speech", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p = add("evaluate", cmd_evaluate, "compare generated and reference frame directories", config=False)
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--model")
    add("run", cmd_run, "preprocess, train all enabled stages, generate and evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PriorTalkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
