"""Command-line entry point: ``sodgan <subcommand> [--config run.json] [--set key=value ...]``.

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 filter too strict, 5 I/O or corrupt artifact, 1 anything else we raise.
Errors are reported as one JSON object on stderr.
"""
import argparse
import json
import logging
import sys

from . import __version__, config, pipeline
from .errors import SodganError

log = logging.getLogger("sodgan")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (a stage's run.json also works)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. maskgen.epochs=100")
    common.add_argument("--home", help="artifact root (default: $SODGAN_HOME, then config home)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sodgan", description="Few-shot saliency dataset synthesis on a toy corpus.")
    parser.add_argument("--version", action="version", version=f"sodgan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("corpus", parents=[common], help="render the procedural corpus")
    sub.add_parser("train-gan", parents=[common], help="train the conditional generator")
    sub.add_parser("train-den", parents=[common], help="train the diffusion embedding network")
    p = sub.add_parser("train-maskgen", parents=[common], help="train the few-shot mask branch")
    p.add_argument("--head", choices=sorted(config.HEAD_WIDTHS))
    p.add_argument("--oaff-mode", choices=config.OAFF_MODES)
    sub.add_parser("train-dq", parents=[common], help="export the quality discriminator, optionally refined")
    p = sub.add_parser("synthesize", parents=[common], help="generate and filter a synthetic dataset")
    p.add_argument("--n-keep", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (default: <home>/synth)")
    p = sub.add_parser("train-sod", parents=[common], help="train the saliency network")
    p.add_argument("--dataset", choices=("synth", "corpus"), default="synth")
    p = sub.add_parser("eval", parents=[common], help="evaluate on the corpus test split")
    p.add_argument("--predictions", help="directory of <id>.png maps; default: run the trained saliency net")
    p.add_argument("--out")
    sub.add_parser("analyze", parents=[common], help="dataset statistics and figures")
    p = sub.add_parser("sweep", parents=[common], help="data-amount or truncation sweep")
    p.add_argument("--axis", choices=("data-amount", "lambda"), required=True)
    p.add_argument("--values", type=_floats, required=True)
    p = sub.add_parser("ablate", parents=[common], help="structure ablations")
    p.add_argument("--axis", choices=pipeline.ABLATION_AXES, required=True)
    p.add_argument("--seeds", type=_ints)
    return parser


_FLAG_KEYS = {"head": "maskgen.head", "oaff_mode": "maskgen.oaff_mode", "n_keep": "synth.n_keep",
              "workers": "synth.workers"}


def resolve_config(args):
    cfg = config.load(args.config) if args.config else config.RunConfig()
    overrides = list(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return config.apply_overrides(cfg, overrides)


def _scalars(report):
    return {k: round(v, 6) for k, v in report.scalars().items()}


def run(args):
    cfg = resolve_config(args)
    ws = pipeline.Workspace(pipeline.resolve_home(cfg, args.home))
    cmd = args.command
    if cmd == "corpus":
        c = pipeline.stage_corpus(cfg, ws)
        return {"train": len(c.train), "test": len(c.test)}
    if cmd == "train-gan":
        pipeline.stage_train_gan(cfg, ws)
        return {"artifacts": ws.path("gan")}
    if cmd == "train-den":
        pipeline.stage_train_den(cfg, ws)
        return {"artifacts": ws.path("den")}
    if cmd == "train-maskgen":
        pipeline.stage_train_maskgen(cfg, ws)
        return {"artifacts": ws.path("maskgen")}
    if cmd == "train-dq":
        pipeline.stage_train_dq(cfg, ws)
        return {"artifacts": ws.path("dq")}
    if cmd == "synthesize":
        ds, header = pipeline.stage_synthesize(cfg, ws, out=args.out)
        return {"kept": header["kept"], "attempts": header["attempts"],
                "acceptance_rate": header["acceptance_rate"], "path": ds.root}
    if cmd == "train-sod":
        pipeline.stage_train_sod(cfg, ws, args.dataset)
        return {"artifacts": ws.path("sod")}
    if cmd == "eval":
        return _scalars(pipeline.stage_eval(cfg, ws, args.predictions, args.out))
    if cmd == "analyze":
        reports = pipeline.stage_analyze(cfg, ws)
        return {"datasets": sorted(reports), "path": ws.path("analyze")}
    if cmd == "sweep":
        return {"rows": pipeline.sweep(cfg, ws, args.axis, args.values)}
    if cmd == "ablate":
        return {"rows": pipeline.ablate(cfg, ws, args.axis, args.seeds)}
    raise AssertionError(cmd)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        result = run(args)
    except SodganError as exc:
        print(json.dumps({**exc.record(), "exit_code": exc.exit_code}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc), "exit_code": 5}), file=sys.stderr)
        return 5
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
