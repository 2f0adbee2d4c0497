"""Command-line entry point.

    hybridasr run --config cfg.yaml --stage 0 --stop-stage 5 [--force]
    hybridasr {prep,feats,json,lmtrain,asrtrain,decode} --config cfg.yaml [--force]
    hybridasr score --ref data.json|text --hyp hyp.txt --out DIR [--unit char|word]
    hybridasr synth --out DIR [--seed ...]

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import dataio, recipe
from .decode import ConfigurationError, DecodeConfig
from .recipe import ConfigError, PrerequisiteError
from .score import ScoringError, corpus_error_rate, read_hyp_file
from .synth import synth_corpus

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("hybridasr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config(p, force=True):
    p.add_argument("--config", required=True, help="recipe YAML file")
    p.add_argument("--exp-dir", help=f"experiment root (overrides config and ${recipe.EXP_ROOT_ENV})")
    if force:
        p.add_argument("--force", action="store_true", help="rerun even if already completed")


def _add_decode_flags(p):
    for f in dataclasses.fields(DecodeConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridasr", description="Hybrid CTC/attention speech recognition recipes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run a range of recipe stages")
    _add_config(p)
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--stop-stage", type=int, default=5)

    for i, name in enumerate(recipe.STAGES):
        p = sub.add_parser(name, help=f"stage {i} only")
        _add_config(p)
        if name == "decode":
            _add_decode_flags(p)

    p = sub.add_parser("score", help="score hypotheses against references")
    p.add_argument("--ref", required=True, help="data.json or a Kaldi 'text' file")
    p.add_argument("--hyp", required=True, help="tab-separated hypothesis file")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--unit", choices=("char", "word"), default="char")

    p = sub.add_parser("synth", help="write a synthetic template corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--num-train", type=int, default=500)
    p.add_argument("--num-test", type=int, default=100)
    p.add_argument("--vocab-size", type=int, default=10)
    p.add_argument("--frames-per-symbol", type=int, default=8)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    return parser


def _read_refs(path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        data = dataio.load_json(path)
        return {u: rec["output"][0]["text"] for u, rec in data["utts"].items()}
    refs = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            utt, _, text = line.partition(" ")
            refs[utt] = text
    return refs


def _dispatch(args) -> int:
    if args.command == "synth":
        c = synth_corpus(args.seed, args.num_train, args.num_test, args.vocab_size, args.frames_per_symbol,
                         args.noise_sigma, args.out)
        print(f"wrote {c.train} and {c.test}")
        return EXIT_OK
    if args.command == "score":
        report = corpus_error_rate(_read_refs(args.ref), read_hyp_file(args.hyp), args.unit)
        report.write(args.out, "cer" if args.unit == "char" else "wer")
        print(f"{args.unit.upper()[0]}ER {report.rate:.2f}%")
        return EXIT_OK

    cfg = recipe.load_config(args.config, exp_root=args.exp_dir)
    if args.command == "run":
        ran = recipe.run(cfg, args.stage, args.stop_stage, args.force)
        print(f"stages run: {ran if ran else 'none (all up to date)'}")
        return EXIT_OK
    stage = recipe.STAGES.index(args.command)
    if args.command == "decode":
        overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(DecodeConfig)
                     if getattr(args, f.name) is not None}
        if overrides:
            cfg.decode = DecodeConfig(**dict(dataclasses.asdict(cfg.decode), **overrides))
            cfg.raw = dict(cfg.raw, decode=dataclasses.asdict(cfg.decode))
    recipe.run(cfg, stage, stage, args.force)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ConfigurationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as e:
        print(f"prerequisite error: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except (ScoringError, dataio.IngestionError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
