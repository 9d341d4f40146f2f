"""``dysvc`` command line.

Every subcommand takes ``--config``, ``--manifest``, ``--out`` and
``--seed`` (overrides ``[run] seed``).  Exit status: 0 on success, 2 on a
validation error (bad config, manifest, missing dependency), 3 on an
integrity error (corrupt checkpoint or feature file).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import dsp
from .. import evaluation as ev
from .. import seq2seq as s2s
from .. import vae
from ..nncore import IntegrityError
from .config import PipelineConfig, load_config
from .errors import ValidationError
from .manifest import load_manifest
from .report import emit_report
from .stages import Pipeline, synthesize

EXIT_OK, EXIT_VALIDATION, EXIT_INTEGRITY = 0, 2, 3

# errors raised by library modules that signal bad input rather than corruption
_VALIDATION_ERRORS = (ValidationError, ev.MetricError, dsp.AudioFormatError, s2s.PairingError,
                      s2s.VocabularyError, s2s.PhaseError, vae.ConfigurationError)


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_seed(args.seed)
    return Pipeline(cfg, load_manifest(args.manifest), args.out)


def cmd_extract_features(args) -> None:
    pipe = _pipeline(args)
    print(f"features ready for {len(pipe.features())} utterances")


def _phase_cmd(method: str):
    def run(args) -> None:
        pipe = _pipeline(args)
        stored = getattr(pipe, method)(force=args.force)
        if pipe.config.run.log_batches:
            pipe.write_batch_log()
        print(f"{stored.path} sha256={stored.sha256}")

    return run


def cmd_convert(args) -> None:
    pipe = _pipeline(args)
    written = []
    if args.stage in ("1", "all"):
        written += pipe.convert_stage1()
    if args.stage in ("2", "all"):
        written += pipe.convert_stage2()
    print(f"wrote {len(written)} feature files under {Path(args.out) / 'converted'}")


def cmd_synthesize(args) -> None:
    if args.input:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = cfg.with_seed(args.seed)
        frames = dsp.read_features(args.input)
        target = Path(args.out) / (Path(args.input).stem + ".wav")
        synthesize(frames, target, cfg, seed=cfg.run.seed)
        print(target)
        return
    pipe = _pipeline(args)
    print(f"wrote {len(pipe.synthesize_outputs())} WAV files under {Path(args.out) / 'wav'}")


def cmd_evaluate(args) -> None:
    pipe = _pipeline(args)
    table = pipe.evaluate()
    path = Path(args.out) / "scores.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.to_csv())
    print(path)


def _read_scores(out: Path) -> ev.SpeakerScoreTable:
    path = out / "scores.csv"
    if not path.is_file():
        raise ValidationError(f"{path} not found; run 'evaluate' first")
    return ev.SpeakerScoreTable.from_csv(path.read_text())


def cmd_rank_speakers(args) -> None:
    if args.manifest:
        load_manifest(args.manifest, check_audio=False)
    table = _read_scores(Path(args.out))
    ranking = ev.rank_reference_speakers(table, args.criterion, stage=args.stage)
    text = "".join(f"{i}\t{spk}\n" for i, spk in enumerate(ranking, start=1))
    (Path(args.out) / f"ranking_{args.criterion.lower()}.txt").write_text(text)
    sys.stdout.write(text)


def cmd_report(args) -> None:
    pipe = _pipeline(args)
    scores = Path(args.out) / "scores.csv"
    table = ev.SpeakerScoreTable.from_csv(scores.read_text()) if scores.is_file() else None
    written = emit_report(pipe.report(table), args.out)
    print("\n".join(str(p) for p in written.values()))


def cmd_run_all(args) -> None:
    pipe = _pipeline(args)
    emit_report(pipe.run_all(), args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")


COMMANDS = {
    "extract-features": (cmd_extract_features, "compute and cache log-mel features"),
    "pretrain-decoder": (_phase_cmd("pretrain_decoder"), "stage 1, phase 1: TTS pretraining"),
    "pretrain-encoder": (_phase_cmd("pretrain_encoder"), "stage 1, phase 2: speech-encoder pretraining"),
    "train-vc": (_phase_cmd("train_vc"), "stage 1, phase 3: parallel VC training"),
    "train-vae": (_phase_cmd("train_vae"), "stage 2: frame-wise VAE training"),
    "convert": (cmd_convert, "convert the test split (stage 1, stage 2 or both)"),
    "synthesize": (cmd_synthesize, "render converted features (or one --input file) to WAV"),
    "evaluate": (cmd_evaluate, "MCD and SER per reference speaker and stage -> scores.csv"),
    "rank-speakers": (cmd_rank_speakers, "rank reference speakers from scores.csv"),
    "report": (cmd_report, "write scores, scatter, losses, summary and provenance"),
    "run-all": (cmd_run_all, "every stage in order, reusing cached checkpoints"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dysvc", description="Two-stage dysarthric voice conversion pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="INI configuration file (defaults apply when omitted)")
        p.add_argument("--manifest", type=Path, required=name not in ("synthesize", "rank-speakers"),
                       help="JSON-lines corpus manifest")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        if name in ("pretrain-decoder", "pretrain-encoder", "train-vc", "train-vae"):
            p.add_argument("--force", action="store_true", help="retrain even if a matching checkpoint exists")
        if name == "convert":
            p.add_argument("--stage", choices=("1", "2", "all"), default="all")
        if name == "synthesize":
            p.add_argument("--input", type=Path, help="a single DYSF1 feature file to render")
        if name == "rank-speakers":
            p.add_argument("--criterion", choices=("MCD", "SER"), default="MCD")
            p.add_argument("--stage", choices=ev.STAGES, default="vtn")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "synthesize" and not args.input and not args.manifest:
        parser.error("synthesize needs --manifest unless --input is given")
    try:
        args.func(args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyError as exc:  # unknown speaker ids surface as KeyError from the models
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
