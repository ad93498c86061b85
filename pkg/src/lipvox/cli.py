"""``lipvox`` command-line entry point.

Exit codes: 0 on success, 2 for usage and config errors, 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .audio import AudioError, load_wav, save_wav
from .checkpoint import CheckpointError, checkpoint_id, load_checkpoint
from .config import SAMPLING_SOURCES, CROP_MODES, ConfigError, load_config
from .corpus import Corpus, CorpusError, CorpusManifest, generate_corpus, load_frames
from .embedders import SurrogateError, load_surrogates, pretrain_surrogates, save_surrogates
from .inference import (
    MODES,
    LipToSpeechModel,
    SynthesisRequest,
    eval_corpus,
    evaluation_windows,
    generative_strength,
    synthesize,
)
from .training import TrainingDivergedError, finetune, train

RUNTIME_ERRORS = (AudioError, CheckpointError, CorpusError, SurrogateError, TrainingDivergedError,
                  FileNotFoundError, PermissionError, OSError, ValueError, IndexError)


def _write_json(path: Path, data: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo(section: str, data):
    print(f"resolved {section} config: {json.dumps(data, sort_keys=True)}", file=sys.stderr)


def _resolve(args, **sections):
    overrides = {"seed": args.seed}
    overrides.update(sections)
    return load_config(args.config, overrides)


def _train_overrides(args) -> dict:
    return {
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "max_epochs": args.max_epochs,
        "max_steps": args.max_steps,
        "patience_epochs": args.patience,
        "sampling_source": args.sampling_source,
        "variational": args.variational,
        "crop_mode": args.crop_mode,
    }


def _train_config(args):
    cfg = _resolve(args, train=_train_overrides(args))
    cfg.train.seed = cfg.seed
    _echo("train", cfg.train.to_dict())
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, corpus={"speakers": args.speakers, "utts": args.utts, "seconds": args.seconds})
    _echo("corpus", {"seed": cfg.seed, **asdict(cfg.corpus)})
    manifest = generate_corpus(cfg.corpus.speakers, cfg.corpus.utts, cfg.corpus.seconds, cfg.seed, args.out)
    print(Path(manifest.root) / "manifest.json")
    return 0


def cmd_pretrain_surrogates(args) -> int:
    cfg = _resolve(args, surrogates={"steps": args.steps, "batch_size": args.batch_size,
                                     "learning_rate": args.lr})
    cfg.surrogates.seed = cfg.seed
    _echo("surrogates", asdict(cfg.surrogates))
    surrogates = pretrain_surrogates(Corpus(args.corpus), cfg.surrogates)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_surrogates(surrogates, out, cfg.surrogates)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(Corpus(args.corpus), cfg.train, args.out, surrogates=load_surrogates(args.surrogates))
    print(f"{result.stop_reason}: {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"checkpoints in {result.out_dir}")
    return 0


def cmd_finetune(args) -> int:
    base = load_checkpoint(args.ckpt)
    cfg = _train_config(args)
    manifest = CorpusManifest.load(args.corpus)
    if args.speaker is not None or args.utt_fraction is not None:
        manifest = manifest.select(speakers=[args.speaker] if args.speaker else None,
                                   utt_fraction=args.utt_fraction)
    corpus = Corpus(args.corpus).subset(manifest)
    result = finetune(base, corpus, cfg.train, args.out)
    print(f"{result.stop_reason}: {len(result.history)} epochs on {len(corpus)} utterances, "
          f"checkpoints in {result.out_dir}")
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve(args, eval={"mode": args.mode, "gl_iterations": args.gl_iterations})
    _echo("synth", {"seed": cfg.seed, "mode": cfg.eval.mode, "gl_iterations": cfg.eval.gl_iterations})
    model = LipToSpeechModel.from_checkpoint(args.ckpt)
    req = SynthesisRequest(load_frames(args.frames), load_wav(args.voice), cfg.eval.mode, cfg.seed)
    mel, wave = synthesize(model, req, cfg.eval.gl_iterations)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_wav(wave, out)
    np.save(out.with_suffix(".mel.npy"), mel.frames)
    print(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, eval={"mode": args.mode, "windows_per_utt": args.windows_per_utt})
    cfg.eval.seed = cfg.seed
    _echo("eval", asdict(cfg.eval))
    report = eval_corpus(args.ckpt, args.corpus, cfg.eval, out_path=args.out, ground_truth=args.ground_truth)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_gstrength(args) -> int:
    cfg = _resolve(args, gstrength={"num_samples": args.num_samples, "delta": args.delta})
    cfg.eval.seed = cfg.seed
    cfg.eval.windows_per_utt = 1
    _echo("gstrength", {"seed": cfg.seed, "probes": args.probes, **asdict(cfg.gstrength)})
    model = LipToSpeechModel.from_checkpoint(args.ckpt)
    windows = evaluation_windows(args.corpus, cfg.eval)[:args.probes]
    scores = [generative_strength(model, ex.lips, ex.speaker_ref, cfg.gstrength.num_samples, cfg.gstrength.delta)
              for ex in windows]
    report = {
        "unique_percentage": scores,
        "mean": float(np.mean(scores)),
        "num_samples": cfg.gstrength.num_samples,
        "delta": cfg.gstrength.delta,
        "seed": cfg.seed,
        "checkpoint": checkpoint_id(args.ckpt),
    }
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _add_train_flags(p):
    p.add_argument("--batch-size", type=int, help="override train.batch_size (default 32)")
    p.add_argument("--lr", type=float, help="override train.learning_rate (default 5e-05)")
    p.add_argument("--max-epochs", type=int, help="override train.max_epochs (default 100)")
    p.add_argument("--max-steps", type=int, help="stop after this many generator steps (default: none)")
    p.add_argument("--patience", type=int, help="override train.patience_epochs (default 10)")
    p.add_argument("--sampling-source", choices=SAMPLING_SOURCES, help="override train.sampling_source (default content)")
    p.add_argument("--variational", action=argparse.BooleanOptionalAction, default=None,
                   help="variational bottleneck on/off (default on)")
    p.add_argument("--crop-mode", choices=CROP_MODES, help="override train.crop_mode (default full_face)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (default: none)")
    common.add_argument("--seed", type=int, help="global seed (default: config file, then $LIPVOX_SEED, then 0)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="lipvox", description="Lip-to-speech synthesis on a synthetic corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--speakers", type=int, help="number of speakers (default 4)")
    p.add_argument("--utts", type=int, help="utterances per speaker (default 8)")
    p.add_argument("--seconds", type=float, help="utterance length in seconds (default 3.0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-surrogates", parents=[common],
                       help="train the frozen content and speaker surrogates")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    p.add_argument("--steps", type=int, help="optimizer steps (default 400)")
    p.add_argument("--batch-size", type=int, help="batch size (default 16)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.001)")
    p.add_argument("--out", required=True, help="output surrogate checkpoint")
    p.set_defaults(func=cmd_pretrain_surrogates)

    p = sub.add_parser("train", parents=[common], help="train from scratch")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    p.add_argument("--surrogates", required=True, help="surrogate checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="base checkpoint")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    p.add_argument("--speaker", help="restrict to this speaker id")
    p.add_argument("--utt-fraction", type=float, help="use this leading fraction of each speaker's utterances")
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("synth", parents=[common], help="synthesize speech from lip frames")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--frames", required=True, help="directory of 96x96 RGB PNG frames")
    p.add_argument("--voice", required=True, help="voice reference WAV (>= 1 s)")
    p.add_argument("--mode", choices=MODES, help="mean or sample (default mean)")
    p.add_argument("--gl-iterations", type=int, help="Griffin-Lim iterations (default 60)")
    p.add_argument("--out", required=True, help="output WAV; the mel goes next to it as .mel.npy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="evaluate on a held-out corpus")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--corpus", required=True, help="held-out corpus directory or manifest.json")
    p.add_argument("--mode", choices=MODES, help="inference mode (default mean)")
    p.add_argument("--windows-per-utt", type=int, help="windows per utterance (default 4)")
    p.add_argument("--ground-truth", action="store_true", help="score ground truth against itself")
    p.add_argument("--out", help="JSON report path (default: stdout only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gstrength", parents=[common],
                       help="unique-sample percentage over stochastic syntheses")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--corpus", required=True, help="corpus supplying probe windows")
    p.add_argument("--probes", type=int, default=10, help="number of probe windows (default 10)")
    p.add_argument("--num-samples", type=int, help="samples per probe (default 100)")
    p.add_argument("--delta", type=float, help="uniqueness threshold (default 0.5)")
    p.add_argument("--out", help="JSON report path (default: stdout only)")
    p.set_defaults(func=cmd_gstrength)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lipvox {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"lipvox {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
