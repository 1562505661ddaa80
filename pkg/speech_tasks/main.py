"""
Command-line entry point.

Every subcommand resolves one RunConfig (preset < --config file < flags),
configures logging and, when it writes a run directory, stores
run_config.json and run.log there. Errors are reported as one JSON line on
stderr with exit code 2 (usage), 3 (data) or 4 (numeric).
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv

# Try to load .env.local first, then .env
if os.path.exists('.env.local'):
    load_dotenv('.env.local')
else:
    load_dotenv()

import numpy as np
import torch

from config import settings
from models.config import RunConfig
from models.enums import DecodeMode, Preset, ScoreLevel, TranscriptEncoding
from models.errors import DataError, SpeechTextError, UsageError
from services import audio_frontend, checkpoint
from services.audio_frontend import ClusterModel, assign_labels, fit_kmeans, load_wave, log_mel, save_wave
from services.checkpoint import build_model, load_checkpoint, save_mel
from services.corpus import DEFAULT_ALPHABET, corpus_stats, filter_corpus, load_manifest, make_toy_corpus, write_manifest
from services.metrics import accuracy, format_report, score
from services.network import SpeechTextModel, describe
from services.pretrain import pretrain
from services.structured_log import configure_logging
from services.text_pipeline import (build_tokenizer, from_buckwalter, load_tokenizer, normalize_text,
                                    save_tokenizer, to_buckwalter, translit_stats)
from services.vocoder import GriffinLimVocoder
from tasks.asr import finetune_asr, transcribe
from tasks.char_lm import build_char_lm, train_char_lm
from tasks.dialect import classify_utterances, finetune_did, load_classifier
from tasks.tts import finetune_tts, synthesize

logger = logging.getLogger('speechtext.cli')

VERSION = "1.0.0"

# Subcommands whose --out is a run directory (config, log and outputs go there).
RUN_DIR_COMMANDS = {"extract-mels", "fit-units", "make-toy", "filter-manifest", "pretrain", "finetune-asr",
                    "finetune-tts", "finetune-did", "train-lm", "transcribe", "classify", "label"}


class CliParser(argparse.ArgumentParser):
    """argparse that reports usage problems as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


# ============================================================================
# HELPERS
# ============================================================================

def _read_lines(path: Optional[str]) -> List[str]:
    if path:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    return sys.stdin.read().splitlines()


def _write_text(path: Optional[str], text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_jsonl(records: Sequence[Dict[str, Any]], path: Optional[str]) -> None:
    _write_text(path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records))


def _read_jsonl(path: str) -> List[Dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{lineno}: {e.msg}", line=lineno) from e
    return records


def _load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a flat JSON object")
    return values


def _parse_overrides(pairs: Sequence[str]) -> Dict[str, Any]:
    values = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


def _output_file(run: RunConfig, name: str) -> Optional[str]:
    """File inside the run directory, or None for stdout."""
    return os.path.join(run.out, name) if run.out else None


# ============================================================================
# TEXT
# ============================================================================

def cmd_normalize(args, run: RunConfig) -> int:
    _write_text(args.out, "".join(normalize_text(line) + "\n" for line in _read_lines(args.input)))
    return 0


def cmd_translit(args, run: RunConfig) -> int:
    lines = _read_lines(args.input)
    if args.stats:
        _write_text(args.out, json.dumps(translit_stats("\n".join(lines)), sort_keys=True) + "\n")
    elif args.from_bw:
        _write_text(args.out, "".join(from_buckwalter(l, strict=not args.lenient) + "\n" for l in lines))
    else:
        _write_text(args.out, "".join(to_buckwalter(l) + "\n" for l in lines))
    return 0


def cmd_build_vocab(args, run: RunConfig) -> int:
    if args.manifest:
        texts = [u.text_norm for u in load_manifest(args.manifest)]
    else:
        texts = [normalize_text(line) for line in _read_lines(args.input)]
    base = load_tokenizer(args.base) if args.base else None
    tokenizer = build_tokenizer(texts, base)
    if args.out:
        save_tokenizer(tokenizer, args.out)
    else:
        sys.stdout.write(tokenizer.to_json() + "\n")
    return 0


# ============================================================================
# AUDIO / CORPUS
# ============================================================================

def cmd_extract_mels(args, run: RunConfig) -> int:
    mel_dir = os.path.join(run.out, "mels")
    os.makedirs(mel_dir, exist_ok=True)
    utts = load_manifest(args.manifest)
    for utt in utts:
        mel = log_mel(load_wave(utt.audio, run.frontend.resample), run.frontend)
        save_mel(os.path.join(mel_dir, f"{utt.id}.zip"), mel.frames, {"id": utt.id, "hop": mel.hop})
    logger.info(f"Extracted {len(utts)} log-mel spectrograms to {mel_dir}")
    return 0


def cmd_fit_units(args, run: RunConfig) -> int:
    utts = load_manifest(args.manifest)
    features = np.concatenate([log_mel(load_wave(u.audio, run.frontend.resample), run.frontend).frames
                               for u in utts])
    model = fit_kmeans(features, run.model.unit_count, run.seed, max_iter=args.max_iter,
                       hop=run.model.stride_product)
    model.save(os.path.join(run.out, "units.kmu"))
    return 0


def cmd_label(args, run: RunConfig) -> int:
    model = ClusterModel.load(args.units)
    records = []
    for utt in load_manifest(args.manifest):
        mel = log_mel(load_wave(utt.audio, run.frontend.resample), run.frontend)
        labels = assign_labels(model, mel, run.frontend.label_decimation).labels
        records.append({"id": utt.id, "labels": labels.tolist()})
    _write_jsonl(records, _output_file(run, "labels.jsonl"))
    return 0


def cmd_make_toy(args, run: RunConfig) -> int:
    make_toy_corpus(run.seed, args.n, run.out, alphabet=args.alphabet, n_dialects=args.dialects)
    return 0


def cmd_filter_manifest(args, run: RunConfig) -> int:
    utts = load_manifest(args.manifest, strict=not args.lenient)
    kept = filter_corpus(utts, run.train.max_duration, drop_overlap=not args.keep_overlap)
    write_manifest(kept, os.path.join(run.out, "manifest.jsonl"))
    return 0


def cmd_corpus_stats(args, run: RunConfig) -> int:
    table = corpus_stats(load_manifest(args.manifest))
    _write_text(args.out, table.to_string() + "\n")
    return 0


def cmd_describe(args, run: RunConfig) -> int:
    table, summary = describe(SpeechTextModel(run.model))
    _write_text(args.out, table.to_string() + "\n" + json.dumps(summary, sort_keys=True) + "\n")
    return 0


# ============================================================================
# TRAINING
# ============================================================================

def cmd_pretrain(args, run: RunConfig) -> int:
    utts = load_manifest(args.manifest)
    tokenizer = load_tokenizer(args.tokenizer) if args.tokenizer else build_tokenizer(u.text_norm for u in utts)
    pretrain(utts, ClusterModel.load(args.units), tokenizer, run, run.out, resume=args.resume)
    return 0


def _valid(args) -> Optional[list]:
    return load_manifest(args.valid_manifest) if args.valid_manifest else None


def cmd_finetune_asr(args, run: RunConfig) -> int:
    finetune_asr(load_manifest(args.manifest), args.init, run, run.out,
                 TranscriptEncoding(args.encoding), _valid(args))
    return 0


def cmd_finetune_tts(args, run: RunConfig) -> int:
    finetune_tts(load_manifest(args.manifest), args.init, run, run.out, _valid(args))
    return 0


def cmd_finetune_did(args, run: RunConfig) -> int:
    finetune_did(load_manifest(args.manifest), args.init, run, run.out, _valid(args))
    return 0


def cmd_train_lm(args, run: RunConfig) -> int:
    if args.manifest:
        texts = [u.text_norm for u in load_manifest(args.manifest)]
    else:
        texts = [normalize_text(line) for line in _read_lines(args.text)]
    if args.tokenizer:
        tokenizer = load_tokenizer(args.tokenizer)
    else:
        tokenizer = load_checkpoint(args.ckpt).tokenizer
    if tokenizer is None:
        raise UsageError("train-lm needs --tokenizer or a --ckpt that carries one")
    train_char_lm(texts, tokenizer, run.char_lm, run.seed, run.out)
    return 0


# ============================================================================
# INFERENCE / EVALUATION
# ============================================================================

def cmd_transcribe(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt, kind="asr")
    model = build_model(ckpt)
    lm = build_char_lm(load_checkpoint(args.lm, kind="char_lm")) if args.lm else None
    mode = DecodeMode.GREEDY if args.greedy else DecodeMode.BEAM
    records = transcribe(model, ckpt.tokenizer, load_manifest(args.manifest), run.decode, mode, lm,
                         TranscriptEncoding(ckpt.extra.get("encoding", "ar")),
                         lambda path: load_wave(path, run.frontend.resample))
    _write_jsonl(records, _output_file(run, "hyps.jsonl"))
    return 0


def cmd_synthesize(args, run: RunConfig) -> int:
    ckpt = load_checkpoint(args.ckpt, kind="tts")
    model = build_model(ckpt)
    texts = [args.text] if args.text is not None else [l for l in _read_lines(args.file) if l.strip()]
    if len(texts) > 1 and not args.out:
        raise UsageError("synthesizing a file needs --out <dir>")
    vocoder = GriffinLimVocoder(run.frontend)
    for i, text in enumerate(texts):
        mel, reached_max = synthesize(model, ckpt.tokenizer, text, run.decode, run.frontend)
        fmt = args.format
        if len(texts) == 1:
            target = args.out or "synth.wav"
            fmt = "mel" if target.endswith(".zip") else "wav" if target.endswith(".wav") else fmt
        else:
            os.makedirs(args.out, exist_ok=True)
            target = os.path.join(args.out, f"{i:04d}." + ("wav" if fmt == "wav" else "zip"))
        if fmt == "wav":
            save_wave(vocoder.vocode(mel), target)
        else:
            save_mel(target, mel.frames, {"text": text, "max_frames_reached": reached_max, "hop": mel.hop})
        logger.info(f"Synthesized {mel.n_frames} frames to {target}",
                    extra={"event": {"frames": mel.n_frames, "max_frames_reached": reached_max}})
    return 0


def cmd_classify(args, run: RunConfig) -> int:
    model, vocab = load_classifier(args.ckpt)
    records = classify_utterances(model, vocab, load_manifest(args.manifest),
                                  lambda path: load_wave(path, run.frontend.resample))
    _write_jsonl(records, _output_file(run, "predictions.jsonl"))
    return 0


def _by_id(records: Sequence[Dict[str, Any]], fields: Sequence[str], path: str) -> Dict[str, str]:
    out = {}
    for rec in records:
        field = next((f for f in fields if f in rec), None)
        if "id" not in rec or field is None:
            raise DataError(f"{path}: records need 'id' and one of {list(fields)}")
        if rec["id"] in out:
            raise DataError(f"{path}: duplicate id {rec['id']!r}")
        out[rec["id"]] = rec[field] if rec[field] is not None else ""
    return out


def cmd_evaluate(args, run: RunConfig) -> int:
    level = ScoreLevel(args.level)
    if level == ScoreLevel.LABEL:
        refs = _by_id(_read_jsonl(args.refs), ("dialect", "label"), args.refs)
        hyps = _by_id(_read_jsonl(args.hyps), ("label", "dialect"), args.hyps)
        report = accuracy(refs, hyps)
    else:
        refs = _by_id(_read_jsonl(args.refs), ("text", "ref"), args.refs)
        hyps = _by_id(_read_jsonl(args.hyps), ("hyp", "text"), args.hyps)
        report = score(refs, hyps, level, raw=args.raw, include_spaces=not args.no_spaces)
    _write_text(args.out, report.model_dump_json() + "\n" + format_report(report) + "\n")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="Flat JSON file of config values")
    common.add_argument("--preset", choices=[p.value for p in Preset], default=Preset.TOY.value)
    common.add_argument("--seed", type=int, default=None, help="Root seed (default from SPEECHTEXT_DEFAULT_SEED)")
    common.add_argument("--out", help="Run directory, or output file for stream commands")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config value")

    parser = CliParser(prog="speechtext", description="Arabic speech/text encoder-decoder toolkit")
    parser.add_argument("--version", action="version",
                        version=f"arabic-speech-text {VERSION} (checkpoint format {checkpoint.FORMAT_VERSION}, "
                                f"unit model format {audio_frontend.FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def add(name: str, handler: Callable, help_text: str) -> CliParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("normalize", cmd_normalize, "Normalize Arabic text (stdin or --input)")
    p.add_argument("--input")

    p = add("translit", cmd_translit, "Buckwalter transliteration")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--to-bw", action="store_true")
    mode.add_argument("--from-bw", action="store_true")
    mode.add_argument("--stats", action="store_true")
    p.add_argument("--lenient", action="store_true", help="Pass unmapped characters through on --from-bw")
    p.add_argument("--input")

    p = add("build-vocab", cmd_build_vocab, "Build or extend a character tokenizer")
    p.add_argument("--manifest")
    p.add_argument("--input")
    p.add_argument("--base")

    p = add("extract-mels", cmd_extract_mels, "Dump log-mel spectrograms")
    p.add_argument("--manifest", required=True)

    p = add("fit-units", cmd_fit_units, "Fit the k-means unit model on log-mel frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, dest="flag_unit_count")
    p.add_argument("--max-iter", type=int, default=100)

    p = add("label", cmd_label, "Assign discrete unit labels")
    p.add_argument("units")
    p.add_argument("manifest")

    p = add("make-toy", cmd_make_toy, "Write the synthetic toy corpus")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dialects", type=int, default=0)
    p.add_argument("--alphabet", default=DEFAULT_ALPHABET)

    p = add("filter-manifest", cmd_filter_manifest, "Drop long and overlapped utterances")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-dur", type=float, dest="flag_max_duration")
    p.add_argument("--keep-overlap", action="store_true")
    p.add_argument("--lenient", action="store_true", help="Skip malformed lines instead of failing")

    p = add("corpus-stats", cmd_corpus_stats, "Hours, words and utterances per dialect")
    p.add_argument("--manifest", required=True)

    add("describe", cmd_describe, "Parameter counts per sub-network")

    p = add("pretrain", cmd_pretrain, "Joint speech/text pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--units", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, dest="flag_max_updates")

    for name, handler in (("finetune-asr", cmd_finetune_asr), ("finetune-tts", cmd_finetune_tts),
                          ("finetune-did", cmd_finetune_did)):
        p = add(name, handler, f"{name.split('-')[1].upper()} fine-tuning")
        p.add_argument("--manifest", required=True)
        p.add_argument("--init", required=True, help="Checkpoint to start from")
        p.add_argument("--valid-manifest")
        p.add_argument("--steps", type=int, dest="flag_max_updates")
        p.add_argument("--freeze", action="store_const", const=True, dest="flag_freeze")
        if name == "finetune-asr":
            p.add_argument("--encoding", choices=[e.value for e in TranscriptEncoding],
                           default=TranscriptEncoding.ARABIC.value)
            p.add_argument("--alpha", type=float, dest="flag_ctc_alpha")

    p = add("train-lm", cmd_train_lm, "Train the character LM")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest")
    source.add_argument("--text")
    vocab = p.add_mutually_exclusive_group(required=True)
    vocab.add_argument("--tokenizer")
    vocab.add_argument("--ckpt")
    p.add_argument("--steps", type=int, dest="flag_lm_updates")

    p = add("transcribe", cmd_transcribe, "CTC decoding to JSONL {id, hyp, score}")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--beam", type=int, dest="flag_beam")
    p.add_argument("--lm")
    p.add_argument("--lambda", type=float, dest="flag_lm_weight")
    p.add_argument("--greedy", action="store_true")

    p = add("synthesize", cmd_synthesize, "Text to mel (and waveform)")
    p.add_argument("--ckpt", required=True)
    text = p.add_mutually_exclusive_group(required=True)
    text.add_argument("--text")
    text.add_argument("--file")
    p.add_argument("--format", choices=["wav", "mel"], default="wav")

    p = add("classify", cmd_classify, "Dialect ID to JSONL {id, label, posterior}")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)

    p = add("evaluate", cmd_evaluate, "WER/CER or label accuracy")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--level", choices=[l.value for l in ScoreLevel], default=ScoreLevel.WORD.value)
    p.add_argument("--raw", action="store_true", help="Score without normalizing either side")
    p.add_argument("--no-spaces", action="store_true", help="Exclude spaces from CER")
    return parser


def _flag_values(args: argparse.Namespace) -> Dict[str, Any]:
    """Config values given through dedicated flags (dest prefixed with flag_)."""
    values = _parse_overrides(args.set)
    for dest, value in vars(args).items():
        if dest.startswith("flag_") and value is not None:
            values[dest[len("flag_"):]] = value
    return values


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        seed = settings.DEFAULT_SEED if args.seed is None else args.seed
        run_cfg = RunConfig.resolve(args.command, Preset(args.preset), seed, args.out,
                                    _load_config_file(args.config), _flag_values(args))
        log_file = None
        if args.command in RUN_DIR_COMMANDS and run_cfg.out:
            os.makedirs(run_cfg.out, exist_ok=True)
            with open(os.path.join(run_cfg.out, "run_config.json"), "w", encoding="utf-8") as fh:
                fh.write(run_cfg.model_dump_json(indent=1) + "\n")
            log_file = os.path.join(run_cfg.out, "run.log")
        elif args.command in RUN_DIR_COMMANDS and args.command not in ("transcribe", "classify", "label"):
            raise UsageError(f"{args.command} needs --out <dir>")
        configure_logging(settings.LOG_LEVEL, settings.LOG_FORMAT, log_file)
        torch.set_num_threads(settings.TORCH_THREADS)
        return args.handler(args, run_cfg)
    except SystemExit as e:  # --help, --version
        return e.code if isinstance(e.code, int) else 0
    except OSError as e:
        error = DataError(f"{e.strerror or e}: {e.filename}" if e.filename else str(e))
        sys.stderr.write(json.dumps(error.to_dict(), ensure_ascii=False) + "\n")
        return error.exit_code
    except SpeechTextError as e:
        sys.stderr.write(json.dumps(e.to_dict(), ensure_ascii=False, default=str) + "\n")
        return e.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
