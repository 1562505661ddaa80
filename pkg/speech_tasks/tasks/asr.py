"""
ASR fine-tuning and transcription.

The speech pre-net, encoder and CTC head are trained with CTC; with
ctc_alpha > 0 the text decoder adds a cross-entropy term on the same
encoder output. Targets are written in Arabic script or in Buckwalter
transliteration (with the tokenizer extended by the Buckwalter symbols).
"""

import logging
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from models.config import DecodeConfig, RunConfig
from models.enums import DecodeMode, Modality, TranscriptEncoding
from models.errors import UsageError
from models.utterance import Utterance
from services.audio_frontend import Waveform, load_wave
from services.checkpoint import build_model, load_checkpoint, save_checkpoint
from services.corpus import Batch, collate, filter_corpus, plan_batches
from services.network import SpeechTextModel, lengths_to_padding_mask
from services.pretrain import text_dae_loss, text_decoder_io
from services.structured_log import TrainingLog
from services.text_pipeline import Tokenizer, from_buckwalter, to_buckwalter
from services.training import BatchSchedule, Trainer, fit
from tasks.ctc import LanguageModelScorer, ctc_loss, decode_ctc

logger = logging.getLogger('speechtext.asr')


def transcript_fn(encoding: TranscriptEncoding) -> Callable[[Utterance], str]:
    if encoding == TranscriptEncoding.BUCKWALTER:
        return lambda u: to_buckwalter(u.text_norm)
    return lambda u: u.text_norm


def prepare_tokenizer(tokenizer: Tokenizer, utts: Sequence[Utterance], encoding: TranscriptEncoding) -> Tokenizer:
    """Extend the pre-training tokenizer with every target symbol it lacks (ids of known symbols are kept)."""
    text_of = transcript_fn(encoding)
    missing = {c for u in utts for c in text_of(u) if c not in tokenizer}
    if not missing:
        return tokenizer
    extended = tokenizer.extend(sorted(missing, key=ord))
    logger.info(f"Tokenizer extended {len(tokenizer)} -> {len(extended)} for {encoding.value} targets")
    return extended


def asr_loss(model: SpeechTextModel, batch: Batch, tokenizer: Tokenizer,
             alpha: float = 0.0) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Mean per-utterance CTC on the encoder output, plus alpha * decoder cross-entropy."""
    dtype = next(model.parameters()).dtype
    encoded, padding = model.encode_speech(batch.waves.to(dtype), batch.wave_lengths)
    log_probs = F.log_softmax(model.ctc_head(encoded), dim=-1)
    input_lengths = (~padding).sum(dim=1)
    ctc = ctc_loss(log_probs, batch.tokens, input_lengths, batch.token_lengths,
                   blank=tokenizer.blank_id, zero_infinity=True).mean()
    terms = {"ctc": ctc}
    total = ctc
    if alpha > 0:
        prev, target, lengths = text_decoder_io(batch.tokens, batch.token_lengths, tokenizer)
        logits = model.decode_text(prev, encoded, lengths_to_padding_mask(lengths, prev.shape[1]), padding)
        terms["ce"] = text_dae_loss(logits, target, tokenizer.pad_id)
        total = ctc + alpha * terms["ce"]
    return total, terms


def finetune_asr_step(model: SpeechTextModel, trainer: Trainer, batch: Batch, tokenizer: Tokenizer,
                      alpha: float = 0.0) -> Dict[str, Any]:
    step = trainer.begin()
    total, terms = asr_loss(model, batch, tokenizer, alpha)
    lr = trainer.update(total, terms)
    record = {"step": step, "lr": lr, "total": float(total.detach())}
    record.update({name: float(value.detach()) for name, value in terms.items()})
    return record


def finetune_asr(utts: Sequence[Utterance], init: str, run: RunConfig, out_dir: Optional[str] = None,
                 encoding: TranscriptEncoding = TranscriptEncoding.ARABIC,
                 valid_utts: Optional[Sequence[Utterance]] = None,
                 n_steps: Optional[int] = None) -> Tuple[SpeechTextModel, Tokenizer, List[Dict[str, Any]]]:
    cfg = run.train
    ckpt = load_checkpoint(init)
    if ckpt.kind not in ("pretrain", "asr"):
        raise UsageError(f"{init}: cannot fine-tune ASR from a {ckpt.kind} checkpoint")
    model = build_model(ckpt)
    train_utts = [u for u in filter_corpus(utts, cfg.max_duration) if u.text_norm]
    tokenizer = prepare_tokenizer(ckpt.tokenizer, train_utts, encoding)
    model.resize_text_vocab(len(tokenizer))
    text_of = transcript_fn(encoding)
    trainer = Trainer(model, cfg, purpose="finetune-asr")
    schedule = BatchSchedule(train_utts, Modality.PAIRED, cfg.batch_budget_samples, cfg.seed,
                             cfg.max_speech_samples, cfg.max_text_chars)

    def step_fn():
        step = trainer.step + 1
        batch = collate(schedule.groups(step), Modality.PAIRED, tokenizer, transcript=text_of)
        return finetune_asr_step(model, trainer, batch, tokenizer, cfg.ctc_alpha)

    validate = None
    if valid_utts:
        valid_groups = plan_batches(filter_corpus(valid_utts, cfg.max_duration), cfg.batch_budget_samples,
                                    cfg.seed, Modality.PAIRED, 0, cfg.max_speech_samples, cfg.max_text_chars)

        @torch.no_grad()
        def validate() -> float:
            model.eval()
            losses = [float(asr_loss(model, collate(g, Modality.PAIRED, tokenizer, transcript=text_of),
                                     tokenizer, cfg.ctc_alpha)[0]) for g in valid_groups]
            return sum(losses) / len(losses)

    def save():
        save_checkpoint(os.path.join(out_dir, "checkpoint.zip"), model, "asr", model.cfg.model_dump(), tokenizer,
                        trainer.step, trainer.optimizer, {"encoding": encoding.value, "ctc_alpha": cfg.ctc_alpha})

    with TrainingLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None) as log:
        records = fit(trainer, cfg.max_updates if n_steps is None else n_steps, step_fn, log,
                      validate, save if out_dir else None)
    return model, tokenizer, records


@torch.no_grad()
def speech_log_probs(model: SpeechTextModel, wave: Waveform) -> torch.Tensor:
    """T' x V CTC log-probabilities of one waveform."""
    samples = torch.from_numpy(wave.samples).to(next(model.parameters()).dtype)[None]
    encoded, _ = model.encode_speech(samples)
    return F.log_softmax(model.ctc_head(encoded)[0], dim=-1)


@torch.no_grad()
def transcribe(model: SpeechTextModel, tokenizer: Tokenizer, utts: Sequence[Utterance],
               decode_cfg: DecodeConfig = DecodeConfig(), mode: DecodeMode = DecodeMode.BEAM,
               lm: Optional[LanguageModelScorer] = None,
               encoding: TranscriptEncoding = TranscriptEncoding.ARABIC,
               loader: Callable[[str], Waveform] = load_wave) -> List[Dict[str, Any]]:
    """One {id, hyp, score} record per utterance, hypotheses in Arabic script."""
    model.eval()
    specials = [i for i in tokenizer.specials.values() if i != tokenizer.blank_id]
    results = []
    for utt in utts:
        hyp = decode_ctc(speech_log_probs(model, loader(utt.audio)), mode, decode_cfg.beam, lm,
                         decode_cfg.lm_weight if lm is not None else 0.0, decode_cfg.length_bonus,
                         blank=tokenizer.blank_id, suppress=specials)
        text = tokenizer.decode(hyp.ids)
        if encoding == TranscriptEncoding.BUCKWALTER:
            text = from_buckwalter(text, strict=False)
        results.append({"id": utt.id, "hyp": text, "score": hyp.score})
    logger.info(f"Transcribed {len(results)} utterances ({mode.value}, lm={'on' if lm is not None else 'off'})")
    return results
