"""
TTS fine-tuning (text encoder -> speech decoder) and autoregressive synthesis.
Input text is normalized, so it never carries diacritics.
"""

import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from models.config import DecodeConfig, FrontendConfig, RunConfig
from models.enums import Modality
from models.errors import UsageError
from models.utterance import Utterance
from services.audio_frontend import MelSpectrogram, Waveform, log_mel
from services.checkpoint import build_model, load_checkpoint, save_checkpoint
from services.corpus import Batch, collate, filter_corpus, plan_batches
from services.network import SpeechTextModel, lengths_to_padding_mask
from services.pretrain import MelLoss, pad_mels, shift_mel, speech_dae_loss
from services.structured_log import TrainingLog
from services.text_pipeline import Tokenizer, normalize_text
from services.training import BatchSchedule, Trainer, fit

logger = logging.getLogger('speechtext.tts')


class MelCache:
    """Target log-mels per utterance id."""

    def __init__(self, frontend_cfg: FrontendConfig = FrontendConfig()):
        self.frontend_cfg = frontend_cfg
        self._mels: Dict[str, np.ndarray] = {}

    def batch(self, batch: Batch, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
        mels = []
        for i, utt_id in enumerate(batch.ids):
            if utt_id not in self._mels:
                samples = batch.waves[i, : batch.wave_lengths[i]].numpy()
                self._mels[utt_id] = log_mel(Waveform(samples), self.frontend_cfg).frames
            mels.append(self._mels[utt_id])
        return pad_mels(mels, dtype)


def tts_loss(model: SpeechTextModel, tokens: torch.Tensor, token_lengths: torch.Tensor,
             mel: torch.Tensor, mel_lengths: torch.Tensor, pos_weight: float = 5.0,
             w_stop: float = 1.0) -> MelLoss:
    src_padding = lengths_to_padding_mask(token_lengths, tokens.shape[1])
    memory = model.encode_text(tokens, src_padding)
    before, after, stop = model.decode_speech(shift_mel(mel), memory,
                                              lengths_to_padding_mask(mel_lengths, mel.shape[1]), src_padding)
    return speech_dae_loss(before, after, stop, mel, mel_lengths, pos_weight, w_stop)


def finetune_tts_step(model: SpeechTextModel, trainer: Trainer, batch: Batch, mels: MelCache) -> Dict[str, Any]:
    cfg = trainer.cfg
    step = trainer.begin()
    mel, mel_lengths = mels.batch(batch, next(model.parameters()).dtype)
    loss = tts_loss(model, batch.tokens, batch.token_lengths, mel, mel_lengths, cfg.stop_pos_weight, cfg.w_stop)
    terms = {"l1_before": loss.l1_before, "l1_after": loss.l1_after, "stop": loss.stop}
    lr = trainer.update(loss.total, terms)
    record = {"step": step, "lr": lr, "total": float(loss.total.detach())}
    record.update({name: float(value.detach()) for name, value in terms.items()})
    return record


def finetune_tts(utts: Sequence[Utterance], init: str, run: RunConfig, out_dir: Optional[str] = None,
                 valid_utts: Optional[Sequence[Utterance]] = None,
                 n_steps: Optional[int] = None) -> Tuple[SpeechTextModel, Tokenizer, List[Dict[str, Any]]]:
    """
    Fine-tune from a pre-trained checkpoint (stage 1) or continue from a TTS
    checkpoint on new data (stage 2).
    """
    cfg = run.train
    ckpt = load_checkpoint(init)
    if ckpt.kind not in ("pretrain", "tts"):
        raise UsageError(f"{init}: cannot fine-tune TTS from a {ckpt.kind} checkpoint")
    stage = 2 if ckpt.kind == "tts" else 1
    model = build_model(ckpt)
    tokenizer = ckpt.tokenizer
    train_utts = [u for u in filter_corpus(utts, cfg.max_duration) if u.text_norm]
    trainer = Trainer(model, cfg, purpose=f"finetune-tts-{stage}")
    schedule = BatchSchedule(train_utts, Modality.PAIRED, cfg.batch_budget_samples, cfg.seed,
                             cfg.max_speech_samples, cfg.max_text_chars)
    mels = MelCache(run.frontend)

    def step_fn():
        batch = collate(schedule.groups(trainer.step + 1), Modality.PAIRED, tokenizer)
        return {**finetune_tts_step(model, trainer, batch, mels), "stage": stage}

    validate = None
    if valid_utts:
        valid_groups = plan_batches(filter_corpus(valid_utts, cfg.max_duration), cfg.batch_budget_samples,
                                    cfg.seed, Modality.PAIRED, 0, cfg.max_speech_samples, cfg.max_text_chars)
        valid_mels = MelCache(run.frontend)

        @torch.no_grad()
        def validate() -> float:
            model.eval()
            losses = []
            for group in valid_groups:
                batch = collate(group, Modality.PAIRED, tokenizer)
                mel, mel_lengths = valid_mels.batch(batch)
                losses.append(float(tts_loss(model, batch.tokens, batch.token_lengths, mel, mel_lengths,
                                             cfg.stop_pos_weight, cfg.w_stop).total))
            return sum(losses) / len(losses)

    def save():
        save_checkpoint(os.path.join(out_dir, "checkpoint.zip"), model, "tts", model.cfg.model_dump(), tokenizer,
                        trainer.step, trainer.optimizer, {"stage": stage})

    with TrainingLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None) as log:
        records = fit(trainer, cfg.max_updates if n_steps is None else n_steps, step_fn, log,
                      validate, save if out_dir else None)
    return model, tokenizer, records


@torch.no_grad()
def synthesize(model: SpeechTextModel, tokenizer: Tokenizer, text: str,
               decode_cfg: DecodeConfig = DecodeConfig(),
               frontend_cfg: FrontendConfig = FrontendConfig()) -> Tuple[MelSpectrogram, bool]:
    """
    Generate frames until sigmoid(stop) exceeds the threshold or max_frames is
    reached. Returns the refined mel and whether the frame cap was hit.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    ids = torch.tensor([tokenizer.encode(normalize_text(text), strict=True)], dtype=torch.long)
    if ids.shape[1] == 0:
        raise UsageError("nothing to synthesize after normalization")
    memory = model.encode_text(ids)
    frames = torch.zeros(1, 1, model.cfg.mel_bins, dtype=dtype)
    generated = []
    reached_max = True
    for _ in range(decode_cfg.max_frames):
        before, _, stop = model.decode_speech(frames, memory)
        generated.append(before[:, -1:])
        if torch.sigmoid(stop[0, -1]) > decode_cfg.stop_threshold:
            reached_max = False
            break
        frames = torch.cat([frames, before[:, -1:]], dim=1)
    mel = model.speech_decoder_postnet.refine(torch.cat(generated, dim=1))[0]
    if reached_max:
        logger.warning(f"Synthesis hit max_frames={decode_cfg.max_frames} without a stop decision",
                       extra={"event": {"max_frames_reached": True, "text_chars": ids.shape[1]}})
    return (MelSpectrogram(frames=mel.float().numpy(), hop=frontend_cfg.hop_length / frontend_cfg.sample_rate,
                           window=frontend_cfg.win_length / frontend_cfg.sample_rate), reached_max)
