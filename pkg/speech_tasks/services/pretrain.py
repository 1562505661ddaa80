"""
Joint self-supervised pre-training.

Four objectives share one update: masked unit prediction on speech,
speech denoising (mel reconstruction), text denoising (span-masked
reconstruction) and the codebook diversity penalty. A fraction of encoder
states of both modalities is swapped for their quantized versions before
the decoder sees them.
"""

import logging
import math
import os
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from models.config import RunConfig, TrainConfig
from models.enums import Modality
from models.errors import DataError, DimMismatch, NonDistribution, ShapeMismatch
from models.reports import LossReport
from models.utterance import Utterance
from services.audio_frontend import ClusterModel, Waveform, assign_labels, log_mel, sample_mask_spans
from services.checkpoint import load_checkpoint, save_checkpoint
from services.corpus import Batch, PrefetchIterator, collate, filter_corpus, speech_length
from services.network import Codebook, SpeechTextModel, lengths_to_padding_mask
from services.seeding import derive_seed, numpy_rng, torch_generator
from services.structured_log import TrainingLog
from services.text_pipeline import Tokenizer
from services.training import BatchSchedule, Trainer

logger = logging.getLogger('speechtext.pretrain')

# ============================================================================
# LOSSES
# ============================================================================

class MelLoss(NamedTuple):
    l1_before: torch.Tensor
    l1_after: torch.Tensor
    stop: torch.Tensor
    total: torch.Tensor


def speech_mlm_loss(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """Mean cross-entropy over masked frames; (0, 0) when nothing is masked."""
    if logits.shape[:-1] != labels.shape or labels.shape != mask.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)}, labels {tuple(labels.shape)}, mask {tuple(mask.shape)}")
    count = int(mask.sum())
    if count == 0:
        return logits.sum() * 0.0, 0
    return F.cross_entropy(logits[mask], labels[mask], reduction="sum") / count, count


def stop_targets(lengths: torch.Tensor, n_frames: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """1 at each sequence's final valid frame, 0 elsewhere."""
    target = torch.zeros(lengths.shape[0], n_frames, dtype=dtype)
    target[torch.arange(lengths.shape[0]), lengths - 1] = 1.0
    return target


def speech_dae_loss(mel_before: torch.Tensor, mel_after: torch.Tensor, stop_logits: torch.Tensor,
                    target: torch.Tensor, lengths: torch.Tensor, pos_weight: float = 5.0,
                    w_stop: float = 1.0) -> MelLoss:
    """L1 of both mel outputs over valid frames plus weighted stop-token BCE."""
    if mel_before.shape != target.shape or mel_after.shape != target.shape:
        raise ShapeMismatch(f"mel outputs {tuple(mel_before.shape)} / {tuple(mel_after.shape)} vs target {tuple(target.shape)}")
    if stop_logits.shape != target.shape[:2]:
        raise ShapeMismatch(f"stop logits {tuple(stop_logits.shape)} vs frames {tuple(target.shape[:2])}")
    valid = ~lengths_to_padding_mask(lengths, target.shape[1])
    denom = valid.sum() * target.shape[-1]
    weight = valid[..., None].to(target.dtype)
    l1_before = ((mel_before - target).abs() * weight).sum() / denom
    l1_after = ((mel_after - target).abs() * weight).sum() / denom
    stop_bce = F.binary_cross_entropy_with_logits(
        stop_logits[valid], stop_targets(lengths, target.shape[1], target.dtype)[valid],
        pos_weight=torch.tensor(pos_weight, dtype=target.dtype))
    return MelLoss(l1_before, l1_after, stop_bce, l1_before + l1_after + w_stop * stop_bce)


def corrupt_text(ids: Sequence[int], rate: float, rng: np.random.Generator, mask_id: int,
                 mean_span: float = 3.0) -> Tuple[List[int], List[int]]:
    """
    Replace floor(rate * n + u) tokens by the mask id, u ~ U[0, 1), in
    contiguous spans with Poisson(mean_span) lengths (at least 1).
    Length is preserved.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"corruption rate {rate} outside [0, 1]")
    original = list(ids)
    n = len(original)
    target = min(n, int(math.floor(rate * n + rng.random())))
    masked = np.zeros(n, dtype=bool)
    done = 0
    while done < target:
        span = max(1, int(rng.poisson(mean_span)))
        free = np.flatnonzero(~masked)
        start = int(free[rng.integers(0, free.size)])
        for pos in range(start, min(n, start + span)):
            if done == target:
                break
            if not masked[pos]:
                masked[pos] = True
                done += 1
    corrupted = [mask_id if m else t for t, m in zip(original, masked)]
    return corrupted, original


def text_dae_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_id)


class MixStats(NamedTuple):
    usage: Optional[torch.Tensor]     # G x V, mean soft probabilities over valid positions
    prob_sum: torch.Tensor            # G x V
    n_valid: int
    n_replaced: int


def mix_quantized(states: torch.Tensor, codebook: Codebook, mix_prob: float, generator: torch.Generator,
                  padding_mask: Optional[torch.Tensor] = None,
                  temperature: float = 1.0) -> Tuple[torch.Tensor, MixStats]:
    """Replace each valid position by its quantized vector with probability mix_prob."""
    if not 0.0 <= mix_prob <= 1.0:
        raise DataError(f"mix_prob {mix_prob} outside [0, 1]")
    quant = codebook(states, temperature)
    valid = torch.ones(states.shape[:2], dtype=torch.bool) if padding_mask is None else ~padding_mask
    replace = (torch.rand(states.shape[:2], generator=generator) < mix_prob) & valid
    mixed = torch.where(replace[..., None], quant.vectors, states)
    n_valid = int(valid.sum())
    prob_sum = quant.probs[valid].sum(dim=0)
    usage = prob_sum / n_valid if n_valid else None
    return mixed, MixStats(usage=usage, prob_sum=prob_sum, n_valid=n_valid, n_replaced=int(replace.sum()))


def diversity_loss(usage: torch.Tensor) -> torch.Tensor:
    """sum_g (V - exp H(p_g)) / (G * V), entropy in nats."""
    if usage.dim() != 2:
        raise NonDistribution(f"usage must be G x V, got shape {tuple(usage.shape)}")
    sums = usage.double().sum(dim=-1)
    # 1e-6, widened to the rounding of V single-precision terms
    tolerance = max(1e-6, usage.shape[-1] * torch.finfo(usage.dtype).eps)
    if (usage < 0).any() or ((sums - 1.0).abs() > tolerance).any():
        raise NonDistribution(f"usage rows must be probability vectors (row sums {sums.tolist()})")
    groups, entries = usage.shape
    perplexity = torch.exp(torch.special.entr(usage).sum(dim=-1))
    return (entries - perplexity).sum() / (groups * entries)


# ============================================================================
# FEATURES
# ============================================================================

class UnitLabeler:
    """Per-utterance log-mel and discrete labels, computed once and cached."""

    def __init__(self, cluster_model: ClusterModel, frontend_cfg, decimation: int = 2):
        self.cluster_model = cluster_model
        self.frontend_cfg = frontend_cfg
        self.decimation = decimation
        self._cache: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def features(self, utt_id: str, samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if utt_id not in self._cache:
            mel = log_mel(Waveform(samples), self.frontend_cfg)
            labels = assign_labels(self.cluster_model, mel, self.decimation).labels
            self._cache[utt_id] = (mel.frames, labels)
        return self._cache[utt_id]


def pad_mels(mels: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    tensors = [torch.as_tensor(m, dtype=dtype) for m in mels]
    return pad_sequence(tensors, batch_first=True), torch.tensor([t.shape[0] for t in tensors], dtype=torch.long)


def shift_mel(mel: torch.Tensor) -> torch.Tensor:
    """Decoder input: a zero frame followed by the target frames minus the last."""
    return torch.cat([torch.zeros_like(mel[:, :1]), mel[:, :-1]], dim=1)


def text_decoder_io(tokens: torch.Tensor, lengths: torch.Tensor, tokenizer: Tokenizer) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """([bos] + ids, ids + [eos], new lengths), padded with pad id."""
    prev, target = [], []
    for row, n in zip(tokens, lengths.tolist()):
        ids = row[:n]
        prev.append(torch.cat([torch.tensor([tokenizer.bos_id]), ids]))
        target.append(torch.cat([ids, torch.tensor([tokenizer.eos_id])]))
    return (pad_sequence(prev, batch_first=True, padding_value=tokenizer.pad_id),
            pad_sequence(target, batch_first=True, padding_value=tokenizer.pad_id),
            lengths + 1)


# ============================================================================
# JOINT STEP
# ============================================================================

def pretrain_step(model: SpeechTextModel, trainer: Trainer, speech_batch: Optional[Batch],
                  text_batch: Optional[Batch], labeler: UnitLabeler, tokenizer: Tokenizer) -> LossReport:
    cfg: TrainConfig = trainer.cfg
    mcfg = model.cfg
    step = trainer.begin()
    rng = numpy_rng(cfg.seed, "pretrain-mask", step)
    gen = torch_generator(cfg.seed, "pretrain-mix", step)
    temperature = model.codebook.temperature(step - 1)
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    mlm, sdae, tdae = zero, zero, zero
    n_masked, n_replaced = 0, 0
    prob_sum = torch.zeros(mcfg.codebook_groups, mcfg.codebook_entries, dtype=dtype)
    n_valid = 0

    if speech_batch is not None:
        if labeler.cluster_model.k != mcfg.unit_count:
            raise DimMismatch(labeler.cluster_model.k, mcfg.unit_count, what="unit count")
        waves, lengths = speech_batch.waves, speech_batch.wave_lengths
        n_frames = waves.shape[1] // mcfg.stride_product
        frame_mask = torch.zeros(len(speech_batch), n_frames, dtype=torch.bool)
        labels = torch.zeros(len(speech_batch), n_frames, dtype=torch.long)
        aligned = torch.zeros(len(speech_batch), dtype=torch.long)
        mels = []
        for i, utt_id in enumerate(speech_batch.ids):
            mel, unit_labels = labeler.features(utt_id, waves[i, : lengths[i]].numpy())
            n = min(int(lengths[i]) // mcfg.stride_product, len(unit_labels))
            spec = sample_mask_spans(n, mcfg.span_len, cfg.mask_start_prob, rng)
            frame_mask[i, :n] = torch.from_numpy(spec.as_bool())
            labels[i, :n] = torch.from_numpy(unit_labels[:n])
            aligned[i] = n
            mels.append(mel)
        states, _ = model.speech_encoder_prenet(waves.to(dtype), lengths, frame_mask)
        padding = lengths_to_padding_mask(aligned, n_frames)
        encoded = model.encode(states, padding)
        mlm, n_masked = speech_mlm_loss(model.unit_head(encoded), labels, frame_mask & ~padding)
        mixed, stats = mix_quantized(encoded, model.codebook, mcfg.mix_prob, gen, padding, temperature)
        prob_sum, n_valid, n_replaced = prob_sum + stats.prob_sum, n_valid + stats.n_valid, n_replaced + stats.n_replaced
        mel_target, mel_lengths = pad_mels(mels, dtype)
        before, after, stop = model.decode_speech(shift_mel(mel_target), mixed,
                                                  lengths_to_padding_mask(mel_lengths, mel_target.shape[1]), padding)
        sdae = speech_dae_loss(before, after, stop, mel_target, mel_lengths, cfg.stop_pos_weight, cfg.w_stop).total

    if text_batch is not None:
        tokens, lengths = text_batch.tokens, text_batch.token_lengths
        corrupted = tokens.clone()
        for i, n in enumerate(lengths.tolist()):
            noisy, _ = corrupt_text(tokens[i, :n].tolist(), cfg.text_corrupt_rate, rng,
                                    tokenizer.mask_id, cfg.text_span_mean)
            corrupted[i, :n] = torch.tensor(noisy, dtype=torch.long)
        src_padding = lengths_to_padding_mask(lengths, tokens.shape[1])
        encoded = model.encode_text(corrupted, src_padding)
        mixed, stats = mix_quantized(encoded, model.codebook, mcfg.mix_prob, gen, src_padding, temperature)
        prob_sum, n_valid, n_replaced = prob_sum + stats.prob_sum, n_valid + stats.n_valid, n_replaced + stats.n_replaced
        prev, target, tgt_lengths = text_decoder_io(tokens, lengths, tokenizer)
        logits = model.decode_text(prev, mixed, lengths_to_padding_mask(tgt_lengths, prev.shape[1]), src_padding)
        tdae = text_dae_loss(logits, target, tokenizer.pad_id)

    div = diversity_loss(prob_sum / n_valid) if n_valid else zero
    terms = {"speech_mlm": mlm, "speech_dae": sdae, "text_dae": tdae, "diversity": div}
    weights = {"speech_mlm": cfg.w_mlm, "speech_dae": cfg.w_sdae, "text_dae": cfg.w_tdae, "diversity": cfg.w_div}
    total = sum(weights[name] * value for name, value in terms.items())
    lr = trainer.update(total, terms)
    values = {name: float(value.detach()) for name, value in terms.items()}
    return LossReport(step=step, lr=lr, total=sum(weights[n] * v for n, v in values.items()),
                      masked_frames=n_masked, codes_replaced=n_replaced, temperature=temperature, **values)


# ============================================================================
# DRIVER
# ============================================================================

def pretraining_corpus(utts: Sequence[Utterance], cfg: TrainConfig, min_samples: int = 640) -> List[Utterance]:
    """Filtered utterances long enough for at least one aligned frame and with text."""
    kept = [u for u in filter_corpus(utts, cfg.max_duration)
            if speech_length(u) >= min_samples and u.text_norm]
    if not kept:
        raise DataError("no utterance left for pre-training after filtering")
    return kept


def _step_batches(utts, run: RunConfig, tokenizer: Tokenizer, start_step: int, n_steps: int):
    cfg = run.train
    caps = (cfg.max_speech_samples, cfg.max_text_chars)
    speech = BatchSchedule(utts, Modality.SPEECH, cfg.batch_budget_samples, cfg.seed, *caps)
    text = BatchSchedule(utts, Modality.TEXT, cfg.batch_budget_chars, cfg.seed, *caps)
    for step in range(start_step + 1, start_step + n_steps + 1):
        yield (collate(speech.groups(step), Modality.SPEECH, tokenizer),
               collate(text.groups(step), Modality.TEXT, tokenizer))


def pretrain(utts: Sequence[Utterance], cluster_model: ClusterModel, tokenizer: Tokenizer, run: RunConfig,
             out_dir: Optional[str] = None, resume: Optional[str] = None,
             n_steps: Optional[int] = None) -> Tuple[SpeechTextModel, List[LossReport]]:
    """Run (or resume) joint pre-training; writes train_log.jsonl and checkpoint.zip under out_dir."""
    cfg = run.train
    corpus = pretraining_corpus(utts, cfg)
    mcfg = run.model.model_copy(update={"vocab_size": len(tokenizer), "unit_count": cluster_model.k})
    torch.manual_seed(derive_seed(run.seed, "init", "pretrain"))
    model = SpeechTextModel(mcfg)
    trainer = Trainer(model, cfg, purpose="pretrain")
    if resume:
        ckpt = load_checkpoint(resume, kind="pretrain")
        model.load_state_dict(ckpt.model_state)
        ckpt.load_optimizer(trainer.optimizer)
        trainer.step = ckpt.step
        logger.info(f"Resumed pre-training from {resume} at step {ckpt.step}")
    total_steps = cfg.max_updates if n_steps is None else n_steps
    remaining = max(0, total_steps - trainer.step)
    labeler = UnitLabeler(cluster_model, run.frontend, run.frontend.label_decimation)
    log = TrainingLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None, append=bool(resume))
    ckpt_path = os.path.join(out_dir, "checkpoint.zip") if out_dir else None
    reports: List[LossReport] = []
    batches = PrefetchIterator(_step_batches(corpus, run, tokenizer, trainer.step, remaining))
    try:
        for speech_batch, text_batch in batches:
            report = pretrain_step(model, trainer, speech_batch, text_batch, labeler, tokenizer)
            reports.append(report)
            if report.step % cfg.log_every == 0:
                log.write(report.model_dump())
            if ckpt_path and cfg.checkpoint_every and report.step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, "pretrain", mcfg.model_dump(), tokenizer,
                                trainer.step, trainer.optimizer, {"seed": run.seed})
    finally:
        batches.close()
        log.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, "pretrain", mcfg.model_dump(), tokenizer,
                        trainer.step, trainer.optimizer, {"seed": run.seed})
    if reports:
        logger.info(f"Pre-training finished at step {trainer.step}: total {reports[-1].total:.4f}",
                    extra={"event": reports[-1].model_dump()})
    return model, reports
