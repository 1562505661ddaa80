"""
Dialect identification as a one-step decode: the text decoder sees only
[bos] and its first output, restricted to the dialect-label tokens, is a
softmax classifier over dialects.
"""

import logging
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from models.config import RunConfig
from models.enums import Modality
from models.errors import DataError, UnknownDialectLabel, UsageError
from models.reports import DialectPrediction
from models.utterance import Utterance
from services.audio_frontend import Waveform, load_wave
from services.checkpoint import build_model, load_checkpoint, save_checkpoint
from services.corpus import Batch, collate, filter_corpus, plan_batches
from services.network import SpeechTextModel
from services.structured_log import TrainingLog
from services.text_pipeline import Tokenizer
from services.training import BatchSchedule, Trainer, fit

logger = logging.getLogger('speechtext.dialect')


def dialect_symbol(label: str) -> str:
    return f"<dialect:{label}>"


class DialectVocabulary:
    """Dialect labels and the tokenizer ids that stand for them."""

    def __init__(self, tokenizer: Tokenizer, labels: Sequence[str]):
        self.labels = list(labels)
        missing = [dialect_symbol(l) for l in self.labels if dialect_symbol(l) not in tokenizer]
        self.tokenizer = tokenizer.extend(missing) if missing else tokenizer
        self.token_ids = [self.tokenizer.id_of(dialect_symbol(l)) for l in self.labels]
        self._index = {l: i for i, l in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def index_of(self, label: Optional[str]) -> int:
        if label not in self._index:
            raise UnknownDialectLabel(str(label))
        return self._index[label]


def dialect_logits(model: SpeechTextModel, waves: torch.Tensor, wave_lengths: Optional[torch.Tensor],
                   vocab: DialectVocabulary, bos_id: int) -> torch.Tensor:
    """B x n_dialects logits of the first decoder step."""
    dtype = next(model.parameters()).dtype
    encoded, padding = model.encode_speech(waves.to(dtype), wave_lengths)
    prev = torch.full((waves.shape[0], 1), bos_id, dtype=torch.long)
    logits = model.decode_text(prev, encoded, None, padding)[:, 0]
    return logits[:, vocab.token_ids]


def did_loss(model: SpeechTextModel, batch: Batch, vocab: DialectVocabulary) -> torch.Tensor:
    targets = torch.tensor([vocab.index_of(d) for d in batch.dialects], dtype=torch.long)
    logits = dialect_logits(model, batch.waves, batch.wave_lengths, vocab, vocab.tokenizer.bos_id)
    return F.cross_entropy(logits, targets)


def finetune_did_step(model: SpeechTextModel, trainer: Trainer, batch: Batch,
                      vocab: DialectVocabulary) -> Dict[str, Any]:
    step = trainer.begin()
    loss = did_loss(model, batch, vocab)
    lr = trainer.update(loss, {"did": loss})
    return {"step": step, "lr": lr, "did": float(loss.detach()), "total": float(loss.detach())}


def finetune_did(utts: Sequence[Utterance], init: str, run: RunConfig, out_dir: Optional[str] = None,
                 valid_utts: Optional[Sequence[Utterance]] = None,
                 n_steps: Optional[int] = None) -> Tuple[SpeechTextModel, DialectVocabulary, List[Dict[str, Any]]]:
    cfg = run.train
    ckpt = load_checkpoint(init)
    if ckpt.kind != "pretrain":
        raise UsageError(f"{init}: dialect ID starts from a pretrain checkpoint, got {ckpt.kind}")
    train_utts = filter_corpus(utts, cfg.max_duration)
    unlabeled = [u.id for u in train_utts if u.dialect is None]
    if unlabeled:
        raise DataError(f"{len(unlabeled)} utterance(s) have no dialect label, first {unlabeled[0]!r}")
    vocab = DialectVocabulary(ckpt.tokenizer, sorted({u.dialect for u in train_utts}))
    model = build_model(ckpt)
    model.resize_text_vocab(len(vocab.tokenizer))
    trainer = Trainer(model, cfg, purpose="finetune-did")
    schedule = BatchSchedule(train_utts, Modality.SPEECH, cfg.batch_budget_samples, cfg.seed,
                             cfg.max_speech_samples, cfg.max_text_chars)

    def step_fn():
        batch = collate(schedule.groups(trainer.step + 1), Modality.SPEECH)
        return finetune_did_step(model, trainer, batch, vocab)

    validate = None
    if valid_utts:
        valid_groups = plan_batches(filter_corpus(valid_utts, cfg.max_duration), cfg.batch_budget_samples,
                                    cfg.seed, Modality.SPEECH, 0, cfg.max_speech_samples, cfg.max_text_chars)

        @torch.no_grad()
        def validate() -> float:
            model.eval()
            losses = [float(did_loss(model, collate(g, Modality.SPEECH), vocab)) for g in valid_groups]
            return sum(losses) / len(losses)

    def save():
        save_checkpoint(os.path.join(out_dir, "checkpoint.zip"), model, "did", model.cfg.model_dump(),
                        vocab.tokenizer, trainer.step, trainer.optimizer, {"dialects": vocab.labels})

    with TrainingLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None) as log:
        records = fit(trainer, cfg.max_updates if n_steps is None else n_steps, step_fn, log,
                      validate, save if out_dir else None)
    return model, vocab, records


def load_classifier(path: str) -> Tuple[SpeechTextModel, DialectVocabulary]:
    ckpt = load_checkpoint(path, kind="did")
    return build_model(ckpt), DialectVocabulary(ckpt.tokenizer, ckpt.extra["dialects"])


@torch.no_grad()
def classify(model: SpeechTextModel, vocab: DialectVocabulary, wave: Waveform) -> DialectPrediction:
    model.eval()
    samples = torch.from_numpy(wave.samples)[None]
    logits = dialect_logits(model, samples, None, vocab, vocab.tokenizer.bos_id)[0]
    posterior = F.softmax(logits.double(), dim=-1).tolist()
    best = max(range(len(vocab)), key=lambda i: (posterior[i], -i))
    return DialectPrediction(label=vocab.labels[best], posterior=dict(zip(vocab.labels, posterior)))


def classify_utterances(model: SpeechTextModel, vocab: DialectVocabulary, utts: Sequence[Utterance],
                        loader: Callable[[str], Waveform] = load_wave) -> List[Dict[str, Any]]:
    results = []
    for utt in utts:
        prediction = classify(model, vocab, loader(utt.audio))
        results.append({"id": utt.id, "label": prediction.label, "posterior": prediction.posterior})
    return results
