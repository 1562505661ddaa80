"""
Character language model over the shared tokenizer, used for shallow fusion
in CTC beam search.
"""

import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from models.config import CharLMConfig, TrainConfig
from models.errors import EmptyCorpus, UnknownSymbol, VocabMismatch
from services.checkpoint import Checkpoint, save_checkpoint
from services.network import causal_mask, lengths_to_padding_mask, sinusoid_positions
from services.seeding import derive_seed, numpy_rng
from services.structured_log import TrainingLog
from services.text_pipeline import Tokenizer
from services.training import Trainer

logger = logging.getLogger('speechtext.char_lm')


class CharLM(nn.Module):
    """Decoder-only transformer: causal self-attention over [bos] + ids."""

    def __init__(self, cfg: CharLMConfig, vocab_size: int, pad_id: int = 0, bos_id: int = 1, eos_id: int = 2):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.pad_id, self.bos_id, self.eos_id = pad_id, bos_id, eos_id
        self.embedding = nn.Embedding(vocab_size, cfg.lm_d_model, padding_idx=pad_id)
        layer = nn.TransformerEncoderLayer(cfg.lm_d_model, cfg.lm_heads, cfg.lm_ffn_dim, cfg.lm_dropout,
                                           batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, cfg.lm_layers, norm=nn.LayerNorm(cfg.lm_d_model),
                                            enable_nested_tensor=False)
        self.out = nn.Linear(cfg.lm_d_model, vocab_size)
        nn.init.normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)
        self.scale = math.sqrt(cfg.lm_d_model)

    def forward(self, ids: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.embedding(ids) * self.scale
        x = x + sinusoid_positions(ids.shape[1], x.shape[-1], x.dtype)
        hidden = self.layers(x, mask=causal_mask(ids.shape[1]), src_key_padding_mask=padding_mask)
        return self.out(hidden)

    @torch.no_grad()
    def log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        was_training = self.training
        self.eval()
        ids = torch.tensor([[self.bos_id, *prefix]], dtype=torch.long)
        logits = self(ids)[0, -1]
        self.train(was_training)
        return F.log_softmax(logits.double(), dim=-1).numpy()


def lm_io(seqs: Sequence[Sequence[int]], lm: CharLM) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Inputs [bos] + ids, targets ids + [eos], padding mask."""
    inputs = [torch.tensor([lm.bos_id, *s], dtype=torch.long) for s in seqs]
    targets = [torch.tensor([*s, lm.eos_id], dtype=torch.long) for s in seqs]
    lengths = torch.tensor([len(s) + 1 for s in seqs], dtype=torch.long)
    return (pad_sequence(inputs, batch_first=True, padding_value=lm.pad_id),
            pad_sequence(targets, batch_first=True, padding_value=lm.pad_id),
            lengths_to_padding_mask(lengths))


def lm_loss(lm: CharLM, seqs: Sequence[Sequence[int]], reduction: str = "mean") -> torch.Tensor:
    inputs, targets, padding = lm_io(seqs, lm)
    logits = lm(inputs, padding)
    return F.cross_entropy(logits.reshape(-1, lm.vocab_size), targets.reshape(-1),
                           ignore_index=lm.pad_id, reduction=reduction)


def encode_corpus(texts: Sequence[str], tokenizer: Tokenizer, max_len: int) -> List[List[int]]:
    """Strictly encoded texts, truncated to leave room for bos/eos."""
    seqs = []
    for text in texts:
        try:
            seqs.append(tokenizer.encode(text, strict=True)[: max_len - 1])
        except UnknownSymbol as e:
            raise VocabMismatch(f"LM text contains {e.char!r}, unknown to the tokenizer", char=e.char) from e
    return [s for s in seqs if s]


@torch.no_grad()
def perplexity(lm: CharLM, tokenizer: Tokenizer, texts: Sequence[str]) -> float:
    """exp of the mean next-symbol NLL over all predicted positions (eos included)."""
    seqs = encode_corpus(texts, tokenizer, lm.cfg.lm_max_len)
    if not seqs:
        raise EmptyCorpus("no text to score")
    was_training = lm.training
    lm.eval()
    nll = float(lm_loss(lm, seqs, reduction="sum"))
    lm.train(was_training)
    return math.exp(nll / sum(len(s) + 1 for s in seqs))


def build_char_lm(ckpt: Checkpoint) -> CharLM:
    cfg = CharLMConfig(**ckpt.config["lm"])
    specials = ckpt.config["specials"]
    lm = CharLM(cfg, ckpt.config["vocab_size"], specials["pad"], specials["bos"], specials["eos"])
    lm.load_state_dict(ckpt.model_state)
    return lm


def train_char_lm(texts: Sequence[str], tokenizer: Tokenizer, cfg: CharLMConfig, seed: int,
                  out_dir: Optional[str] = None) -> Tuple[CharLM, List[Dict[str, float]]]:
    """Train on randomly drawn sentence batches; the draw for step s depends only on (seed, s)."""
    seqs = encode_corpus(texts, tokenizer, cfg.lm_max_len)
    if not seqs:
        raise EmptyCorpus("LM corpus is empty")
    torch.manual_seed(derive_seed(seed, "init", "char-lm"))
    lm = CharLM(cfg, len(tokenizer), tokenizer.pad_id, tokenizer.bos_id, tokenizer.eos_id)
    schedule = TrainConfig(lr=cfg.lm_lr, warmup_updates=cfg.lm_warmup, max_updates=cfg.lm_updates, seed=seed)
    trainer = Trainer(lm, schedule, purpose="char-lm")
    records = []
    with TrainingLog(os.path.join(out_dir, "train_log.jsonl") if out_dir else None) as log:
        for _ in range(cfg.lm_updates):
            step = trainer.begin()
            picks = numpy_rng(seed, "char-lm-batch", step).integers(0, len(seqs), size=cfg.lm_batch_size)
            loss = lm_loss(lm, [seqs[i] for i in picks])
            lr = trainer.update(loss, {"lm": loss})
            record = {"step": step, "lr": lr, "lm": float(loss.detach())}
            records.append(record)
            log.write(record)
    if out_dir:
        config = {"lm": cfg.model_dump(), "vocab_size": len(tokenizer),
                  "specials": {"pad": tokenizer.pad_id, "bos": tokenizer.bos_id, "eos": tokenizer.eos_id}}
        save_checkpoint(os.path.join(out_dir, "char_lm.zip"), lm, "char_lm", config, tokenizer, trainer.step)
    if records:
        logger.info(f"Character LM trained for {trainer.step} updates, last loss {records[-1]['lm']:.4f}")
    return lm, records
