"""CTC loss and decoding (greedy, prefix beam search with optional LM shallow fusion)."""

import logging
from collections import defaultdict
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from models.enums import DecodeMode
from models.errors import ShapeMismatch, UsageError, VocabMismatch
from models.reports import Hypothesis

logger = logging.getLogger('speechtext.ctc')

Prefix = Tuple[int, ...]


class LanguageModelScorer(Protocol):
    """Next-symbol scorer used for shallow fusion."""

    eos_id: int
    vocab_size: int

    def log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        """Log-distribution over the next symbol (eos included) given a prefix of ids."""
        ...


# ============================================================================
# LOSS
# ============================================================================

def ctc_loss(log_probs: torch.Tensor, targets: torch.Tensor,
             input_lengths: Optional[torch.Tensor] = None, target_lengths: Optional[torch.Tensor] = None,
             blank: int = 0, zero_infinity: bool = False) -> torch.Tensor:
    """
    Negative log of the summed probability of all alignments.

    Accepts one utterance (T x V log-probs, S targets) returning a scalar, or a
    batch (B x T x V, B x S) returning per-utterance losses. Infeasible targets
    give +inf (or 0 with zero_infinity) and a warning.
    """
    single = log_probs.dim() == 2
    if single:
        log_probs, targets = log_probs.unsqueeze(0), targets.reshape(1, -1)
    if log_probs.dim() != 3:
        raise ShapeMismatch(f"log-probs must be T x V or B x T x V, got {tuple(log_probs.shape)}")
    batch, frames, _ = log_probs.shape
    if input_lengths is None:
        input_lengths = torch.full((batch,), frames, dtype=torch.long)
    if target_lengths is None:
        target_lengths = torch.full((batch,), targets.shape[1], dtype=torch.long)
    input_lengths = torch.as_tensor(input_lengths, dtype=torch.long).reshape(batch)
    target_lengths = torch.as_tensor(target_lengths, dtype=torch.long).reshape(batch)
    losses = F.ctc_loss(log_probs.double().transpose(0, 1), targets.long(), input_lengths, target_lengths,
                        blank=blank, reduction="none", zero_infinity=False)
    infeasible = torch.isinf(losses)
    if infeasible.any():
        logger.warning(f"{int(infeasible.sum())} infeasible CTC target(s)",
                       extra={"event": {"infeasible": int(infeasible.sum()), "batch": batch}})
        if zero_infinity:
            losses = torch.where(infeasible, torch.zeros_like(losses), losses)
    losses = losses.to(log_probs.dtype)
    return losses[0] if single else losses


# ============================================================================
# DECODING
# ============================================================================

def collapse(path: Sequence[int], blank: int = 0) -> List[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for token in path:
        if token != prev and token != blank:
            out.append(int(token))
        prev = token
    return out


def greedy_decode(log_probs: np.ndarray, blank: int = 0) -> Hypothesis:
    best = log_probs.argmax(axis=-1)
    acoustic = float(log_probs[np.arange(log_probs.shape[0]), best].sum())
    return Hypothesis(ids=collapse(best.tolist(), blank), score=acoustic, acoustic=acoustic, lm=0.0)


class _FusionCache:
    """Memoised LM prefix scores: sum of log P(y_i | y_<i)."""

    def __init__(self, lm: LanguageModelScorer):
        self.lm = lm
        self._next: Dict[Prefix, np.ndarray] = {}
        self.prefix_score: Dict[Prefix, float] = {(): 0.0}

    def next_log_probs(self, prefix: Prefix) -> np.ndarray:
        if prefix not in self._next:
            self._next[prefix] = np.asarray(self.lm.log_probs(list(prefix)), dtype=np.float64)
        return self._next[prefix]

    def extend(self, prefix: Prefix, token: int) -> None:
        ext = prefix + (token,)
        if ext not in self.prefix_score:
            self.prefix_score[ext] = self.prefix_score[prefix] + float(self.next_log_probs(prefix)[token])

    def final(self, prefix: Prefix) -> float:
        return self.prefix_score[prefix] + float(self.next_log_probs(prefix)[self.lm.eos_id])


def prefix_beam_search(log_probs: np.ndarray, width: int, blank: int = 0,
                       lm: Optional[LanguageModelScorer] = None, lm_weight: float = 0.0,
                       length_bonus: float = 0.0) -> Hypothesis:
    """
    Prefix beam search over collapsed label sequences.

    Ranking score: log P_ctc(prefix) + lm_weight * log P_lm(prefix) + length_bonus * |prefix|,
    with the LM end-of-sentence term added for the final ranking. Ties go to the
    lexicographically smaller prefix.
    """
    fusion = _FusionCache(lm) if lm is not None else None
    beams: Dict[Prefix, Tuple[float, float]] = {(): (0.0, -np.inf)}

    def lm_term(prefix: Prefix) -> float:
        return fusion.prefix_score[prefix] if fusion else 0.0

    for frame in log_probs:
        nxt: Dict[Prefix, List[float]] = defaultdict(lambda: [-np.inf, -np.inf])
        for prefix, (p_blank, p_label) in beams.items():
            p_total = np.logaddexp(p_blank, p_label)
            stay = nxt[prefix]
            stay[0] = np.logaddexp(stay[0], p_total + frame[blank])
            last = prefix[-1] if prefix else None
            for token in range(frame.shape[0]):
                p = frame[token]
                if token == blank or p == -np.inf:
                    continue
                ext = prefix + (token,)
                if token == last:
                    stay[1] = np.logaddexp(stay[1], p_label + p)
                    nxt[ext][1] = np.logaddexp(nxt[ext][1], p_blank + p)
                else:
                    nxt[ext][1] = np.logaddexp(nxt[ext][1], p_total + p)
                if fusion:
                    fusion.extend(prefix, token)

        def rank(item):
            prefix, (pb, pl) = item
            return (-(np.logaddexp(pb, pl) + lm_weight * lm_term(prefix) + length_bonus * len(prefix)), prefix)

        beams = {prefix: (pb, pl) for prefix, (pb, pl) in sorted(nxt.items(), key=rank)[:width]}

    finals = []
    for prefix, (pb, pl) in beams.items():
        acoustic = float(np.logaddexp(pb, pl))
        lm_score = fusion.final(prefix) if fusion else 0.0
        score = acoustic + lm_weight * lm_score + length_bonus * len(prefix)
        finals.append((-score, prefix, acoustic, lm_score))
    neg_score, prefix, acoustic, lm_score = min(finals)
    return Hypothesis(ids=list(prefix), score=-neg_score, acoustic=acoustic, lm=lm_score)


def decode_ctc(log_probs: Union[np.ndarray, torch.Tensor], mode: DecodeMode = DecodeMode.GREEDY,
               width: int = 5, lm: Optional[LanguageModelScorer] = None, lm_weight: float = 0.0,
               length_bonus: float = 0.0, blank: int = 0, suppress: Sequence[int] = ()) -> Hypothesis:
    """Decode one utterance; ids in `suppress` (other than blank) are never emitted."""
    if torch.is_tensor(log_probs):
        log_probs = log_probs.detach().cpu().double().numpy()
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2:
        raise ShapeMismatch(f"log-probs must be T x V, got {log_probs.shape}")
    if width < 1:
        raise UsageError(f"beam width must be >= 1, got {width}")
    if lm_weight < 0:
        raise UsageError(f"LM weight must be >= 0, got {lm_weight}")
    banned = [int(t) for t in suppress if int(t) != blank]
    if banned:
        log_probs = log_probs.copy()
        log_probs[:, banned] = -np.inf
    if mode == DecodeMode.GREEDY:
        return greedy_decode(log_probs, blank)
    if lm is not None and lm.vocab_size != log_probs.shape[1]:
        raise VocabMismatch(f"LM vocabulary {lm.vocab_size} != acoustic vocabulary {log_probs.shape[1]}")
    if lm_weight == 0.0:
        lm = None
    return prefix_beam_search(log_probs, width, blank, lm, lm_weight, length_bonus)
