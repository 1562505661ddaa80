"""
WER / CER / accuracy scoring.

Errors are pooled over the corpus: total edits / total reference tokens.
"""

import logging
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from models.enums import ScoreLevel
from models.errors import CountMismatch, MissingId, UsageError
from models.reports import AccuracyReport, ScoreReport
from services.text_pipeline import normalize_text

logger = logging.getLogger('speechtext.metrics')

Transcripts = Union[Sequence[str], Mapping[str, str]]


def edit_distance(a: Sequence, b: Sequence) -> Tuple[int, int, int, int]:
    """
    Levenshtein distance from reference `a` to hypothesis `b` with a
    decomposition (distance, S, I, D) achieving it. The backtrace prefers
    matches/substitutions, then deletions, then insertions.
    """
    n, m = len(a), len(b)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            subs += int(a[i - 1] != b[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(dp[n, m]), subs, ins, dels


def _pair(refs: Transcripts, hyps: Transcripts) -> List[Tuple[str, str]]:
    if isinstance(refs, Mapping):
        if not isinstance(hyps, Mapping):
            raise UsageError("references keyed by id need hypotheses keyed by id")
        if len(refs) != len(hyps):
            raise CountMismatch(len(refs), len(hyps))
        pairs = []
        for utt_id in refs:
            if utt_id not in hyps:
                raise MissingId(utt_id)
            pairs.append((refs[utt_id], hyps[utt_id]))
        return pairs
    if len(refs) != len(hyps):
        raise CountMismatch(len(refs), len(hyps))
    return list(zip(refs, hyps))


def _chars(text: str, include_spaces: bool) -> List[str]:
    return list(text) if include_spaces else [c for c in text if not c.isspace()]


def score(refs: Transcripts, hyps: Transcripts, level: ScoreLevel = ScoreLevel.WORD,
          raw: bool = False, include_spaces: bool = True) -> ScoreReport:
    """
    Corpus-level WER and CER. Both sides are normalized unless `raw`; the
    S/I/D counts and n_ref_tokens are those of `level`.
    """
    if level == ScoreLevel.LABEL:
        raise UsageError("label level is scored with accuracy()")
    pairs = _pair(refs, hyps)
    totals = {ScoreLevel.WORD: np.zeros(5, dtype=np.int64), ScoreLevel.CHAR: np.zeros(5, dtype=np.int64)}
    for ref, hyp in pairs:
        if not raw:
            ref, hyp = normalize_text(ref), normalize_text(hyp)
        for lvl, (r, h) in ((ScoreLevel.WORD, (ref.split(), hyp.split())),
                            (ScoreLevel.CHAR, (_chars(ref, include_spaces), _chars(hyp, include_spaces)))):
            dist, s, i, d = edit_distance(r, h)
            totals[lvl] += (dist, s, i, d, len(r))

    def rate(t: np.ndarray) -> float:
        if t[4] == 0:
            return 0.0 if t[0] == 0 else float("inf")
        return float(t[0] / t[4])

    chosen = totals[level]
    report = ScoreReport(level=level, wer=rate(totals[ScoreLevel.WORD]), cer=rate(totals[ScoreLevel.CHAR]),
                         substitutions=int(chosen[1]), insertions=int(chosen[2]), deletions=int(chosen[3]),
                         n_ref_tokens=int(chosen[4]), n_utterances=len(pairs))
    logger.info(f"Scored {len(pairs)} utterances: WER {report.wer:.4f}, CER {report.cer:.4f}",
                extra={"event": report.model_dump(mode="json")})
    return report


def accuracy(refs: Union[Sequence[str], Mapping[str, str]], hyps: Union[Sequence[str], Mapping[str, str]]) -> AccuracyReport:
    pairs = _pair(refs, hyps)
    if not pairs:
        raise CountMismatch(0, 0)
    correct = sum(r == h for r, h in pairs)
    return AccuracyReport(accuracy=correct / len(pairs), correct=correct, n_utterances=len(pairs))


def format_report(report: Union[ScoreReport, AccuracyReport]) -> str:
    """Percentages with two decimals, one row per metric."""
    if isinstance(report, AccuracyReport):
        rows: Dict[str, str] = {"Accuracy": f"{100 * report.accuracy:.2f}%",
                                "Correct": f"{report.correct}/{report.n_utterances}"}
    else:
        rows = {"WER": f"{100 * report.wer:.2f}%", "CER": f"{100 * report.cer:.2f}%",
                "Substitutions": str(report.substitutions), "Insertions": str(report.insertions),
                "Deletions": str(report.deletions), f"Reference {report.level.value}s": str(report.n_ref_tokens),
                "Utterances": str(report.n_utterances)}
    return pd.Series(rows, name="value").to_frame().to_string()
