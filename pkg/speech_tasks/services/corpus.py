"""
Corpus handling: JSONL manifests, corpus filtering, the synthetic toy
corpus and length-bucketed, budget-capped batching.
"""

import json
import logging
import os
import queue
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from pydantic import ValidationError
from torch.nn.utils.rnn import pad_sequence

from models.enums import Modality
from models.errors import DataError, DuplicateId, DurationMismatch, ManifestParseError
from models.utterance import Utterance
from models.validation import QuarantineRecord, ValidatedRecord
from services.audio_frontend import SAMPLE_RATE, Waveform, load_wave, save_wave
from services.seeding import numpy_rng
from services.text_pipeline import Tokenizer

logger = logging.getLogger('speechtext.corpus')

# ============================================================================
# MANIFESTS
# ============================================================================

class ManifestGate:
    """
    Validates manifest lines against the Utterance model.
    Invalid lines come back as QuarantineRecord instead of raising.
    """

    def __init__(self, source: str = "manifest"):
        self.source = source

    def validate(self, line: str, lineno: int) -> Union[ValidatedRecord[Utterance], QuarantineRecord]:
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("record is not a JSON object")
            utt = Utterance.model_validate(data)
            return ValidatedRecord[Utterance](record=utt, line=lineno, metadata={"source": self.source})
        except ValidationError as e:
            reason = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        except ValueError as e:
            reason = f"JSON decode error: {e}"
        logger.warning(f"Quarantined manifest line {lineno}: {reason}",
                       extra={"event": {"source": self.source, "line": lineno}})
        return QuarantineRecord(raw_data=line, error_message=reason, line=lineno,
                                source=self.source, model_name=Utterance.__name__)


def load_manifest(path: str, strict: bool = True) -> List[Utterance]:
    """
    Read a JSONL manifest. Relative audio paths resolve against the manifest's
    directory; blank lines are skipped. With strict=False, bad lines and
    repeated ids are logged and dropped instead of raising.
    """
    gate = ManifestGate(source=path)
    base = os.path.dirname(os.path.abspath(path))
    utts: List[Utterance] = []
    seen: Dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            result = gate.validate(line, lineno)
            if isinstance(result, QuarantineRecord):
                if strict:
                    raise ManifestParseError(lineno, result.error_message)
                continue
            utt = result.record
            if utt.id in seen:
                if strict:
                    raise DuplicateId(utt.id, lineno)
                logger.warning(f"Dropping repeated id {utt.id!r} on line {lineno}")
                continue
            seen[utt.id] = lineno
            if not os.path.isabs(utt.audio):
                utt = utt.model_copy(update={"audio": os.path.normpath(os.path.join(base, utt.audio))})
            utts.append(utt)
    logger.info(f"Loaded {len(utts)} utterances from {path}")
    return utts


def write_manifest(utts: Iterable[Utterance], path: str) -> None:
    """Write JSONL; audio paths under the manifest directory are stored relative."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utts:
            record = utt.to_manifest()
            audio = record["audio"]
            if os.path.isabs(audio) and os.path.commonpath([audio, base]) == base:
                record["audio"] = os.path.relpath(audio, base).replace(os.sep, "/")
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def filter_corpus(utts: Sequence[Utterance], max_dur: float = 40.0, drop_overlap: bool = True) -> List[Utterance]:
    """Drop utterances longer than max_dur seconds (the boundary is kept) and overlapping speech."""
    kept = [u for u in utts if u.duration <= max_dur and not (drop_overlap and u.overlap)]
    if len(kept) != len(utts):
        logger.info(f"Corpus filter removed {len(utts) - len(kept)} of {len(utts)} utterances")
    return kept


def corpus_stats(utts: Sequence[Utterance]) -> pd.DataFrame:
    """Utterances, hours and words per dialect, with an `all` row."""
    df = pd.DataFrame({
        "dialect": [u.dialect or "-" for u in utts],
        "duration": [u.duration for u in utts],
        "words": [len(u.text_norm.split()) for u in utts],
    })
    if df.empty:
        return pd.DataFrame(columns=["utterances", "hours", "words"])
    table = df.groupby("dialect").agg(utterances=("duration", "size"),
                                      hours=("duration", "sum"), words=("words", "sum"))
    table.loc["all"] = [len(df), df["duration"].sum(), df["words"].sum()]
    table["hours"] = table["hours"] / 3600.0
    return table


# ============================================================================
# TOY CORPUS
# ============================================================================

DEFAULT_ALPHABET = "ابتثجحخد"
TONE_SECONDS = 0.1
FADE_SECONDS = 0.005
TONE_AMPLITUDE = 0.4
NOISE_STD = 0.05
F_LOW, F_HIGH, MIN_SPACING = 300.0, 7500.0, 150.0


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def char_frequencies(alphabet: str) -> Dict[str, float]:
    """Tone frequency per character, evenly spaced on the mel scale."""
    if len(set(alphabet)) != len(alphabet) or not alphabet:
        raise DataError("toy alphabet must be non-empty with distinct characters")
    if len(alphabet) == 1:
        freqs = np.array([1000.0])
    else:
        freqs = _mel_to_hz(np.linspace(_hz_to_mel(F_LOW), _hz_to_mel(F_HIGH), len(alphabet)))
    if len(freqs) > 1 and np.diff(freqs).min() < MIN_SPACING:
        raise DataError(f"alphabet of {len(alphabet)} symbols cannot keep tones {MIN_SPACING:.0f} Hz apart")
    return {ch: float(f) for ch, f in zip(alphabet, freqs)}


def dialect_tilts(n_dialects: int) -> List[float]:
    if n_dialects <= 0:
        return []
    if n_dialects == 1:
        return [0.0]
    return [float(a) for a in np.linspace(-0.9, 0.9, n_dialects)]


def render_text(text: str, freqs: Dict[str, float], tilt: Optional[float] = None,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One 100 ms tone per character with 5 ms fades; optional first-order tilted noise."""
    seg = int(round(TONE_SECONDS * SAMPLE_RATE))
    fade = int(round(FADE_SECONDS * SAMPLE_RATE))
    n = np.arange(seg)
    envelope = np.ones(seg)
    envelope[:fade] = np.linspace(0.0, 1.0, fade, endpoint=False)
    envelope[-fade:] = envelope[:fade][::-1]
    pieces = []
    for ch in text:
        if ch not in freqs:
            raise DataError(f"character {ch!r} is not in the toy alphabet")
        pieces.append(TONE_AMPLITUDE * envelope * np.sin(2.0 * np.pi * freqs[ch] * n / SAMPLE_RATE))
    audio = np.concatenate(pieces) if pieces else np.zeros(0)
    if tilt is not None:
        rng = rng or np.random.default_rng(0)
        white = rng.normal(0.0, NOISE_STD, size=audio.shape[0] + 1)
        audio = audio + white[1:] + tilt * white[:-1]
    return np.clip(audio, -1.0, 1.0).astype(np.float32)


def make_toy_corpus(seed: int, n_utts: int, out_dir: str, alphabet: str = DEFAULT_ALPHABET,
                    n_dialects: int = 0, min_chars: int = 2, max_chars: int = 6,
                    id_prefix: str = "toy") -> List[Utterance]:
    """
    Deterministic synthetic corpus: random strings over `alphabet` rendered as
    tone sequences, written as `<out_dir>/wav/<id>.wav` plus `<out_dir>/manifest.jsonl`.
    Utterance i gets dialect label D{i mod n_dialects}.
    """
    if n_utts < 1:
        raise DataError("n_utts must be >= 1")
    freqs = char_frequencies(alphabet)
    tilts = dialect_tilts(n_dialects)
    rng = numpy_rng(seed, "toy-corpus")
    symbols = list(alphabet)
    utts = []
    for i in range(n_utts):
        length = int(rng.integers(min_chars, max_chars + 1))
        text = "".join(symbols[j] for j in rng.integers(0, len(symbols), size=length))
        dialect = i % n_dialects if n_dialects > 0 else None
        noise_rng = numpy_rng(seed, "toy-noise", i)
        audio = render_text(text, freqs, tilts[dialect] if dialect is not None else None, noise_rng)
        utt_id = f"{id_prefix}-{i:05d}"
        wav_path = os.path.join(out_dir, "wav", f"{utt_id}.wav")
        save_wave(Waveform(audio), wav_path)
        utts.append(Utterance(id=utt_id, audio=os.path.abspath(wav_path), duration=len(audio) / SAMPLE_RATE,
                              text=text, dialect=f"D{dialect}" if dialect is not None else None))
    write_manifest(utts, os.path.join(out_dir, "manifest.jsonl"))
    logger.info(f"Toy corpus: {n_utts} utterances, {len(alphabet)} symbols, {n_dialects} dialects in {out_dir}")
    return utts


# ============================================================================
# BATCHING
# ============================================================================

@dataclass
class Batch:
    ids: List[str]
    modality: Modality
    waves: Optional[torch.Tensor] = None          # B x L
    wave_lengths: Optional[torch.Tensor] = None   # B
    tokens: Optional[torch.Tensor] = None         # B x S, padded with pad id
    token_lengths: Optional[torch.Tensor] = None  # B
    dialects: Optional[List[Optional[str]]] = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def wave_padding_mask(self) -> torch.Tensor:
        """True at padded samples."""
        return torch.arange(self.waves.shape[1])[None, :] >= self.wave_lengths[:, None]

    @property
    def token_padding_mask(self) -> torch.Tensor:
        return torch.arange(self.tokens.shape[1])[None, :] >= self.token_lengths[:, None]


def speech_length(utt: Utterance) -> int:
    return int(round(utt.duration * SAMPLE_RATE))


# Loaded audio may differ from the manifest duration by at most 10 ms
DURATION_TOLERANCE = SAMPLE_RATE // 100


def collate(utts: Sequence[Utterance], modality: Modality, tokenizer: Optional[Tokenizer] = None,
            loader: Callable[[str], Waveform] = load_wave,
            transcript: Callable[[Utterance], str] = lambda u: u.text_norm) -> Batch:
    """Pad one group of utterances; `transcript` picks the text that gets tokenized."""
    batch = Batch(ids=[u.id for u in utts], modality=modality, dialects=[u.dialect for u in utts])
    if modality in (Modality.SPEECH, Modality.PAIRED):
        waves = [torch.from_numpy(loader(u.audio).samples) for u in utts]
        for u, w in zip(utts, waves):
            if abs(w.shape[0] - speech_length(u)) > DURATION_TOLERANCE:
                raise DurationMismatch(u.id, speech_length(u), w.shape[0])
        batch.waves = pad_sequence(waves, batch_first=True, padding_value=0.0)
        batch.wave_lengths = torch.tensor([w.shape[0] for w in waves], dtype=torch.long)
    if modality in (Modality.TEXT, Modality.PAIRED):
        if tokenizer is None:
            raise DataError("text batches need a tokenizer")
        seqs = [torch.tensor(tokenizer.encode(transcript(u), strict=True), dtype=torch.long) for u in utts]
        batch.tokens = pad_sequence(seqs, batch_first=True, padding_value=tokenizer.pad_id)
        batch.token_lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.long)
    return batch


def plan_batches(utts: Sequence[Utterance], budget: int, seed: int, modality: Modality,
                 epoch: int = 0, max_speech_samples: int = 250000,
                 max_text_chars: int = 600) -> List[List[Utterance]]:
    """
    Group eligible utterances into batches whose padded size stays within
    budget (speech: samples, text: characters), then shuffle batch order with
    a generator derived from (seed, epoch).
    """
    if budget <= 0:
        raise DataError("batch budget must be positive")
    eligible = []
    for u in utts:
        n_samples, n_chars = speech_length(u), len(u.text_norm)
        if modality != Modality.TEXT and n_samples > max_speech_samples:
            logger.warning(f"Skipping {u.id}: {n_samples} samples over cap {max_speech_samples}",
                           extra={"event": {"skip": u.id, "reason": "speech_cap"}})
            continue
        if modality != Modality.SPEECH and n_chars > max_text_chars:
            logger.warning(f"Skipping {u.id}: {n_chars} characters over cap {max_text_chars}",
                           extra={"event": {"skip": u.id, "reason": "text_cap"}})
            continue
        eligible.append(u)

    def size(u: Utterance) -> int:
        return len(u.text_norm) if modality == Modality.TEXT else speech_length(u)

    eligible.sort(key=lambda u: (size(u), u.id))
    batches: List[List[Utterance]] = []
    current: List[Utterance] = []
    longest = 0
    for u in eligible:
        longest_after = max(longest, size(u))
        if current and longest_after * (len(current) + 1) > budget:
            batches.append(current)
            current, longest_after = [], size(u)
        current.append(u)
        longest = longest_after
    if current:
        batches.append(current)
    order = numpy_rng(seed, "batch-order", epoch).permutation(len(batches))
    return [batches[i] for i in order]


def batch_iter(utts: Sequence[Utterance], budget: int, seed: int, modality: Modality,
               epoch: int = 0, tokenizer: Optional[Tokenizer] = None,
               max_speech_samples: int = 250000, max_text_chars: int = 600,
               loader: Callable[[str], Waveform] = load_wave) -> Iterator[Batch]:
    for group in plan_batches(utts, budget, seed, modality, epoch, max_speech_samples, max_text_chars):
        yield collate(group, modality, tokenizer, loader)


class PrefetchIterator:
    """
    Runs an iterator on a background worker thread, delivering items in the
    producer's order. Producer exceptions are re-raised in the consumer.
    """

    _DONE = object()

    def __init__(self, source: Iterable[Any], depth: int = 2):
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._source = source
        self._stop = threading.Event()
        self._worker = threading.Thread(target=self._produce, daemon=True, name="BatchPrefetch")
        self._worker.start()

    def _produce(self):
        try:
            for item in self._source:
                if self._stop.is_set():
                    return
                self._queue.put(("item", item))
            self._queue.put(("done", self._DONE))
        except Exception as e:  # handed to the consumer
            self._queue.put(("error", e))

    def __iter__(self):
        return self

    def __next__(self):
        kind, payload = self._queue.get()
        if kind == "item":
            return payload
        self._worker.join(timeout=5)
        if kind == "error":
            raise payload
        raise StopIteration

    def close(self):
        self._stop.set()
        while self._worker.is_alive():
            try:
                self._queue.get_nowait()
            except queue.Empty:
                self._worker.join(timeout=0.1)
