"""
Audio front end.

Waveform I/O, 80-bin log-mel extraction, k-means discovery of discrete
units on log-mel frames, label assignment at the encoder frame rate, and
span-mask sampling for masked prediction.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import soundfile as sf
import torch
import torchaudio.functional as AF
from sklearn.cluster import kmeans_plusplus

from models.config import FrontendConfig
from models.errors import (AudioFileNotFound, DataError, DimMismatch, RateMismatch,
                           TooFewPoints, TooShort, UnsupportedFormat)

logger = logging.getLogger('speechtext.audio')

SAMPLE_RATE = 16000

# ============================================================================
# WAVEFORMS
# ============================================================================

@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise DataError(f"waveform must be mono, got shape {samples.shape}")
        if self.rate != SAMPLE_RATE:
            raise RateMismatch(self.rate, SAMPLE_RATE)
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        if samples.size and np.abs(samples).max() > 1.0:
            raise DataError("waveform samples outside [-1, 1]")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.rate


def load_wave(path: str, resample: bool = False) -> Waveform:
    """Read a PCM WAV file as mono float32 at 16 kHz (channels averaged)."""
    if not os.path.isfile(path):
        raise AudioFileNotFound(path)
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise UnsupportedFormat(f"{path}: {e}", path=path) from e
    if info.format not in ("WAV", "WAVEX") or not info.subtype.startswith("PCM"):
        raise UnsupportedFormat(f"{path}: expected PCM WAV, got {info.format}/{info.subtype}", path=path)
    data, rate = sf.read(path, dtype="float32", always_2d=True)
    samples = data.mean(axis=1)
    if rate != SAMPLE_RATE:
        if not resample:
            raise RateMismatch(rate, SAMPLE_RATE)
        samples = AF.resample(torch.from_numpy(samples), rate, SAMPLE_RATE).numpy()
        samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples)


def save_wave(wave: Waveform, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sf.write(path, wave.samples, wave.rate, subtype="PCM_16", format="WAV")


# ============================================================================
# LOG-MEL
# ============================================================================

@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray          # T x M
    hop: float = 0.010
    window: float = 0.025

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def mel_bins(self) -> int:
        return int(self.frames.shape[1])


def n_mel_frames(n_samples: int, cfg: FrontendConfig = FrontendConfig()) -> int:
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def mel_filterbank(cfg: FrontendConfig) -> torch.Tensor:
    return AF.melscale_fbanks(cfg.n_fft // 2 + 1, cfg.f_min, cfg.f_max, cfg.mel_bins, cfg.sample_rate)


def log_mel(wave: Waveform, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    """25 ms Hann frames every 10 ms, 1024-point magnitude spectrum, mel filters, log(x + eps)."""
    if len(wave) < cfg.win_length:
        raise TooShort(len(wave), cfg.win_length)
    x = torch.from_numpy(wave.samples).to(torch.float32)
    frames = x.unfold(0, cfg.win_length, cfg.hop_length)
    window = torch.hann_window(cfg.win_length, periodic=True, dtype=torch.float32)
    spec = torch.fft.rfft(frames * window, n=cfg.n_fft).abs()
    mel = spec @ mel_filterbank(cfg)
    logmel = torch.log(mel + cfg.log_eps)
    return MelSpectrogram(frames=logmel.numpy(),
                          hop=cfg.hop_length / cfg.sample_rate,
                          window=cfg.win_length / cfg.sample_rate)


# ============================================================================
# DISCRETE UNITS
# ============================================================================

MAGIC = b"KMU1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray       # K x D, float32
    hop: int = 320              # samples per label
    inertia_history: Tuple[float, ...] = ()
    n_iter: int = 0

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dims(self) -> int:
        return int(self.centroids.shape[1])

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, self.k, self.dims, self.hop))
            fh.write(self.centroids.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str) -> "ClusterModel":
        with open(path, "rb") as fh:
            header = fh.read(_HEADER.size)
            if len(header) != _HEADER.size:
                raise UnsupportedFormat(f"{path}: truncated cluster-model header")
            magic, version, k, d, hop = _HEADER.unpack(header)
            if magic != MAGIC or version != FORMAT_VERSION:
                raise UnsupportedFormat(f"{path}: not a cluster model (magic {magic!r}, version {version})")
            body = fh.read()
        if len(body) != 4 * k * d:
            raise UnsupportedFormat(f"{path}: expected {k}x{d} centroids")
        centroids = np.frombuffer(body, dtype="<f4").reshape(k, d).astype(np.float32)
        return cls(centroids=centroids, hop=hop)


@dataclass(frozen=True, eq=False)
class DiscreteLabelSeq:
    labels: np.ndarray
    k: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _nearest(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of the nearest centroid; ties go to the lowest index."""
    n, d = points.shape
    chunk = max(1, (1 << 22) // max(1, centroids.shape[0] * d))
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        diff = points[lo:lo + chunk, None, :] - centroids[None, :, :]
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        idx[lo:lo + chunk] = sq.argmin(axis=1)
        dist[lo:lo + chunk] = sq[np.arange(sq.shape[0]), idx[lo:lo + chunk]]
    return idx, dist


def fit_kmeans(features: np.ndarray, k: int, seed: int, max_iter: int = 100,
               tol: float = 1e-6, hop: int = 320) -> ClusterModel:
    """
    Lloyd's algorithm from a k-means++ start.

    Stops when no centroid moves by tol or more, or after max_iter rounds.
    An emptied cluster is re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"features must be N x D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    if k < 1 or x.shape[0] < k:
        raise TooFewPoints(f"{x.shape[0]} points for {k} clusters", n_points=int(x.shape[0]), k=k)
    if np.unique(x, axis=0).shape[0] < k:
        raise TooFewPoints(f"fewer than {k} distinct points", k=k)

    centroids, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    history: List[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        assign, dist = _nearest(x, centroids)
        history.append(float(dist.sum()))
        updated = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        updated[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(dist.argmax())
            updated[j] = x[far]
            dist[far] = 0.0
            logger.debug(f"k-means cluster {j} emptied, re-seeded at point {far}")
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if shift < tol:
            break
    _, dist = _nearest(x, centroids)
    history.append(float(dist.sum()))
    logger.info(f"k-means fitted: K={k}, N={x.shape[0]}, iterations={n_iter}, inertia={history[-1]:.4f}",
                extra={"event": {"k": k, "iterations": n_iter, "inertia": history[-1]}})
    return ClusterModel(centroids=centroids.astype(np.float32), hop=hop,
                        inertia_history=tuple(history), n_iter=n_iter)


def assign_labels(model: ClusterModel, mel: MelSpectrogram, decimation: int = 2) -> DiscreteLabelSeq:
    """Nearest-centroid label for every `decimation`-th mel frame."""
    if mel.mel_bins != model.dims:
        raise DimMismatch(mel.mel_bins, model.dims, what="mel")
    frames = np.asarray(mel.frames, dtype=np.float64)[::decimation]
    idx, _ = _nearest(frames, model.centroids.astype(np.float64))
    return DiscreteLabelSeq(labels=idx, k=model.k)


def aligned_length(n_samples: int, cfg: FrontendConfig = FrontendConfig(), stride_product: int = 320) -> int:
    """Frames shared by the encoder pre-net output and the label sequence."""
    labels = math.ceil(n_mel_frames(n_samples, cfg) / cfg.label_decimation)
    return min(n_samples // stride_product, labels)


# ============================================================================
# SPAN MASKS
# ============================================================================

@dataclass(frozen=True, eq=False)
class MaskSpec:
    spans: Tuple[Tuple[int, int], ...]
    total_frames: int
    span_len: int

    @property
    def n_masked(self) -> int:
        return sum(length for _, length in self.spans)

    def as_bool(self) -> np.ndarray:
        mask = np.zeros(self.total_frames, dtype=bool)
        for start, length in self.spans:
            mask[start:start + length] = True
        return mask

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.as_bool())


def sample_mask_spans(total_frames: int, span_len: int, start_prob: float,
                      rng: np.random.Generator) -> MaskSpec:
    """
    Each frame starts a span with probability start_prob; spans cover
    [i, i + span_len) clipped at the end. Overlapping spans merge into runs,
    and runs are re-cut into consecutive pieces of at most span_len frames.
    """
    if total_frames < 1:
        raise DataError("total_frames must be >= 1")
    if not 0.0 <= start_prob <= 1.0:
        raise DataError(f"start_prob {start_prob} outside [0, 1]")
    starts = rng.random(total_frames) < start_prob
    mask = np.convolve(starts.astype(np.int64), np.ones(span_len, dtype=np.int64))[:total_frames] > 0
    spans = []
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    for run_start, run_end in zip(edges[::2], edges[1::2]):
        for start in range(int(run_start), int(run_end), span_len):
            spans.append((start, min(span_len, int(run_end) - start)))
    return MaskSpec(spans=tuple(spans), total_frames=total_frames, span_len=span_len)
