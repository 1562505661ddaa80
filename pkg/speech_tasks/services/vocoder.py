"""Mel -> waveform conversion."""

from typing import Protocol

import numpy as np
import torch
import torchaudio.transforms as T

from models.config import FrontendConfig
from services.audio_frontend import MelSpectrogram, Waveform


class Vocoder(Protocol):
    def vocode(self, mel: MelSpectrogram) -> Waveform:
        ...


class GriffinLimVocoder:
    """
    Classical phase reconstruction: invert the log and the mel filterbank to a
    linear magnitude spectrogram, then iterate Griffin-Lim from a zero phase
    so the output is deterministic.
    """

    def __init__(self, cfg: FrontendConfig = FrontendConfig(), n_iter: int = 64):
        self.cfg = cfg
        self.inverse_mel = T.InverseMelScale(n_stft=cfg.n_fft // 2 + 1, n_mels=cfg.mel_bins,
                                             sample_rate=cfg.sample_rate, f_min=cfg.f_min, f_max=cfg.f_max)
        self.griffin_lim = T.GriffinLim(n_fft=cfg.n_fft, n_iter=n_iter, win_length=cfg.win_length,
                                        hop_length=cfg.hop_length, power=1.0, rand_init=False)

    @torch.no_grad()
    def vocode(self, mel: MelSpectrogram) -> Waveform:
        mel_magnitude = torch.exp(torch.as_tensor(mel.frames, dtype=torch.float32)) - self.cfg.log_eps
        magnitude = self.inverse_mel(mel_magnitude.clamp(min=0.0).T).clamp(min=0.0)
        audio = self.griffin_lim(magnitude).numpy()
        peak = float(np.abs(audio).max()) if audio.size else 0.0
        if peak > 1.0:
            audio = audio / peak
        return Waveform(audio.astype(np.float32))
