"""
Architectural, front-end and schedule constants, plus the merged run config.

Each config class has a `toy` and a `paper` preset. A run is resolved from
preset defaults, then a flat JSON file, then command-line flags; a flat key is
routed to every config class that declares a field of that name.
"""

import math
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .enums import Preset
from .errors import UsageError

HOP_PRODUCT = 320


class FrontendConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sample_rate: int = Field(16000, description="Required waveform rate in Hz")
    win_length: int = Field(400, ge=1, description="Analysis window in samples (25 ms)")
    hop_length: int = Field(160, ge=1, description="Frame hop in samples (10 ms)")
    n_fft: int = Field(1024, ge=1, description="Transform size")
    mel_bins: int = Field(80, ge=1, description="Number of mel filters")
    f_min: float = Field(0.0, ge=0)
    f_max: float = Field(8000.0, gt=0)
    log_eps: float = Field(1e-6, gt=0, description="Floor added before the log")
    label_decimation: int = Field(2, ge=1, description="Mel frames per discrete label")
    resample: bool = Field(False, description="Resample non-16 kHz input instead of rejecting it")

    @model_validator(mode="after")
    def _check_window(self) -> "FrontendConfig":
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")
        if self.f_max > self.sample_rate / 2:
            raise ValueError("f_max above Nyquist")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(64, ge=1)
    n_heads: int = Field(2, ge=1)
    enc_layers: int = Field(2, ge=1)
    dec_layers: int = Field(2, ge=1)
    ffn_dim: int = Field(128, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    vocab_size: int = Field(80, ge=1, description="Text vocabulary incl. specials")
    mel_bins: int = Field(80, ge=1)
    unit_count: int = Field(16, ge=1, description="K, size of the discrete label space")
    span_len: int = Field(10, ge=1, description="Frames masked per span start")
    mix_prob: float = Field(0.10, ge=0, le=1, description="Fraction of states swapped for codebook entries")
    conv_channels: int = Field(64, ge=1)
    conv_strides: Tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    conv_kernels: Tuple[int, ...] = (9, 4, 4, 4, 4, 4, 4)
    codebook_groups: int = Field(2, ge=1)
    codebook_entries: int = Field(100, ge=1)
    codebook_temp_start: float = Field(1.0, gt=0)
    codebook_temp_end: float = Field(0.5, gt=0)
    codebook_temp_decay: float = Field(0.999995, gt=0, le=1)
    reduction_factor: int = Field(1, ge=1, le=1)
    dec_prenet_units: int = Field(64, ge=1)
    postnet_channels: int = Field(64, ge=1)
    postnet_layers: int = Field(5, ge=1)
    postnet_kernel: int = Field(5, ge=1)
    n_speakers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % self.codebook_groups:
            raise ValueError(f"d_model {self.d_model} not divisible by codebook_groups {self.codebook_groups}")
        if len(self.conv_strides) != len(self.conv_kernels) or not self.conv_strides:
            raise ValueError("conv_strides and conv_kernels must be non-empty and of equal length")
        if math.prod(self.conv_strides) != HOP_PRODUCT:
            raise ValueError(f"conv_strides product {math.prod(self.conv_strides)} != {HOP_PRODUCT}")
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if k < s or (k - s) % 2:
                raise ValueError(f"kernel {k} / stride {s}: need kernel >= stride with even difference")
        if self.postnet_kernel % 2 == 0:
            raise ValueError("postnet_kernel must be odd")
        return self

    @property
    def stride_product(self) -> int:
        return math.prod(self.conv_strides)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(1e-3, gt=0)
    warmup_updates: int = Field(20, ge=1)
    max_updates: int = Field(200, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.98, ge=0, lt=1)
    adam_eps: float = Field(1e-6, gt=0)
    w_mlm: float = Field(1.0, ge=0)
    w_sdae: float = Field(1.0, ge=0)
    w_tdae: float = Field(1.0, ge=0)
    w_div: float = Field(1.0, ge=0)
    w_stop: float = Field(1.0, ge=0, description="Weight of the stop-token BCE in TTS fine-tuning")
    stop_pos_weight: float = Field(5.0, gt=0)
    ctc_alpha: float = Field(0.0, ge=0, description="Weight of the decoder cross-entropy added to CTC")
    mask_start_prob: float = Field(0.065, ge=0, le=1)
    text_corrupt_rate: float = Field(0.30, ge=0, le=1)
    text_span_mean: float = Field(3.0, gt=0)
    batch_budget_samples: int = Field(400000, gt=0, description="Padded samples per speech batch")
    batch_budget_chars: int = Field(2000, gt=0, description="Padded characters per text batch")
    max_speech_samples: int = Field(250000, gt=0)
    max_text_chars: int = Field(600, gt=0)
    max_duration: float = Field(40.0, gt=0)
    freeze: bool = Field(False, description="Keep every parameter fixed (loss evaluation only)")
    patience: int = Field(0, ge=0, description="Early-stopping patience in evaluations, 0 disables")
    eval_every: int = Field(50, ge=1)
    log_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(0, ge=0, description="0 saves only at the end")
    seed: int = 1234


class CharLMConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lm_d_model: int = Field(64, ge=1)
    lm_heads: int = Field(2, ge=1)
    lm_layers: int = Field(2, ge=1)
    lm_ffn_dim: int = Field(128, ge=1)
    lm_dropout: float = Field(0.1, ge=0, lt=1)
    lm_lr: float = Field(5e-3, gt=0)
    lm_warmup: int = Field(20, ge=1)
    lm_updates: int = Field(300, ge=0)
    lm_batch_size: int = Field(16, ge=1)
    lm_max_len: int = Field(600, ge=2)

    @model_validator(mode="after")
    def _check_heads(self) -> "CharLMConfig":
        if self.lm_d_model % self.lm_heads:
            raise ValueError("lm_d_model not divisible by lm_heads")
        return self


class DecodeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beam: int = Field(5, ge=1, description="Beam width, 1 with lm_weight 0 is greedy-equivalent")
    lm_weight: float = Field(0.3, ge=0, description="Shallow-fusion weight")
    length_bonus: float = Field(0.0)
    stop_threshold: float = Field(0.5, ge=0, le=1)
    max_frames: int = Field(400, ge=1)


SECTIONS = {
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "char_lm": CharLMConfig,
    "decode": DecodeConfig,
}

PRESETS: Dict[Preset, Dict[str, Dict[str, Any]]] = {
    Preset.TOY: {
        "frontend": {},
        "model": {},
        "train": {},
        "char_lm": {},
        "decode": {},
    },
    Preset.PAPER: {
        "frontend": {},
        "model": {
            "d_model": 768, "n_heads": 12, "enc_layers": 12, "dec_layers": 6, "ffn_dim": 3072,
            "dropout": 0.1, "vocab_size": 130, "unit_count": 500, "conv_channels": 512,
            "dec_prenet_units": 256, "postnet_channels": 256,
        },
        "train": {
            "lr": 2e-4, "warmup_updates": 64000, "max_updates": 200000,
            "batch_budget_samples": 1000000, "batch_budget_chars": 8000,
        },
        "char_lm": {
            "lm_d_model": 512, "lm_heads": 8, "lm_layers": 6, "lm_ffn_dim": 2048,
            "lm_lr": 5e-4, "lm_warmup": 4000, "lm_updates": 300000, "lm_batch_size": 64,
        },
        "decode": {},
    },
}


class RunConfig(BaseModel):
    """Fully resolved configuration of one command invocation."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    command: str
    preset: Preset = Preset.TOY
    seed: int
    out: Optional[str] = None
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    char_lm: CharLMConfig = Field(default_factory=CharLMConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)

    @classmethod
    def resolve(cls, command: str, preset: Preset, seed: int, out: Optional[str] = None,
                file_values: Optional[Dict[str, Any]] = None,
                flag_values: Optional[Dict[str, Any]] = None) -> "RunConfig":
        sections = {name: dict(values) for name, values in PRESETS[preset].items()}
        for layer in (file_values or {}, flag_values or {}):
            for key, value in layer.items():
                targets = [name for name, klass in SECTIONS.items() if key in klass.model_fields]
                if not targets:
                    raise UsageError(f"unknown config key {key!r}", key=key)
                for name in targets:
                    sections[name][key] = value
        try:
            built = {name: SECTIONS[name](**values) for name, values in sections.items()}
            if built["frontend"].mel_bins != built["model"].mel_bins:
                raise ValueError("frontend and model disagree on mel_bins")
            built["train"] = built["train"].model_copy(update={"seed": seed})
            return cls(command=command, preset=preset, seed=seed, out=out, **built)
        except ValueError as e:
            raise UsageError(f"invalid configuration: {e}") from e

    def with_model(self, **update: Any) -> "RunConfig":
        return self.model_copy(update={"model": ModelConfig(**{**self.model.model_dump(), **update})})
