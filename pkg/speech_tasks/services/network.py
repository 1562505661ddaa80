"""
The unified speech/text encoder-decoder.

A shared transformer encoder/decoder is wrapped by modality-specific
pre-nets (raw waveform convolutions, character embeddings, mel pre-net)
and post-nets (tied text projection, mel + stop projections with a
convolutional refinement), plus the grouped codebook that quantizes
encoder states and the heads used by the tasks (unit logits, CTC logits).
"""

import logging
import math
from typing import Dict, NamedTuple, Optional, Tuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import settings
from models.config import ModelConfig
from models.errors import DimMismatch, InvalidId, ShapeMismatch, TooShort

logger = logging.getLogger('speechtext.network')

# ============================================================================
# HELPERS
# ============================================================================

def sinusoid_positions(length: int, d_model: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Absolute sinusoidal position table, length x d_model."""
    position = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(length, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
    return table.to(dtype)


def lengths_to_padding_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """True at padded positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] >= lengths[:, None]


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a B x C x T tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


# ============================================================================
# PRE-NETS / POST-NETS
# ============================================================================

class SpeechEncoderPrenet(nn.Module):
    """Strided convolutions over the raw waveform, one output frame per 20 ms."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride_product = cfg.stride_product
        self.strides = tuple(cfg.conv_strides)
        layers = []
        in_ch = 1
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            # Only the waveform layer is biased
            layers.append(nn.Sequential(
                nn.Conv1d(in_ch, cfg.conv_channels, k, stride=s, padding=(k - s) // 2, bias=in_ch == 1),
                ChannelLayerNorm(cfg.conv_channels),
                nn.GELU(),
            ))
            in_ch = cfg.conv_channels
        self.conv_layers = nn.ModuleList(layers)
        self.layer_norm = nn.LayerNorm(cfg.conv_channels)
        self.proj = nn.Linear(cfg.conv_channels, cfg.d_model)
        self.mask_emb = nn.Parameter(torch.empty(cfg.d_model).uniform_())
        self.dropout = nn.Dropout(cfg.dropout)
        self.d_model = cfg.d_model

    def frame_lengths(self, wave_lengths: torch.Tensor) -> torch.Tensor:
        return torch.div(wave_lengths, self.stride_product, rounding_mode="floor")

    def forward(self, waves: torch.Tensor, wave_lengths: Optional[torch.Tensor] = None,
                frame_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        if wave_lengths is None:
            wave_lengths = torch.full((waves.shape[0],), waves.shape[1], dtype=torch.long)
        if waves.shape[1] < self.stride_product or int(wave_lengths.min()) < self.stride_product:
            raise TooShort(int(wave_lengths.min()), self.stride_product)
        x = waves.unsqueeze(1).masked_fill(lengths_to_padding_mask(wave_lengths, waves.shape[1])[:, None, :], 0.0)
        lengths = wave_lengths
        for layer, stride in zip(self.conv_layers, self.strides):
            x = layer(x)
            lengths = torch.div(lengths, stride, rounding_mode="floor")
            # Frames past each utterance stay exactly zero, whatever the batch padding
            x = x.masked_fill(lengths_to_padding_mask(lengths, x.shape[-1])[:, None, :], 0.0)
        x = self.proj(self.layer_norm(x.transpose(1, 2)))
        n_frames = waves.shape[1] // self.stride_product
        x = x[:, :n_frames]
        if frame_mask is not None:
            if frame_mask.shape != x.shape[:2]:
                raise ShapeMismatch(f"frame mask {tuple(frame_mask.shape)} vs frames {tuple(x.shape[:2])}")
            x = torch.where(frame_mask[..., None], self.mask_emb.to(x.dtype), x)
        x = x + sinusoid_positions(n_frames, self.d_model, x.dtype)
        padding_mask = lengths_to_padding_mask(self.frame_lengths(wave_lengths), n_frames)
        return self.dropout(x), padding_mask


class TextPrenet(nn.Module):
    """Scaled character embedding plus positions; used on both encoder and decoder side."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=0)
        nn.init.normal_(self.embedding.weight, mean=0.0, std=cfg.d_model ** -0.5)
        with torch.no_grad():
            self.embedding.weight[0].zero_()
        self.scale = math.sqrt(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        vocab = self.embedding.num_embeddings
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= vocab):
            bad = int(ids.max()) if int(ids.max()) >= vocab else int(ids.min())
            raise InvalidId(bad, vocab)
        x = self.embedding(ids) * self.scale
        x = x + sinusoid_positions(ids.shape[1], x.shape[-1], x.dtype)
        return self.dropout(x)


class SpeechDecoderPrenet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        units = cfg.dec_prenet_units
        self.layers = nn.Sequential(
            nn.Linear(cfg.mel_bins, units), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(units, units), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(units, cfg.d_model),
        )
        self.speaker_emb = nn.Embedding(cfg.n_speakers, cfg.d_model)
        nn.init.zeros_(self.speaker_emb.weight)
        self.dropout = nn.Dropout(cfg.dropout)
        self.mel_bins = cfg.mel_bins

    def forward(self, mel: torch.Tensor, speakers: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mel.shape[-1] != self.mel_bins:
            raise DimMismatch(mel.shape[-1], self.mel_bins, what="mel")
        x = self.layers(mel)
        if speakers is None:
            speakers = torch.zeros(mel.shape[0], dtype=torch.long)
        x = x + self.speaker_emb(speakers)[:, None, :]
        x = x + sinusoid_positions(mel.shape[1], x.shape[-1], x.dtype)
        return self.dropout(x)


class SpeechDecoderPostnet(nn.Module):
    """Mel and stop projections; a 5-layer conv stack adds a residual refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.feat_out = nn.Linear(cfg.d_model, cfg.mel_bins * cfg.reduction_factor)
        self.prob_out = nn.Linear(cfg.d_model, cfg.reduction_factor)
        pad = cfg.postnet_kernel // 2
        layers = []
        for i in range(cfg.postnet_layers):
            in_ch = cfg.mel_bins if i == 0 else cfg.postnet_channels
            last = i == cfg.postnet_layers - 1
            out_ch = cfg.mel_bins if last else cfg.postnet_channels
            block = [nn.Conv1d(in_ch, out_ch, cfg.postnet_kernel, padding=pad, bias=False),
                     ChannelLayerNorm(out_ch)]
            if not last:
                block.append(nn.Tanh())
            block.append(nn.Dropout(cfg.dropout))
            layers.append(nn.Sequential(*block))
        self.postconv = nn.Sequential(*layers)
        self.mel_bins = cfg.mel_bins

    def refine(self, mel_before: torch.Tensor) -> torch.Tensor:
        return mel_before + self.postconv(mel_before.transpose(1, 2)).transpose(1, 2)

    def forward(self, hidden: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, t, _ = hidden.shape
        mel_before = self.feat_out(hidden).view(b, -1, self.mel_bins)
        stop_logits = self.prob_out(hidden).view(b, -1)
        return mel_before, self.refine(mel_before), stop_logits


# ============================================================================
# CODEBOOK
# ============================================================================

class Quantized(NamedTuple):
    vectors: torch.Tensor       # ... x d_model, on the codebook image
    indices: torch.Tensor       # ... x G
    probs: torch.Tensor         # ... x G x V soft code probabilities


class Codebook(nn.Module):
    """G groups of V entries; a d_model vector is quantized slice by slice."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.groups = cfg.codebook_groups
        self.entries_per_group = cfg.codebook_entries
        self.d_model = cfg.d_model
        self.entries = nn.Parameter(torch.randn(cfg.codebook_groups, cfg.codebook_entries,
                                                cfg.d_model // cfg.codebook_groups))
        self.temp_start = cfg.codebook_temp_start
        self.temp_end = cfg.codebook_temp_end
        self.temp_decay = cfg.codebook_temp_decay

    def temperature(self, step: int) -> float:
        return max(self.temp_start * self.temp_decay ** step, self.temp_end)

    def forward(self, x: torch.Tensor, temperature: float = 1.0) -> Quantized:
        if x.shape[-1] != self.d_model:
            raise DimMismatch(x.shape[-1], self.d_model, what="codebook input")
        lead = x.shape[:-1]
        xg = x.reshape(*lead, self.groups, 1, self.d_model // self.groups)
        sq = ((xg - self.entries) ** 2).sum(-1)                      # ... x G x V
        indices = sq.argmin(dim=-1)
        soft = F.softmax(-torch.sqrt(sq + 1e-12) / temperature, dim=-1)
        hard = F.one_hot(indices, self.entries_per_group).to(x.dtype)
        codes = hard + (soft - soft.detach())
        vectors = torch.einsum("...gv,gvc->...gc", codes, self.entries).reshape(*lead, self.d_model)
        return Quantized(vectors=vectors, indices=indices, probs=soft)


# ============================================================================
# FULL MODEL
# ============================================================================

class SpeechTextModel(nn.Module):
    """
    Purpose: shared encoder-decoder with speech and text pre/post-nets.

    Sub-networks are attributes so checkpoints keep stable names:
    speech_encoder_prenet, text_prenet, speech_decoder_prenet,
    speech_decoder_postnet, encoder, decoder, codebook, unit_head, ctc_head.
    The text decoder post-net is the transpose of the text embedding.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.speech_encoder_prenet = SpeechEncoderPrenet(cfg)
        self.text_prenet = TextPrenet(cfg)
        self.speech_decoder_prenet = SpeechDecoderPrenet(cfg)
        self.speech_decoder_postnet = SpeechDecoderPostnet(cfg)
        enc_layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout,
                                               batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.enc_layers, norm=nn.LayerNorm(cfg.d_model),
                                             enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout,
                                               batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers, norm=nn.LayerNorm(cfg.d_model))
        self.codebook = Codebook(cfg)
        self.unit_head = nn.Linear(cfg.d_model, cfg.unit_count)
        self.ctc_head = nn.Linear(cfg.d_model, cfg.vocab_size)

    # --- pre/post-nets -----------------------------------------------------

    def text_encoder_prenet(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_prenet(ids)

    def text_decoder_prenet(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_prenet(ids)

    def text_decoder_postnet(self, hidden: torch.Tensor) -> torch.Tensor:
        return F.linear(hidden, self.text_prenet.embedding.weight)

    # --- backbone ----------------------------------------------------------

    def encode(self, states: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if padding_mask is not None and padding_mask.shape != states.shape[:2]:
            raise ShapeMismatch(f"padding mask {tuple(padding_mask.shape)} vs states {tuple(states.shape[:2])}")
        return self.encoder(states, src_key_padding_mask=padding_mask)

    def decode(self, target: torch.Tensor, memory: torch.Tensor,
               target_padding_mask: Optional[torch.Tensor] = None,
               memory_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if target_padding_mask is not None and target_padding_mask.shape != target.shape[:2]:
            raise ShapeMismatch(f"target mask {tuple(target_padding_mask.shape)} vs {tuple(target.shape[:2])}")
        if memory_padding_mask is not None and memory_padding_mask.shape != memory.shape[:2]:
            raise ShapeMismatch(f"memory mask {tuple(memory_padding_mask.shape)} vs {tuple(memory.shape[:2])}")
        mask = causal_mask(target.shape[1], target.device)
        return self.decoder(target, memory, tgt_mask=mask,
                            tgt_key_padding_mask=target_padding_mask,
                            memory_key_padding_mask=memory_padding_mask)

    def quantize(self, vectors: torch.Tensor, temperature: float = 1.0) -> Quantized:
        return self.codebook(vectors, temperature)

    # --- convenience compositions -----------------------------------------

    def encode_speech(self, waves: torch.Tensor, wave_lengths: Optional[torch.Tensor] = None,
                      frame_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        states, padding = self.speech_encoder_prenet(waves, wave_lengths, frame_mask)
        return self.encode(states, padding), padding

    def encode_text(self, ids: torch.Tensor, padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.encode(self.text_encoder_prenet(ids), padding_mask)

    def decode_text(self, prev_ids: torch.Tensor, memory: torch.Tensor,
                    target_padding_mask: Optional[torch.Tensor] = None,
                    memory_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        hidden = self.decode(self.text_decoder_prenet(prev_ids), memory, target_padding_mask, memory_padding_mask)
        return self.text_decoder_postnet(hidden)

    def decode_speech(self, prev_mel: torch.Tensor, memory: torch.Tensor,
                      target_padding_mask: Optional[torch.Tensor] = None,
                      memory_padding_mask: Optional[torch.Tensor] = None,
                      speakers: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        hidden = self.decode(self.speech_decoder_prenet(prev_mel, speakers), memory,
                             target_padding_mask, memory_padding_mask)
        return self.speech_decoder_postnet(hidden)

    # --- vocabulary extension ---------------------------------------------

    def resize_text_vocab(self, new_size: int) -> None:
        """Grow the text embedding and CTC head; existing rows are kept, new rows freshly initialised."""
        old = self.cfg.vocab_size
        if new_size == old:
            return
        if new_size < old:
            raise DimMismatch(new_size, old, what="vocabulary (shrinking)")
        emb_old = self.text_prenet.embedding
        emb_new = nn.Embedding(new_size, self.cfg.d_model, padding_idx=0).to(emb_old.weight.dtype)
        nn.init.normal_(emb_new.weight, mean=0.0, std=self.cfg.d_model ** -0.5)
        head_old = self.ctc_head
        head_new = nn.Linear(self.cfg.d_model, new_size).to(head_old.weight.dtype)
        with torch.no_grad():
            emb_new.weight[:old] = emb_old.weight
            head_new.weight[:old] = head_old.weight
            head_new.bias[:old] = head_old.bias
        self.text_prenet.embedding = emb_new
        self.ctc_head = head_new
        self.cfg = self.cfg.model_copy(update={"vocab_size": new_size})
        logger.info(f"Text vocabulary resized {old} -> {new_size}")


SUBNETWORKS = ("speech_encoder_prenet", "text_prenet", "speech_decoder_prenet", "speech_decoder_postnet",
               "encoder", "decoder", "codebook", "unit_head", "ctc_head")


def describe(model: SpeechTextModel) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """Parameter counts per sub-network and the deviation from the reference size."""
    seen = set()
    rows = []
    for name in SUBNETWORKS:
        count = 0
        for p in getattr(model, name).parameters():
            if id(p) not in seen:
                seen.add(id(p))
                count += p.numel()
        rows.append({"subnetwork": name, "parameters": count})
    table = pd.DataFrame(rows).set_index("subnetwork")
    total = int(table["parameters"].sum())
    target = settings.PARAM_TARGET_MILLIONS * 1e6
    deviation = (total - target) / target
    summary = {"total": total, "target": target, "deviation": deviation,
               "within_tolerance": abs(deviation) <= settings.PARAM_TOLERANCE}
    return table, summary
