import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models.config import ModelConfig, RunConfig  # noqa: E402
from models.enums import Preset  # noqa: E402
from services.audio_frontend import fit_kmeans, load_wave, log_mel  # noqa: E402
from services.corpus import make_toy_corpus  # noqa: E402
from services.network import SpeechTextModel  # noqa: E402
from services.pretrain import pretrain  # noqa: E402
from services.text_pipeline import build_tokenizer  # noqa: E402

TINY = ModelConfig(
    d_model=8, n_heads=2, enc_layers=1, dec_layers=1, ffn_dim=16, dropout=0.0,
    vocab_size=20, mel_bins=80, unit_count=4, conv_channels=8,
    codebook_groups=2, codebook_entries=5, dec_prenet_units=8,
    postnet_channels=8, postnet_layers=2, postnet_kernel=3, mix_prob=0.0,
)


TINY_FLAGS = {
    "d_model": 8, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "ffn_dim": 16, "dropout": 0.0,
    "conv_channels": 8, "codebook_entries": 5, "dec_prenet_units": 8, "postnet_channels": 8,
    "postnet_layers": 2, "postnet_kernel": 3, "unit_count": 4,
    "lr": 1e-3, "warmup_updates": 2, "max_updates": 2, "batch_budget_samples": 40000,
    "batch_budget_chars": 40, "eval_every": 1,
    "lm_d_model": 8, "lm_heads": 2, "lm_layers": 1, "lm_ffn_dim": 16, "lm_dropout": 0.0,
    "lm_updates": 3, "lm_batch_size": 4, "lm_warmup": 2,
    "max_frames": 20,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: seed-pinned end-to-end training runs")


def tiny_run(command: str, seed: int = 3, **overrides) -> RunConfig:
    return RunConfig.resolve(command, Preset.TOY, seed, flag_values={**TINY_FLAGS, **overrides})


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def make_run():
    return tiny_run


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return SpeechTextModel(TINY).double()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return make_toy_corpus(7, 20, str(out), n_dialects=2)


def toy_preset_run(command: str, seed: int = 7, **overrides) -> RunConfig:
    return RunConfig.resolve(command, Preset.TOY, seed, flag_values=overrides)


@pytest.fixture(scope="session")
def clean_corpus(tmp_path_factory):
    """Noise-free 20-utterance corpus for the toy-preset convergence runs."""
    return make_toy_corpus(11, 20, str(tmp_path_factory.mktemp("clean")))


@pytest.fixture(scope="session")
def converged_pretrain(clean_corpus, tmp_path_factory):
    """1000-update toy-preset pre-training on the clean corpus: (checkpoint path, reports, units, tokenizer)."""
    tokenizer = build_tokenizer(u.text_norm for u in clean_corpus)
    frames = np.concatenate([log_mel(load_wave(u.audio)).frames for u in clean_corpus])
    units = fit_kmeans(frames, 16, seed=0)
    out = str(tmp_path_factory.mktemp("pretrain-toy"))
    _, reports = pretrain(clean_corpus, units, tokenizer, toy_preset_run("pretrain", max_updates=1000), out_dir=out)
    return os.path.join(out, "checkpoint.zip"), reports, units, tokenizer


@pytest.fixture(scope="session")
def preset_run():
    return toy_preset_run


@pytest.fixture(scope="session")
def toy_tokenizer(toy_corpus):
    return build_tokenizer(u.text_norm for u in toy_corpus)


@pytest.fixture(scope="session")
def toy_units(toy_corpus):
    frames = np.concatenate([log_mel(load_wave(u.audio)).frames for u in toy_corpus])
    return fit_kmeans(frames, 4, seed=0)


@pytest.fixture(scope="session")
def pretrain_ckpt(toy_corpus, toy_units, toy_tokenizer, tmp_path_factory):
    """Path of a two-update pre-training checkpoint on the toy corpus."""
    out = str(tmp_path_factory.mktemp("pretrain"))
    pretrain(toy_corpus, toy_units, toy_tokenizer, tiny_run("pretrain"), out_dir=out)
    return os.path.join(out, "checkpoint.zip")


@pytest.fixture
def fd_check():
    """Central-difference gradient check of loss_fn() against autograd for every parameter."""

    def check(loss_fn, parameters, eps=1e-6, rtol=1e-4, n_entries=5, seed=0):
        params = [p for p in parameters if p.requires_grad]
        for p in params:
            p.grad = None
        loss_fn().backward()
        grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
        gen = torch.Generator().manual_seed(seed)
        failures = []
        with torch.no_grad():
            for p, grad in zip(params, grads):
                flat, gflat = p.view(-1), grad.view(-1)
                picks = torch.randint(0, flat.numel(), (min(n_entries, flat.numel()),), generator=gen)
                for idx in picks.tolist():
                    orig = float(flat[idx])
                    flat[idx] = orig + eps
                    up = float(loss_fn())
                    flat[idx] = orig - eps
                    down = float(loss_fn())
                    flat[idx] = orig
                    numeric, analytic = (up - down) / (2 * eps), float(gflat[idx])
                    if abs(numeric - analytic) > rtol * max(abs(numeric), abs(analytic), 1e-4):
                        failures.append((tuple(p.shape), idx, numeric, analytic))
        assert not failures, failures

    return check
