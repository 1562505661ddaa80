import math
import os
import string

import pytest
import torch

from models.config import DecodeConfig
from models.enums import DecodeMode, Modality, ScoreLevel, TranscriptEncoding
from services.audio_frontend import load_wave
from services.checkpoint import load_checkpoint
from services.corpus import collate
from services.metrics import score
from services.text_pipeline import to_buckwalter
from tasks.asr import asr_loss, finetune_asr, prepare_tokenizer, speech_log_probs, transcribe, transcript_fn


class TestTargets:
    def test_transcript_encodings(self, toy_corpus):
        utt = toy_corpus[0]
        assert transcript_fn(TranscriptEncoding.ARABIC)(utt) == utt.text_norm
        assert transcript_fn(TranscriptEncoding.BUCKWALTER)(utt) == to_buckwalter(utt.text_norm)

    def test_buckwalter_extension_keeps_ids(self, toy_corpus, toy_tokenizer):
        extended = prepare_tokenizer(toy_tokenizer, toy_corpus, TranscriptEncoding.BUCKWALTER)
        assert len(extended) > len(toy_tokenizer)
        for sym, idx in toy_tokenizer.symbol_to_id.items():
            assert extended.id_of(sym) == idx
        assert prepare_tokenizer(toy_tokenizer, toy_corpus, TranscriptEncoding.ARABIC) is toy_tokenizer


class TestLoss:
    def test_gradient(self, tiny_model, toy_corpus, toy_tokenizer, fd_check):
        batch = collate(toy_corpus[:2], Modality.PAIRED, toy_tokenizer)

        def loss_fn():
            return asr_loss(tiny_model, batch, toy_tokenizer, alpha=0.5)[0]

        fd_check(loss_fn, tiny_model.parameters())

    def test_terms(self, tiny_model, toy_corpus, toy_tokenizer):
        batch = collate(toy_corpus[:3], Modality.PAIRED, toy_tokenizer)
        total, terms = asr_loss(tiny_model, batch, toy_tokenizer)
        assert set(terms) == {"ctc"} and torch.equal(total, terms["ctc"])
        total, terms = asr_loss(tiny_model, batch, toy_tokenizer, alpha=0.3)
        assert torch.allclose(total, terms["ctc"] + 0.3 * terms["ce"])


@pytest.fixture(scope="module")
def asr_run(pretrain_ckpt, toy_corpus, tmp_path_factory, make_run):
    out = str(tmp_path_factory.mktemp("asr"))
    model, tokenizer, records = finetune_asr(toy_corpus, pretrain_ckpt, make_run("finetune-asr", ctc_alpha=0.2),
                                             out, TranscriptEncoding.BUCKWALTER, valid_utts=toy_corpus[:4])
    return out, model, tokenizer, records


class TestFineTuning:
    def test_records_and_checkpoint(self, asr_run):
        out, model, tokenizer, records = asr_run
        assert [r["step"] for r in records] == [1, 2]
        assert all(math.isfinite(r["ctc"]) and "ce" in r and "val_loss" in r for r in records)
        ckpt = load_checkpoint(os.path.join(out, "checkpoint.zip"), kind="asr")
        assert ckpt.extra == {"encoding": "bw", "ctc_alpha": 0.2}
        assert ckpt.config["vocab_size"] == len(tokenizer) == model.cfg.vocab_size

    def test_log_probs_shape(self, asr_run, toy_corpus):
        _, model, tokenizer, _ = asr_run
        wave = load_wave(toy_corpus[0].audio)
        assert speech_log_probs(model, wave).shape == (len(wave) // 320, len(tokenizer))

    def test_hypotheses_come_back_in_arabic_script(self, asr_run, toy_corpus):
        _, model, tokenizer, _ = asr_run
        results = transcribe(model, tokenizer, toy_corpus[:3], DecodeConfig(beam=3),
                             encoding=TranscriptEncoding.BUCKWALTER)
        assert [r["id"] for r in results] == [u.id for u in toy_corpus[:3]]
        for r in results:
            assert not set(r["hyp"]) & set(string.ascii_letters)
            assert math.isfinite(r["score"])

    def test_greedy_mode(self, asr_run, toy_corpus):
        _, model, tokenizer, _ = asr_run
        results = transcribe(model, tokenizer, toy_corpus[:2], mode=DecodeMode.GREEDY,
                             encoding=TranscriptEncoding.BUCKWALTER)
        assert len(results) == 2


@pytest.fixture(scope="module")
def converged_asr(converged_pretrain, clean_corpus, preset_run):
    """2000-update toy-preset CTC fine-tuning on the clean corpus."""
    return finetune_asr(clean_corpus, converged_pretrain[0], preset_run("finetune-asr", max_updates=2000))


@pytest.mark.slow
class TestToyConvergence:
    def test_ctc_loss_falls(self, pretrain_ckpt, toy_corpus, make_run):
        run = make_run("finetune-asr", max_updates=80, lr=3e-3, warmup_updates=10)
        model, tokenizer, records = finetune_asr(toy_corpus, pretrain_ckpt, run)
        first = sum(r["ctc"] for r in records[:10]) / 10
        last = sum(r["ctc"] for r in records[-10:]) / 10
        assert last < first
        results = transcribe(model, tokenizer, toy_corpus, mode=DecodeMode.GREEDY)
        assert [r["id"] for r in results] == [u.id for u in toy_corpus]

    @pytest.mark.parametrize("mode", [DecodeMode.GREEDY, DecodeMode.BEAM])
    def test_toy_preset_reaches_low_cer(self, converged_asr, clean_corpus, mode):
        model, tokenizer, records = converged_asr
        assert all(math.isfinite(r["total"]) for r in records)
        results = transcribe(model, tokenizer, clean_corpus, mode=mode)
        refs = {u.id: u.text_norm for u in clean_corpus}
        hyps = {r["id"]: r["hyp"] for r in results}
        assert score(refs, hyps, level=ScoreLevel.CHAR).cer <= 0.05
