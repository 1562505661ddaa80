import pytest
import torch

from models.config import ModelConfig, PRESETS
from models.enums import Preset
from models.errors import DimMismatch, InvalidId, ShapeMismatch, TooShort
from services.network import (Codebook, SpeechTextModel, causal_mask, describe, lengths_to_padding_mask,
                              sinusoid_positions)


class TestHelpers:
    def test_padding_mask(self):
        mask = lengths_to_padding_mask(torch.tensor([1, 3]), 4)
        assert mask.tolist() == [[False, True, True, True], [False, False, False, True]]

    def test_causal_mask_hides_future(self):
        mask = causal_mask(3)
        assert mask.tolist() == [[False, True, True], [False, False, True], [False, False, False]]

    def test_positions(self):
        table = sinusoid_positions(5, 8)
        assert table.shape == (5, 8)
        assert torch.allclose(table[0, 0::2], torch.zeros(4))
        assert torch.allclose(table[0, 1::2], torch.ones(4))


class TestShapes:
    def test_one_second_gives_fifty_frames(self, tiny_model):
        encoded, padding = tiny_model.encode_speech(torch.zeros(2, 16000, dtype=torch.double),
                                                    torch.tensor([16000, 8000]))
        assert encoded.shape == (2, 50, 8)
        assert padding.sum(dim=1).tolist() == [0, 25]

    def test_too_short_waveform(self, tiny_model):
        with pytest.raises(TooShort):
            tiny_model.encode_speech(torch.zeros(1, 100, dtype=torch.double))

    def test_text_round_trip_shapes(self, tiny_model):
        ids = torch.tensor([[6, 7, 8, 0]])
        memory = tiny_model.encode_text(ids, lengths_to_padding_mask(torch.tensor([3]), 4))
        logits = tiny_model.decode_text(torch.tensor([[1, 6]]), memory)
        assert memory.shape == (1, 4, 8)
        assert logits.shape == (1, 2, 20)

    def test_speech_decoder_outputs(self, tiny_model):
        memory = torch.randn(1, 3, 8, dtype=torch.double)
        before, after, stop = tiny_model.decode_speech(torch.zeros(1, 4, 80, dtype=torch.double), memory)
        assert before.shape == after.shape == (1, 4, 80)
        assert stop.shape == (1, 4)

    def test_rejects_out_of_range_ids(self, tiny_model):
        with pytest.raises(InvalidId):
            tiny_model.encode_text(torch.tensor([[25]]))

    def test_rejects_bad_masks(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model.encode(torch.zeros(1, 3, 8, dtype=torch.double), torch.zeros(1, 4, dtype=torch.bool))
        with pytest.raises(DimMismatch):
            tiny_model.decode_speech(torch.zeros(1, 2, 40, dtype=torch.double),
                                     torch.zeros(1, 2, 8, dtype=torch.double))

    def test_decoder_is_causal(self, tiny_model):
        tiny_model.eval()
        memory = torch.randn(1, 3, 8, dtype=torch.double)
        a = tiny_model.decode_text(torch.tensor([[1, 6, 7]]), memory)
        b = tiny_model.decode_text(torch.tensor([[1, 6, 9]]), memory)
        assert torch.allclose(a[:, :2], b[:, :2])
        assert not torch.allclose(a[:, 2], b[:, 2])

    def test_encoder_ignores_padding(self, tiny_model):
        tiny_model.eval()
        ids = torch.tensor([[6, 7, 0]])
        padding = lengths_to_padding_mask(torch.tensor([2]), 3)
        a = tiny_model.encode_text(ids, padding)
        b = tiny_model.encode_text(torch.tensor([[6, 7, 9]]), padding)
        assert torch.allclose(a[:, :2], b[:, :2])

    def test_speech_prenet_ignores_batch_padding(self, tiny_model):
        tiny_model.eval()
        gen = torch.Generator().manual_seed(1)
        short = 0.3 * torch.randn(6400, generator=gen, dtype=torch.double)
        long = 0.3 * torch.randn(8000, generator=gen, dtype=torch.double)
        padded = torch.stack([torch.cat([short, torch.full((1600,), 0.7, dtype=torch.double)]), long])
        prenet = tiny_model.speech_encoder_prenet
        alone, _ = prenet(short[None], torch.tensor([6400]))
        batched, padding = prenet(padded, torch.tensor([6400, 8000]))
        assert alone.shape == (1, 20, 8)
        assert torch.allclose(batched[0, :20], alone[0], atol=1e-10)
        assert padding.sum(dim=1).tolist() == [5, 0]

    def test_prenet_gradient_is_well_conditioned_on_padded_batches(self, tiny_model):
        gen = torch.Generator().manual_seed(2)
        waves = 0.3 * torch.randn(2, 8000, generator=gen, dtype=torch.double)
        lengths = torch.tensor([6400, 8000])
        bias = tiny_model.speech_encoder_prenet.conv_layers[0][1].norm.bias

        def loss_fn():
            states, padding = tiny_model.speech_encoder_prenet(waves, lengths)
            return states.masked_fill(padding[..., None], 0.0).pow(2).sum()

        loss_fn().backward()
        analytic = float(bias.grad[0])
        with torch.no_grad():
            numeric = []
            for eps in (1e-5, 1e-7):
                bias[0] += eps
                up = float(loss_fn())
                bias[0] -= 2 * eps
                down = float(loss_fn())
                bias[0] += eps
                numeric.append((up - down) / (2 * eps))
        assert numeric[0] == pytest.approx(analytic, rel=1e-3)
        assert numeric[1] == pytest.approx(analytic, rel=1e-3)

    def test_postnet_normalizes_each_utterance_alone(self, tiny_model):
        tiny_model.train()
        gen = torch.Generator().manual_seed(3)
        mel = torch.randn(2, 6, 80, generator=gen, dtype=torch.double)
        postnet = tiny_model.speech_decoder_postnet
        assert torch.allclose(postnet.refine(mel)[:1], postnet.refine(mel[:1]))
        assert all(not name.endswith("running_mean") for name, _ in postnet.named_buffers())

    def test_text_postnet_is_tied(self, tiny_model):
        hidden = torch.randn(1, 1, 8, dtype=torch.double)
        expected = hidden @ tiny_model.text_prenet.embedding.weight.T
        assert torch.allclose(tiny_model.text_decoder_postnet(hidden), expected)


class TestCodebook:
    @pytest.fixture
    def codebook(self, tiny_cfg):
        torch.manual_seed(0)
        return Codebook(tiny_cfg).double()

    def test_entries_are_fixed_points(self, codebook):
        x = codebook.entries[:, 2].reshape(1, -1).detach()
        quant = codebook(x)
        assert quant.indices.tolist() == [[2, 2]]
        assert torch.allclose(quant.vectors, x)

    def test_vectors_on_codebook_image(self, codebook):
        quant = codebook(torch.randn(3, 4, 8, dtype=torch.double))
        for g in range(2):
            chosen = codebook.entries[g][quant.indices[..., g]]
            assert torch.allclose(quant.vectors[..., 4 * g:4 * (g + 1)], chosen)
        assert torch.allclose(quant.probs.sum(-1), torch.ones(3, 4, 2, dtype=torch.double))

    def test_straight_through_gradient(self, codebook):
        x = torch.randn(2, 8, dtype=torch.double, requires_grad=True)
        codebook(x, temperature=0.7).vectors.sum().backward()
        assert x.grad is not None and x.grad.abs().sum() > 0

    def test_temperature_anneals_to_floor(self, codebook):
        assert codebook.temperature(0) == 1.0
        assert codebook.temperature(10 ** 8) == 0.5
        assert codebook.temperature(1000) < codebook.temperature(10)


class TestVocabularyResize:
    def test_keeps_existing_rows(self, tiny_model):
        old_emb = tiny_model.text_prenet.embedding.weight.detach().clone()
        old_head = tiny_model.ctc_head.weight.detach().clone()
        tiny_model.resize_text_vocab(25)
        assert tiny_model.cfg.vocab_size == 25
        assert torch.equal(tiny_model.text_prenet.embedding.weight[:20], old_emb)
        assert torch.equal(tiny_model.ctc_head.weight[:20], old_head)
        assert tiny_model.ctc_head.weight.dtype == torch.double

    def test_refuses_to_shrink(self, tiny_model):
        with pytest.raises(DimMismatch):
            tiny_model.resize_text_vocab(10)


class TestDescribe:
    def test_subnetwork_counts_add_up(self, tiny_model):
        table, summary = describe(tiny_model)
        unique = sum(p.numel() for p in tiny_model.parameters())
        assert summary["total"] == unique == int(table["parameters"].sum())
        assert not summary["within_tolerance"]

    @pytest.mark.slow
    def test_paper_preset_is_near_reference_size(self):
        model = SpeechTextModel(ModelConfig(**PRESETS[Preset.PAPER]["model"]))
        _, summary = describe(model)
        assert summary["within_tolerance"]
        assert abs(summary["deviation"]) < 0.05
