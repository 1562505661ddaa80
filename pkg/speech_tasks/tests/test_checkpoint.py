import zipfile

import numpy as np
import pytest
import torch

from models.errors import CheckpointError
from services.checkpoint import (build_model, load_archive, load_checkpoint, load_mel, save_archive,
                                 save_checkpoint, save_mel)
from services.text_pipeline import build_tokenizer


class TestArchive:
    def test_arrays_and_meta_survive(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64)}
        path = str(tmp_path / "x.zip")
        save_archive(path, arrays, {"kind": "test", "note": "ملاحظة"})
        loaded, meta = load_archive(path)
        assert meta == {"kind": "test", "note": "ملاحظة"}
        for name, arr in arrays.items():
            assert loaded[name].dtype == arr.dtype
            assert np.array_equal(loaded[name], arr)

    def test_identical_content_identical_bytes(self, tmp_path):
        arrays = {"w": np.linspace(0, 1, 10)}
        a, b = tmp_path / "a.zip", tmp_path / "b.zip"
        save_archive(str(a), arrays, {"kind": "x"})
        save_archive(str(b), arrays, {"kind": "x"})
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_other_versions_and_garbage(self, tmp_path):
        path = tmp_path / "v2.zip"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("header.json", '{"version": 2, "meta": {}, "arrays": []}')
        with pytest.raises(CheckpointError):
            load_archive(str(path))
        junk = tmp_path / "junk.zip"
        junk.write_bytes(b"nope")
        with pytest.raises(CheckpointError):
            load_archive(str(junk))

    @pytest.mark.parametrize("header", ["{broken", "[]", '{"version": 1, "arrays": [{"name": "w"}]}'])
    def test_rejects_malformed_headers(self, tmp_path, header):
        path = tmp_path / "bad.zip"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("header.json", header)
        with pytest.raises(CheckpointError):
            load_archive(str(path))

    def test_mel_archive(self, tmp_path):
        mel = np.random.default_rng(0).normal(size=(7, 80)).astype(np.float32)
        path = str(tmp_path / "m.zip")
        save_mel(path, mel, {"id": "u1"})
        assert np.array_equal(load_mel(path), mel)


class TestModelCheckpoint:
    def test_weights_tokenizer_and_optimizer_round_trip(self, tiny_model, tmp_path):
        model = tiny_model.float()
        tokenizer = build_tokenizer(["كتب"])
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        model.encode_text(torch.tensor([[6, 7]])).pow(2).sum().backward()
        optimizer.step()
        path = str(tmp_path / "ckpt.zip")
        save_checkpoint(path, model, "pretrain", model.cfg.model_dump(), tokenizer, 7, optimizer, {"seed": 3})

        ckpt = load_checkpoint(path, kind="pretrain")
        assert (ckpt.step, ckpt.extra, ckpt.tokenizer) == (7, {"seed": 3}, tokenizer)
        restored = build_model(ckpt)
        for (name, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
            assert torch.equal(a, b), name

        fresh = torch.optim.Adam(restored.parameters(), lr=1e-3)
        assert ckpt.load_optimizer(fresh)
        saved, loaded = optimizer.state_dict()["state"], fresh.state_dict()["state"]
        assert saved and saved.keys() == loaded.keys()
        for idx in saved:
            assert torch.equal(saved[idx]["exp_avg"], loaded[idx]["exp_avg"])

    def test_kind_is_checked(self, tiny_model, tmp_path):
        path = str(tmp_path / "ckpt.zip")
        save_checkpoint(path, tiny_model, "tts", tiny_model.cfg.model_dump())
        with pytest.raises(CheckpointError):
            load_checkpoint(path, kind="asr")
        assert load_checkpoint(path).tokenizer is None
