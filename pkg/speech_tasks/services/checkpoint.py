"""
Array archives: a zip holding `header.json` (format version, metadata, array
index) plus one raw little-endian row-major `.bin` per array. Used for model
checkpoints, optimizer state and mel dumps. Entries carry a fixed timestamp
so identical content gives identical bytes.
"""

import json
import logging
import zipfile
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from models.config import ModelConfig
from models.errors import CheckpointError
from services.network import SpeechTextModel
from services.text_pipeline import Tokenizer

logger = logging.getLogger('speechtext.checkpoint')

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    index = []
    with zipfile.ZipFile(path, "w") as zf:
        for i, (name, arr) in enumerate(arrays.items()):
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fname = f"arrays/{i:05d}.bin"
            index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "file": fname})
            zf.writestr(_entry(fname), le.tobytes(order="C"))
        header = {"version": FORMAT_VERSION, "meta": meta, "arrays": index}
        zf.writestr(_entry("header.json"), json.dumps(header, sort_keys=True, ensure_ascii=False))


def load_archive(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported archive version {header.get('version')}")
            arrays = {}
            for item in header["arrays"]:
                data = zf.read(item["file"])
                arrays[item["name"]] = np.frombuffer(data, dtype=np.dtype(item["dtype"])).reshape(item["shape"]).copy()
            meta = header["meta"]
    except (zipfile.BadZipFile, KeyError, TypeError, ValueError, AttributeError, FileNotFoundError) as e:
        raise CheckpointError(f"{path}: unreadable archive ({e})", path=path) from e
    return arrays, meta


# ============================================================================
# MODEL CHECKPOINTS
# ============================================================================

def _tensor_arrays(prefix: str, tensors: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().contiguous().numpy() for k, v in tensors.items()}


def _optimizer_payload(optimizer: torch.optim.Optimizer) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    state = optimizer.state_dict()
    arrays, scalars = {}, {}
    for idx, pstate in state["state"].items():
        for key, value in pstate.items():
            if torch.is_tensor(value):
                arrays[f"optim/{idx}/{key}"] = value.detach().cpu().contiguous().numpy()
            else:
                scalars[f"{idx}/{key}"] = value
    return arrays, {"param_groups": state["param_groups"], "scalars": scalars}


def save_checkpoint(path: str, model: torch.nn.Module, kind: str, config: Dict[str, Any],
                    tokenizer: Optional[Tokenizer] = None, step: int = 0,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[Dict[str, Any]] = None) -> None:
    arrays = _tensor_arrays("model/", model.state_dict())
    meta: Dict[str, Any] = {"kind": kind, "config": config, "step": step, "extra": extra or {}}
    if tokenizer is not None:
        meta["tokenizer"] = json.loads(tokenizer.to_json())
    if optimizer is not None:
        opt_arrays, opt_meta = _optimizer_payload(optimizer)
        arrays.update(opt_arrays)
        meta["optimizer"] = opt_meta
    save_archive(path, arrays, meta)
    logger.info(f"Saved {kind} checkpoint at step {step} to {path}")


class Checkpoint:
    """Loaded checkpoint: metadata plus model and optimizer tensors."""

    def __init__(self, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]):
        self.meta = meta
        self.kind: str = meta["kind"]
        self.config: Dict[str, Any] = meta["config"]
        self.step: int = int(meta.get("step", 0))
        self.extra: Dict[str, Any] = meta.get("extra", {})
        self.model_state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
        self._optim_arrays = {k: v for k, v in arrays.items() if k.startswith("optim/")}

    @property
    def tokenizer(self) -> Optional[Tokenizer]:
        payload = self.meta.get("tokenizer")
        return Tokenizer.from_json(json.dumps(payload)) if payload else None

    def load_optimizer(self, optimizer: torch.optim.Optimizer) -> bool:
        opt_meta = self.meta.get("optimizer")
        if not opt_meta:
            return False
        state: Dict[int, Dict[str, Any]] = {}
        for key, arr in self._optim_arrays.items():
            _, idx, name = key.split("/", 2)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(arr)
        for key, value in opt_meta["scalars"].items():
            idx, name = key.split("/", 1)
            state.setdefault(int(idx), {})[name] = value
        optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})
        return True


def load_checkpoint(path: str, kind: Optional[str] = None) -> Checkpoint:
    arrays, meta = load_archive(path)
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    try:
        return Checkpoint(arrays, meta)
    except (KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint metadata ({e})", path=path) from e


def build_model(ckpt: Checkpoint) -> SpeechTextModel:
    """Instantiate the model described by a checkpoint and load its weights."""
    try:
        model = SpeechTextModel(ModelConfig(**ckpt.config))
        model.load_state_dict(ckpt.model_state)
    except (TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"checkpoint does not match the model layout: {e}") from e
    return model


def save_mel(path: str, mel: np.ndarray, meta: Optional[Dict[str, Any]] = None) -> None:
    save_archive(path, {"mel": np.asarray(mel, dtype=np.float32)}, {"kind": "mel", **(meta or {})})


def load_mel(path: str) -> np.ndarray:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "mel":
        raise CheckpointError(f"{path}: not a mel archive")
    return arrays["mel"]
