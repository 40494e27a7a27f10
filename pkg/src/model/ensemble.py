"""
Fold ensembles and the model parameter file.

A parameter file holds one member:

    8 bytes   magic b"PCMODEL\\x00"
    8 bytes   little-endian uint64 length of the JSON header
    header    UTF-8 JSON (sorted keys): version, fold, model_config,
              normalization, arrays [{name, shape, offset}]
    data      every array as little-endian float64, row-major, in header order
"""

import glob
import json
import os
import re
from dataclasses import dataclass

import numpy as np
import torch

from logging_config import setup_logger
from src.data_transformation.preprocess import NormalizationStats, normalize_frames
from src.model.config import ModelConfig
from src.model.seq2seq import DTYPE, Seq2SeqModel, as_batch


LOGGER = setup_logger()

MAGIC = b"PCMODEL\x00"
FORMAT_VERSION = 1
MODEL_FILE_PATTERN = re.compile(r"model\.(\d+)\.bin$")


class ModelFormatError(ValueError):
    pass


@dataclass(eq=False)
class EnsembleMember:
    model: Seq2SeqModel
    stats: NormalizationStats
    fold: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @torch.inference_mode()
    def begin(self, window_frames: np.ndarray):
        """Normalize raw window frames with this member's stats and encode them."""
        return self.model.encode(as_batch(normalize_frames(window_frames, self.stats)))

    @torch.inference_mode()
    def step(self, state, prev_token: int):
        probs, state = self.model.decode_step(state, prev_token)
        return probs[0].numpy(), state


class EnsembleModel:
    def __init__(self, members):
        self.members = list(members)
        if not self.members:
            raise ValueError("An ensemble needs at least one member.")
        first = self.members[0].config
        for member in self.members[1:]:
            if member.config != first:
                LOGGER.error(f"Member of fold {member.fold} has a different ModelConfig")
                raise ValueError("All ensemble members must share one ModelConfig.")

    @property
    def config(self) -> ModelConfig:
        return self.members[0].config

    @property
    def max_tokens(self) -> int:
        return self.config.max_tokens

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    def __len__(self) -> int:
        return len(self.members)


def _header_bytes(member: EnsembleMember, arrays: list) -> bytes:
    entries, offset = [], 0
    for name, values in arrays:
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        offset += values.size * 8
    header = {
        "version": FORMAT_VERSION,
        "fold": member.fold,
        "model_config": member.config.to_dict(),
        "normalization": member.stats.to_dict(),
        "arrays": entries,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_member(member: EnsembleMember, file_path: str) -> None:
    arrays = [
        (name, tensor.detach().cpu().numpy().astype("<f8"))
        for name, tensor in member.model.state_dict().items()
    ]
    header = _header_bytes(member, arrays)
    with open(file_path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([len(header)], dtype="<u8").tobytes())
        f.write(header)
        for _, values in arrays:
            f.write(np.ascontiguousarray(values).tobytes(order="C"))
    LOGGER.info(f"Saved model of fold {member.fold} to '{file_path}'")


def load_member(file_path: str) -> EnsembleMember:
    if not os.path.exists(file_path):
        LOGGER.error(f"Model file '{file_path}' not found")
        raise FileNotFoundError(f"Model file '{file_path}' not found")
    with open(file_path, "rb") as f:
        blob = f.read()

    if blob[:8] != MAGIC or len(blob) < 16:
        LOGGER.error(f"'{file_path}' is not a model parameter file")
        raise ModelFormatError(f"'{file_path}' is not a model parameter file")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"Unreadable header in '{file_path}': {e}") from e
    if header.get("version") != FORMAT_VERSION:
        LOGGER.error(f"Unsupported model file version {header.get('version')} in '{file_path}'")
        raise ModelFormatError(
            f"Unsupported model file version {header.get('version')}, expected {FORMAT_VERSION}"
        )

    try:
        config = ModelConfig(**header["model_config"])
        stats = NormalizationStats.from_dict(header["normalization"])
        data = blob[16 + header_len :]
        state = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            if start + count * 8 > len(data):
                raise ModelFormatError(f"Array '{entry['name']}' runs past the end of the file")
            values = np.frombuffer(data, dtype="<f8", count=count, offset=start)
            state[entry["name"]] = torch.from_numpy(values.reshape(entry["shape"]).copy()).to(
                DTYPE
            )
        model = Seq2SeqModel(config)
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, RuntimeError) as e:
        LOGGER.error(f"Model file '{file_path}' does not match its header: {e}")
        raise ModelFormatError(f"Model file '{file_path}' does not match its header: {e}") from e

    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise ModelFormatError(f"Model file '{file_path}' holds non-finite parameters")
    model.eval()
    return EnsembleMember(model=model, stats=stats, fold=int(header.get("fold", 0)))


def save_ensemble(ensemble: EnsembleModel, directory: str) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for member in ensemble.members:
        path = os.path.join(directory, f"model.{member.fold}.bin")
        save_member(member, path)
        paths.append(path)
    return paths


def load_ensemble(directory: str) -> EnsembleModel:
    files = []
    for path in glob.glob(os.path.join(directory, "model.*.bin")):
        match = MODEL_FILE_PATTERN.search(os.path.basename(path))
        if match:
            files.append((int(match.group(1)), path))
    if not files:
        LOGGER.error(f"No model.<fold>.bin files in '{directory}'")
        raise FileNotFoundError(f"No model.<fold>.bin files in '{directory}'")
    members = [load_member(path) for _, path in sorted(files)]
    LOGGER.info(f"Loaded ensemble of {len(members)} members from '{directory}'")
    return EnsembleModel(members)
