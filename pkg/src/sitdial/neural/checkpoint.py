"""Versioned parameter checkpoints and JSON-lines training logs.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header
(format version, configs, tensor names/shapes/offsets), then every tensor as
raw little-endian float64 in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import ShapeMismatch
from ..featurize import FeaturizerConfig, GlobalTokens, Vocabulary
from .model import ModelConfig, check_params
from .train import TrainConfig, TrainResult

MAGIC = b"SITDCKPT"
FORMAT_VERSION = 1


def save_checkpoint(result: TrainResult, path: str | Path) -> Path:
    path = Path(path)
    names = sorted(result.params)
    tensors, offset = [], 0
    for name in names:
        arr = result.params[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": FORMAT_VERSION,
        "task": result.task,
        "threshold": result.threshold,
        "model_config": result.model_config.to_dict(),
        "featurizer_config": result.featurizer_config.to_dict(),
        "train_config": result.train_config.to_dict(),
        "vocab": result.vocab.tokens,
        "global_prefabs": result.global_tokens.prefabs if result.global_tokens else None,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(result.params[name], dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> TrainResult:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ShapeMismatch(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint version {header['format_version']}")
    body = data[16 + hlen :]
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    mcfg = ModelConfig.from_dict(header["model_config"])
    check_params(params, mcfg)
    prefabs = header["global_prefabs"]
    return TrainResult(
        task=header["task"],
        params=params,
        model_config=mcfg,
        featurizer_config=FeaturizerConfig.from_dict(header["featurizer_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        vocab=Vocabulary(header["vocab"]),
        global_tokens=GlobalTokens(prefabs) if prefabs is not None else None,
        threshold=header["threshold"],
    )


def write_log(entries: Iterable[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return path


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
