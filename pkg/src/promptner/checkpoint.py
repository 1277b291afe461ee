"""Versioned named-tensor checkpoints.

A checkpoint directory holds ``model.bin`` (magic, format version, JSON
header listing tensors, raw little-endian payload), ``meta.json`` (format
version, step, seed, config and its digest) and ``vocab.txt`` for the tiny
backend.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from promptner.config import RunConfig, config_from_dict
from promptner.model import PromptNER
from promptner.tokenization import WordPieceTokenizer

MAGIC = b"PNERTNSR"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def write_tensors(tensors: dict[str, torch.Tensor], path: str | Path) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"tensors": entries, "sha256": hashlib.sha256(payload).hexdigest()}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload)


def read_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    blob = Path(path).read_bytes()
    head = len(MAGIC) + 12
    if len(blob) < head or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a tensor checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC) : head])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[head : head + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = blob[head + hlen :]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    out = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out


def save_checkpoint(model: PromptNER, path: str | Path, run_cfg: RunConfig, step: int = 0, seed: int | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensors(dict(model.state_dict()), path / "model.bin")
    if isinstance(model.tokenizer, WordPieceTokenizer):
        model.tokenizer.save(path / "vocab.txt")
    meta = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "seed": seed if seed is not None else run_cfg.train.seed,
        "config_hash": run_cfg.digest(),
        "config": run_cfg.to_dict(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[PromptNER, RunConfig, dict]:
    path = Path(path)
    if not (path / "meta.json").exists() or not (path / "model.bin").exists():
        raise CheckpointError(f"{path}: missing meta.json or model.bin")
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    run_cfg = config_from_dict(meta["config"])
    tokenizer = WordPieceTokenizer.from_file(path / "vocab.txt") if (path / "vocab.txt").exists() else None
    model = PromptNER(run_cfg.model, tokenizer)
    model.load_state_dict(read_tensors(path / "model.bin"))
    model.eval()
    return model, run_cfg, meta
