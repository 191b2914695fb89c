"""Versioned binary checkpoint container: named float32 parameter blobs with
per-blob content hashes, a JSON header, and byte-identical save/load
round-trips."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LXLCKPT\x01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    """Named sections, each a mapping of parameter name to float32 array."""

    sections: dict[str, dict[str, np.ndarray]]
    config: dict = field(default_factory=dict)
    step: int = 0

    def section_hash(self, name: str) -> str:
        """Content hash of one section's parameters, in sorted name order."""
        if name not in self.sections:
            raise CheckpointError(f"no such section: {name}")
        h = hashlib.sha256()
        for pname in sorted(self.sections[name]):
            arr = self.sections[name][pname]
            h.update(pname.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def state_dict(self, name: str) -> dict[str, torch.Tensor]:
        if name not in self.sections:
            raise CheckpointError(f"checkpoint is missing section {name!r}")
        return {k: torch.from_numpy(v.copy()) for k, v in self.sections[name].items()}


def section_from_module(module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for k, v in module.state_dict().items():
        out[k] = v.detach().cpu().to(torch.float32).numpy().astype("<f4")
    return out


def module_hash(module: torch.nn.Module) -> str:
    """Hash a live module's parameters the same way a checkpoint section is hashed."""
    section = section_from_module(module)
    h = hashlib.sha256()
    for pname in sorted(section):
        h.update(pname.encode())
        h.update(section[pname].tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    blobs = []
    payload = bytearray()
    for sec in sorted(ckpt.sections):
        for pname in sorted(ckpt.sections[sec]):
            arr = np.ascontiguousarray(ckpt.sections[sec][pname], dtype="<f4")
            raw = arr.tobytes()
            blobs.append(
                {
                    "name": f"{sec}/{pname}",
                    "shape": list(arr.shape),
                    "dtype": "<f4",
                    "offset": len(payload),
                    "nbytes": len(raw),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "blobs": blobs,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    if len(raw) < header_start + header_len:
        raise CheckpointError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('format_version')} (expected {FORMAT_VERSION})"
        )
    data_start = header_start + header_len
    sections: dict[str, dict[str, np.ndarray]] = {}
    for blob in header["blobs"]:
        start = data_start + blob["offset"]
        end = start + blob["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path} is truncated (blob {blob['name']})")
        chunk = raw[start:end]
        if hashlib.sha256(chunk).hexdigest() != blob["sha256"]:
            raise CheckpointError(f"{path}: hash mismatch for blob {blob['name']} (corrupt file)")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(blob["shape"]).copy()
        sec, pname = blob["name"].split("/", 1)
        sections.setdefault(sec, {})[pname] = arr
    return Checkpoint(sections=sections, config=header["config"], step=header["step"])
