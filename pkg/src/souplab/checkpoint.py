"""Checkpoints and their on-disk format.

File layout::

    SOUPLAB-CKPT\\n
    <one line of JSON header>\\n
    <payload: little-endian float32 values in canonical layout order>

The header carries the format version, architecture, head, stage, seeds,
parent hashes, free-form metadata and the sha256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ArchDescriptor, ParameterVector

MAGIC = b"SOUPLAB-CKPT\n"
FORMAT_VERSION = 1
STAGES = ("base", "sft", "rm", "soup", "rlhf")


class CorruptCheckpointError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    def __init__(self, version):
        super().__init__(f"unsupported checkpoint format version {version}")
        self.version = version


@dataclass(eq=False)
class Checkpoint:
    params: ParameterVector
    stage: str
    seeds: dict = field(default_factory=dict)
    parents: tuple = ()
    base_hash: str | None = None
    meta: dict = field(default_factory=dict)
    lineage_ok: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.parents = tuple(self.parents)
        if self.stage == "base" and self.base_hash is None:
            self.base_hash = self.hash

    @property
    def arch(self) -> ArchDescriptor:
        return self.params.arch

    @property
    def hash(self) -> str:
        return self.params.digest()

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": self.arch.to_dict(),
            "head": self.params.head,
            "stage": self.stage,
            "seeds": self.seeds,
            "parents": list(self.parents),
            "base_hash": self.base_hash,
            "meta": self.meta,
            "n_params": len(self.params),
            "payload_sha256": hashlib.sha256(_payload(self.params)).hexdigest(),
            "hash": self.hash,
        }


def _payload(params: ParameterVector) -> bytes:
    return params.values.astype("<f4").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode() + b"\n")
        f.write(_payload(ckpt.params))
    os.replace(tmp, path)


def load_checkpoint(path, resolve_lineage: bool = True) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: bad magic")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{path}: unreadable header") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(header.get("format_version"))
    payload = blob[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: payload hash mismatch")
    arch = ArchDescriptor.from_dict(header["arch"])
    values = np.frombuffer(payload, dtype="<f4")
    if values.shape[0] != header["n_params"] or values.shape[0] != arch.n_params(header["head"]):
        raise CorruptCheckpointError(f"{path}: payload length does not match architecture")
    params = ParameterVector(arch, values.astype(np.float32), header["head"])
    ckpt = Checkpoint(params, header["stage"], header["seeds"], tuple(header["parents"]),
                      header["base_hash"], header["meta"])
    if resolve_lineage and ckpt.parents:
        known = _sibling_hashes(path)
        ckpt.lineage_ok = all(p in known for p in ckpt.parents)
        if not ckpt.lineage_ok:
            warnings.warn(f"{path}: parent checkpoints not found next to this file", stacklevel=2)
    return ckpt


def _experiment_root(path: Path) -> Path:
    for d in list(path.parents)[:3]:
        if (d / "manifest.yaml").exists():
            return d
    # loose CLI outputs keep every checkpoint in one directory
    return path.parent


def _sibling_hashes(path: Path) -> set:
    """Hashes recorded by checkpoints under the experiment directory holding ``path``."""
    root = _experiment_root(path)
    found = set()
    for other in root.rglob("*.ckpt"):
        try:
            with open(other, "rb") as f:
                if f.readline() != MAGIC:
                    continue
                found.add(json.loads(f.readline())["hash"])
        except (OSError, ValueError, KeyError):
            continue
    return found
