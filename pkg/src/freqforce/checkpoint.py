"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    bytes 0..3    magic b"FQFC"
    bytes 4..7    u32 format version
    bytes 8..11   u32 header length n
    bytes 12..    n bytes of UTF-8 JSON header (sorted keys)
    then          concatenated float64 little-endian blobs

The header records the architecture, the full run config text, the step
counter, the freeze state, optimizer scalars, both RNG positions and a blob
index ``{name: {"offset", "shape"}}`` with offsets counted in float64 items
from the start of the blob section. Names are ``model.*``, ``bank.*``,
``thresholds.*`` for parameters and ``optim/<buffer>`` for optimizer state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, clone_and_freeze_patch_embed
from .config import RunConfig, dumps, loads

MAGIC = b"FQFC"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> RunConfig:
        return loads(self.header["config"])

    @property
    def arch(self) -> BackboneConfig:
        a = dict(self.header["arch"])
        a["streams"] = tuple(a["streams"])
        return BackboneConfig(**a)


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    index, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_LE_F64)
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += arr.size
    header = dict(header, blobs=index)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(text)) + text)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, n = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    header = json.loads(buf[12 : 12 + n].decode())
    body = np.frombuffer(buf, dtype=_LE_F64, offset=12 + n)
    arrays = {}
    for name, ent in header["blobs"].items():
        size = int(np.prod(ent["shape"], dtype=np.int64))
        arrays[name] = body[ent["offset"] : ent["offset"] + size].reshape(ent["shape"]).astype(np.float64)
    return Checkpoint(header, arrays)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def save_trainer(trainer, path) -> None:
    arrays = {name: p.data for name, p in trainer.named_state()}
    opt = trainer.optimizer.state_dict()
    for k, v in opt["buffers"].items():
        arrays[f"optim/{k}"] = v
    header = {
        "arch": trainer.model.cfg.to_dict(),
        "config": dumps(trainer.cfg),
        "step": trainer.step_count,
        "frozen_copy": trainer.model.frozen_copy,
        "optimizer": {"kind": trainer.cfg.train.optimizer, "t": opt["t"]},
        "rng": _rng_state(trainer.rng),
        "aux_rng": _rng_state(trainer.aux_rng),
    }
    write_checkpoint(path, header, arrays)


def _assign(named, arrays: dict, path) -> None:
    for name, p in named:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()


def load_trainer(path, data=None, eval_data=None):
    """Rebuild a trainer so that the next step is bit-identical to the uninterrupted run."""
    from .training import Trainer

    ck = read_checkpoint(path)
    trainer = Trainer(ck.config, data, eval_data)
    if trainer.model.cfg.to_dict() != ck.header["arch"]:
        raise CheckpointError(f"{path}: architecture does not match the stored config")
    if ck.header["frozen_copy"]:
        clone_and_freeze_patch_embed(trainer.model)
    _assign(trainer.named_state(), ck.arrays, path)
    buffers = {k[len("optim/"):]: v for k, v in ck.arrays.items() if k.startswith("optim/")}
    trainer.optimizer.load_state_dict({"t": ck.header["optimizer"]["t"], "buffers": buffers})
    _set_rng_state(trainer.rng, ck.header["rng"])
    _set_rng_state(trainer.aux_rng, ck.header["aux_rng"])
    trainer.step_count = int(ck.header["step"])
    return trainer


def load_model(path) -> tuple[Backbone, Checkpoint]:
    """Backbone only, for sampling; no dataset or optimizer is built."""
    ck = read_checkpoint(path)
    model = Backbone(ck.arch, seed=0)
    if ck.header["frozen_copy"]:
        clone_and_freeze_patch_embed(model)
    _assign(model.named_parameters("model."), ck.arrays, path)
    return model, ck
