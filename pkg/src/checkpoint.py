#!/usr/bin/env python3
"""
Run artifacts: versioned model checkpoints and the per-epoch history stream.

Checkpoints are ``.npz`` containers: one float64 array per parameter, the
dataset id maps, and a JSON ``meta`` record holding the format version,
layer count, ablation flags, split hash and config hash.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from loguru import logger

from errors import IncompatibleCheckpointError
from model import AblationFlags, ParamSet

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A loaded checkpoint."""

    params: ParamSet
    layers: int
    flags: AblationFlags
    user_ids: np.ndarray
    item_ids: np.ndarray
    split_hash: Optional[str] = None
    config_hash: Optional[str] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.params.dim


def save_checkpoint(
    path,
    params: ParamSet,
    layers: int,
    flags: AblationFlags,
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    split_hash: Optional[str] = None,
    config_hash: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``params`` and run metadata; loading reproduces the tensors bitwise."""
    meta = {
        "format_version": FORMAT_VERSION,
        "dim": params.dim,
        "layers": layers,
        "flags": asdict(flags),
        "split_hash": split_hash,
        "config_hash": config_hash,
        **(extra or {}),
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in zip(ParamSet.names(), params.tensors())}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(
            f,
            meta=np.array(json.dumps(meta, sort_keys=True)),
            user_ids=np.asarray(user_ids, dtype=np.int64),
            item_ids=np.asarray(item_ids, dtype=np.int64),
            **arrays,
        )
    tmp.replace(path)
    logger.debug("Checkpoint written", path=str(path), layers=layers)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, refusing unknown format versions."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data["meta"]))
        except (KeyError, ValueError) as e:
            raise IncompatibleCheckpointError(f"{path}: unreadable metadata ({e})")

        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise IncompatibleCheckpointError(
                f"{path}: checkpoint format version {version!r}, expected {FORMAT_VERSION}"
            )
        missing = [name for name in ParamSet.names() if name not in data.files]
        if missing:
            raise IncompatibleCheckpointError(f"{path}: missing arrays {missing}")

        params = ParamSet(*[torch.from_numpy(data[name].copy()) for name in ParamSet.names()])
        user_ids = data["user_ids"].copy()
        item_ids = data["item_ids"].copy()

    if params.dim != meta.get("dim"):
        raise IncompatibleCheckpointError(f"{path}: tables have width {params.dim}, metadata says {meta.get('dim')}")

    return Checkpoint(
        params=params,
        layers=int(meta["layers"]),
        flags=AblationFlags(**meta["flags"]),
        user_ids=user_ids,
        item_ids=item_ids,
        split_hash=meta.get("split_hash"),
        config_hash=meta.get("config_hash"),
        meta=meta,
    )


def check_compatible(
    checkpoint: Checkpoint,
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    split_hash: Optional[str],
    dim: Optional[int] = None,
    layers: Optional[int] = None,
) -> None:
    """Raise IncompatibleCheckpointError if the checkpoint was trained on another catalog, split or shape.

    ``dim`` and ``layers`` are only compared when given.
    """
    if dim is not None and checkpoint.dim != dim:
        raise IncompatibleCheckpointError(f"checkpoint has embedding dimension {checkpoint.dim}, config asks for {dim}")
    if layers is not None and checkpoint.layers != layers:
        raise IncompatibleCheckpointError(
            f"checkpoint was trained with {checkpoint.layers} layers, config asks for {layers}"
        )
    if checkpoint.split_hash is not None and split_hash is not None and checkpoint.split_hash != split_hash:
        raise IncompatibleCheckpointError(
            f"checkpoint was trained on split {checkpoint.split_hash[:12]}, got {split_hash[:12]}"
        )
    if checkpoint.params.user_count != len(user_ids) or checkpoint.params.item_count != len(item_ids):
        raise IncompatibleCheckpointError(
            f"checkpoint covers {checkpoint.params.user_count} users / {checkpoint.params.item_count} items, "
            f"split has {len(user_ids)} / {len(item_ids)}"
        )
    if not (np.array_equal(checkpoint.user_ids, user_ids) and np.array_equal(checkpoint.item_ids, item_ids)):
        raise IncompatibleCheckpointError("checkpoint id maps differ from the split's catalog")


class HistoryWriter:
    """Append-only JSON-lines stream of run records."""

    def __init__(self, path, truncate: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate:
            self.path.write_text("", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    __call__ = write


def read_history(path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
