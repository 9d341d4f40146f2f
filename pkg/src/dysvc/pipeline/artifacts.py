"""Content-addressed checkpoint and feature cache.

A checkpoint is stored as ``<phase>-<key>.dysvc`` (DYSVC1 parameters) plus
``<phase>-<key>.json`` holding everything needed to rebuild the model, the
loss curve and the SHA-256 of the parameter file.  ``key`` hashes the
configuration slice and upstream keys the phase depends on, so unrelated
configuration changes never invalidate it.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..nncore import IntegrityError, Module, checkpoint
from .config import config_hash

CACHE_ENV = "DYSVC_CACHE_DIR"


def cache_root(out_dir) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(out_dir) / "cache"


def phase_key(phase: str, **parts) -> str:
    return config_hash({"phase": phase, **parts})[:20]


@dataclass
class StoredCheckpoint:
    path: Path
    meta: dict

    @property
    def sha256(self) -> str:
        return self.meta["sha256"]


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)

    def checkpoint_path(self, phase: str, key: str) -> Path:
        return self.root / "checkpoints" / f"{phase}-{key}.dysvc"

    def has_checkpoint(self, phase: str, key: str) -> bool:
        path = self.checkpoint_path(phase, key)
        return path.is_file() and path.with_suffix(".json").is_file()

    def save_checkpoint(self, phase: str, key: str, model: Module, meta: dict) -> StoredCheckpoint:
        path = self.checkpoint_path(phase, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        digest = checkpoint.save(model.state_dict(), tmp)
        os.replace(tmp, path)
        meta = {**meta, "phase": phase, "key": key, "sha256": digest}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return StoredCheckpoint(path, meta)

    def load_checkpoint(self, phase: str, key: str) -> tuple[dict[str, np.ndarray], StoredCheckpoint]:
        path = self.checkpoint_path(phase, key)
        meta_path = path.with_suffix(".json")
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{meta_path}: unreadable checkpoint metadata ({exc})") from None
        if not path.is_file():
            raise IntegrityError(f"{path}: checkpoint file missing next to its metadata")
        blob = path.read_bytes()
        state = checkpoint.loads(blob, source=str(path))
        actual = hashlib.sha256(blob).hexdigest()
        if actual != meta.get("sha256"):
            raise IntegrityError(f"{path}: content hash {actual[:12]} does not match recorded {str(meta.get('sha256'))[:12]}")
        return state, StoredCheckpoint(path, meta)

    def feature_dir(self, key: str) -> Path:
        return self.root / "features" / key
