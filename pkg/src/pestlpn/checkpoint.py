"""Versioned checkpoint files: backbone description plus every tensor."""
from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .backbone import backbone_spec, build_backbone

CHECKPOINT_FORMAT = "pestlpn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: nn.Module
    training_config: dict | None
    optimizer_state: dict | None
    extra: dict


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(model: nn.Module, path, training_config: dict | None = None,
                    optimizer_state: dict | None = None, extra: dict | None = None,
                    version: int = CHECKPOINT_VERSION) -> None:
    name, config = backbone_spec(model)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": version,
        "backbone": name,
        "backbone_config": config,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "training_config": training_config,
        "optimizer_state": optimizer_state,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}")
    model = build_backbone(payload["backbone"], payload["backbone_config"])
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored config ({exc})") from exc
    model.eval()
    return Checkpoint(model, payload.get("training_config"), payload.get("optimizer_state"),
                      payload.get("extra") or {})
