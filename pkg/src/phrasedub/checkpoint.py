"""Versioned checkpoint container: named parameter arrays plus the configs that built them."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Any, Mapping

import torch
from torch import nn

from .errors import CheckpointError

FORMAT = "phrasedub-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor], configs: Mapping[str, Any],
                    meta: Mapping[str, Any] | None = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "configs": dict(configs),
        "meta": dict(meta or {}),
        "state": {k: v.detach().cpu().clone() for k, v in state.items()},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    Path(path).write_bytes(buffer.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_state_checked(module: nn.Module, state: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``state`` into ``module`` after verifying names and shapes match exactly."""
    expected = module.state_dict()
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, tensor in expected.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"parameter {prefix}{name}: checkpoint shape {tuple(state[name].shape)}, "
                f"model expects {tuple(tensor.shape)}"
            )
    module.load_state_dict(state)
