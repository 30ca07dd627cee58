"""Versioned checkpoint container: named tensors plus the encoder config."""
from __future__ import annotations

import os
from dataclasses import asdict
from pathlib import Path

import torch

from .backbone import EncoderConfig

FORMAT = "cycletrack-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model, optimizer=None, **meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "encoder_config": asdict(model.cfg),
        "token_length": int(model.query_tokens.shape[1]),
        "model": model.state_dict(),
        **meta,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)  # atomic, so an interrupted save never leaves a torn file


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unpickling error types
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(state, dict) or state.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if state.get("version", 0) > VERSION:
        raise CheckpointError(f"{path} has version {state['version']}, newest supported is {VERSION}")
    return state


def latest_checkpoint(directory):
    ckpts = sorted(Path(directory).glob("epoch_*.pt"))
    return ckpts[-1] if ckpts else None


def load_model(path):
    from .model import TrackerModel

    state = load_checkpoint(path)
    model = TrackerModel(EncoderConfig(**state["encoder_config"]), state["token_length"])
    model.load_state_dict(state["model"])
    model.eval()
    return model, state
