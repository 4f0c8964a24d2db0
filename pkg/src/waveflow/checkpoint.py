"""Model persistence: a structured-text (JSON) container for flow weights.

The file stores the architecture needed to rebuild the model, the
data-dependent-init state of every activation-normalization layer, and
each parameter array as base64 over little-endian 64-bit floats, so a
round trip reproduces likelihoods bit for bit on any platform.
"""
from __future__ import annotations

import base64
import json
import os

import numpy as np

from .flows import FlowModel, build_glow
from .waveletflow import WaveletFlowModel, build_waveletflow

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded or does not match."""


def _encode_array(a: np.ndarray) -> str:
    buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return base64.b64encode(buf).decode("ascii")


def _decode_array(text: str, shape: list[int], name: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise CheckpointError(f"parameter '{name}' payload is not valid base64") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise CheckpointError(
            f"parameter '{name}' is truncated: got {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _architecture(model: FlowModel | WaveletFlowModel) -> tuple[str, dict]:
    if isinstance(model, WaveletFlowModel):
        return "waveletflow", {
            "image_size": model.image_size,
            "steps_per_level": {str(k): v for k, v in model.steps_per_level.items()},
            "mask_strategy": model.mask_strategy,
            "hidden": model.hidden,
        }
    if isinstance(model, FlowModel):
        c, h, w = model.input_shape
        if h != w:
            raise CheckpointError(f"cannot describe non-square input {model.input_shape}")
        return "glow", {
            "K": model.K,
            "L": model.L,
            "in_channels": c,
            "image_size": h,
            "cond_channels": model.cond_channels,
            "mask_strategy": model.mask_strategy,
            "hidden": model.hidden,
        }
    raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")


def _actnorm_flags(model: FlowModel | WaveletFlowModel) -> dict[str, list[bool]]:
    if isinstance(model, FlowModel):
        return {"flow": [layer.initialized for layer in model.actnorm_layers()]}
    flags = {}
    for level in sorted(model.level_flows):
        flags[f"level{level}"] = [
            layer.initialized for layer in model.level_flows[level].actnorm_layers()
        ]
    return flags


def _apply_actnorm_flags(model: FlowModel | WaveletFlowModel, flags: dict) -> None:
    current = _actnorm_flags(model)
    if set(flags) != set(current) or any(
        len(flags[k]) != len(current[k]) for k in current
    ):
        raise CheckpointError("activation-normalization layout does not match the architecture")
    if isinstance(model, FlowModel):
        groups = {"flow": model.actnorm_layers()}
    else:
        groups = {
            f"level{level}": model.level_flows[level].actnorm_layers()
            for level in sorted(model.level_flows)
        }
    for key, layers in groups.items():
        for layer, flag in zip(layers, flags[key]):
            layer.initialized = bool(flag)


def save_checkpoint(model: FlowModel | WaveletFlowModel, path: str | os.PathLike) -> None:
    family, architecture = _architecture(model)
    payload = {
        "format_version": FORMAT_VERSION,
        "family": family,
        "architecture": architecture,
        "actnorm_initialized": _actnorm_flags(model),
        "parameters": [
            {"name": p.name, "shape": list(p.shape), "data": _encode_array(p.data)}
            for p in model.parameters()
        ],
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> FlowModel | WaveletFlowModel:
    try:
        with open(path, encoding="ascii") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError("checkpoint root must be an object")
    missing = {"format_version", "family", "architecture", "actnorm_initialized", "parameters"} - set(payload)
    if missing:
        raise CheckpointError(f"checkpoint is missing keys: {sorted(missing)}")
    version = payload["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {version!r}; this build reads version {FORMAT_VERSION}"
        )
    family = payload["family"]
    arch = payload["architecture"]
    try:
        if family == "glow":
            model: FlowModel | WaveletFlowModel = build_glow(
                K=arch["K"],
                L=arch["L"],
                in_channels=arch["in_channels"],
                image_size=arch["image_size"],
                cond_channels=arch["cond_channels"],
                mask_strategy=arch["mask_strategy"],
                hidden=arch["hidden"],
            )
        elif family == "waveletflow":
            model = build_waveletflow(
                arch["image_size"],
                steps_per_level={int(k): v for k, v in arch["steps_per_level"].items()},
                mask_strategy=arch["mask_strategy"],
                hidden=arch["hidden"],
            )
        else:
            raise CheckpointError(f"unknown model family {family!r}")
    except KeyError as exc:
        raise CheckpointError(f"architecture is missing field {exc}") from exc
    params = model.parameters()
    entries = payload["parameters"]
    if len(entries) != len(params):
        raise CheckpointError(
            f"checkpoint has {len(entries)} parameters, architecture needs {len(params)}"
        )
    for param, entry in zip(params, entries):
        if entry.get("name") != param.name:
            raise CheckpointError(
                f"parameter name mismatch: file has {entry.get('name')!r}, model expects {param.name!r}"
            )
        if tuple(entry.get("shape", ())) != param.shape:
            raise CheckpointError(
                f"parameter '{param.name}' shape mismatch: file {entry.get('shape')}, model {list(param.shape)}"
            )
        param.data[...] = _decode_array(entry["data"], entry["shape"], param.name)
    _apply_actnorm_flags(model, payload["actnorm_initialized"])
    return model
