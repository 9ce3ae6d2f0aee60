"""Checkpoint layout on disk.

``<dir>/manifest.json``
    format tag, version, encoder widths, pooling, seed, epoch, step, parameter count.
``<dir>/params.bin``
    every parameter as little-endian float64, layer by layer (trunk then head,
    weight ``(out, in)`` row-major, then bias).
``<dir>/bank.json``
    JSON array of augmentation records, oldest first (optional).
``<dir>/optim.bin``
    optimizer state as little-endian float64 (optional, needed for exact resume).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .encoder import EncoderParams, count_params, init_params

FORMAT = "guidedcontrast-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
BANK = "bank.json"
OPTIM = "optim.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    directory,
    params: EncoderParams,
    *,
    seed: int,
    epoch: int = 0,
    step: int = 0,
    bank_records: Optional[list] = None,
    optimizer_state: Optional[np.ndarray] = None,
    extra: Optional[dict] = None,
) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "trunk": list(params.trunk_widths),
        "head": list(params.head_widths),
        "pooling": params.pooling,
        "seed": int(seed),
        "epoch": int(epoch),
        "step": int(step),
        "num_params": params.num_params(),
        "dtype": "<f8",
    }
    if extra:
        manifest.update(extra)
    (d / BLOB).write_bytes(params.flat().astype("<f8").tobytes())
    if optimizer_state is not None:
        (d / OPTIM).write_bytes(np.asarray(optimizer_state, dtype="<f8").tobytes())
    if bank_records is not None:
        (d / BANK).write_text(json.dumps(bank_records, separators=(",", ":")) + "\n")
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint manifest not found") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: version {manifest.get('version')} is not supported (expected {VERSION})"
        )
    return manifest


def _diff(manifest: dict, expected: dict) -> list[str]:
    return [
        f"{k}: checkpoint={manifest.get(k)!r} expected={v!r}"
        for k, v in expected.items()
        if manifest.get(k) != v
    ]


def load_checkpoint(directory, expect: Optional[dict] = None):
    """Returns ``(params, bank_records or None, manifest)``.

    ``expect`` maps manifest keys (``trunk``, ``head``, ``pooling``, ...) to
    required values; any difference is reported key by key.
    """
    d = Path(directory)
    manifest = read_manifest(d)
    if expect:
        diff = _diff(manifest, {k: list(v) if isinstance(v, tuple) else v for k, v in expect.items()})
        if diff:
            raise CheckpointError("checkpoint does not match configuration: " + "; ".join(diff))
    trunk, head = manifest["trunk"], manifest["head"]
    n = count_params(trunk, head)
    if n != manifest.get("num_params"):
        raise CheckpointError(
            f"manifest declares {manifest.get('num_params')} parameters but widths imply {n}"
        )
    try:
        raw = (d / BLOB).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{d / BLOB}: parameter blob not found") from None
    if len(raw) != 8 * n:
        raise CheckpointError(
            f"{d / BLOB}: corrupt parameter blob, expected {8 * n} bytes, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{d / BLOB}: corrupt parameter blob, non-finite values")
    template = init_params(trunk, head, seed=0, pooling=manifest.get("pooling", "max"))
    params = template.with_flat(flat)
    bank = None
    if (d / BANK).exists():
        try:
            bank = json.loads((d / BANK).read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{d / BANK}: unreadable bank: {exc}") from None
        if not isinstance(bank, list):
            raise CheckpointError(f"{d / BANK}: bank must be a JSON array")
    return params, bank, manifest


def load_optimizer_state(directory) -> Optional[np.ndarray]:
    """The saved optimizer state, or ``None`` when the checkpoint has none."""
    path = Path(directory) / OPTIM
    if not path.exists():
        return None
    raw = path.read_bytes()
    if len(raw) % 8:
        raise CheckpointError(f"{path}: corrupt optimizer state, {len(raw)} bytes")
    state = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(state)):
        raise CheckpointError(f"{path}: corrupt optimizer state, non-finite values")
    return state
