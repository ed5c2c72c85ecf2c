"""Weight checkpoints: a zip of .npy tensors plus a JSON manifest.

The manifest records every tensor's shape/dtype, an integrity hash over the
tensor bytes, the config hash of the run, and optional run state (iteration,
optimizer momentum, RNG state) so training can resume bitwise.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import numpy as np
import torch

CKPT_FORMAT = "actiondet-checkpoint"
CKPT_VERSION = 1


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def state_dict_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().copy()
            for name, t in module.state_dict().items()}


def load_arrays_into(module: torch.nn.Module, arrays: dict[str, np.ndarray]):
    state = {}
    for name, ref in module.state_dict().items():
        if name not in arrays:
            raise KeyError(f"checkpoint is missing tensor {name!r}")
        state[name] = torch.as_tensor(arrays[name]).to(ref.dtype)
    module.load_state_dict(state)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: str = "",
                    meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> str:
    """Write tensors plus metadata; returns the checkpoint content hash."""
    blobs = {}
    entries = {}
    for prefix, group in (("tensors", tensors), ("extra", extra_tensors or {})):
        for name, arr in group.items():
            arr = np.asarray(arr)
            blobs[f"{prefix}/{name}.npy"] = _npy_bytes(arr)
            entries[f"{prefix}/{name}"] = {"shape": list(arr.shape),
                                           "dtype": str(arr.dtype)}
    digest = hashlib.sha256()
    for name in sorted(blobs):
        digest.update(name.encode())
        digest.update(blobs[name])
    content_hash = digest.hexdigest()
    manifest = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "entries": entries,
        "config_hash": config_hash,
        "tensors_sha256": content_hash,
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(blobs):
            zf.writestr(name, blobs[name])
    return content_hash


def load_checkpoint(path):
    """Read a checkpoint; verifies integrity. Returns (tensors, extra, manifest)."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CKPT_FORMAT:
            raise ValueError("not an actiondet checkpoint")
        blobs = {info.filename: zf.read(info.filename)
                 for info in zf.infolist() if info.filename != "manifest.json"}
    digest = hashlib.sha256()
    for name in sorted(blobs):
        digest.update(name.encode())
        digest.update(blobs[name])
    if digest.hexdigest() != manifest["tensors_sha256"]:
        raise ValueError("checkpoint integrity check failed: tensor hash mismatch")
    tensors, extra = {}, {}
    for name, blob in blobs.items():
        arr = np.load(io.BytesIO(blob))
        group, key = name.split("/", 1)
        key = key[: -len(".npy")]
        (tensors if group == "tensors" else extra)[key] = arr
    return tensors, extra, manifest


def checkpoint_hash(path) -> str:
    _, _, manifest = load_checkpoint(path)
    return manifest["tensors_sha256"]
