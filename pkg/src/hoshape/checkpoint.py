"""Checkpoint container: a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per named parameter group."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SCHEMA_VERSION = 1

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "groups"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"type": "string"},
        "groups": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["file", "tensors"],
                "properties": {
                    "file": {"type": "string"},
                    "tensors": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["name", "shape", "offset", "dtype"],
                        },
                    },
                },
            },
        },
    },
}


def save_groups(directory, kind: str, groups: dict[str, nn.Module], extra: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "kind": kind, "groups": {}}
    for gname, module in groups.items():
        tensors, chunks, offset = [], [], 0
        for name, t in module.state_dict().items():
            arr = t.detach().cpu().numpy()
            tensors.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "dtype": str(arr.dtype),
            })
            flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
            chunks.append(flat)
            offset += flat.size
        fname = f"{gname}.f32"
        blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
        (directory / fname).write_bytes(blob.tobytes())
        manifest["groups"][gname] = {"file": fname, "tensors": tensors}
    manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    return manifest


def load_group(directory, manifest: dict, gname: str, module: nn.Module) -> None:
    info = manifest["groups"][gname]
    blob = np.frombuffer((Path(directory) / info["file"]).read_bytes(), dtype="<f4")
    state = {}
    for t in info["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = blob[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(t["dtype"])
        state[t["name"]] = torch.from_numpy(np.array(arr))
    module.load_state_dict(state)


def validate_manifest(manifest: dict) -> None:
    import jsonschema

    jsonschema.validate(manifest, MANIFEST_SCHEMA)
