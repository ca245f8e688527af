"""Model checkpoints: JSON metadata plus a flat little-endian parameter blob.

The manifest lists (name, shape, offset) for every parameter tensor so the
blob can be sliced back without guessing; offsets are in elements, not
bytes.  Loading rebuilds the network from the stored spec and seed, then
overwrites the parameters, giving bit-exact round trips.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import Model, ModelSpec, StageSpec, build_model


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["stages"] = [asdict(s) for s in spec.stages]
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    stages = tuple(StageSpec(**s) for s in d["stages"])
    return ModelSpec(
        stages=stages,
        stem_kernel=d["stem_kernel"],
        stem_stride=d["stem_stride"],
        dropout_p=d["dropout_p"],
    )


def save_checkpoint(model: Model, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    chunks = []
    for name, _, _, p in model.named_params():
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p).reshape(-1))
        offset += p.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=model.dtype)
    meta = {
        "spec": spec_to_dict(model.spec),
        "seed": model.seed,
        "dtype": model.dtype.name,
        "epoch": model.epoch,
        "metrics": model.metrics,
        "n_params": int(offset),
        "manifest": manifest,
    }
    (path / "model.json").write_text(json.dumps(meta, indent=2))
    le = "<f4" if model.dtype == np.float32 else "<f8"
    (path / "params.bin").write_bytes(blob.astype(le).tobytes())


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    dtype = np.dtype(meta["dtype"])
    model = build_model(spec_from_dict(meta["spec"]), seed=meta["seed"], dtype=dtype)
    le = "<f4" if dtype == np.float32 else "<f8"
    blob = np.frombuffer((path / "params.bin").read_bytes(), dtype=le).astype(dtype)
    if blob.size != meta["n_params"]:
        raise ValueError(
            f"checkpoint blob holds {blob.size} values, manifest says {meta['n_params']}"
        )
    by_name = {m["name"]: m for m in meta["manifest"]}
    for name, _, _, p in model.named_params():
        m = by_name[name]
        vals = blob[m["offset"] : m["offset"] + p.size].reshape(m["shape"])
        p[...] = vals
    model.epoch = meta["epoch"]
    model.metrics = meta["metrics"]
    return model
