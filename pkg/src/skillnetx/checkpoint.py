"""Checkpoint directories: ``manifest.json`` + ``params.npz`` (+ optional train state).

Arrays are stored uncompressed in float64, so a save/load round trip is bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .model import ModelConfig, ParameterStore
from .skills import TaskSpec, TaskType
from .trainer import TrainState

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def spec_to_dict(spec: TaskSpec) -> dict:
    return {
        "task_id": spec.task_id,
        "task_type": spec.task_type.value,
        "language": spec.language,
        "num_classes": spec.num_classes,
        "skills": sorted(str(s) for s in spec.skills),
    }


def spec_from_dict(d: dict, cfg: ModelConfig) -> TaskSpec:
    skills = frozenset(cfg.taxonomy.resolve(s) for s in d["skills"])
    spec = TaskSpec(d["task_id"], TaskType(d["task_type"]), d["language"], int(d["num_classes"]), skills)
    spec.validate(cfg.taxonomy)
    return spec


@dataclass
class Checkpoint:
    cfg: ModelConfig
    store: ParameterStore
    specs: list
    state: Optional[TrainState] = None
    extra: Optional[dict] = None


def save_checkpoint(
    directory: Union[str, Path],
    cfg: ModelConfig,
    store: ParameterStore,
    specs: list,
    state: Optional[TrainState] = None,
    extra: Optional[dict] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "code_version": __version__,
        "model": cfg.to_dict(),
        "tasks": [spec_to_dict(s) for s in specs],
        "owners": dict(store.owners),
        "shapes": {n: list(t.shape) for n, t in store.items()},
        "has_train_state": state is not None,
        "extra": extra or {},
    }
    np.savez(directory / "params.npz", **{n: t.data for n, t in store.items()})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if state is not None:
        state.save(directory)
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{directory} has no manifest.json")
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
    cfg = ModelConfig.from_dict(manifest["model"])
    store = ParameterStore()
    with np.load(directory / "params.npz") as z:
        missing = set(manifest["owners"]) - set(z.files)
        if missing:
            raise CheckpointError(f"params.npz lacks {sorted(missing)[:5]}")
        for name, owner in manifest["owners"].items():
            arr = z[name]
            if list(arr.shape) != manifest["shapes"][name]:
                raise CheckpointError(f"{name}: shape {arr.shape} != manifest {manifest['shapes'][name]}")
            store.add(name, arr, owner)
    specs = [spec_from_dict(d, cfg) for d in manifest["tasks"]]
    state = TrainState.load(directory) if manifest.get("has_train_state") else None
    return Checkpoint(cfg, store, specs, state, manifest.get("extra") or {})
