"""Dataset and checkpoint files.

Dataset directory::

    episodes.jsonl   one episode per line: {"obs": [[...]], "act": [[...]], "dt": s,
                     "ref": [[...]], "start": [...], "goal": [...]}
    stats.json       {"min": [...], "max": [...], "meta": {...}, "version": 1}

Checkpoint (``.npz``): one array per parameter under ``param/<name>`` plus a
``meta`` entry holding a JSON string with ``version``, ``kind`` ("diffog" or
"residual"), the model config and the normalization statistics.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

FORMAT_VERSION = 1


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "episodes.jsonl"), "w") as f:
        for ep in dataset.episodes:
            f.write(json.dumps(ep.to_json()) + "\n")
    stats = {"min": np.asarray(dataset.stats["min"]).tolist(),
             "max": np.asarray(dataset.stats["max"]).tolist(),
             "meta": dataset.meta, "version": FORMAT_VERSION}
    with open(os.path.join(directory, "stats.json"), "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)


def load_dataset(directory):
    from .synth import DemoDataset, Episode

    ep_path = os.path.join(directory, "episodes.jsonl")
    st_path = os.path.join(directory, "stats.json")
    for path in (ep_path, st_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset file {path}")
    with open(ep_path) as f:
        episodes = [Episode.from_json(json.loads(line)) for line in f if line.strip()]
    with open(st_path) as f:
        stats = json.load(f)
    if stats.get("version", FORMAT_VERSION) > FORMAT_VERSION:
        raise ValueError(f"dataset version {stats['version']} is newer than supported")
    st = {"min": np.asarray(stats["min"]), "max": np.asarray(stats["max"])}
    return DemoDataset(episodes, st, stats.get("meta", {}))


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, state: dict, stats=None, extra=None):
    meta = {"version": FORMAT_VERSION, "kind": kind, "config": config,
            "stats": None if stats is None else {k: np.asarray(v).tolist()
                                                 for k, v in stats.items()},
            "extra": extra or {}}
    arrays = {f"param/{name}": value for name, value in state.items()}
    arrays["meta"] = np.array(json.dumps(meta))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns (meta dict, {parameter name: array})."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        state = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    if meta.get("version", 0) > FORMAT_VERSION:
        raise ValueError(f"checkpoint version {meta['version']} is newer than supported")
    return meta, state


def load_model(path):
    """Rebuild the model stored at ``path``; returns (model, meta)."""
    meta, state = load_checkpoint(path)
    if meta["kind"] == "diffog":
        from .layer import DiffogConfig, DiffogModel
        model = DiffogModel(DiffogConfig.from_dict(meta["config"]))
    elif meta["kind"] == "residual":
        from .baselines import ResidualConfig, ResidualModel
        model = ResidualModel(ResidualConfig(**meta["config"]))
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")
    if state:
        model.load_state(state)
    return model, meta
