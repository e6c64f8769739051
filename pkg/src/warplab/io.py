"""Checkpoint, dataset and table persistence.

Checkpoints and datasets are JSON documents.  Floats are written with
``repr`` (17 significant digits at most, shortest round-trip form), so a
save/load cycle reproduces every bit.  Tabular artifacts are tab-separated
text with a one-line header.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import LabeledSet, NetworkSpec, ParamVector

FORMAT_VERSION = 1


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def save_checkpoint(path, spec: NetworkSpec, params: ParamVector, extra: dict | None = None):
    doc = {
        "kind": "checkpoint",
        "version": FORMAT_VERSION,
        "network": {
            "layer_dims": list(spec.layer_dims),
            "activation": spec.activation,
            "seed": int(spec.seed),
        },
        "manifest": [list(m) for m in params.manifest],
        "values": _floats(params.values),
    }
    if extra:
        doc["extra"] = extra
    _write_json(path, doc)


def load_checkpoint(path) -> tuple[NetworkSpec, ParamVector]:
    doc = _read_json(path, "checkpoint")
    net = doc["network"]
    spec = NetworkSpec(tuple(net["layer_dims"]), net["activation"], int(net["seed"]))
    manifest = tuple((int(l), int(r), int(c), bool(b)) for l, r, c, b in doc["manifest"])
    params = ParamVector(np.array(doc["values"], dtype=np.float64), manifest)
    if manifest != spec.manifest():
        raise ValueError(f"{path}: manifest does not match the stored network")
    return spec, params


def save_dataset(path, data: LabeledSet):
    n, d = data.X.shape
    doc = {
        "kind": "dataset",
        "version": FORMAT_VERSION,
        "shape": [n, d],
        "n_classes": int(data.n_classes),
        "role": data.role,
        "seed": int(data.seed),
        "X": _floats(data.X),
        "y": [int(v) for v in data.y],
    }
    _write_json(path, doc)


def load_dataset(path) -> LabeledSet:
    doc = _read_json(path, "dataset")
    n, d = doc["shape"]
    X = np.array(doc["X"], dtype=np.float64).reshape(n, d)
    return LabeledSet(X, np.array(doc["y"]), doc["role"], int(doc["seed"]), int(doc["n_classes"]))


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _read_json(path, kind):
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")
    return doc


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], sep: str = "\t"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [sep.join(header)]
    lines += [sep.join(_cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def read_table(path, sep: str = "\t") -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(sep)
    return header, [ln.split(sep) for ln in lines[1:] if ln]


def write_pgm(path, img: np.ndarray):
    """Plain (P2) graymap from an array with values in [0, 1]."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    q = np.rint(img * 255).astype(int)
    body = "\n".join(" ".join(str(v) for v in row) for row in q)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"P2\n{w} {h}\n255\n{body}\n")
