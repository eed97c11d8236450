"""Persistence: binary sample matrices with JSON sidecars, maps, observations
and run manifests."""
import datetime as _dt
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .msfem import ReducedBasis2D
from .transport import (LinearConditionalMap, MarginalGaussianizer, StationaryCoarseMap,
                        TriangularMap)

_DTYPE = np.dtype("<f8")


@dataclass
class SampleMatrixFile:
    """A ``rows x cols`` float64 matrix stored as ``<stem>.bin`` plus ``<stem>.json``.

    The payload is little-endian, row-major, with no header; the sidecar
    holds ``rows``, ``cols``, ``column_names``, ``seed`` and ``created``.
    """

    data: np.ndarray
    column_names: list = field(default_factory=list)
    seed: object = None
    created: str = ""

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if not self.column_names:
            self.column_names = [f"x{j}" for j in range(self.data.shape[1])]
        if len(self.column_names) != self.data.shape[1]:
            raise ValueError("one column name per column is required")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def sidecar(self):
        return {"rows": int(self.rows), "cols": int(self.cols),
                "column_names": list(self.column_names), "seed": self.seed,
                "created": self.created or _now()}

    def save(self, path):
        """Write ``path`` (a ``.bin`` file or a stem) and its sidecar; returns the .bin path."""
        bin_path, json_path = _pair(path)
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        meta = self.sidecar()
        self.created = meta["created"]
        with open(bin_path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.data, dtype=_DTYPE).tobytes(order="C"))
        json_path.write_text(json.dumps(meta, indent=2))
        return bin_path

    @classmethod
    def load(cls, path, mmap=False):
        bin_path, json_path = _pair(path)
        meta = json.loads(json_path.read_text())
        rows, cols = int(meta["rows"]), int(meta["cols"])
        size = bin_path.stat().st_size
        if size != rows * cols * _DTYPE.itemsize:
            raise ValueError(f"{bin_path}: payload has {size} bytes, sidecar implies "
                             f"{rows * cols * _DTYPE.itemsize}")
        if mmap:
            data = np.memmap(bin_path, dtype=_DTYPE, mode="r", shape=(rows, cols))
        else:
            data = np.fromfile(bin_path, dtype=_DTYPE).reshape(rows, cols)
        return cls(data, meta.get("column_names") or [], meta.get("seed"), meta.get("created", ""))


def _pair(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_name(stem.name + ".bin"), stem.with_name(stem.name + ".json")


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def save_samples(path, data, column_names=None, seed=None):
    return SampleMatrixFile(data, list(column_names or []), seed).save(path)


def load_samples(path):
    return SampleMatrixFile.load(path).data


# ------------------------------------------------------------------------ maps


def map_to_json(obj):
    """JSON-ready dict for any map object used by the pipeline."""
    if isinstance(obj, TriangularMap):
        return {"kind": "triangular", **obj.to_json()}
    if isinstance(obj, LinearConditionalMap):
        return {"kind": "linear", "mean": obj.mean.tolist(), "gain": obj.gain.tolist(),
                "noise_factor": obj.noise_factor.tolist()}
    if isinstance(obj, StationaryCoarseMap):
        return {"kind": "stationary", "forward_marginal": obj.forward_marginal.to_json(),
                "inverse_marginal": obj.inverse_marginal.to_json(),
                "cholesky_L": obj.cholesky_L.tolist(),
                "marginal_transform": (None if obj.marginal_transform is None
                                       else obj.marginal_transform.to_json())}
    if isinstance(obj, ReducedBasis2D):
        return {"kind": "reduced_basis", **obj.to_json()}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def map_from_json(obj):
    kind = obj.get("kind")
    if kind == "triangular":
        return TriangularMap.from_json(obj)
    if kind == "linear":
        return LinearConditionalMap(np.asarray(obj["mean"], float), np.asarray(obj["gain"], float),
                                    np.asarray(obj["noise_factor"], float))
    if kind == "stationary":
        return StationaryCoarseMap(TriangularMap.from_json(obj["forward_marginal"]),
                                   TriangularMap.from_json(obj["inverse_marginal"]),
                                   np.asarray(obj["cholesky_L"], float),
                                   None if obj.get("marginal_transform") is None
                                   else MarginalGaussianizer.from_json(obj["marginal_transform"]))
    if kind == "reduced_basis":
        return ReducedBasis2D.from_json(obj)
    raise ValueError(f"unknown map kind {kind!r}")


def save_map(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(map_to_json(obj)))
    return path


def load_map(path):
    return map_from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------- observations


def save_observations(path, locations, values, noise_var):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj = {"locations": np.asarray(locations, float).tolist(),
           "values": np.asarray(values, float).tolist(), "noise_var": float(noise_var)}
    path.write_text(json.dumps(obj, indent=2))
    return path


def load_observations(path):
    obj = json.loads(Path(path).read_text())
    for key in ("locations", "values", "noise_var"):
        if key not in obj:
            raise KeyError(f"observation file lacks {key!r}")
    return np.asarray(obj["locations"], float), np.asarray(obj["values"], float), float(obj["noise_var"])


# ------------------------------------------------------------------- manifests


def file_sha256(path, block=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(block), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, seeds, extra=None):
    """Write ``manifest.json`` with the config echo, seeds and a hash of every artifact."""
    out_dir = Path(out_dir)
    artifacts = {}
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            p = Path(root) / name
            if p.name == "manifest.json":
                continue
            artifacts[str(p.relative_to(out_dir))] = file_sha256(p)
    manifest = {"command": command, "config": config, "seeds": seeds,
                "created": _now(), "artifacts": dict(sorted(artifacts.items()))}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_json_default))
    return path


def write_csv_grid(path, values, header=None):
    """Write a 1D or 2D array as CSV (one row per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.atleast_2d(np.asarray(values, float))
    np.savetxt(path, arr, delimiter=",", header=",".join(header) if header else "",
               comments="", fmt="%.10g")
    return path
