"""File formats for trajectories, samples, reduction maps, models and reports.

Every binary file is a container::

    b"KSCOPE1\\n"                    magic, 8 bytes
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, sorted keys
    array payloads                   row-major little-endian, back to back

The header carries ``kind``, free-form ``meta`` and an ``arrays`` list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the start
of the payload. Writes go through a temporary file and an atomic rename,
and contain no timestamps, so identical content gives identical bytes.
See ``docs/formats.md`` for the per-kind schemas.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import benchmarks
from .dynamics import SystemSpec, TrajectorySet
from .errors import UsageError
from .features import RegressionSamples
from .metrics import ErrorReport
from .mpls import ReductionMap
from .regression import HypothesisSpace, KernelModel

MAGIC = b"KSCOPE1\n"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, kind: str, meta: dict, arrays: dict):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True).encode()
    atomic_write(path, MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs))


def read_container(path, kind: str | None = None):
    """Return ``(kind, meta, arrays)`` from a container file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise UsageError(f"{path} is not a kernelscope container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if kind is not None and header["kind"] != kind:
        raise UsageError(f"{path} holds {header['kind']!r}, expected {kind!r}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data[start:start + e["nbytes"]],
                                          dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["kind"], header["meta"], arrays


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _missing_kernel(xi, xj):
    raise UsageError("this trajectory set was loaded without a known kernel")


def spec_to_meta(spec: SystemSpec) -> dict:
    return {"N": spec.N, "d": spec.d, "T": spec.T, "L": spec.L,
            "box": np.asarray(spec.box).tolist(), "seed": spec.seed, "n_sub": spec.n_sub,
            "name": spec.name}


def spec_from_meta(meta: dict, kernel=None) -> SystemSpec:
    if kernel is None:
        try:
            kernel = benchmarks.get(meta["name"], **meta.get("system_args", {})).kernel
        except ValueError:
            kernel = _missing_kernel
    return SystemSpec(N=meta["N"], d=meta["d"], T=meta["T"], L=meta["L"], kernel=kernel,
                      box=tuple(tuple(b) for b in meta["box"]), seed=meta["seed"],
                      n_sub=meta["n_sub"], name=meta["name"])


def save_trajectories(path, data: TrajectorySet):
    meta = spec_to_meta(data.spec) | {"M": data.M}
    meta.update(data.meta)
    write_container(path, "trajectories", meta,
                    {"times": data.times, "states": data.states, "velocities": data.velocities})


def load_trajectories(path, kernel=None) -> TrajectorySet:
    _, meta, arr = read_container(path, "trajectories")
    spec = spec_from_meta(meta, kernel)
    extra = {k: v for k, v in meta.items() if k not in spec_to_meta(spec) and k != "M"}
    return TrajectorySet(arr["states"], arr["velocities"], arr["times"], spec, extra)


def save_samples(path, s: RegressionSamples):
    write_container(path, "regression_samples", {"D": s.D, "Q": len(s)},
                    {"y": s.y, "z": s.z, "weight_basis": s.weight_basis, "index": s.index})


def load_samples(path) -> RegressionSamples:
    _, _, a = read_container(path, "regression_samples")
    return RegressionSamples(a["y"], a["z"], a["weight_basis"], a["index"])


def _reduction_meta(B: ReductionMap) -> dict:
    return {"D": B.D, "dprime": B.dprime, "provenance": B.provenance, "info": B.info}


def save_reduction(path, B: ReductionMap):
    write_container(path, "reduction_map", _reduction_meta(B), {"rows": B.rows})


def load_reduction(path) -> ReductionMap:
    _, meta, a = read_container(path, "reduction_map")
    return ReductionMap(a["rows"], meta["provenance"], meta.get("info", {}))


def save_model(path, model: KernelModel):
    sp = model.space
    meta = {"basis_family": sp.family, "degree": sp.degree, "counts": list(sp.counts),
            "reduction": _reduction_meta(model.reduction), "info": model.info}
    write_container(path, "kernel_model", meta,
                    {"support_lo": sp.lo, "support_hi": sp.hi,
                     "coefficients": model.coefficients, "reduction_rows": model.reduction.rows})


def load_model(path) -> KernelModel:
    _, meta, a = read_container(path, "kernel_model")
    sp = HypothesisSpace(meta["basis_family"], meta["degree"], a["support_lo"], a["support_hi"],
                         tuple(meta["counts"]))
    r = meta["reduction"]
    B = ReductionMap(a["reduction_rows"], r["provenance"], r.get("info", {}))
    return KernelModel(sp, a["coefficients"], B, meta.get("info", {}))


def save_report(path, report: ErrorReport):
    """Write the table (``.txt``) and the per-trial values (``.json``) side by side."""
    path = Path(path)
    atomic_write(path.with_suffix(".txt"), report.table().encode())
    atomic_write(path.with_suffix(".json"),
                 (json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n").encode())


def load_report(path) -> ErrorReport:
    return ErrorReport.from_dict(json.loads(Path(path).with_suffix(".json").read_text()))


def write_columns(path, columns: dict, comment: str = ""):
    """Whitespace-separated text columns with a header line naming each column."""
    names = list(columns)
    cols = [np.asarray(columns[n], dtype=float).ravel() for n in names]
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(" ".join(names))
    for row in zip(*cols):
        lines.append(" ".join(repr(float(v)) for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_columns(path) -> dict:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    names = lines[0].split()
    vals = np.array([[float(v) for v in ln.split()] for ln in lines[1:]]).reshape(-1, len(names))
    return {n: vals[:, k] for k, n in enumerate(names)}
