"""File formats.

Complex numbers are ``[re, im]`` pairs and matrices are row-major, in the
basis order of :mod:`cavitomo.fockspace`. Density matrices::

    {"version": 1, "dims": [dim1, dim2], "matrix": [[re, im], ...]}

Records are JSON lines (one :func:`cavitomo.effects.record_to_dict` object
per line). Effect caches are ``.npz`` files carrying a schema version, the
record ids and a content key.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cavitomo.channels import ExperimentParams
from cavitomo.effects import EffectMatrix, MeasurementRecord, record_from_dict, record_to_dict
from cavitomo.fockspace import SpaceConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file content."""


def complex_to_pairs(values) -> list:
    arr = np.asarray(values, dtype=complex).reshape(-1)
    return [[float(z.real), float(z.imag)] for z in arr]


def pairs_to_complex(pairs, shape) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FormatError("complex values must be [re, im] pairs")
    out = arr[:, 0] + 1j * arr[:, 1]
    if out.size != int(np.prod(shape)):
        raise FormatError(f"expected {int(np.prod(shape))} entries, got {out.size}")
    return out.reshape(shape)


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, allow_nan=False)
        fh.write("\n")


def write_state(path, rho: np.ndarray, space: SpaceConfig) -> None:
    rho = np.asarray(rho)
    if rho.shape != (space.dim, space.dim):
        raise ValueError(f"state shape {rho.shape} does not match {space.dim1}x{space.dim2}")
    write_json(path, {"version": FORMAT_VERSION, "dims": [space.dim1, space.dim2],
                      "matrix": complex_to_pairs(rho)})


def read_state(path) -> tuple[np.ndarray, SpaceConfig]:
    path = Path(path)
    data = _read_json(path)
    try:
        space = SpaceConfig(*data["dims"])
        rho = pairs_to_complex(data["matrix"], (space.dim, space.dim))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a density-matrix file ({exc})") from None
    return rho, space


def write_params(path, params: ExperimentParams) -> None:
    write_json(path, {"version": FORMAT_VERSION, **params.to_dict()})


def read_params(path) -> ExperimentParams:
    data = dict(_read_json(Path(path)))
    data.pop("version", None)
    return ExperimentParams.from_dict(data)


def write_records(path, records: Iterable[MeasurementRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")))
            fh.write("\n")


def read_records(path) -> list[MeasurementRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return records


# --- effect cache -----------------------------------------------------------------


def cache_key(records_path, space: SpaceConfig, params: ExperimentParams) -> str:
    h = hashlib.sha256()
    h.update(f"v{FORMAT_VERSION}|{space.dim1}x{space.dim2}|".encode())
    h.update(json.dumps(params.to_dict(), sort_keys=True).encode())
    with open(records_path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_effect_cache(path, effects: Sequence[EffectMatrix], key: str, space: SpaceConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = space.dim
    mats = np.stack([e.matrix for e in effects]) if effects else np.zeros((0, n, n), dtype=complex)
    ids = np.array([e.record_id for e in effects], dtype=str)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, version=FORMAT_VERSION, key=key, dims=[space.dim1, space.dim2],
                            effects=mats, ids=ids)


def read_effect_cache(path) -> tuple[np.ndarray, list[str], str, SpaceConfig]:
    """``(effects, ids, key, space)`` from an effect cache."""
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != FORMAT_VERSION:
                raise FormatError(f"{path}: cache version {version}, expected {FORMAT_VERSION}")
            effects = data["effects"].astype(complex)
            ids = [str(s) for s in data["ids"]]
            key = str(data["key"])
            space = SpaceConfig(*(int(d) for d in data["dims"]))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: not an effect cache ({exc})") from None
    return effects, ids, key, space
