"""Measurement records and their effect matrices.

A record is the time-ordered list of what happened to one realization:
waits, coherent injections, and atomic samples with their detection
outcome. Its effect matrix ``E`` is obtained by running the adjoint maps
backwards from ``I / N_H``; the probability of the record is then
proportional to ``Tr[rho E]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union

import numpy as np

from cavitomo.channels import (
    ExperimentParams,
    Interaction,
    Outcome,
    displacement_channel,
    sample_superop,
    wait_superop,
)
from cavitomo.fockspace import SpaceConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Wait:
    duration: float

    def __post_init__(self):
        if not (self.duration >= 0 and math.isfinite(self.duration)):
            raise ValueError(f"wait duration must be finite and >= 0, got {self.duration}")


@dataclass(frozen=True)
class Displace:
    alpha1: complex = 0j
    alpha2: complex = 0j


@dataclass(frozen=True)
class Sample:
    kind: str
    outcome: Outcome | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Interaction(self.kind).value)
        if self.outcome is not None:
            object.__setattr__(self, "outcome", Outcome.parse(self.outcome))


Event = Union[Wait, Displace, Sample]


@dataclass(frozen=True)
class MeasurementRecord:
    events: tuple
    id: str = ""

    def __post_init__(self):
        events = tuple(self.events)
        if not events:
            raise ValueError("a measurement record needs at least one event")
        for ev in events:
            if not isinstance(ev, (Wait, Displace, Sample)):
                raise TypeError(f"unsupported event {ev!r}")
        object.__setattr__(self, "events", events)

    @property
    def samples(self) -> list[Sample]:
        return [ev for ev in self.events if isinstance(ev, Sample)]

    @property
    def is_filled(self) -> bool:
        return all(s.outcome is not None for s in self.samples)

    def structure(self) -> tuple:
        """The record with every outcome blanked; records sharing it compile together."""
        return tuple(replace(ev, outcome=None) if isinstance(ev, Sample) else ev for ev in self.events)

    def with_outcomes(self, outcomes: Sequence[Outcome], id: str | None = None) -> "MeasurementRecord":
        outcomes = iter(outcomes)
        events = tuple(
            replace(ev, outcome=Outcome.parse(next(outcomes))) if isinstance(ev, Sample) else ev
            for ev in self.events
        )
        return MeasurementRecord(events, self.id if id is None else id)


@dataclass(frozen=True, eq=False)
class EffectMatrix:
    matrix: np.ndarray
    record_id: str = ""


# --- JSON-lines record format -------------------------------------------------


def record_to_dict(record: MeasurementRecord) -> dict:
    events = []
    for ev in record.events:
        if isinstance(ev, Wait):
            events.append({"wait": ev.duration})
        elif isinstance(ev, Displace):
            a1, a2 = complex(ev.alpha1), complex(ev.alpha2)
            events.append({"displace": [a1.real, a1.imag, a2.real, a2.imag]})
        else:
            outcome = None if ev.outcome is None else ev.outcome.value
            events.append({"sample": {"kind": ev.kind, "outcome": outcome}})
    return {"id": record.id, "events": events}


def record_from_dict(data: dict) -> MeasurementRecord:
    if not isinstance(data, dict) or "events" not in data:
        raise ValueError("record must be an object with an 'events' list")
    events = []
    for item in data["events"]:
        if not isinstance(item, dict) or len(item) != 1:
            raise ValueError(f"malformed event {item!r}")
        (key, value), = item.items()
        if key == "wait":
            events.append(Wait(float(value)))
        elif key == "displace":
            re1, im1, re2, im2 = (float(v) for v in value)
            events.append(Displace(complex(re1, im1), complex(re2, im2)))
        elif key == "sample":
            outcome = value.get("outcome")
            events.append(Sample(value["kind"], None if outcome is None else Outcome.parse(outcome)))
        else:
            raise ValueError(f"unknown event type {key!r}")
    return MeasurementRecord(tuple(events), str(data.get("id", "")))


# --- canonical sequences ------------------------------------------------------


def single_res(t: float, id: str = "") -> MeasurementRecord:
    """Free evolution for ``t`` ms, then one resonant probe sample."""
    return MeasurementRecord((Wait(t), Sample("res")), id)


def _sample_train(kind: str, n_samples: int, t_gap: float) -> list:
    if n_samples < 1:
        raise ValueError("need at least one sample")
    events = []
    for j in range(n_samples):
        events.append(Sample(kind))
        if j < n_samples - 1:
            events.append(Wait(t_gap))
    return events


def qnd_scan(t: float, alpha1: complex, alpha2: complex, n_samples: int = 40,
             t_gap: float = 0.2, id: str = "") -> MeasurementRecord:
    """Wait, inject ``(alpha1, alpha2)``, then a train of dispersive parity samples."""
    events = [Wait(t), Displace(complex(alpha1), complex(alpha2))]
    events += _sample_train("dis", n_samples, t_gap)
    return MeasurementRecord(tuple(events), id)


def multi_res(n_samples: int = 40, t_gap: float = 0.2, t: float = 0.0, id: str = "") -> MeasurementRecord:
    """Wait ``t``, then a train of resonant samples ``t_gap`` apart."""
    events = [Wait(t)] + _sample_train("res", n_samples, t_gap)
    return MeasurementRecord(tuple(events), id)


_CANONICAL = {"single_res": single_res, "qnd_scan": qnd_scan, "multi_res": multi_res}


def canonical_sequence(kind: str, **schedule) -> MeasurementRecord:
    try:
        builder = _CANONICAL[kind]
    except KeyError:
        raise ValueError(f"unknown sequence kind {kind!r}; expected one of {sorted(_CANONICAL)}") from None
    return builder(**schedule)


# --- compilation ---------------------------------------------------------------


class EffectCompiler:
    """Compiles records for one (space, params) pair.

    Channel construction is cached at module level; records sharing a
    structure are propagated together as a stack.
    """

    def __init__(self, space: SpaceConfig, params: ExperimentParams):
        self.space = space
        self.params = params

    def compile(self, record: MeasurementRecord) -> EffectMatrix:
        return self.compile_batch([record])[0]

    def compile_batch(self, records: Sequence[MeasurementRecord]) -> list[EffectMatrix]:
        groups: dict[tuple, list[int]] = {}
        for i, rec in enumerate(records):
            if not rec.is_filled:
                raise ValueError(f"record {rec.id!r} has unfilled sample outcomes")
            groups.setdefault(rec.structure(), []).append(i)
        out: list[EffectMatrix | None] = [None] * len(records)
        for indices in groups.values():
            group = [records[i] for i in indices]
            mats = self._propagate(group)
            for i, M in zip(indices, mats):
                out[i] = EffectMatrix(M, records[i].id)
        return out

    def _propagate(self, group: list[MeasurementRecord]) -> np.ndarray:
        n = self.space.dim
        X = np.broadcast_to(np.eye(n, dtype=complex) / n, (len(group), n, n)).copy()
        events = group[0].events
        for j in range(len(events) - 1, -1, -1):
            ev = events[j]
            if isinstance(ev, Wait):
                S = wait_superop(ev.duration, self.space, self.params)
                X = (X.reshape(len(group), n * n) @ S.conj()).reshape(X.shape)
            elif isinstance(ev, Displace):
                U = displacement_channel(ev.alpha1, ev.alpha2, self.space).kraus[1][0]
                X = U.conj().T @ X @ U
            else:
                outcomes = np.array([rec.events[j].outcome.value for rec in group])
                for value in np.unique(outcomes):
                    idx = np.flatnonzero(outcomes == value)
                    channel = sample_superop(ev.kind, Outcome(value), self.space, self.params)
                    X[idx] = channel.apply_adjoint(X[idx])
        H = 0.5 * (X + X.conj().transpose(0, 2, 1))
        drift = np.abs(H - X).max() if X.size else 0.0
        if drift > 1e-10:
            log.warning("effect hermiticity correction %.3g exceeds 1e-10", drift)
        return H


def compile_effect(record: MeasurementRecord, space: SpaceConfig, params: ExperimentParams) -> EffectMatrix:
    return EffectCompiler(space, params).compile(record)


def compile_effects(records: Iterable[MeasurementRecord], space: SpaceConfig,
                    params: ExperimentParams) -> list[EffectMatrix]:
    return EffectCompiler(space, params).compile_batch(list(records))


def stack_effects(effects) -> np.ndarray:
    """Turn a list of :class:`EffectMatrix` / arrays, or an array, into ``(R, N, N)``."""
    if isinstance(effects, np.ndarray):
        arr = effects
    else:
        arr = np.stack([e.matrix if isinstance(e, EffectMatrix) else np.asarray(e) for e in effects])
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"effects must form an (R, N, N) stack, got shape {arr.shape}")
    return arr.astype(complex, copy=False)


def sensitivity_mask(effects) -> np.ndarray:
    """Entrywise ``sum_r |E_pq|``; zeros mark matrix elements the data are blind to."""
    arr = stack_effects(effects)
    if len(arr) == 0:
        raise ValueError("need at least one effect")
    return np.abs(arr).sum(axis=0)
