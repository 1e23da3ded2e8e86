"""Monte-Carlo generation of measurement records from a known state.

Records that share a template are walked forward together as a stack of
conditioned density matrices. Each record draws its uniforms from its own
generator seeded with ``(seed, index)``, so a batch is reproducible
regardless of chunking or worker count, and ``simulate_record`` with seed
``(seed, i)`` reproduces entry ``i`` of ``simulate_batch``.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cavitomo.channels import (
    OUTCOMES,
    ExperimentParams,
    displacement_channel,
    sample_superop,
    wait_superop,
)
from cavitomo.effects import Displace, MeasurementRecord, Sample, Wait
from cavitomo.fockspace import SpaceConfig

log = logging.getLogger(__name__)

CHUNK = 50_000
# a normalized state always has order-one outcome mass; below this it is roundoff
ZERO_TOTAL = 1e-12


class SimulationError(RuntimeError):
    pass


def make_truth_state(kind: str, space: SpaceConfig, *, phase: float = 0.0, vacuum_weight: float = 0.0,
                     coherence_factor: float = 1.0, matrix: np.ndarray | None = None) -> np.ndarray:
    """Named reference state, optionally mixed with vacuum and with damped inter-cavity coherences.

    ``bell_phase``: ``(|1,0> + e^{i phase}|0,1>)/sqrt(2)``. ``vacuum``: ``|0,0>``.
    ``custom``: ``matrix``, which must already be a density matrix.
    ``coherence_factor`` scales every element ``<n1,n2|rho|m1,m2>`` with
    ``n1 != m1`` and ``n2 != m2``.
    """
    if not 0.0 <= vacuum_weight <= 1.0:
        raise ValueError("vacuum_weight must lie in [0, 1]")
    if kind == "bell_phase":
        if space.dim1 < 2 or space.dim2 < 2:
            raise ValueError("bell_phase needs at least two levels in each cavity")
        psi = (space.basis_state(1, 0) + np.exp(1j * phase) * space.basis_state(0, 1)) / np.sqrt(2)
        rho = np.outer(psi, psi.conj())
    elif kind == "vacuum":
        rho = np.outer(space.basis_state(0, 0), space.basis_state(0, 0).conj())
    elif kind == "custom":
        if matrix is None:
            raise ValueError("custom truth state needs a matrix")
        rho = np.asarray(matrix, dtype=complex)
        validate_density(rho, space)
    else:
        raise ValueError(f"unknown truth state kind {kind!r}")
    if vacuum_weight:
        vac = np.outer(space.basis_state(0, 0), space.basis_state(0, 0).conj())
        rho = (1 - vacuum_weight) * rho + vacuum_weight * vac
    if coherence_factor != 1.0:
        n1, n2 = space.photon_numbers()
        cross = (n1[:, None] != n1[None, :]) & (n2[:, None] != n2[None, :])
        rho = np.where(cross, coherence_factor * rho, rho)
    return rho


def validate_density(rho: np.ndarray, space: SpaceConfig, atol: float = 1e-8) -> None:
    if rho.shape != (space.dim, space.dim):
        raise ValueError(f"density matrix shape {rho.shape} does not match dimension {space.dim}")
    if np.abs(rho - rho.conj().T).max() > atol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > atol:
        raise ValueError("density matrix trace is not 1")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -atol:
        raise ValueError("density matrix is not positive semidefinite")


# --- event kernel ----------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _sample_tables(kind: str, space: SpaceConfig, params: ExperimentParams):
    channels = [sample_superop(kind, mu, space, params) for mu in OUTCOMES]
    # Tr[F rho] = vec(F^T) . vec(rho) in row-major order
    povm = np.stack([ch.effect().T.reshape(-1) for ch in channels])
    # transposed forward superoperators, ready for row stacks of vec(rho)
    forward = np.stack([ch.superop().T for ch in channels])
    povm.setflags(write=False)
    forward.setflags(write=False)
    return forward, povm


def sample_probabilities(rho: np.ndarray, kind: str, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    """Raw probabilities of the six read-outs (summing to the truncated Poisson mass)."""
    _, povm = _sample_tables(kind, space, params)
    rho = np.asarray(rho)
    flat = rho.reshape(*rho.shape[:-2], -1)
    return (flat @ povm.T).real


def _renormalize(rho: np.ndarray) -> np.ndarray:
    tr = np.einsum("mii->m", rho).real
    rho = 0.5 * (rho + rho.conj().transpose(0, 2, 1))
    return rho / tr[:, None, None]


def _apply_event(rho: np.ndarray, event, space: SpaceConfig, params: ExperimentParams,
                 u: np.ndarray | None = None):
    """Advance a stack of states by one event; samples also return the chosen outcome indices."""
    m, n, _ = rho.shape
    if isinstance(event, Wait):
        S = wait_superop(event.duration, space, params)
        return _renormalize((rho.reshape(m, n * n) @ S.T).reshape(m, n, n)), None
    if isinstance(event, Displace):
        U = displacement_channel(event.alpha1, event.alpha2, space).kraus[1][0]
        return _renormalize(U @ rho @ U.conj().T), None
    forward, povm = _sample_tables(event.kind, space, params)
    flat = rho.reshape(m, n * n)
    p = (flat @ povm.T).real
    p = np.clip(p, 0.0, None)
    total = p.sum(axis=1)
    if np.any(total <= ZERO_TOTAL):
        raise SimulationError("zero total outcome probability; the truncation is too small for this state")
    cdf = np.cumsum(p, axis=1) / total[:, None]
    choice = np.minimum((cdf < u[:, None]).sum(axis=1), len(OUTCOMES) - 1)
    out = np.empty_like(rho)
    for k in np.unique(choice):
        idx = np.flatnonzero(choice == k)
        out[idx] = (flat[idx] @ forward[k]).reshape(-1, n, n)
    return _renormalize(out), choice


@dataclass
class TrajectoryState:
    """One record under construction together with its conditioned state."""

    rho: np.ndarray
    record: list = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def advance(self, event, space: SpaceConfig, params: ExperimentParams) -> None:
        if isinstance(event, Sample):
            stack, choice = _apply_event(self.rho[None], event, space, params, self.rng.random(1))
            event = Sample(event.kind, OUTCOMES[int(choice[0])])
        else:
            stack, _ = _apply_event(self.rho[None], event, space, params)
        self.rho = stack[0]
        self.record.append(event)


def _seed_entropy(seed) -> list[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def _check_template(template: MeasurementRecord) -> None:
    if any(s.outcome is not None for s in template.samples):
        raise ValueError(f"template {template.id!r} already has outcomes filled in")


def _simulate_group(rho0: np.ndarray, template: MeasurementRecord, space: SpaceConfig,
                    params: ExperimentParams, seeds: Sequence[list[int]]) -> np.ndarray:
    """Outcome indices ``(M, n_samples)`` for records walking the same template."""
    n_samples = len(template.samples)
    u = np.empty((len(seeds), n_samples))
    for i, s in enumerate(seeds):
        u[i] = np.random.default_rng(s).random(n_samples)
    rho = np.broadcast_to(rho0, (len(seeds),) + rho0.shape).astype(complex)
    picks = np.empty((len(seeds), n_samples), dtype=np.int64)
    j = 0
    for ev in template.events:
        rho, choice = _apply_event(rho, ev, space, params, u[:, j] if isinstance(ev, Sample) else None)
        if choice is not None:
            picks[:, j] = choice
            j += 1
    return picks


def simulate_record(rho0: np.ndarray, template: MeasurementRecord, space: SpaceConfig,
                    params: ExperimentParams, seed=0) -> MeasurementRecord:
    """Fill in the outcomes of ``template`` by walking it forward from ``rho0``."""
    rho0 = np.asarray(rho0, dtype=complex)
    validate_density(rho0, space)
    _check_template(template)
    picks = _simulate_group(rho0, template, space, params, [_seed_entropy(seed)])[0]
    return template.with_outcomes([OUTCOMES[k] for k in picks])


def simulate_batch(rho0: np.ndarray, templates: Sequence[MeasurementRecord], space: SpaceConfig,
                   params: ExperimentParams, seed: int = 0, chunk: int = CHUNK) -> list[MeasurementRecord]:
    """One record per template; record ``i`` uses seed ``(seed, i)``.

    Templates without an id get ``r{i:06d}``.
    """
    rho0 = np.asarray(rho0, dtype=complex)
    validate_density(rho0, space)
    templates = list(templates)
    groups: dict[tuple, list[int]] = {}
    seen: dict[int, tuple] = {}
    for i, tpl in enumerate(templates):
        key = seen.get(id(tpl))
        if key is None:
            _check_template(tpl)
            key = seen[id(tpl)] = tpl.structure()
        groups.setdefault(key, []).append(i)
    out: list[MeasurementRecord | None] = [None] * len(templates)
    for indices in groups.values():
        template = templates[indices[0]]
        positions = [j for j, ev in enumerate(template.events) if isinstance(ev, Sample)]
        filled = [[Sample(template.events[j].kind, mu) for mu in OUTCOMES] for j in positions]
        for start in range(0, len(indices), chunk):
            part = indices[start:start + chunk]
            picks = _simulate_group(rho0, template, space, params, [[int(seed), i] for i in part])
            for i, row in zip(part, picks):
                events = list(templates[i].events)
                for j, options, k in zip(positions, filled, row):
                    events[j] = options[k]
                out[i] = MeasurementRecord(tuple(events), templates[i].id or f"r{i:06d}")
        log.debug("simulated %d records for one template", len(indices))
    return out
