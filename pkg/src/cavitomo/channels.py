"""Kraus maps for the two-cavity experiment.

Covers resonant (one and two atom) and dispersive probe samples, imperfect
atom detection, thermal cavity relaxation, detuning rotation and coherent
injection. Every map is a :class:`KrausChannel`; adjoints are obtained by
daggering the Kraus operators.

Units: times in ms, angular frequencies in rad/ms. Frequencies enter JSON
configs as ordinary frequencies in kHz and are converted once in
:meth:`ExperimentParams.from_dict`.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cavitomo.fockspace import (
    SpaceConfig,
    annihilation,
    creation,
    detuning_rotation,
    displacement,
    lift,
    number,
)

TWO_PI = 2.0 * math.pi


class Outcome(str, enum.Enum):
    """Detection result of one atomic sample. ``eg`` is folded into ``ge``."""

    NONE = "none"
    G = "g"
    E = "e"
    GG = "gg"
    GE = "ge"
    EE = "ee"

    @classmethod
    def parse(cls, value: "str | Outcome") -> "Outcome":
        if isinstance(value, Outcome):
            return value
        text = str(value).strip().lower()
        if text == "eg":
            text = "ge"
        if text in ("", "0", "null", "empty", "∅"):
            text = "none"
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown outcome {value!r}") from None

    @property
    def n_atoms(self) -> int:
        return 0 if self is Outcome.NONE else len(self.value)


OUTCOMES: tuple[Outcome, ...] = tuple(Outcome)
_OUTCOME_POS = {o: i for i, o in enumerate(OUTCOMES)}


class Interaction(str, enum.Enum):
    RES = "res"
    DIS = "dis"


@dataclass(frozen=True)
class ExperimentParams:
    """Physical parameters, in ms and rad/ms.

    ``t1``/``t2`` default to a pi pulse in C1 and a pi/2 pulse in C2 for the
    given ``omega0``. ``forced_atoms`` replaces the Poisson atom statistics by
    a fixed atom number (0, 1 or 2), which is handy for ideal-probe checks.
    """

    omega0: float = TWO_PI * 49.0
    delta: float = TWO_PI * 8.9
    tc1: float = 20.0
    tc2: float = 50.0
    nth1: float = 0.06
    nth2: float = 0.06
    eps_det: float = 0.5
    eta_g: float = 0.05
    eta_e: float = 0.07
    mean_atoms: float = 0.1
    t1: float | None = None
    t2: float | None = None
    trotter_tau: float = 0.1
    t_gap: float = 0.2
    forced_atoms: int | None = None
    max_xi: float = 0.1

    def __post_init__(self):
        if self.t1 is None:
            object.__setattr__(self, "t1", math.pi / self.omega0)
        if self.t2 is None:
            object.__setattr__(self, "t2", math.pi / (2.0 * self.omega0))
        for name in ("eps_det", "eta_g", "eta_e"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for name in ("tc1", "tc2", "trotter_tau", "t_gap", "max_xi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("t1", "t2", "nth1", "nth2", "mean_atoms", "omega0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.forced_atoms not in (None, 0, 1, 2):
            raise ValueError("forced_atoms must be None, 0, 1 or 2")

    def replace(self, **changes) -> "ExperimentParams":
        if ("omega0" in changes) and "t1" not in changes and "t2" not in changes:
            changes.setdefault("t1", None)
            changes.setdefault("t2", None)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """Flat JSON-ready dict; frequencies in kHz, times in ms."""
        return {
            "omega0_khz": self.omega0 / TWO_PI,
            "delta_khz": self.delta / TWO_PI,
            "tc1": self.tc1,
            "tc2": self.tc2,
            "nth1": self.nth1,
            "nth2": self.nth2,
            "eps_det": self.eps_det,
            "eta_g": self.eta_g,
            "eta_e": self.eta_e,
            "mean_atoms": self.mean_atoms,
            "t1": self.t1,
            "t2": self.t2,
            "trotter_tau": self.trotter_tau,
            "t_gap": self.t_gap,
            "forced_atoms": self.forced_atoms,
            "max_xi": self.max_xi,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentParams":
        data = dict(data)
        kwargs = {}
        if "omega0_khz" in data:
            kwargs["omega0"] = TWO_PI * float(data.pop("omega0_khz"))
        if "delta_khz" in data:
            kwargs["delta"] = TWO_PI * float(data.pop("delta_khz"))
        known = {f.name for f in dataclasses.fields(cls)} - {"omega0", "delta"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        for key, value in data.items():
            kwargs[key] = value if value is None or key == "forced_atoms" else float(value)
        return cls(**kwargs)


def poisson_weights(params: ExperimentParams) -> np.ndarray:
    """Atom-number probabilities ``P_a(0..2)``; three and more atoms are dropped."""
    if params.forced_atoms is not None:
        weights = np.zeros(3)
        weights[params.forced_atoms] = 1.0
        return weights
    nbar = params.mean_atoms
    return np.array([math.exp(-nbar) * nbar**k / math.factorial(k) for k in range(3)])


def detection_matrix(eps: float, eta_g: float, eta_e: float) -> np.ndarray:
    """Stochastic matrix ``P[measured, ideal]`` in :data:`OUTCOMES` order.

    Columns sum to one. ``eps`` is the detection efficiency, ``eta_g``
    (``eta_e``) the probability to read ``g`` as ``e`` (``e`` as ``g``).
    """
    q = 1.0 - eps
    ng, ne = 1.0 - eta_g, 1.0 - eta_e
    N, G, E, GG, GE, EE = range(6)
    P = np.zeros((6, 6))
    P[N, N] = 1.0

    P[N, G] = q
    P[G, G] = eps * ng
    P[E, G] = eps * eta_g

    P[N, E] = q
    P[G, E] = eps * eta_e
    P[E, E] = eps * ne

    P[N, GG] = q**2
    P[G, GG] = 2 * eps * q * ng
    P[E, GG] = 2 * eps * q * eta_g
    P[GG, GG] = eps**2 * ng**2
    P[GE, GG] = 2 * eps**2 * eta_g * ng
    P[EE, GG] = eps**2 * eta_g**2

    P[N, EE] = q**2
    P[G, EE] = 2 * eps * q * eta_e
    P[E, EE] = 2 * eps * q * ne
    P[GG, EE] = eps**2 * eta_e**2
    P[GE, EE] = 2 * eps**2 * eta_e * ne
    P[EE, EE] = eps**2 * ne**2

    P[N, GE] = q**2
    P[G, GE] = eps * q * (ng + eta_e)
    P[E, GE] = eps * q * (ne + eta_g)
    P[GG, GE] = eps**2 * eta_e * ng
    P[GE, GE] = eps**2 * (ng * ne + eta_g * eta_e)
    P[EE, GE] = eps**2 * eta_g * ne
    return P


# --- Kraus channel container -------------------------------------------------


@dataclass(frozen=True, eq=False)
class KrausChannel:
    """Weighted family of Kraus maps ``rho -> sum_b w_b sum_k K rho K^dag``."""

    branches: tuple[tuple[float, tuple[np.ndarray, ...]], ...]
    label: str = ""
    _stack: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ops, weights = [], []
        for weight, kraus in self.branches:
            if weight < 0:
                raise ValueError(f"negative branch weight {weight} in {self.label!r}")
            if weight == 0:
                continue
            for K in kraus:
                ops.append(np.asarray(K, dtype=complex))
                weights.append(float(weight))
        if not ops:
            dim = np.asarray(self.branches[0][1][0]).shape[0] if self.branches else 0
            ops = [np.zeros((dim, dim), dtype=complex)]
            weights = [0.0]
        stack = np.stack(ops)
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", (np.array(weights), stack))

    @classmethod
    def unitary(cls, U: np.ndarray, label: str = "") -> "KrausChannel":
        return cls(((1.0, (np.asarray(U, dtype=complex),)),), label)

    @property
    def dim(self) -> int:
        return self._stack[1].shape[-1]

    @property
    def kraus(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(weights, operators)`` with one weight per operator."""
        return self._stack

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Forward action; ``rho`` may be a single matrix or a stack ``(M, N, N)``."""
        weights, ops = self._stack
        out = np.zeros(np.shape(rho), dtype=complex)
        for w, K in zip(weights, ops):
            out += w * (K @ rho @ K.conj().T)
        return out

    def apply_adjoint(self, X: np.ndarray) -> np.ndarray:
        weights, ops = self._stack
        out = np.zeros(np.shape(X), dtype=complex)
        for w, K in zip(weights, ops):
            out += w * (K.conj().T @ X @ K)
        return out

    def adjoint(self) -> "KrausChannel":
        branches = tuple(
            (w, tuple(np.asarray(K).conj().T for K in kraus)) for w, kraus in self.branches
        )
        return KrausChannel(branches, f"adjoint({self.label})")

    def effect(self) -> np.ndarray:
        """``sum w K^dag K``, i.e. the adjoint applied to the identity."""
        return self.apply_adjoint(np.eye(self.dim, dtype=complex))

    def superop(self) -> np.ndarray:
        """Matrix of the forward map on row-major ``vec(rho)``."""
        weights, ops = self._stack
        n = self.dim
        S = np.zeros((n * n, n * n), dtype=complex)
        for w, K in zip(weights, ops):
            S += w * np.kron(K, K.conj())
        return S


# --- resonant interaction ------------------------------------------------------


def _chi(n: np.ndarray | int, omega0: float):
    n = np.asarray(n, dtype=float)
    return np.where(n < 0, 0.0, omega0 * np.sqrt(np.maximum(n, 0) + 1.0) / 2.0)


def _xi(n: np.ndarray | int, omega0: float):
    n = np.asarray(n, dtype=float)
    return np.where(n < 0, 0.0, omega0 * np.sqrt(np.maximum(n, 0) + 0.5))


def _banded(dim: int, shift: int, values) -> np.ndarray:
    """Matrix with ``values[n]`` at ``|n + shift><n|`` for every n staying in range."""
    W = np.zeros((dim, dim), dtype=complex)
    values = np.broadcast_to(np.asarray(values, dtype=complex), (dim,))
    for n in range(dim):
        m = n + shift
        if 0 <= m < dim:
            W[m, n] = values[n]
    return W


def rabi_one_atom(t: float, initial: str, detected: str, dim: int, omega0: float) -> np.ndarray:
    """Single-cavity Kraus operator for one resonant atom, ``initial -> detected``."""
    n = np.arange(dim)
    key = (initial, detected)
    if key == ("g", "g"):
        return _banded(dim, 0, np.cos(_chi(n - 1, omega0) * t))
    if key == ("g", "e"):
        return _banded(dim, -1, -1j * np.sin(_chi(n - 1, omega0) * t))
    if key == ("e", "g"):
        return _banded(dim, +1, -1j * np.sin(_chi(n, omega0) * t))
    if key == ("e", "e"):
        return _banded(dim, 0, np.cos(_chi(n, omega0) * t))
    raise ValueError(f"atomic states must be 'g' or 'e', got {key}")


TWO_ATOM_STATES = ("ee", "eg", "ge", "gg")


def rabi_two_atom(t: float, initial: str, detected: str, dim: int, omega0: float) -> np.ndarray:
    """Single-cavity Kraus operator for two atoms crossing the mode together."""
    if initial not in TWO_ATOM_STATES or detected not in TWO_ATOM_STATES:
        raise ValueError(f"two-atom states must be one of {TWO_ATOM_STATES}")
    n = np.arange(dim, dtype=float)
    # ge rows mirror eg rows with the eg/ge outcome labels swapped
    if initial == "ge":
        initial = "eg"
        detected = {"eg": "ge", "ge": "eg"}.get(detected, detected)

    c1 = np.cos(_xi(n + 1, omega0) * t)
    c0 = np.cos(_xi(n, omega0) * t)
    s1 = np.sin(_xi(n + 1, omega0) * t)
    s0 = np.sin(_xi(n, omega0) * t)
    amp_upper = np.sqrt((n + 1) / (2 * (2 * n + 3)))
    amp_lower = np.sqrt((n + 1) / (2 * (2 * n + 1)))
    amp_double = np.sqrt((n + 1) * (n + 2)) / (2 * n + 3)

    key = (initial, detected)
    if key == ("ee", "ee"):
        return _banded(dim, 0, 1 + (n + 1) / (2 * n + 3) * (c1 - 1))
    if key in (("ee", "eg"), ("ee", "ge")):
        return _banded(dim, +1, -1j * amp_upper * s1)
    if key == ("ee", "gg"):
        return _banded(dim, +2, amp_double * (c1 - 1))
    if key == ("eg", "ee"):
        return _banded(dim, -1, np.concatenate([[0.0], -1j * amp_upper[:-1] * s1[:-1]]))
    if key == ("eg", "eg"):
        return _banded(dim, 0, 0.5 * (1 + c0))
    if key == ("eg", "ge"):
        return _banded(dim, 0, 0.5 * (-1 + c0))
    if key == ("eg", "gg"):
        return _banded(dim, +1, -1j * amp_lower * s0)
    if key == ("gg", "ee"):
        vals = np.concatenate([[0.0, 0.0], (amp_double * (c1 - 1))[:-2]]) if dim > 2 else np.zeros(dim)
        return _banded(dim, -2, vals[:dim])
    if key in (("gg", "eg"), ("gg", "ge")):
        return _banded(dim, -1, np.concatenate([[0.0], -1j * amp_lower[:-1] * s0[:-1]]))
    # gg -> gg; the n/(2n-1) prefactor vanishes at n = 0
    cm = np.cos(_xi(n - 1, omega0) * t)
    return _banded(dim, 0, 1 + n / (2 * n - 1) * (cm - 1))


def resonant_sample_operator(outcome: Outcome, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    """Two-cavity Kraus operator of a resonant sample prepared in ``g`` (or ``gg``)."""
    outcome = Outcome.parse(outcome)
    t1, t2, w0 = params.t1, params.t2, params.omega0
    d1, d2 = space.dim1, space.dim2
    if outcome.n_atoms == 1:
        final = outcome.value
        return sum(
            lift(rabi_one_atom(t1, "g", k, d1, w0), rabi_one_atom(t2, k, final, d2, w0), space)
            for k in ("g", "e")
        )
    if outcome.n_atoms == 2:
        final = outcome.value
        return sum(
            lift(rabi_two_atom(t1, "gg", k, d1, w0), rabi_two_atom(t2, k, final, d2, w0), space)
            for k in TWO_ATOM_STATES
        )
    raise ValueError("a resonant sample operator needs a detected outcome")


def resonant_sample_channel(outcome: Outcome, space: SpaceConfig, params: ExperimentParams) -> list[np.ndarray]:
    return [resonant_sample_operator(outcome, space, params)]


_COS_QUARTER = np.array([1.0, 0.0, -1.0, 0.0])
_SIN_QUARTER = np.array([0.0, 1.0, 0.0, -1.0])


def dispersive_sample_operator(outcome: Outcome, space: SpaceConfig) -> np.ndarray:
    """Parity-probe Kraus operator, ``cos(N pi/2)`` / ``sin(N pi/2)`` and products."""
    outcome = Outcome.parse(outcome)
    if outcome is Outcome.NONE:
        raise ValueError("a dispersive sample operator needs a detected outcome")
    n1, n2 = space.photon_numbers()
    total = (n1 + n2) % 4
    single = {"g": _COS_QUARTER[total], "e": _SIN_QUARTER[total]}
    diag = np.ones(space.dim)
    for atom in outcome.value:
        diag = diag * single[atom]
    return np.diag(diag).astype(complex)


def dispersive_sample_channel(outcome: Outcome, space: SpaceConfig) -> list[np.ndarray]:
    return [dispersive_sample_operator(outcome, space)]


def ideal_sample_operators(kind: str, space: SpaceConfig, params: ExperimentParams) -> dict[Outcome, np.ndarray]:
    kind = Interaction(kind)
    ops = {}
    for outcome in OUTCOMES[1:]:
        if kind is Interaction.RES:
            ops[outcome] = resonant_sample_operator(outcome, space, params)
        else:
            ops[outcome] = dispersive_sample_operator(outcome, space)
    return ops


@functools.lru_cache(maxsize=256)
def sample_superop(kind: str, measured: Outcome, space: SpaceConfig, params: ExperimentParams) -> KrausChannel:
    """Unnormalized map of a sample read as ``measured``.

    ``sum_mu P(measured|mu) L_mu`` with ``L_none = P_a(0) id``,
    ``L_g/e = P_a(1) M``, ``L_gg/ee = P_a(2) M`` and ``L_ge = 2 P_a(2) M``.
    """
    kind = Interaction(kind)
    measured = Outcome.parse(measured)
    pa = poisson_weights(params)
    P = detection_matrix(params.eps_det, params.eta_g, params.eta_e)
    ideal = ideal_sample_operators(kind.value, space, params)
    row = P[_OUTCOME_POS[measured]]
    branches = []
    for mu in OUTCOMES:
        prob = row[_OUTCOME_POS[mu]]
        if mu is Outcome.NONE:
            weight, ops = prob * pa[0], (space.identity(),)
        else:
            multiplicity = 2.0 if mu is Outcome.GE else 1.0
            weight, ops = prob * pa[mu.n_atoms] * multiplicity, (ideal[mu],)
        if weight > 0:
            branches.append((weight, ops))
    if not branches:
        branches.append((0.0, (np.zeros((space.dim, space.dim), dtype=complex),)))
    return KrausChannel(tuple(branches), f"sample[{kind.value}:{measured.value}]")


# --- relaxation, rotation, injection ------------------------------------------


def jump_operators(xi: float, nth: float, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(J_0, J_down, J_up)`` for one cavity over a step ``xi = tau / T_c``."""
    a = annihilation(dim)
    J0 = (1 - xi * nth / 2) * np.eye(dim) - xi * (0.5 + nth) * number(dim)
    Jd = math.sqrt(xi * (1 + nth)) * a
    Ju = math.sqrt(xi * nth) * creation(dim)
    return J0, Jd, Ju


@functools.lru_cache(maxsize=512)
def relax_channel(tau: float, space: SpaceConfig, params: ExperimentParams) -> KrausChannel:
    """Thermal relaxation of both cavities during ``tau`` ms (tensor product of jump maps)."""
    if tau <= 0:
        raise ValueError("relaxation step must have tau > 0")
    xi1, xi2 = tau / params.tc1, tau / params.tc2
    worst = max(xi1, xi2)
    if worst > params.max_xi:
        raise ValueError(
            f"relaxation step tau={tau} ms gives tau/T_c={worst:.3g} > {params.max_xi}; "
            "reduce the Trotter step"
        )
    ops1 = jump_operators(xi1, params.nth1, space.dim1)
    ops2 = jump_operators(xi2, params.nth2, space.dim2)
    kraus = tuple(lift(A, B, space) for A in ops1 for B in ops2)
    return KrausChannel(((1.0, kraus),), f"relax[{tau:g}ms]")


def relax_step(X: np.ndarray, tau: float, space: SpaceConfig, params: ExperimentParams,
               adjoint: bool = False) -> np.ndarray:
    channel = relax_channel(float(tau), space, params)
    return channel.apply_adjoint(X) if adjoint else channel.apply(X)


def rotation_channel(tau: float, space: SpaceConfig, params: ExperimentParams) -> KrausChannel:
    return KrausChannel.unitary(detuning_rotation(tau, params.delta, space), f"rotate[{tau:g}ms]")


def displacement_channel(alpha1: complex, alpha2: complex, space: SpaceConfig) -> KrausChannel:
    U = lift(displacement(alpha1, space.dim1), displacement(alpha2, space.dim2), space)
    return KrausChannel.unitary(U, f"displace[{alpha1},{alpha2}]")


def adjoint_channel(channel: KrausChannel) -> KrausChannel:
    return channel.adjoint()


def trotter_steps(duration: float, tau: float) -> list[float]:
    """Split a wait into whole steps of ``tau`` plus one remainder step."""
    if duration < 0:
        raise ValueError("wait duration must be >= 0")
    if duration == 0:
        return []
    whole = math.floor(duration / tau + 1e-9)
    rest = duration - whole * tau
    steps = [tau] * whole
    if rest > 1e-12 * max(1.0, duration):
        steps.append(rest)
    return steps


def wait_superop(duration: float, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    """Forward superoperator of a wait: relaxation then rotation, repeated per Trotter step."""
    return _wait_superop_cached(round(float(duration), 12), space, params)


def _step_superop(tau: float, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    S_relax = relax_channel(tau, space, params).superop()
    S_rot = rotation_channel(tau, space, params).superop()
    return S_rot @ S_relax


@functools.lru_cache(maxsize=64)
def _step_power_of_two(j: int, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    if j == 0:
        S = _step_superop(params.trotter_tau, space, params)
    else:
        half = _step_power_of_two(j - 1, space, params)
        S = half @ half
    S.setflags(write=False)
    return S


@functools.lru_cache(maxsize=256)
def _wait_superop_cached(duration: float, space: SpaceConfig, params: ExperimentParams) -> np.ndarray:
    n = space.dim
    steps = trotter_steps(duration, params.trotter_tau)
    whole = sum(1 for s in steps if s == params.trotter_tau)
    total = np.eye(n * n, dtype=complex)
    j = 0
    while whole >> j:
        if (whole >> j) & 1:
            total = _step_power_of_two(j, space, params) @ total
        j += 1
    for tau in steps[whole:]:
        total = _step_superop(tau, space, params) @ total
    total.setflags(write=False)
    return total


def channel_completeness(ops: Iterable[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """``sum w K^dag K`` for a list of Kraus operators."""
    ops = list(ops)
    weights = [1.0] * len(ops) if weights is None else list(weights)
    return sum(w * (K.conj().T @ K) for w, K in zip(weights, ops))
