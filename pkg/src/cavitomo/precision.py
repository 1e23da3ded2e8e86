"""Error bars on reconstructed quantities, bootstrap checks and state metrics.

The variance of ``<A> = Tr[A rho_ML]`` is ``Tr[A_par R^+(A_par)]`` where
``R`` is the negated log-likelihood Hessian at ``rho_ML`` seen as an
``N^2 x N^2`` Hermitian matrix on row-major ``vec`` and ``A_par`` is the part
of ``A`` tangent to the set of density matrices with the rank of ``rho_ML``.
``R`` is compressed to that tangent space before the pseudo-inverse so that
the trace constraint carries no variance.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cavitomo.effects import stack_effects
from cavitomo.fockspace import SpaceConfig
from cavitomo.mle import DEFAULT_MAX_ITER, DEFAULT_TOL, range_projector, reconstruct

log = logging.getLogger(__name__)

PINV_RCOND = 1e-10
MAGNITUDE_FLOOR = 1e-12


@dataclass
class ErrorBarReport:
    sigma_re: np.ndarray
    sigma_im: np.ndarray
    sigma_abs: np.ndarray
    sigma_phase: np.ndarray
    rank_used: int

    @property
    def undefined(self) -> np.ndarray:
        """Elements whose magnitude/phase errors are undefined (``|rho_pq| = 0``)."""
        return np.isnan(self.sigma_phase)


@dataclass
class BootstrapReport:
    group_size: int
    sigma_tilde: float
    mean_sigma: float
    n_groups: int
    n_resamplings: int
    converged_fraction: float = 1.0


def a_parallel(A: np.ndarray, rho_ml: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Tangent part of ``A``: drop the ``P_ML`` trace direction and the ``(I-P)A(I-P)`` block."""
    A = np.asarray(A, dtype=complex)
    P = range_projector(rho_ml, tol)
    Q = np.eye(P.shape[0]) - P
    trP = np.trace(P).real
    return A - (np.trace(A @ P) / trP) * P - Q @ A @ Q


def _vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=complex).reshape(-1)


def build_r_superop(rho_ml: np.ndarray, effects) -> np.ndarray:
    """``R(X) = sum_r E_r Tr[E_r X] / Tr[rho E_r]^2`` as a matrix on row-major ``vec(X)``."""
    E = stack_effects(effects)
    Ef = E.reshape(len(E), -1)
    t = (Ef @ np.asarray(rho_ml).T.reshape(-1)).real
    if np.any(t <= 0):
        raise ValueError("rho_ml gives zero probability to some record")
    W = Ef / t[:, None]
    R = W.T @ W.conj()
    return 0.5 * (R + R.conj().T)


def tangent_projector(rho_ml: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Orthogonal projector (on ``vec``) onto the tangent space used by :func:`a_parallel`."""
    P = range_projector(rho_ml, tol)
    n = P.shape[0]
    Q = np.eye(n) - P
    vp = _vec(P)
    return np.eye(n * n) - np.outer(vp, vp.conj()) / np.trace(P).real - np.kron(Q, Q.conj())


def covariance_superop(rho_ml: np.ndarray, r_superop: np.ndarray,
                       tol: float = DEFAULT_TOL) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of ``R`` compressed to the tangent space, and its rank."""
    T = tangent_projector(rho_ml, tol)
    RT = T @ r_superop @ T
    RT = 0.5 * (RT + RT.conj().T)
    w, V = np.linalg.eigh(RT)
    top = w.max(initial=0.0)
    keep = w > PINV_RCOND * top if top > 0 else np.zeros_like(w, dtype=bool)
    C = (V[:, keep] / w[keep]) @ V[:, keep].conj().T
    return 0.5 * (C + C.conj().T), int(keep.sum())


def _variance(vec_a: np.ndarray, C: np.ndarray) -> float:
    var = float(np.real(vec_a.conj() @ C @ vec_a))
    if var < -1e-10:
        raise ArithmeticError(f"negative variance {var:.3g}")
    return max(var, 0.0)


def sigma_observable(A: np.ndarray, rho_ml: np.ndarray, r_superop: np.ndarray,
                     tol: float = DEFAULT_TOL) -> float:
    """Standard deviation of ``Tr[A rho_ML]``."""
    C, _ = covariance_superop(rho_ml, r_superop, tol)
    return float(np.sqrt(_variance(_vec(a_parallel(A, rho_ml, tol)), C)))


def element_operators(p: int, q: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """``X = (|p><q| + |q><p|)/2`` and ``Y = i(|p><q| - |q><p|)/2``."""
    X = np.zeros((dim, dim), dtype=complex)
    Y = np.zeros((dim, dim), dtype=complex)
    X[p, q] += 0.5
    X[q, p] += 0.5
    Y[p, q] += 0.5j
    Y[q, p] -= 0.5j
    return X, Y


def _propagate(x, y, sx, sy):
    r = np.hypot(x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_phase = np.sqrt((y * sx) ** 2 + (x * sy) ** 2) / r**2
        s_abs = np.sqrt((x * sx) ** 2 + (y * sy) ** 2) / r
    undefined = r < MAGNITUDE_FLOOR
    return np.where(undefined, np.nan, s_abs), np.where(undefined, np.nan, s_phase)


def element_error_bars(rho_ml: np.ndarray, r_superop: np.ndarray, tol: float = DEFAULT_TOL) -> ErrorBarReport:
    """Error bars of real part, imaginary part, modulus and phase of every ``rho_pq``."""
    rho_ml = np.asarray(rho_ml)
    n = rho_ml.shape[0]
    C, rank = covariance_superop(rho_ml, r_superop, tol)
    C4 = C.reshape(n, n, n, n)
    diag = np.einsum("pqpq->pq", C4).real
    cross = np.einsum("pqqp->pq", C4).real
    var_x = 0.25 * (diag + diag.T + cross + cross.T)
    var_y = 0.25 * (diag + diag.T - cross - cross.T)
    idx = np.arange(n)
    var_x[idx, idx] = diag[idx, idx]
    var_y[idx, idx] = 0.0
    if min(var_x.min(), var_y.min()) < -1e-10:
        raise ArithmeticError("negative variance in element error bars")
    sx = np.sqrt(np.clip(var_x, 0, None))
    sy = np.sqrt(np.clip(var_y, 0, None))
    s_abs, s_phase = _propagate(rho_ml.real, rho_ml.imag, sx, sy)
    return ErrorBarReport(sx, sy, s_abs, s_phase, rank)


def coherence_indices(space: SpaceConfig) -> tuple[int, int]:
    """Row ``|0,1>`` and column ``|1,0>`` of the inter-cavity one-photon coherence."""
    if space.dim1 < 2 or space.dim2 < 2:
        raise ValueError("phase extraction needs at least two levels per cavity")
    return space.index(0, 1), space.index(1, 0)


def extract_phase(rho: np.ndarray, space: SpaceConfig) -> float:
    """``phi`` such that ``(|1,0> + e^{i phi}|0,1>)/sqrt(2)`` returns ``phi``."""
    p, q = coherence_indices(space)
    c = np.asarray(rho)[p, q]
    if abs(c) < MAGNITUDE_FLOOR:
        raise ValueError("phase undefined: inter-cavity coherence vanishes")
    return float(np.angle(c))


def phase_with_error(rho_ml: np.ndarray, effects, space: SpaceConfig,
                     tol: float = DEFAULT_TOL) -> tuple[float, float]:
    """Phase of the one-photon inter-cavity coherence and its error bar."""
    p, q = coherence_indices(space)
    R = build_r_superop(rho_ml, effects)
    C, _ = covariance_superop(rho_ml, R, tol)
    X, Y = element_operators(p, q, space.dim)
    sx = np.sqrt(_variance(_vec(a_parallel(X, rho_ml, tol)), C))
    sy = np.sqrt(_variance(_vec(a_parallel(Y, rho_ml, tol)), C))
    x, y = rho_ml[p, q].real, rho_ml[p, q].imag
    _, s_phase = _propagate(np.array(x), np.array(y), sx, sy)
    return extract_phase(rho_ml, space), float(s_phase)


def _sqrtm_psd(rho: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    return (U * np.sqrt(np.clip(w, 0, None))) @ U.conj().T


def fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """``(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2``."""
    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    if rho.shape != sigma.shape:
        raise ValueError(f"shape mismatch {rho.shape} vs {sigma.shape}")
    s = _sqrtm_psd(rho)
    M = s @ sigma @ s
    w = np.linalg.eigvalsh(0.5 * (M + M.conj().T))
    F = float(np.sum(np.sqrt(np.clip(w, 0, None))) ** 2)
    return min(max(F, 0.0), 1.0)


# --- bootstrap -----------------------------------------------------------------

Estimator = Callable[[np.ndarray, np.ndarray], "tuple[float, float]"]


def _phase_estimator(space: SpaceConfig, tol: float) -> Estimator:
    def estimate(rho_ml, effects):
        return phase_with_error(rho_ml, effects, space, tol)
    return estimate


def _run_group(args):
    effects, estimator, tol, max_iter = args
    res = reconstruct(effects, tol=tol, max_iter=max_iter)
    value, sigma = estimator(res.rho_ml, effects)
    return value, sigma, res.converged


def _circular_std(values: np.ndarray) -> float:
    center = np.angle(np.mean(np.exp(1j * values)))
    unwrapped = center + np.angle(np.exp(1j * (values - center)))
    return float(np.std(unwrapped, ddof=1))


def bootstrap(effects, group_sizes: Sequence[int], space: SpaceConfig, *,
              estimator: str | Estimator = "phase", n_resamplings: int = 4, seed: int = 0,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              workers: int = 1) -> list[BootstrapReport]:
    """Spread of an estimator over disjoint random groups of ``R`` records.

    For each group size the shuffled batch is cut into ``len // R`` groups,
    each is reconstructed on its own, and the standard deviation of the
    estimates is compared with the mean predicted error bar. Repeated
    ``n_resamplings`` times with fresh shuffles and averaged.
    """
    E = stack_effects(effects)
    if estimator == "phase":
        est, circular = _phase_estimator(space, tol), True
    elif callable(estimator):
        est, circular = estimator, False
    else:
        raise ValueError(f"unknown estimator {estimator!r}")

    rng = np.random.default_rng(seed)
    plan = []
    for R in group_sizes:
        n_groups = len(E) // int(R)
        if n_groups < 2:
            warnings.warn(f"group size {R} leaves fewer than 2 groups; skipped")
            continue
        for rep in range(n_resamplings):
            perm = rng.permutation(len(E))
            for g in range(n_groups):
                plan.append((int(R), rep, perm[g * R:(g + 1) * R]))

    jobs = [(E[idx], est, tol, max_iter) for _, _, idx in plan]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_run_group(job) for job in jobs]

    reports = []
    sizes = list(dict.fromkeys(R for R, _, _ in plan))
    for R in sizes:
        tildes, means, conv = [], [], []
        for rep in range(n_resamplings):
            rows = [res for (r, k, _), res in zip(plan, results) if r == R and k == rep]
            values = np.array([v for v, _, _ in rows])
            sigmas = np.array([s for _, s, _ in rows])
            tildes.append(_circular_std(values) if circular else float(np.std(values, ddof=1)))
            means.append(float(np.nanmean(sigmas)))
            conv.extend(c for _, _, c in rows)
        reports.append(BootstrapReport(
            group_size=R,
            sigma_tilde=float(np.mean(tildes)),
            mean_sigma=float(np.mean(means)),
            n_groups=len(E) // R,
            n_resamplings=n_resamplings,
            converged_fraction=float(np.mean(conv)),
        ))
    return reports


def fit_inverse_sqrt(reports: Sequence[BootstrapReport]) -> dict:
    """Fit ``sigma_tilde = A / sqrt(R)`` and the free power-law slope in log-log."""
    R = np.array([r.group_size for r in reports], dtype=float)
    s = np.array([r.sigma_tilde for r in reports])
    if len(R) < 2:
        raise ValueError("need at least two group sizes for a fit")
    slope, intercept = np.polyfit(np.log(R), np.log(s), 1)
    amplitude = float(np.exp(np.mean(np.log(s) + 0.5 * np.log(R))))
    return {"amplitude": amplitude, "slope": float(slope), "intercept": float(np.exp(intercept))}
