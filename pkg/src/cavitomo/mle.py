"""Maximum-likelihood density matrix by projected gradient ascent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cavitomo.effects import stack_effects

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 20000
MAX_HALVINGS = 40
ASCENT_SLACK = 1e-12


@dataclass
class ReconstructionResult:
    rho_ml: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    final_residuals: tuple[float, float, float]
    history: list[float] = field(default_factory=list, repr=False)


def _flat(effects) -> np.ndarray:
    E = stack_effects(effects)
    return E.reshape(len(E), -1)


def _traces(rho: np.ndarray, Ef: np.ndarray) -> np.ndarray:
    # Tr[rho E_r] = sum_ij rho_ij (E_r)_ji
    return (Ef @ rho.T.reshape(-1)).real


def log_likelihood(rho: np.ndarray, effects) -> float:
    """``sum_r log Tr[rho E_r]``, or ``-inf`` if any trace is not positive."""
    t = _traces(np.asarray(rho), _flat(effects))
    if np.any(t <= 0):
        return -np.inf
    return float(np.sum(np.log(t)))


def gradient(rho: np.ndarray, effects) -> np.ndarray:
    """``sum_r E_r / Tr[rho E_r]``."""
    Ef = _flat(effects)
    rho = np.asarray(rho)
    t = _traces(rho, Ef)
    if np.any(t <= 0):
        raise ValueError("gradient undefined: some Tr[rho E] <= 0")
    n = rho.shape[0]
    G = ((1.0 / t) @ Ef).reshape(n, n)
    return 0.5 * (G + G.conj().T)


def hessian_quad(rho: np.ndarray, effects, X: np.ndarray) -> float:
    """Second derivative of the log-likelihood along Hermitian ``X`` (always <= 0)."""
    Ef = _flat(effects)
    t = _traces(np.asarray(rho), Ef)
    if np.any(t <= 0):
        raise ValueError("hessian undefined: some Tr[rho E] <= 0")
    s = _traces(np.asarray(X), Ef)
    return float(-np.sum((s / t) ** 2))


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{p >= 0, sum p = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    support = u - css / k > 0
    r = k[support][-1]
    theta = css[r - 1] / r
    return np.maximum(v - theta, 0.0)


def _eigh_hermitian(X: np.ndarray):
    return np.linalg.eigh(0.5 * (X + X.conj().T))


def project_density(X: np.ndarray) -> np.ndarray:
    """Frobenius-nearest density matrix to the Hermitian ``X``."""
    w, U = _eigh_hermitian(np.asarray(X, dtype=complex))
    p = project_simplex(w)
    rho = (U * p) @ U.conj().T
    return 0.5 * (rho + rho.conj().T)


def range_projector(rho: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Projector on the eigenvectors of ``rho`` with eigenvalue >= ``tol``."""
    w, U = _eigh_hermitian(rho)
    V = U[:, w >= tol]
    return V @ V.conj().T


def stopping_residuals(rho: np.ndarray, grad: np.ndarray, tol: float = DEFAULT_TOL) -> tuple[float, float, float]:
    """Optimality conditions as ``lhs / rhs`` ratios; all three <= 1 means converged.

    1. ``||rho G - G rho|| <= tol ||G||``
    2. ``||P G - lam P|| <= tol ||P G P|| + tol ||rho||``
    3. ``-lambda_min[lam I - G] <= tol ||lam I|| + tol ||G||``
    """
    n = rho.shape[0]
    fro = np.linalg.norm
    P = range_projector(rho, tol)
    trP = np.trace(P).real
    lam = np.trace(P @ grad).real / trP if trP > 0 else 0.0
    eye = np.eye(n)

    lhs1 = fro(rho @ grad - grad @ rho)
    rhs1 = tol * fro(grad)
    lhs2 = fro(P @ grad - lam * P)
    rhs2 = tol * fro(P @ grad @ P) + tol * fro(rho)
    lmin = np.linalg.eigvalsh(lam * eye - grad)[0]
    lhs3 = max(0.0, -lmin)
    rhs3 = tol * fro(lam * eye) + tol * fro(grad)

    def ratio(lhs, rhs):
        if rhs > 0:
            return lhs / rhs
        return 0.0 if lhs == 0 else np.inf

    return ratio(lhs1, rhs1), ratio(lhs2, rhs2), ratio(lhs3, rhs3)


def reconstruct(effects, *, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                initial: np.ndarray | None = None, keep_history: bool = False) -> ReconstructionResult:
    """Maximize ``sum_r log Tr[rho E_r]`` over density matrices.

    Step ``rho <- Proj(rho + g G)`` with ``g = Tr[G^2] / -H(G, G)``, ``G`` the
    gradient and ``H`` the Hessian form. The step is halved (up to 40 times)
    until the likelihood does not drop by more than 1e-12 and the quadratic
    model along the projected step does not decrease.
    """
    E = stack_effects(effects)
    R, n, _ = E.shape
    if R == 0:
        raise ValueError("need at least one effect")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    Ef = E.reshape(R, -1)
    # per-record scale is irrelevant to the optimum; unit traces keep numbers tame
    scale = np.einsum("rii->r", E).real
    if np.any(scale <= 0):
        raise ValueError("every effect must have positive trace")
    Ef = Ef / scale[:, None]

    rho = np.eye(n, dtype=complex) / n if initial is None else project_density(np.asarray(initial, dtype=complex))

    t = _traces(rho, Ef)
    if np.any(t <= 0):
        raise ValueError("initial guess has zero likelihood")
    f = float(np.sum(np.log(t)))
    history = [f] if keep_history else []
    converged = False
    residuals = (np.inf, np.inf, np.inf)
    it = 0
    for it in range(max_iter + 1):
        G = ((1.0 / t) @ Ef).reshape(n, n)
        G = 0.5 * (G + G.conj().T)
        residuals = stopping_residuals(rho, G, tol)
        if max(residuals) <= 1.0:
            converged = True
            break
        if it == max_iter:
            break
        curvature = np.sum((_traces(G, Ef) / t) ** 2)
        g = np.trace(G @ G).real / curvature if curvature > 0 else 1.0 / R
        for _ in range(MAX_HALVINGS + 1):
            cand = project_density(rho + g * G)
            t_new = _traces(cand, Ef)
            if np.all(t_new > 0):
                # likelihood change from relative trace changes: no cancellation
                # between two large sums, so tiny decreases stay visible
                u = (t_new - t) / t
                gain = np.sum(np.log1p(u))
                model_gain = np.sum(u) - 0.5 * np.sum(u * u)
                if gain >= -ASCENT_SLACK and model_gain >= 0:
                    break
            g *= 0.5
        else:
            log.warning("line search stalled at iteration %d", it)
            break
        rho, t = cand, t_new
        f += gain
        if keep_history:
            history.append(f)

    loglik_raw = log_likelihood(rho, E)
    if not converged:
        log.warning("ML iteration did not converge after %d steps (residuals %s)", it, residuals)
    return ReconstructionResult(rho, loglik_raw, it, converged, tuple(float(r) for r in residuals), history)
