"""Least-squares SVM identification of a linear parameter-varying state-space model.

The model is ``x(k+1) = A(p(k)) x(k) + B(p(k)) u(k)`` with

    A(p) = sum_j alpha_j x(j)^T K(p(j), p),   B(p) = sum_j alpha_j u(j)^T K(p(j), p)

where ``alpha`` are dual coefficients obtained from a kernel ridge solve over
the training transitions.  Everything here works in scaled coordinates; the
caller owns the scaler.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .dataset import ModelScaling, Trajectory

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, cycle: int, state):
        super().__init__(f"simulation diverged at cycle {cycle}: state {state}")
        self.cycle = cycle


@dataclass(frozen=True)
class KernelConfig:
    sigma: float
    gamma: tuple[float, ...]

    def __post_init__(self):
        gamma = tuple(float(g) for g in np.atleast_1d(self.gamma))
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not gamma or not all(np.isfinite(g) and g > 0 for g in gamma):
            raise ValueError(f"every gamma component must be positive, got {gamma}")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def shared(cls, sigma: float, gamma: float, nx: int = 3) -> "KernelConfig":
        return cls(sigma, (gamma,) * nx)

    def gamma_vector(self, nx: int) -> np.ndarray:
        if len(self.gamma) == 1:
            return np.full(nx, self.gamma[0])
        if len(self.gamma) != nx:
            raise ValueError(f"gamma has {len(self.gamma)} components for {nx} states")
        return np.asarray(self.gamma)


# --- kernel ------------------------------------------------------------------

def rbf_kernel(p_i, p_j, sigma: float) -> float:
    """exp(-||p_i - p_j||^2 / (2 sigma)); sigma carries squared-distance units."""
    p_i = np.asarray(p_i, dtype=float).ravel()
    p_j = np.asarray(p_j, dtype=float).ravel()
    if p_i.shape != p_j.shape:
        raise ValueError(f"scheduling vectors differ in length: {p_i.size} vs {p_j.size}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = p_i - p_j
    return float(np.exp(-float(d @ d) / (2.0 * sigma)))


def rbf_gram(P: np.ndarray, Q: np.ndarray, sigma: float) -> np.ndarray:
    """Kernel matrix K[j, k] = K(P[j], Q[k])."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if P.shape[1] != Q.shape[1]:
        raise ValueError(f"scheduling dimension mismatch: {P.shape[1]} vs {Q.shape[1]}")
    sq = (P * P).sum(1)[:, None] + (Q * Q).sum(1)[None, :] - 2.0 * P @ Q.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma))


def build_omega(train_x, train_u, train_p, sigma: float) -> np.ndarray:
    """Omega[j, k] = K(p_j, p_k) * (x_j . x_k + u_j . u_k)."""
    X = np.atleast_2d(np.asarray(train_x, dtype=float))
    U = np.atleast_2d(np.asarray(train_u, dtype=float))
    P = np.atleast_2d(np.asarray(train_p, dtype=float))
    if not X.shape[0] == U.shape[0] == P.shape[0]:
        raise ValueError(f"row counts differ: x {X.shape[0]}, u {U.shape[0]}, p {P.shape[0]}")
    K = rbf_gram(P, P, sigma)
    omega = K * (X @ X.T + U @ U.T)
    # symmetrize away round-off from the two gram products
    return 0.5 * (omega + omega.T)


# --- scheduling --------------------------------------------------------------

# p(k) = scaled (FQ, SOI) of the input applied at cycle k
DEFAULT_SCHEDULING = (0, 1)


def scheduling(u_scaled: np.ndarray, channels: Sequence[int] = DEFAULT_SCHEDULING) -> np.ndarray:
    u_scaled = np.asarray(u_scaled, dtype=float)
    return u_scaled[..., list(channels)]


# --- model -------------------------------------------------------------------

@dataclass(frozen=True)
class FrozenLti:
    """Matrices of x+ = A x + B u (+ offset) frozen at one scheduling point."""

    A: np.ndarray
    B: np.ndarray
    p_frozen: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent shapes A {A.shape}, B {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("non-finite LTI matrices")
        c = np.zeros(A.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "offset", c)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    def step(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u + self.offset


@dataclass(frozen=True, eq=False)
class LpvModel:
    alpha: np.ndarray     # (N, nx)
    train_x: np.ndarray   # (N, nx)
    train_u: np.ndarray   # (N, nu)
    train_p: np.ndarray   # (N, np)
    kernel: KernelConfig
    scaling: ModelScaling | None = None
    p_channels: tuple[int, ...] = DEFAULT_SCHEDULING

    def __post_init__(self):
        n = self.alpha.shape[0]
        if n < 1 or not (self.train_x.shape[0] == self.train_u.shape[0] == self.train_p.shape[0] == n):
            raise ValueError("stored arrays must share a leading dimension N >= 1")
        for name in ("alpha", "train_x", "train_u", "train_p"):
            getattr(self, name).setflags(write=False)

    @property
    def nx(self) -> int:
        return self.train_x.shape[1]

    @property
    def nu(self) -> int:
        return self.train_u.shape[1]

    def schedule(self, u_scaled) -> np.ndarray:
        return scheduling(u_scaled, self.p_channels)

    # --- persistence ---
    def save(self, path) -> None:
        doc = {
            "format": "lpv-svm",
            "version": FORMAT_VERSION,
            "kernel": {"sigma": self.kernel.sigma, "gamma": list(self.kernel.gamma)},
            "p_channels": list(self.p_channels),
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
            # repr() of a float64 round-trips exactly through json
            "alpha": self.alpha.tolist(),
            "train_x": self.train_x.tolist(),
            "train_u": self.train_u.tolist(),
            "train_p": self.train_p.tolist(),
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "LpvModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "lpv-svm" or doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not an lpv-svm model file of version {FORMAT_VERSION}")
        scaling = None if doc["scaling"] is None else ModelScaling.from_dict(doc["scaling"])
        arr = lambda k: np.asarray(doc[k], dtype=float)  # noqa: E731
        return cls(arr("alpha"), arr("train_x"), arr("train_u"), arr("train_p"),
                   KernelConfig(doc["kernel"]["sigma"], tuple(doc["kernel"]["gamma"])),
                   scaling, tuple(doc["p_channels"]))


def transitions(traj: Trajectory, scaling: ModelScaling, p_channels=DEFAULT_SCHEDULING):
    """Scaled (x(k), u(k), p(k), x(k+1)) for k = 0 .. len-2."""
    xs = scaling.state.transform(traj.states)
    us = scaling.input.transform(traj.inputs)
    return xs[:-1], us[:-1], scheduling(us[:-1], p_channels), xs[1:]


def _solve_spd(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        log.warning("Cholesky failed on kernel system of size %d; adding 1e-10 diagonal jitter", M.shape[0])
        M = M + 1e-10 * np.eye(M.shape[0])
        factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    sol = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    # one step of iterative refinement tightens the residual for small 1/gamma
    sol += scipy.linalg.cho_solve(factor, rhs - M @ sol, check_finite=False)
    return sol


def fit_arrays(x, u, p, x_next, config: KernelConfig, scaling: ModelScaling | None = None,
               p_channels=DEFAULT_SCHEDULING, omega: np.ndarray | None = None) -> LpvModel:
    """Dual solve: one ridge system (Omega + I/gamma_i) alpha_i = x_next[:, i] per state."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    n, nx = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 transitions, got {n}")
    gamma = config.gamma_vector(nx)
    if omega is None:
        omega = build_omega(x, u, p, config.sigma)
    alpha = np.empty((n, nx))
    # states sharing a gamma share one factorization
    for g in np.unique(gamma):
        cols = np.flatnonzero(gamma == g)
        M = omega.copy()
        M[np.diag_indices(n)] += 1.0 / g
        alpha[:, cols] = _solve_spd(M, x_next[:, cols])
    return LpvModel(alpha, x.copy(), u.copy(), p.copy(), config, scaling, tuple(p_channels))


def fit(train: Trajectory, config: KernelConfig, scaling: ModelScaling | None = None,
        p_channels=DEFAULT_SCHEDULING) -> LpvModel:
    """Identify an LPV model from a trajectory (scaler fitted on it unless given)."""
    scaling = scaling or ModelScaling.fit(train)
    x, u, p, x_next = transitions(train, scaling, p_channels)
    return fit_arrays(x, u, p, x_next, config, scaling, p_channels)


def training_residual(model: LpvModel, x_next: np.ndarray) -> np.ndarray:
    """x(k+1) minus the model's prediction at each training sample."""
    pred = np.array([predict_one_step(model, model.train_x[k], model.train_u[k], model.train_p[k])
                     for k in range(model.alpha.shape[0])])
    return x_next - pred


# --- evaluation --------------------------------------------------------------

def eval_matrices(model: LpvModel, p) -> FrozenLti:
    p = np.asarray(p, dtype=float).ravel()
    if p.size != model.train_p.shape[1]:
        raise ValueError(f"scheduling vector has {p.size} entries, model expects {model.train_p.shape[1]}")
    k = rbf_gram(model.train_p, p[None, :], model.kernel.sigma)[:, 0]
    weighted = model.alpha * k[:, None]          # (N, nx)
    return FrozenLti(weighted.T @ model.train_x, weighted.T @ model.train_u, p)


def linearize(model: LpvModel, x, u) -> FrozenLti:
    """First-order expansion of the scheduled map around (x, u), p = p(u).

    Unlike ``eval_matrices`` this keeps the sensitivity of A(p), B(p) to the
    inputs that also act as scheduling variables:

        x+ ~= A(p) x' + [B(p) + J S] u' - J S u,   J = d(A(p)x + B(p)u)/dp

    where S selects the scheduling channels from the scaled input.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = model.schedule(u)
    k = rbf_gram(model.train_p, p[None, :], model.kernel.sigma)[:, 0]
    weighted = model.alpha * k[:, None]
    A = weighted.T @ model.train_x
    B = weighted.T @ model.train_u
    lin = model.train_x @ x + model.train_u @ u                      # (N,)
    J = (weighted * lin[:, None]).T @ (model.train_p - p) / model.kernel.sigma   # (nx, np)
    S = np.zeros((p.size, u.size))
    S[np.arange(p.size), list(model.p_channels)] = 1.0
    JS = J @ S
    return FrozenLti(A, B + JS, p, -JS @ u)


def predict_one_step(model: LpvModel, x, u, p) -> np.ndarray:
    lti = eval_matrices(model, p)
    return lti.A @ np.asarray(x, dtype=float) + lti.B @ np.asarray(u, dtype=float)


def predict_batch(model: LpvModel, x, u, p) -> np.ndarray:
    """One-step predictions for many samples at once (rows)."""
    K = rbf_gram(model.train_p, p, model.kernel.sigma)                 # (N, M)
    lin = model.train_x @ np.asarray(x, dtype=float).T + model.train_u @ np.asarray(u, dtype=float).T
    return (K * lin).T @ model.alpha


def simulate(model: LpvModel, x0, u_seq, p_seq) -> np.ndarray:
    """Free-run simulation feeding predictions back; returns x(1) .. x(T)."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    p_seq = np.atleast_2d(np.asarray(p_seq, dtype=float))
    if u_seq.shape[0] != p_seq.shape[0]:
        raise ValueError(f"u and p sequences differ in length: {u_seq.shape[0]} vs {p_seq.shape[0]}")
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((u_seq.shape[0], x.size))
    K = rbf_gram(model.train_p, p_seq, model.kernel.sigma)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(u_seq.shape[0]):
            w = model.alpha * K[:, t][:, None]
            x = w.T @ (model.train_x @ x + model.train_u @ u_seq[t])
            if not np.all(np.isfinite(x)):
                raise DivergenceError(t, x)
            out[t] = x
    return out


# --- linear ARX baseline -----------------------------------------------------

def fit_arx(x, u, x_next, intercept: bool = True) -> FrozenLti:
    """Least-squares x+ = A x + B u (+ c)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    cols = [x, u] + ([np.ones((x.shape[0], 1))] if intercept else [])
    Z = np.hstack(cols)
    theta, *_ = np.linalg.lstsq(Z, np.asarray(x_next, dtype=float), rcond=None)
    nx, nu = x.shape[1], u.shape[1]
    A = theta[:nx].T
    B = theta[nx:nx + nu].T
    c = theta[nx + nu].copy() if intercept else None
    return FrozenLti(A, B, None, c)


def simulate_lti(lti: FrozenLti, x0, u_seq) -> np.ndarray:
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((len(u_seq), x.size))
    with np.errstate(over="ignore", invalid="ignore"):
        for t, u in enumerate(np.asarray(u_seq, dtype=float)):
            x = lti.step(x, u)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(t, x)
            out[t] = x
    return out
