"""Bayesian optimisation of the kernel width and regularisation weights.

A Gaussian-process surrogate (squared-exponential covariance, fixed small
observation noise) is fitted to the log objective over the unit cube that
maps onto the log10 hyperparameter box; the next point maximises expected
improvement.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.stats import norm, qmc

from . import lpv
from .dataset import ModelScaling, Trajectory

NOISE = 1e-6
XI = 0.01
N_CANDIDATES = 1024
N_REFINE = 8
LENGTH_SCALES = (0.05, 0.08, 0.12, 0.18, 0.27, 0.4, 0.6, 0.9, 1.35, 2.0)


@dataclass(frozen=True)
class HyperBounds:
    """Search box in log10 space: names[i] ranges over [low[i], high[i]]."""

    names: tuple[str, ...]
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        if not len(self.names) == len(self.low) == len(self.high):
            raise ValueError("names, low and high must have equal length")
        for n, lo, hi in zip(self.names, self.low, self.high):
            if not lo < hi:
                raise ValueError(f"bound {n}: low {lo} must be < high {hi}")

    @classmethod
    def default(cls, per_dimension_gamma: bool = False, nx: int = 3) -> "HyperBounds":
        if per_dimension_gamma:
            names = ("log_sigma",) + tuple(f"log_gamma{i}" for i in range(nx))
        else:
            names = ("log_sigma", "log_gamma")
        low = (-3.0,) + (-1.0,) * (len(names) - 1)
        high = (3.0,) + (6.0,) * (len(names) - 1)
        return cls(names, low, high)

    @property
    def dim(self) -> int:
        return len(self.names)

    def from_unit(self, z) -> np.ndarray:
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return lo + np.asarray(z) * (hi - lo)

    def to_unit(self, point) -> np.ndarray:
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return (np.asarray(point) - lo) / (hi - lo)

    def contains(self, point) -> bool:
        point = np.asarray(point)
        return bool(np.all(point >= np.asarray(self.low)) and np.all(point <= np.asarray(self.high)))


@dataclass
class OptHistory:
    names: tuple[str, ...]
    points: list = field(default_factory=list)
    values: list = field(default_factory=list)
    best: list = field(default_factory=list)

    def record(self, point, value: float) -> None:
        self.points.append(np.asarray(point, dtype=float))
        self.values.append(float(value))
        prev = self.best[-1] if self.best else math.inf
        self.best.append(min(prev, float(value)))

    def __len__(self) -> int:
        return len(self.values)

    def best_index(self) -> int:
        return int(np.argmin(self.values))

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", *self.names, "J", "best_J"])
            for i, (pt, v, b) in enumerate(zip(self.points, self.values, self.best), start=1):
                w.writerow([i, *(repr(float(c)) for c in pt), repr(v), repr(b)])


# --- identification objective -----------------------------------------------

def point_to_config(point, nx: int = 3) -> lpv.KernelConfig:
    point = np.asarray(point, dtype=float)
    sigma = 10.0 ** point[0]
    gammas = 10.0 ** point[1:]
    if gammas.size == 1:
        return lpv.KernelConfig.shared(sigma, float(gammas[0]), nx)
    return lpv.KernelConfig(sigma, tuple(gammas))


class IdentificationObjective:
    """Mean squared one-step validation error of an LPV fit (scaled states)."""

    def __init__(self, train: Trajectory, val: Trajectory, scaling: ModelScaling | None = None,
                 p_channels=lpv.DEFAULT_SCHEDULING):
        self.scaling = scaling or ModelScaling.fit(train)
        self.p_channels = tuple(p_channels)
        self.train = lpv.transitions(train, self.scaling, self.p_channels)
        self.val = lpv.transitions(val, self.scaling, self.p_channels)

    def __call__(self, point) -> float:
        try:
            model = lpv.fit_arrays(*self.train, point_to_config(point, self.train[0].shape[1]),
                                   self.scaling, self.p_channels)
            x, u, p, x_next = self.val
            pred = lpv.predict_batch(model, x, u, p)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return math.inf
        err = float(np.sum((pred - x_next) ** 2) / x_next.shape[0])
        return err if math.isfinite(err) else math.inf


def objective(train: Trajectory, val: Trajectory, point, scaling: ModelScaling | None = None) -> float:
    return IdentificationObjective(train, val, scaling)(point)


# --- Gaussian process --------------------------------------------------------

class _GP:
    def __init__(self, Z: np.ndarray, y: np.ndarray):
        self.Z = Z
        self.mu = float(y.mean())
        self.sd = float(y.std()) or 1.0
        t = (y - self.mu) / self.sd
        best = None
        for ell in LENGTH_SCALES:
            K = self._cov(Z, Z, ell) + NOISE * np.eye(len(Z))
            try:
                L = np.linalg.cholesky(K)
            except np.linalg.LinAlgError:
                continue
            a = scipy.linalg.cho_solve((L, True), t)
            # log marginal likelihood with the amplitude profiled out
            amp = max(float(t @ a) / len(t), 1e-12)
            lml = -0.5 * len(t) * math.log(amp) - float(np.log(np.diag(L)).sum())
            if best is None or lml > best[0]:
                best = (lml, ell, L, a, amp)
        if best is None:
            raise np.linalg.LinAlgError("GP covariance not positive definite")
        _, self.ell, self.L, self.a, self.amp = best

    @staticmethod
    def _cov(P, Q, ell):
        d2 = ((P[:, None, :] - Q[None, :, :]) ** 2).sum(-1)
        return np.exp(-0.5 * d2 / ell**2)

    def predict(self, Zq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Ks = self._cov(Zq, self.Z, self.ell)
        mean = Ks @ self.a
        v = scipy.linalg.solve_triangular(self.L, Ks.T, lower=True)
        var = np.maximum(1.0 - (v * v).sum(0), 1e-12) * self.amp
        return mean * self.sd + self.mu, np.sqrt(var) * self.sd


def expected_improvement(mean, std, best: float, xi: float = XI) -> np.ndarray:
    """EI for minimisation."""
    imp = best - mean - xi
    z = imp / std
    return imp * norm.cdf(z) + std * norm.pdf(z)


def _transform(values: np.ndarray) -> np.ndarray:
    """Log-transform objective values, replacing failures by the worst finite one."""
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    if not finite.any():
        return np.zeros_like(v)
    worst = v[finite].max()
    v = np.where(finite, v, worst)
    return np.log(np.maximum(v, 1e-300))


def optimize(fun: Callable[[np.ndarray], float], bounds: HyperBounds, budget: int = 100,
             seed: int = 0) -> tuple[np.ndarray, OptHistory]:
    if budget < 5:
        raise ValueError("budget must be at least 5")
    rng = np.random.default_rng(seed)
    hist = OptHistory(bounds.names)
    Z: list[np.ndarray] = []

    n_init = min(budget, max(5, budget // 10))
    lhs = qmc.LatinHypercube(d=bounds.dim, seed=rng)
    for z in lhs.random(n_init):
        Z.append(z)
        hist.record(bounds.from_unit(z), fun(bounds.from_unit(z)))

    while len(hist) < budget:
        Zarr = np.array(Z)
        y = _transform(hist.values)
        gp = _GP(Zarr, y)
        best_y = float(y.min())

        def neg_ei(z):
            m, s = gp.predict(np.atleast_2d(z))
            return -float(expected_improvement(m, s, best_y)[0])

        cand = rng.random((N_CANDIDATES, bounds.dim))
        m, s = gp.predict(cand)
        ei = expected_improvement(m, s, best_y)
        top = np.argsort(-ei, kind="stable")[:N_REFINE]
        z_next, ei_next = cand[top[0]], ei[top[0]]
        for i in top:
            res = scipy.optimize.minimize(neg_ei, cand[i], method="L-BFGS-B",
                                          bounds=[(0.0, 1.0)] * bounds.dim,
                                          options={"maxiter": 50})
            if -res.fun > ei_next:
                z_next, ei_next = np.clip(res.x, 0.0, 1.0), -res.fun
        Z.append(z_next)
        point = bounds.from_unit(z_next)
        hist.record(point, fun(point))

    return hist.points[hist.best_index()], hist
