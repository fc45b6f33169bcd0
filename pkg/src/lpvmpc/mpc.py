"""Finite-horizon MPC on a frozen (quasi-LPV) linear prediction model.

Per cycle the prediction model is linearised once around the measured state
and the previously applied input, then held over the horizon, which keeps the
optimal control problem a small dense QP in the decision
``d = (u(k), ..., u(k+Nc-1), s)``.  The NOx upper limit is softened by a
single nonnegative slack ``s``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
import scipy.linalg

from .bounds import BoundSet
from .dataset import ModelScaling
from .lpv import FrozenLti, LpvModel, eval_matrices, linearize

log = logging.getLogger(__name__)

T_OUT, P_MAN, NOX = 0, 1, 2
FQ = 0


@dataclass(frozen=True)
class MpcConfig:
    Np: int = 5
    Nc: int = 1
    w_tout: float = 1.0
    w_nox: float = 4e-4
    w_fq: float = 3e-2
    w_du: tuple[float, float, float] = (1e-2, 5.0, 1e-2)
    w_s: float = 1e3
    bounds: BoundSet = field(default_factory=BoundSet)

    def __post_init__(self):
        if not (isinstance(self.Np, int) and isinstance(self.Nc, int) and self.Np >= self.Nc >= 1):
            raise ValueError(f"need integer horizons Np >= Nc >= 1, got Np={self.Np}, Nc={self.Nc}")
        object.__setattr__(self, "w_du", tuple(float(w) for w in self.w_du))
        if min(self.w_tout, self.w_nox, self.w_fq, *self.w_du) < 0:
            raise ValueError("MPC weights must be nonnegative")
        if not self.w_s > 0:
            raise ValueError("slack weight w_s must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = self.bounds.to_dict()
        d["w_du"] = list(self.w_du)
        return d

    @classmethod
    def from_dict(cls, d) -> "MpcConfig":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = BoundSet.from_dict(d["bounds"])
        if "w_du" in d:
            d["w_du"] = tuple(d["w_du"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "MpcConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QpProblem:
    """min 0.5 d'Hd + g'd + c0  s.t.  lb <= d <= ub,  G d <= h.

    ``H_raw`` is the exact cost Hessian; ``H`` may carry a tiny ridge added
    to make it positive definite.
    """

    H: np.ndarray
    g: np.ndarray
    c0: float
    lb: np.ndarray
    ub: np.ndarray
    G: np.ndarray
    h: np.ndarray
    H_raw: np.ndarray
    nu: int
    Nc: int

    @property
    def dim(self) -> int:
        return self.g.size

    def cost(self, d) -> float:
        d = np.asarray(d, dtype=float)
        return float(0.5 * d @ self.H_raw @ d + self.g @ d + self.c0)


@dataclass
class QpSolution:
    u: np.ndarray          # decision inputs (scaled), shape (Nc, nu)
    s: float
    cost: float
    kkt_residual: float
    converged: bool
    iterations: int
    d: np.ndarray = field(repr=False)
    multipliers: np.ndarray = field(repr=False)


class _Affine:
    """Vector-valued affine function of the decision: M d + c."""

    __slots__ = ("M", "c")

    def __init__(self, M, c):
        self.M = M
        self.c = c


def _predictions(lti: FrozenLti, x0, nu: int, Nc: int, Np: int, dim: int) -> list[_Affine]:
    """Affine maps d -> x(k+i), i = 1 .. Np, with the input held after Nc."""
    nx = lti.nx
    M = np.zeros((nx, dim))
    c = np.asarray(x0, dtype=float).copy()
    out = []
    for i in range(Np):
        b = min(i, Nc - 1)
        M = lti.A @ M
        M[:, b * nu:(b + 1) * nu] += lti.B
        c = lti.A @ c + lti.offset
        out.append(_Affine(M.copy(), c.copy()))
    return out


def build_qp(lti: FrozenLti, x0, refs, u_prev, cfg: MpcConfig,
             scaling: ModelScaling | None = None) -> QpProblem:
    """Condensed QP for the frozen model.

    ``x0`` and ``lti`` live in the model's scaled coordinates, ``refs`` (torque
    reference for k+1 .. k+Np, N m) and ``u_prev`` (physical inputs) in
    engineering units.  Cost terms are evaluated in engineering units.
    """
    scaling = scaling or ModelScaling.identity(lti.nx, lti.nu)
    nu, Nc, Np = lti.nu, cfg.Nc, cfg.Np
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (lti.nx,) or not np.all(np.isfinite(x0)):
        raise ValueError(f"x0 must be a finite vector of length {lti.nx}")
    refs = np.broadcast_to(np.asarray(refs, dtype=float), (Np,)) if np.ndim(refs) == 0 else np.asarray(refs, float)
    if refs.shape != (Np,):
        raise ValueError(f"refs must have length Np={Np}, got {refs.shape}")
    u_prev = np.asarray(u_prev, dtype=float)
    if u_prev.shape != (nu,):
        raise ValueError(f"u_prev must have length {nu}")

    dim = nu * Nc + 1
    si = dim - 1
    xo, xs = scaling.state.offset, scaling.state.span
    uo, us = scaling.input.offset, scaling.input.span

    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    c0 = 0.0

    def add(w: float, a: np.ndarray, b: float) -> None:
        # accumulate w * (a.d + b)^2
        nonlocal c0
        if w == 0.0:
            return
        H[:] += 2.0 * w * np.outer(a, a)
        g[:] += 2.0 * w * b * a
        c0 += w * b * b

    def u_phys(block: int, ch: int) -> tuple[np.ndarray, float]:
        a = np.zeros(dim)
        a[block * nu + ch] = us[ch]
        return a, float(uo[ch])

    preds = _predictions(lti, x0, nu, Nc, Np, dim)
    G_rows, h_rows = [], []
    nox_max = cfg.bounds.nox[1]
    for i, pr in enumerate(preds):
        t_a, t_b = xs[T_OUT] * pr.M[T_OUT], xo[T_OUT] + xs[T_OUT] * pr.c[T_OUT]
        add(cfg.w_tout, t_a, t_b - refs[i])
        n_a, n_b = xs[NOX] * pr.M[NOX], xo[NOX] + xs[NOX] * pr.c[NOX]
        add(cfg.w_nox, n_a, n_b)
        row = n_a.copy()
        row[si] = -1.0
        G_rows.append(row)
        h_rows.append(nox_max - n_b)

    for i in range(Np):
        b = min(i, Nc - 1)
        a, off = u_phys(b, FQ)
        add(cfg.w_fq, a, off)
        if i < Nc:
            for ch in range(nu):
                a, off = u_phys(b, ch)
                if i == 0:
                    add(cfg.w_du[ch], a, off - u_prev[ch])
                else:
                    a_prev, _ = u_phys(b - 1, ch)
                    add(cfg.w_du[ch], a - a_prev, 0.0)
        # the violation penalty sits inside the horizon sum, so it counts Np times
        s_a = np.zeros(dim)
        s_a[si] = 1.0
        add(cfg.w_s, s_a, 0.0)

    H_raw = 0.5 * (H + H.T)
    lam_min = float(np.linalg.eigvalsh(H_raw)[0])
    H_reg = H_raw + (max(0.0, 1e-9 - lam_min) * 2.0) * np.eye(dim) if lam_min < 1e-9 else H_raw

    lb = np.empty(dim)
    ub = np.empty(dim)
    umin_s = (cfg.bounds.u_min - uo) / us
    umax_s = (cfg.bounds.u_max - uo) / us
    for b in range(Nc):
        lb[b * nu:(b + 1) * nu] = umin_s
        ub[b * nu:(b + 1) * nu] = umax_s
    lb[si], ub[si] = 0.0, np.inf
    return QpProblem(H_reg, g, float(c0), lb, ub, np.array(G_rows), np.array(h_rows), H_raw, nu, Nc)


# --- solver ------------------------------------------------------------------

def _constraint_rows(qp: QpProblem):
    """All inequalities as C d <= e; box rows first."""
    n = qp.dim
    rows, rhs, box = [], [], []
    for j in range(n):
        if np.isfinite(qp.ub[j]):
            r = np.zeros(n)
            r[j] = 1.0
            rows.append(r)
            rhs.append(qp.ub[j])
            box.append((j, qp.ub[j]))
        if np.isfinite(qp.lb[j]):
            r = np.zeros(n)
            r[j] = -1.0
            rows.append(r)
            rhs.append(-qp.lb[j])
            box.append((j, qp.lb[j]))
    n_box = len(rows)
    if qp.G.size:
        rows.extend(qp.G)
        rhs.extend(qp.h)
    return np.array(rows), np.array(rhs), box, n_box


def _initial_point(qp: QpProblem, d0=None) -> np.ndarray:
    d = np.zeros(qp.dim) if d0 is None else np.asarray(d0, dtype=float).copy()
    d = np.clip(d, qp.lb, qp.ub)
    if qp.G.size:
        # the slack enters every general row with coefficient -1
        viol = qp.G[:, :-1] @ d[:-1] - qp.h
        d[-1] = max(d[-1], float(viol.max()), qp.lb[-1])
    return d


def kkt_residual(qp: QpProblem, d, lam_box, lam_g) -> float:
    """Scaled KKT residual: stationarity, feasibility, dual sign, complementarity."""
    grad = qp.H_raw @ d + qp.g
    C, e, _, _ = _constraint_rows(qp)
    lam = np.concatenate([lam_box, lam_g])
    scale = 1.0 + np.abs(qp.g).max() + np.abs(qp.H_raw).max() * max(1.0, np.abs(d).max())
    stat = np.abs(grad + C.T @ lam).max() / scale
    slack = e - C @ d
    primal = max(0.0, -slack.min()) / (1.0 + np.abs(e).max())
    dual = max(0.0, -lam.min()) / scale
    comp = np.abs(lam * slack).max() / (scale * (1.0 + np.abs(e).max()))
    return float(max(stat, primal, dual, comp))


def _eqp_step(H, grad, Cw):
    """Null-space solve of min 0.5 p'Hp + grad'p s.t. Cw p = 0, plus multipliers."""
    n = H.shape[0]
    m = Cw.shape[0]
    if m:
        Q, R = np.linalg.qr(Cw.T, mode="complete")
        Z = Q[:, m:]
    else:
        Q, R, Z = None, None, np.eye(n)
    if Z.shape[1]:
        p = Z @ np.linalg.solve(Z.T @ H @ Z, -(Z.T @ grad))
    else:
        p = np.zeros(n)
    lam = np.zeros(0)
    if m:
        # Cw' lam = -(grad + H p), solved through Cw' = Q[:, :m] R[:m]
        lam = scipy.linalg.solve_triangular(R[:m], -(Q[:, :m].T @ (grad + H @ p)))
    return p, lam


def solve_qp(qp: QpProblem, d0=None, max_iter: int = 100, tol: float = 1e-11) -> QpSolution:
    """Primal active-set method (convex QP, feasible start)."""
    C, e, box, n_box = _constraint_rows(qp)
    n = qp.dim
    d = _initial_point(qp, d0)
    H = qp.H
    work: list[int] = []
    for i in range(len(e)):
        # keep the initial working set linearly independent
        if e[i] - C[i] @ d <= 1e-13 * (1 + abs(e[i])) and len(work) < n:
            if np.linalg.matrix_rank(C[work + [i]], tol=1e-9) == len(work) + 1:
                work.append(i)
    lam_w = np.zeros(0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = H @ d + qp.g
        p, lam_w = _eqp_step(H, grad, C[work] if work else np.zeros((0, n)))
        if np.abs(p).max() <= tol * (1.0 + np.abs(d).max()):
            if not work or lam_w.min() >= -1e-12 * (1.0 + np.abs(grad).max()):
                converged = True
                break
            work.pop(int(np.argmin(lam_w)))
            continue
        step, block = 1.0, -1
        Cp = C @ p
        for i in range(len(e)):
            if i in work or Cp[i] <= 1e-14 * np.abs(C[i]).max() * np.abs(p).max():
                continue
            a = (e[i] - C[i] @ d) / Cp[i]
            if a < step:
                step, block = max(a, 0.0), i
        d = d + step * p
        if block >= 0:
            work.append(block)
            if block < n_box:
                j, val = box[block]
                d[j] = val
    # polish: exact bounds on active box rows
    for i in work:
        if i < n_box:
            j, val = box[i]
            d[j] = val
    lam = np.zeros(len(e))
    if converged and work:
        lam[work] = np.maximum(lam_w, 0.0)
    res = kkt_residual(qp, d, lam[:n_box], lam[n_box:])
    if not converged:
        log.warning("QP active-set iteration limit (%d) reached", max_iter)
    nu, Nc = qp.nu, qp.Nc
    return QpSolution(d[:nu * Nc].reshape(Nc, nu).copy(), float(d[-1]), qp.cost(d), res,
                      converged, it, d, lam)


# --- prediction models -------------------------------------------------------

class PredictionModel(Protocol):
    scaling: ModelScaling

    def freeze(self, u_prev: np.ndarray) -> FrozenLti: ...


class LpvPrediction:
    """Prediction matrices from an LPV model, evaluated at the previous input.

    ``linearization="frozen"`` holds A(p), B(p) as evaluated; ``"taylor"``
    additionally keeps the first-order effect of the inputs on the
    scheduling point (see ``lpv.linearize``).  Both are held over the horizon.
    """

    kind = "lpv"

    def __init__(self, model: LpvModel, linearization: str = "taylor"):
        if model.scaling is None:
            raise ValueError("LPV model carries no scaler")
        if linearization not in ("frozen", "taylor"):
            raise ValueError(f"unknown linearization {linearization!r}")
        self.model = model
        self.scaling = model.scaling
        self.linearization = linearization
        self._x = None

    def observe(self, x_meas) -> None:
        self._x = self.scaling.state.transform(x_meas)

    def freeze(self, u_prev) -> FrozenLti:
        us = self.scaling.input.transform(u_prev)
        if self.linearization == "taylor":
            if self._x is None:
                raise RuntimeError("taylor linearization needs the measured state; call observe() first")
            return linearize(self.model, self._x, us)
        return eval_matrices(self.model, self.model.schedule(us))


class LtiPrediction:
    kind = "lti"

    def __init__(self, lti: FrozenLti, scaling: ModelScaling | None = None):
        self.lti = lti
        self.scaling = scaling or ModelScaling.identity(lti.nx, lti.nu)

    def freeze(self, u_prev) -> FrozenLti:
        return self.lti


# --- controller --------------------------------------------------------------

@dataclass
class StepInfo:
    slack: float = 0.0
    cost: float = math.nan
    solve_us: float = 0.0
    converged: bool = True
    predicted_nox: np.ndarray | None = None


class MpcController:
    def __init__(self, model: PredictionModel, cfg: MpcConfig | None = None, name: str = "mpc"):
        self.model = model
        self.cfg = cfg or MpcConfig()
        self.name = name
        self.u_prev = None
        self.info = StepInfo()
        self.faults = 0

    def reset(self, u0) -> None:
        self.u_prev = self.cfg.bounds.clip_input(u0)
        self.info = StepInfo()
        self.faults = 0

    def plan(self, x_meas, t_ref, preview=None):
        """Build and solve the QP for a measured physical state; no side effects."""
        if hasattr(self.model, "observe"):
            self.model.observe(x_meas)
        lti = self.model.freeze(self.u_prev)
        x0 = self.model.scaling.state.transform(x_meas)
        refs = np.full(self.cfg.Np, float(t_ref)) if preview is None else np.asarray(preview, float)
        qp = build_qp(lti, x0, refs, self.u_prev, self.cfg, self.model.scaling)
        d0 = np.append(np.tile(self.model.scaling.input.transform(self.u_prev), self.cfg.Nc), 0.0)
        return lti, x0, qp, solve_qp(qp, d0)

    def step(self, meas, t_ref: float, speed: float | None = None, preview=None) -> np.ndarray:
        if self.u_prev is None:
            raise RuntimeError("controller not initialised; call reset(u0) first")
        t0 = time.perf_counter_ns()
        x_meas = meas.x if hasattr(meas, "x") else np.asarray(meas, dtype=float)
        try:
            _, _, _, sol = self.plan(x_meas, t_ref, preview)
            ok = sol.converged
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            log.error("MPC step failed: %s", exc)
            sol, ok = None, False
        if ok:
            u = self.model.scaling.input.inverse(sol.u[0])
            u = self.cfg.bounds.clip_input(u)
        else:
            self.faults += 1
            log.warning("MPC solver fault; holding previous input %s", self.u_prev)
            u = self.u_prev.copy()
        elapsed = (time.perf_counter_ns() - t0) / 1e3
        self.info = StepInfo(sol.s if sol else math.nan, sol.cost if sol else math.nan, elapsed, ok)
        self.u_prev = u
        return u.copy()


def mpc_step(ctl: MpcController, meas, t_ref: float) -> np.ndarray:
    return ctl.step(meas, t_ref)


def zero_slack_feasible(qp: QpProblem) -> bool:
    """Is there a u inside the box meeting every NOx row with s = 0?"""
    from scipy.optimize import linprog

    n = qp.dim - 1
    if not qp.G.size:
        return True
    res = linprog(np.zeros(n), A_ub=qp.G[:, :n], b_ub=qp.h,
                  bounds=list(zip(qp.lb[:n], qp.ub[:n])), method="highs")
    return res.status == 0


# --- closed loop -------------------------------------------------------------

LOG_COLUMNS = ("cycle", "tref_nm", "fq", "soi", "vgt", "tout", "pman", "nox",
               "slack", "cost", "solve_us", "converged")


@dataclass
class ClosedLoopLog:
    controller: str
    speed: np.ndarray
    rows: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.rows["cycle"])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.rows[key]

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for k in range(len(self)):
                out = []
                for c in LOG_COLUMNS:
                    v = self.rows[c][k]
                    out.append(int(v) if c in ("cycle", "converged") else repr(float(v)))
                w.writerow(out)

    @classmethod
    def read_csv(cls, path, controller: str = "", speed=None) -> "ClosedLoopLog":
        from .dataset import read_columns

        cols = read_columns(path, LOG_COLUMNS, allow_nan=("slack", "cost"))
        n = len(cols["cycle"])
        spd = np.full(n, np.nan) if speed is None else np.broadcast_to(np.asarray(speed, float), (n,)).copy()
        return cls(controller, spd, cols)


def closed_loop(controller, tref, speed, initial=None, prm=None) -> ClosedLoopLog:
    """Run ``controller`` against the surrogate engine.

    Row k holds the reference, the state measured at the start of cycle k and
    the input the controller applied during cycle k.
    """
    from . import plant

    prm = prm or plant.DEFAULT_PARAMS
    tref = np.asarray(tref, dtype=float)
    speed = np.broadcast_to(np.asarray(speed, dtype=float), tref.shape)
    n = tref.size
    rows = {c: np.zeros(n) for c in LOG_COLUMNS}
    if n == 0:
        return ClosedLoopLog(getattr(controller, "name", "controller"), speed.copy(), rows)
    if initial is None:
        u0 = plant.feedforward_baseline(tref[0], speed[0], prm)
        initial = plant.steady_state(u0, speed[0], prm)
    else:
        u0 = None
    controller.reset(u0 if u0 is not None else plant.feedforward_baseline(tref[0], speed[0], prm))
    state = initial
    for k in range(n):
        state = replace(state, speed=float(speed[k]))
        t0 = time.perf_counter_ns()
        try:
            u = controller.step(state, tref[k], speed[k])
        except Exception as exc:  # keep simulating; the fault is recorded
            log.error("controller fault at cycle %d: %s", k, exc)
            u = getattr(controller, "u_prev", None)
            if u is None:
                raise
            u = np.asarray(u, dtype=float)
        elapsed = (time.perf_counter_ns() - t0) / 1e3
        info = getattr(controller, "info", None)
        rows["cycle"][k] = k
        rows["tref_nm"][k] = tref[k]
        rows["fq"][k], rows["soi"][k], rows["vgt"][k] = u
        rows["tout"][k], rows["pman"][k], rows["nox"][k] = state.t_out, state.p_man, state.nox
        rows["slack"][k] = info.slack if info else 0.0
        rows["cost"][k] = info.cost if info else math.nan
        rows["solve_us"][k] = info.solve_us if info else elapsed
        rows["converged"][k] = 1.0 if (info is None or info.converged) else 0.0
        state = plant.surrogate_step(state, u, speed[k], prm)
    return ClosedLoopLog(getattr(controller, "name", "controller"), speed.copy(), rows)
