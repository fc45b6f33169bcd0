"""Deterministic engine stand-ins.

* a quasi-static nonlinear surrogate engine (turbo lag, torque and NOx
  first-order responses around static maps),
* a fixed reference ARX state-space model,
* a feedforward map controller used as the benchmark.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields, replace
from importlib import resources

import numpy as np

from .bounds import DEFAULT_BOUNDS, BoundSet
from .dataset import Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurrogateParams:
    version: int
    p_ambient_bar: float
    speed_ref_rpm: float
    tau_turbo_cycles: float
    tau_torque_cycles: float
    tau_nox_cycles: float
    boost_base_bar: float
    boost_vgt_gain_bar: float
    boost_fq_ref_mg: float
    boost_fq_exponent: float
    boost_speed_exponent: float
    torque_gain_nm_per_mg: float
    eta_soi_peak_cad: float
    eta_curvature: float
    friction_nm: float
    pumping_nm: float
    nox_gain: float
    nox_fq_exponent: float
    nox_soi_rate: float
    nox_soi_ref_cad: float
    nox_pman_exponent: float
    nox_speed_exponent: float
    ff_torque_shortfall: float
    ff_soi_at_ref_speed_cad: float
    ff_soi_per_100rpm_cad: float
    ff_vgt_pct: float

    @classmethod
    def load(cls, path=None) -> "SurrogateParams":
        if path is None:
            text = resources.files("lpvmpc.data").joinpath("surrogate_v1.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        raw = json.loads(text)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown surrogate constants: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DEFAULT_PARAMS = SurrogateParams.load()


@dataclass(frozen=True)
class PlantState:
    t_out: float      # N m
    p_man: float      # bar
    nox: float        # ppm
    turbo_lag: float  # bar
    speed: float      # rpm

    @property
    def x(self) -> np.ndarray:
        return np.array([self.t_out, self.p_man, self.nox])

    def check(self, p_ambient: float = 1.0) -> None:
        vals = (self.t_out, self.p_man, self.nox, self.turbo_lag, self.speed)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite plant state {self}")
        if self.p_man < p_ambient - 1e-12 or self.nox < 0.0:
            raise ValueError(f"plant state violates physical limits: {self}")


# --- static maps -------------------------------------------------------------

def efficiency(soi, prm: SurrogateParams = DEFAULT_PARAMS):
    """Combustion-phasing efficiency factor: concave in SOI, 1 at the peak."""
    return 1.0 - prm.eta_curvature * (np.asarray(soi) - prm.eta_soi_peak_cad) ** 2


def boost_command(fq, vgt, speed, prm: SurrogateParams = DEFAULT_PARAMS):
    """Turbo-delivered manifold pressure target (bar); affine in VGT."""
    vane = (np.asarray(vgt) - 70.0) / 30.0
    load = (np.asarray(fq) / prm.boost_fq_ref_mg) ** prm.boost_fq_exponent
    spd = (np.asarray(speed) / prm.speed_ref_rpm) ** prm.boost_speed_exponent
    return prm.p_ambient_bar + (prm.boost_base_bar + prm.boost_vgt_gain_bar * vane) * load * spd


def loss_torque(vgt, speed, prm: SurrogateParams = DEFAULT_PARAMS):
    """Friction plus VGT back-pressure pumping loss (N m)."""
    rel = np.asarray(speed) / prm.speed_ref_rpm
    vane = (np.asarray(vgt) - 70.0) / 30.0
    return prm.friction_nm * rel**2 + prm.pumping_nm * vane**2 * rel


def torque_map(fq, soi, vgt, speed, prm: SurrogateParams = DEFAULT_PARAMS):
    return prm.torque_gain_nm_per_mg * np.asarray(fq) * efficiency(soi, prm) - loss_torque(vgt, speed, prm)


def nox_map(fq, soi, p_man, speed, prm: SurrogateParams = DEFAULT_PARAMS):
    return (prm.nox_gain * np.asarray(fq) ** prm.nox_fq_exponent
            * np.exp(prm.nox_soi_rate * (prm.nox_soi_ref_cad - np.asarray(soi)))
            * np.asarray(p_man) ** prm.nox_pman_exponent
            * (prm.speed_ref_rpm / np.asarray(speed)) ** prm.nox_speed_exponent)


# --- dynamics ----------------------------------------------------------------

def _checked_input(u, bounds: BoundSet) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(3)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError(f"non-finite plant input {u}")
    clipped = bounds.clip_input(u)
    if np.any(clipped != u):
        log.warning("plant input %s outside physical range, clamped to %s", u, clipped)
    return clipped


def surrogate_step(state: PlantState, u, speed: float | None = None,
                   prm: SurrogateParams = DEFAULT_PARAMS, bounds: BoundSet = DEFAULT_BOUNDS) -> PlantState:
    """Advance the surrogate engine by one cycle under input u = (FQ, SOI, VGT)."""
    fq, soi, vgt = _checked_input(u, bounds)
    speed = state.speed if speed is None else float(speed)
    if not np.isfinite(speed) or speed <= 0:
        raise FloatingPointError(f"invalid engine speed {speed}")

    lag = state.turbo_lag + (boost_command(fq, vgt, speed, prm) - state.turbo_lag) / prm.tau_turbo_cycles
    t_ss = torque_map(fq, soi, vgt, speed, prm)
    t_out = state.t_out + (t_ss - state.t_out) / prm.tau_torque_cycles
    nox_ss = nox_map(fq, soi, lag, speed, prm)
    nox = state.nox + (nox_ss - state.nox) / prm.tau_nox_cycles
    return PlantState(float(t_out), float(lag), float(nox), float(lag), speed)


def steady_state(u, speed: float, prm: SurrogateParams = DEFAULT_PARAMS) -> PlantState:
    """Fixed point of surrogate_step for a constant input."""
    fq, soi, vgt = np.asarray(u, dtype=float)
    p = float(boost_command(fq, vgt, speed, prm))
    return PlantState(float(torque_map(fq, soi, vgt, speed, prm)), p,
                      float(nox_map(fq, soi, p, speed, prm)), p, float(speed))


def simulate_plant(inputs, speed, initial: PlantState | None = None,
                   prm: SurrogateParams = DEFAULT_PARAMS, start_cycle: int = 0) -> Trajectory:
    """Open-loop run.  Row k of the result holds the state measured at the
    start of cycle k together with the input applied during cycle k."""
    inputs = np.asarray(inputs, dtype=float)
    n = inputs.shape[0]
    speed = np.broadcast_to(np.asarray(speed, dtype=float), (n,))
    state = initial or steady_state(inputs[0], speed[0], prm)
    states = np.empty((n, 3))
    for k in range(n):
        state = replace(state, speed=float(speed[k]))
        states[k] = state.x
        state = surrogate_step(state, inputs[k], speed[k], prm)
    return Trajectory.from_arrays(states, inputs, speed, start_cycle)


def random_step_inputs(n: int, rng: np.random.Generator, bounds: BoundSet = DEFAULT_BOUNDS,
                       hold: tuple[int, int] = (4, 25)) -> np.ndarray:
    """Amplitude-modulated random steps in each input channel, independently held."""
    lo, hi = bounds.u_min, bounds.u_max
    out = np.empty((n, 3))
    for ch in range(3):
        k = 0
        while k < n:
            length = int(rng.integers(hold[0], hold[1] + 1))
            out[k:k + length, ch] = rng.uniform(lo[ch], hi[ch])
            k += length
    return out


# --- reference linear model --------------------------------------------------

@dataclass(frozen=True)
class ArxModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


REFERENCE_ARX = ArxModel(
    A=np.array([[0.7286, 7.1252, -0.0019],
                [0.0002, 0.9859, 8.9878e-6],
                [-0.6105, 33.94287, 0.9076]]),
    B=np.array([[1.2639, -1.0899, 1.0084e-5],
                [-0.0007, 0.0014, -1.01397e-5],
                [2.9360, -8.2453, -0.0106]]),
    C=np.array([[1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0]]),
)


def arx_step(model: ArxModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return model.A @ x + model.B @ u, model.C @ x


# --- benchmark controller ----------------------------------------------------

class UnreachableTorque(ValueError):
    pass


def feedforward_soi(speed: float, prm: SurrogateParams = DEFAULT_PARAMS, bounds: BoundSet = DEFAULT_BOUNDS) -> float:
    soi = prm.ff_soi_at_ref_speed_cad + prm.ff_soi_per_100rpm_cad * (speed - prm.speed_ref_rpm) / 100.0
    return float(np.clip(soi, *bounds.soi))


def feedforward_baseline(t_ref: float, speed: float, prm: SurrogateParams = DEFAULT_PARAMS,
                         bounds: BoundSet = DEFAULT_BOUNDS) -> np.ndarray:
    """Static benchmark map (FQ, SOI, VGT) for a torque request.

    FQ inverts the steady-state torque map for a request reduced by the
    calibrated shortfall; SOI advances linearly as speed drops; VGT is fixed.
    """
    soi = feedforward_soi(speed, prm, bounds)
    vgt = prm.ff_vgt_pct
    target = (1.0 - prm.ff_torque_shortfall) * max(float(t_ref), 0.0)
    fq = (target + float(loss_torque(vgt, speed, prm))) / (prm.torque_gain_nm_per_mg * float(efficiency(soi, prm)))
    if fq > bounds.fq[1]:
        raise UnreachableTorque(f"torque request {t_ref} N m at {speed} rpm needs FQ {fq:.1f} > {bounds.fq[1]}")
    return np.array([max(fq, bounds.fq[0]), soi, vgt])


class FeedforwardController:
    name = "benchmark"

    def __init__(self, prm: SurrogateParams = DEFAULT_PARAMS, bounds: BoundSet = DEFAULT_BOUNDS):
        self.prm = prm
        self.bounds = bounds

    def reset(self, u0=None) -> None:
        pass

    def step(self, meas: PlantState, t_ref: float, speed: float) -> np.ndarray:
        return feedforward_baseline(t_ref, speed, self.prm, self.bounds)
