"""Experiment pipeline and comparative reporting.

Stages run in order (simulate, identify, tune, control, imitate, report); each
writes into its own directory under the artifacts root together with a
``stamp.json`` holding a content hash of its configuration and of every
upstream stamp.  A stage whose stamp matches is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hyperopt, imitation, lpv, plant
from .dataset import ModelScaling, Trajectory, load_trajectory, nrmse, read_columns, save_trajectory, split
from .mpc import ClosedLoopLog, LpvPrediction, LtiPrediction, MpcConfig, MpcController, closed_loop

log = logging.getLogger(__name__)

REPORT_VERSION = 1
PIPELINE_VERSION = 1
TIMING_COLUMNS = ("solve_us", "time_ms")


# --- references --------------------------------------------------------------

def random_reference(n: int, rng: np.random.Generator, low: float = 50.0, high: float = 350.0,
                     hold: tuple[int, int] = (50, 200)) -> np.ndarray:
    """Piecewise-constant torque targets: uniform levels held for a random number of cycles."""
    if n < 1:
        raise ValueError("reference length must be positive")
    out = np.empty(n)
    k = 0
    while k < n:
        length = int(rng.integers(hold[0], hold[1] + 1))
        out[k:k + length] = rng.uniform(low, high)
        k += length
    return out


def cycles_for_seconds(seconds: float, speed_rpm: float) -> int:
    """Engine cycles in a time span for a four-stroke engine (one cycle per two revolutions)."""
    return int(round(seconds * speed_rpm / 120.0))


def save_reference(tref, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "tref_nm"])
        for k, v in enumerate(np.asarray(tref, dtype=float)):
            w.writerow([k, repr(float(v))])


def load_reference(path) -> np.ndarray:
    return read_columns(path, ["tref_nm"])["tref_nm"]


# --- report ------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerRow:
    controller: str
    nox_pct: float          # change of mean NOx vs benchmark
    fq_pct: float           # change of total fuel vs benchmark
    load_error_pct: float   # NRMSE of torque against the reference
    time_ms: float          # mean controller time per cycle
    violations: int         # cycles with NOx above the limit
    mean_nox: float
    total_fq: float


@dataclass
class ImprovementReport:
    speed: float
    rows: list[ControllerRow] = field(default_factory=list)

    def row(self, controller: str) -> ControllerRow:
        for r in self.rows:
            if r.controller == controller:
                return r
        raise KeyError(controller)

    def to_dict(self) -> dict:
        return {"speed_rpm": self.speed, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d) -> "ImprovementReport":
        return cls(float(d["speed_rpm"]), [ControllerRow(**r) for r in d["rows"]])


def tracking_error(tout, ref) -> float:
    """Torque NRMSE (%) against the reference; a constant reference normalises by its level."""
    ref = np.asarray(ref, dtype=float)
    if np.ptp(ref) > 0:
        return nrmse(tout, ref)
    level = abs(float(ref[0]))
    if level == 0.0:
        raise ValueError("reference is identically zero; tracking error undefined")
    return 100.0 * math.sqrt(float(np.mean((np.asarray(tout, dtype=float) - ref) ** 2))) / level


def compute_report(benchmark: ClosedLoopLog, logs: Sequence[ClosedLoopLog], nox_limit: float = 500.0,
                   speed: float | None = None) -> ImprovementReport:
    """Percent changes of every log against the benchmark run (benchmark row first)."""
    ref = benchmark["tref_nm"]
    base_nox = float(np.mean(benchmark["nox"]))
    base_fq = float(np.sum(benchmark["fq"]))
    if base_nox <= 0 or base_fq <= 0:
        raise ValueError("benchmark NOx and fuel must be positive")
    rows = []
    for lg in (benchmark, *logs):
        if len(lg) != len(benchmark) or not np.array_equal(lg["tref_nm"], ref):
            raise ValueError(f"log {lg.controller!r} does not follow the benchmark reference profile")
        if not np.array_equal(np.asarray(lg.speed), np.asarray(benchmark.speed), equal_nan=True):
            raise ValueError(f"log {lg.controller!r} does not follow the benchmark speed profile")
        mean_nox = float(np.mean(lg["nox"]))
        total_fq = float(np.sum(lg["fq"]))
        rows.append(ControllerRow(
            controller=lg.controller,
            nox_pct=100.0 * (mean_nox - base_nox) / base_nox,
            fq_pct=100.0 * (total_fq - base_fq) / base_fq,
            load_error_pct=tracking_error(lg["tout"], ref),
            time_ms=float(np.mean(lg["solve_us"])) / 1000.0,
            violations=int(np.sum(lg["nox"] > nox_limit)),
            mean_nox=mean_nox,
            total_fq=total_fq,
        ))
    spd = speed if speed is not None else float(np.asarray(benchmark.speed).flat[0])
    return ImprovementReport(spd, rows)


def write_report(reports: Sequence[ImprovementReport], path) -> None:
    doc = {"format": "improvement-report", "version": REPORT_VERSION,
           "reports": [r.to_dict() for r in reports]}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_report(path) -> list[ImprovementReport]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "improvement-report" or doc.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: not an improvement report of version {REPORT_VERSION}")
    return [ImprovementReport.from_dict(r) for r in doc["reports"]]


def read_log(path, controller: str = "", speed=None) -> ClosedLoopLog:
    return ClosedLoopLog.read_csv(path, controller, speed)


# --- recipe ------------------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    seed: int = 0
    # identification experiment
    ident_speed: float = 1500.0
    ident_cycles: int = 2000
    train_fraction: float = 0.8
    sigma: float = 1.0                 # used when tune_budget == 0
    gamma: float = 1e5
    tune_budget: int = 30
    per_dimension_gamma: bool = False
    # control
    mpc: dict = field(default_factory=dict)
    linearization: str = "taylor"
    eval_speeds: tuple[float, ...] = (1500.0, 1200.0)
    eval_cycles: int = 1000
    # imitation
    imitation_speeds: tuple[float, ...] = (1200.0, 1400.0, 1500.0, 1600.0)
    imitation_cycles: int = 2000
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "eval_speeds", tuple(float(s) for s in self.eval_speeds))
        object.__setattr__(self, "imitation_speeds", tuple(float(s) for s in self.imitation_speeds))
        if self.ident_cycles < 10 or self.eval_cycles < 2 or self.imitation_cycles < 2:
            raise ValueError("cycle counts are too small")
        if self.tune_budget != 0 and self.tune_budget < 5:
            raise ValueError("tune_budget must be 0 (skip) or at least 5")
        MpcConfig.from_dict(self.mpc)
        imitation.TrainConfig.from_dict(self.train)

    @classmethod
    def load(cls, path) -> "Recipe":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_speeds"] = list(self.eval_speeds)
        d["imitation_speeds"] = list(self.imitation_speeds)
        return d


# --- pipeline ----------------------------------------------------------------

class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _speed_tag(speed: float) -> str:
    return f"{speed:g}rpm"


@dataclass
class StageResult:
    name: str
    key: str
    cached: bool
    seconds: float


class Pipeline:
    """Runs the recipe's stages with content-hashed caching."""

    STAGES = ("simulate", "identify", "tune", "control", "imitate", "report")

    def __init__(self, recipe: Recipe, root, params: plant.SurrogateParams = plant.DEFAULT_PARAMS):
        self.recipe = recipe
        self.root = Path(root)
        self.params = params
        self.results: list[StageResult] = []
        self._keys: dict[str, str] = {}

    # configuration that each stage's output depends on (besides upstream stages)
    def _stage_config(self, name: str) -> dict:
        r = self.recipe
        if name == "simulate":
            return {"seed": r.seed, "speed": r.ident_speed, "cycles": r.ident_cycles,
                    "plant": self.params.to_dict()}
        if name == "identify":
            return {"train_fraction": r.train_fraction, "sigma": r.sigma, "gamma": r.gamma}
        if name == "tune":
            return {"budget": r.tune_budget, "per_dimension_gamma": r.per_dimension_gamma, "seed": r.seed}
        if name == "control":
            return {"mpc": MpcConfig.from_dict(r.mpc).to_dict(), "linearization": r.linearization,
                    "speeds": list(r.eval_speeds), "cycles": r.eval_cycles, "seed": r.seed,
                    "plant": self.params.to_dict()}
        if name == "imitate":
            return {"speeds": list(r.imitation_speeds), "cycles": r.imitation_cycles,
                    "train": imitation.TrainConfig.from_dict(r.train).to_dict(), "seed": r.seed}
        return {}

    def stage_dir(self, name: str) -> Path:
        return self.root / name

    def stage_key(self, name: str) -> str:
        if name not in self._keys:
            i = self.STAGES.index(name)
            upstream = [self.stage_key(s) for s in self.STAGES[:i]]
            self._keys[name] = _digest({"stage": name, "pipeline": PIPELINE_VERSION,
                                        "config": self._stage_config(name), "upstream": upstream})
        return self._keys[name]

    def _cached(self, name: str) -> bool:
        stamp = self.stage_dir(name) / "stamp.json"
        if not stamp.exists():
            return False
        try:
            return json.loads(stamp.read_text()).get("key") == self.stage_key(name)
        except json.JSONDecodeError:
            return False

    def run(self, stop_after: str | None = None) -> list[StageResult]:
        self.root.mkdir(parents=True, exist_ok=True)
        for name in self.STAGES:
            t0 = time.perf_counter()
            cached = self._cached(name)
            if not cached:
                d = self.stage_dir(name)
                d.mkdir(parents=True, exist_ok=True)
                stamp = d / "stamp.json"
                if stamp.exists():
                    stamp.unlink()
                log.info("running stage %s", name)
                try:
                    getattr(self, f"_run_{name}")(d)
                except Exception as exc:
                    raise StageError(name, exc) from exc
                stamp.write_text(json.dumps({"stage": name, "key": self.stage_key(name)}) + "\n")
            else:
                log.info("stage %s is up to date", name)
            self.results.append(StageResult(name, self.stage_key(name), cached, time.perf_counter() - t0))
            if name == stop_after:
                break
        return self.results

    # --- stage bodies ---
    def _run_simulate(self, d: Path) -> None:
        r = self.recipe
        rng = np.random.default_rng(r.seed)
        inputs = plant.random_step_inputs(r.ident_cycles, rng)
        save_trajectory(plant.simulate_plant(inputs, r.ident_speed, prm=self.params), d / "ident.csv")

    def _load_split(self) -> tuple[Trajectory, Trajectory, ModelScaling]:
        traj = load_trajectory(self.stage_dir("simulate") / "ident.csv")
        train, val = split(traj, self.recipe.train_fraction)
        return train, val, ModelScaling.fit(train)

    def _run_identify(self, d: Path) -> None:
        r = self.recipe
        train, val, scaling = self._load_split()
        model = lpv.fit(train, lpv.KernelConfig.shared(r.sigma, r.gamma), scaling)
        model.save(d / "lpv.json")
        x, u, _, xn = lpv.transitions(train, scaling)
        arx = lpv.fit_arx(x, u, xn)
        save_lti(arx, scaling, d / "arx.json")
        metrics, table = identification_metrics(model, arx, val)
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _write_table(table, d / "freerun.csv")

    def _run_tune(self, d: Path) -> None:
        r = self.recipe
        train, val, scaling = self._load_split()
        if r.tune_budget == 0:
            model = lpv.LpvModel.load(self.stage_dir("identify") / "lpv.json")
            hist = hyperopt.OptHistory(("log_sigma", "log_gamma"))
        else:
            bounds = hyperopt.HyperBounds.default(r.per_dimension_gamma)
            best, hist = hyperopt.optimize(hyperopt.IdentificationObjective(train, val, scaling),
                                           bounds, r.tune_budget, r.seed)
            model = lpv.fit(train, hyperopt.point_to_config(best), scaling)
        hist.write_csv(d / "history.csv")
        model.save(d / "lpv.json")
        arx = load_lti(self.stage_dir("identify") / "arx.json")[0]
        metrics, table = identification_metrics(model, arx, val)
        metrics["kernel"] = {"sigma": model.kernel.sigma, "gamma": list(model.kernel.gamma)}
        (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _write_table(table, d / "freerun.csv")

    def _controllers(self):
        r = self.recipe
        cfg = MpcConfig.from_dict(r.mpc)
        model = lpv.LpvModel.load(self.stage_dir("tune") / "lpv.json")
        arx, scaling = load_lti(self.stage_dir("identify") / "arx.json")
        return {
            "benchmark": lambda: plant.FeedforwardController(self.params),
            "lmpc": lambda: MpcController(LtiPrediction(arx, scaling), cfg, "lmpc"),
            "lpv-mpc": lambda: MpcController(LpvPrediction(model, r.linearization), cfg, "lpv-mpc"),
        }

    def eval_reference(self) -> np.ndarray:
        # one profile shared by every speed so the reports are comparable
        return random_reference(self.recipe.eval_cycles, np.random.default_rng([self.recipe.seed, 2]))

    def _run_control(self, d: Path) -> None:
        ctls = self._controllers()
        for speed in self.recipe.eval_speeds:
            tref = self.eval_reference()
            save_reference(tref, d / f"reference_{_speed_tag(speed)}.csv")
            for name, make in ctls.items():
                lg = closed_loop(make(), tref, speed, prm=self.params)
                lg.write_csv(d / f"{name}_{_speed_tag(speed)}.csv")

    def _run_imitate(self, d: Path) -> None:
        r = self.recipe
        make = self._controllers()["lpv-mpc"]
        logs = []
        for n, speed in enumerate(r.imitation_speeds):
            tref = random_reference(r.imitation_cycles, np.random.default_rng([r.seed, 3, n]))
            lg = closed_loop(make(), tref, speed, prm=self.params)
            lg.write_csv(d / f"collect_{_speed_tag(speed)}.csv")
            logs.append(lg)
        data = imitation.collect_dataset(logs)
        data.save_csv(d / "dataset.csv")
        cfg = imitation.TrainConfig.from_dict({**r.train, "seed": r.train.get("seed", r.seed)})
        model, curves = imitation.train(data, cfg)
        model.save(d / "network.json")
        curves.write_csv(d / "curves.csv")
        for speed in r.eval_speeds:
            tref = load_reference(self.stage_dir("control") / f"reference_{_speed_tag(speed)}.csv")
            lg = closed_loop(imitation.ImitationController(model), tref, speed, prm=self.params)
            lg.write_csv(d / f"imitative_{_speed_tag(speed)}.csv")

    def _run_report(self, d: Path) -> None:
        reports = []
        for speed in self.recipe.eval_speeds:
            tag = _speed_tag(speed)
            ctl = self.stage_dir("control")
            bm = read_log(ctl / f"benchmark_{tag}.csv", "benchmark", speed)
            others = [read_log(ctl / f"lmpc_{tag}.csv", "lmpc", speed),
                      read_log(ctl / f"lpv-mpc_{tag}.csv", "lpv-mpc", speed),
                      read_log(self.stage_dir("imitate") / f"imitative_{tag}.csv", "imitative", speed)]
            reports.append(compute_report(bm, others, MpcConfig.from_dict(self.recipe.mpc).bounds.nox[1], speed))
        write_report(reports, d / "report.json")
        with open(d / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["speed_rpm", *(f.name for f in fields(ControllerRow))])
            for rep in reports:
                for row in rep.rows:
                    w.writerow([rep.speed, *asdict(row).values()])


def run_experiment(recipe: Recipe | str | Path, root, params: plant.SurrogateParams = plant.DEFAULT_PARAMS,
                   stop_after: str | None = None) -> Pipeline:
    if not isinstance(recipe, Recipe):
        recipe = Recipe.load(recipe)
    pipe = Pipeline(recipe, root, params)
    pipe.run(stop_after)
    return pipe


# --- identification metrics & helpers ------------------------------------------

def identification_metrics(model: lpv.LpvModel, arx: lpv.FrozenLti, val: Trajectory):
    """One-step and free-run NRMSE (physical units, %) of the LPV and ARX models on ``val``."""
    sc = model.scaling
    x, u, p, xn = lpv.transitions(val, sc, model.p_channels)
    meas = sc.state.inverse(xn)
    one_lpv = sc.state.inverse(lpv.predict_batch(model, x, u, p))
    one_arx = sc.state.inverse(np.array([arx.step(a, b) for a, b in zip(x, u)]))
    try:
        free_lpv = sc.state.inverse(lpv.simulate(model, x[0], u, p))
    except lpv.DivergenceError:
        free_lpv = np.full_like(meas, np.nan)
    try:
        free_arx = sc.state.inverse(lpv.simulate_lti(arx, x[0], u))
    except lpv.DivergenceError:
        free_arx = np.full_like(meas, np.nan)
    names = ("t_out", "p_man", "nox")

    def per_state(pred):
        return {n: nrmse(pred[:, i], meas[:, i]) if np.all(np.isfinite(pred[:, i])) else math.inf
                for i, n in enumerate(names)}

    metrics = {"lpv": {"one_step": per_state(one_lpv), "free_run": per_state(free_lpv)},
               "arx": {"one_step": per_state(one_arx), "free_run": per_state(free_arx)}}
    table = {"cycle": np.arange(1, len(meas) + 1)}
    for i, n in enumerate(names):
        table[f"{n}_meas"] = meas[:, i]
        table[f"{n}_lpv"] = free_lpv[:, i]
        table[f"{n}_arx"] = free_arx[:, i]
    return metrics, table


def _write_table(table: dict, path) -> None:
    cols = list(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for k in range(len(table[cols[0]])):
            w.writerow([repr(float(table[c][k])) if c != "cycle" else int(table[c][k]) for c in cols])


def save_lti(lti: lpv.FrozenLti, scaling: ModelScaling | None, path) -> None:
    doc = {"format": "lti", "version": 1, "A": lti.A.tolist(), "B": lti.B.tolist(),
           "offset": lti.offset.tolist(), "scaling": None if scaling is None else scaling.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_lti(path) -> tuple[lpv.FrozenLti, ModelScaling | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "lti" or doc.get("version") != 1:
        raise ValueError(f"{path}: not an lti model file of version 1")
    scaling = None if doc["scaling"] is None else ModelScaling.from_dict(doc["scaling"])
    return lpv.FrozenLti(np.array(doc["A"]), np.array(doc["B"]), None, np.array(doc["offset"])), scaling


def content_digest(path, ignore_columns: Sequence[str] = TIMING_COLUMNS) -> str:
    """SHA-256 of a CSV with wall-clock columns blanked (other files hashed raw)."""
    path = Path(path)
    if path.suffix != ".csv":
        return hashlib.sha256(path.read_bytes()).hexdigest()
    h = hashlib.sha256()
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, [])
        drop = {i for i, c in enumerate(header) if c in ignore_columns}
        h.update(",".join(header).encode())
        for row in rows:
            h.update(("\n" + ",".join("" if i in drop else v for i, v in enumerate(row))).encode())
    return h.hexdigest()


def artifact_digests(root, ignore_columns: Sequence[str] = TIMING_COLUMNS) -> dict[str, str]:
    """Digest of every CSV artifact below ``root`` keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): content_digest(p, ignore_columns)
            for p in sorted(root.rglob("*.csv"))}
