"""Command-line entry point: ``lpvmpc <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, hyperopt, imitation, lpv, plant
from .dataset import INPUT_COLUMNS, ModelScaling, load_trajectory, read_columns, save_trajectory, split
from .mpc import LpvPrediction, LtiPrediction, MpcConfig, MpcController, closed_loop

log = logging.getLogger("lpvmpc")


def _surrogate(args) -> plant.SurrogateParams:
    return plant.SurrogateParams.load(args.plant) if getattr(args, "plant", None) else plant.DEFAULT_PARAMS


def cmd_simulate_plant(args) -> int:
    cols = read_columns(args.inputs, INPUT_COLUMNS)
    u = np.column_stack([cols["fq_mg"], cols["soi_cad"], cols["vgt_pct"]])
    traj = plant.simulate_plant(u, cols["speed_rpm"], prm=_surrogate(args), start_cycle=int(cols["cycle"][0]))
    save_trajectory(traj, args.out)
    return 0


def cmd_random_inputs(args) -> int:
    n = args.cycles if args.cycles else harness.cycles_for_seconds(args.seconds, args.speed)
    u = plant.random_step_inputs(n, np.random.default_rng(args.seed))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(",".join(INPUT_COLUMNS) + "\n")
        for k, row in enumerate(u):
            fh.write(",".join([str(k), *(repr(float(v)) for v in row), repr(float(args.speed))]) + "\n")
    return 0


def cmd_make_reference(args) -> int:
    n = args.cycles if args.cycles else harness.cycles_for_seconds(args.seconds, args.speed)
    harness.save_reference(harness.random_reference(n, np.random.default_rng(args.seed), args.low, args.high),
                           args.out)
    return 0


def cmd_identify(args) -> int:
    traj = load_trajectory(args.data)
    train, val = split(traj, args.train_fraction)
    scaling = ModelScaling.fit(train)
    model = lpv.fit(train, lpv.KernelConfig.shared(args.sigma, args.gamma), scaling)
    model.save(args.out)
    x, u, _, xn = lpv.transitions(train, scaling)
    arx = lpv.fit_arx(x, u, xn)
    if args.arx_out:
        harness.save_lti(arx, scaling, args.arx_out)
    metrics, _ = harness.identification_metrics(model, arx, val)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.metrics:
        Path(args.metrics).write_text(text + "\n")
    print(text)
    return 0


def cmd_tune(args) -> int:
    traj = load_trajectory(args.data)
    train, val = split(traj, args.train_fraction)
    scaling = ModelScaling.fit(train)
    bounds = hyperopt.HyperBounds.default(args.per_dimension_gamma)
    best, hist = hyperopt.optimize(hyperopt.IdentificationObjective(train, val, scaling),
                                   bounds, args.budget, args.seed)
    hist.write_csv(args.history)
    lpv.fit(train, hyperopt.point_to_config(best), scaling).save(args.out)
    print(json.dumps({n: float(v) for n, v in zip(bounds.names, best)} | {"J": min(hist.values)}))
    return 0


def _mpc_config(path) -> MpcConfig:
    return MpcConfig.load(path) if path else MpcConfig()


def _run_and_save(ctl, args) -> int:
    tref = harness.load_reference(args.reference)
    lg = closed_loop(ctl, tref, args.speed, prm=_surrogate(args))
    lg.write_csv(args.out)
    faults = int(np.sum(lg["converged"] == 0))
    print(f"{ctl.name}: {len(lg)} cycles, mean NOx {np.mean(lg['nox']):.1f} ppm, "
          f"total fuel {np.sum(lg['fq']):.1f} mg, solver faults {faults}")
    return 0


def cmd_run_mpc(args) -> int:
    cfg = _mpc_config(args.config)
    if args.arx:
        lti, scaling = harness.load_lti(args.model)
        ctl = MpcController(LtiPrediction(lti, scaling), cfg, "lmpc")
    else:
        ctl = MpcController(LpvPrediction(lpv.LpvModel.load(args.model), args.linearization), cfg, "lpv-mpc")
    return _run_and_save(ctl, args)


def cmd_run_benchmark(args) -> int:
    return _run_and_save(plant.FeedforwardController(_surrogate(args)), args)


def cmd_collect(args) -> int:
    cfg = _mpc_config(args.config)
    model = lpv.LpvModel.load(args.model)
    logs = []
    for n, speed in enumerate(args.speeds):
        cycles = args.cycles if args.cycles else harness.cycles_for_seconds(args.seconds, speed)
        tref = harness.random_reference(cycles, np.random.default_rng([args.seed, n]))
        ctl = MpcController(LpvPrediction(model, args.linearization), cfg, "lpv-mpc")
        logs.append(closed_loop(ctl, tref, speed, prm=_surrogate(args)))
    imitation.collect_dataset(logs).save_csv(args.out)
    return 0


def cmd_train_imitation(args) -> int:
    data = imitation.ImitationDataset.load_csv(args.data)
    cfg = imitation.TrainConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config \
        else imitation.TrainConfig()
    model, curves = imitation.train(data, cfg)
    model.save(args.out)
    if args.curves:
        curves.write_csv(args.curves)
    final = dict(zip(imitation.TARGETS, curves.val_nrmse[-1]))
    print("validation NRMSE %: " + ", ".join(f"{k} {v:.2f}" for k, v in final.items()))
    return 0


def cmd_run_imitation(args) -> int:
    return _run_and_save(imitation.ImitationController(imitation.ImitationModel.load(args.network)), args)


def cmd_evaluate(args) -> int:
    bm = harness.read_log(args.benchmark, "benchmark", args.speed)
    others = []
    for item in args.logs:
        name, _, path = item.partition("=")
        if not path:
            name, path = Path(item).stem, item
        others.append(harness.read_log(path, name, args.speed))
    rep = harness.compute_report(bm, others, args.nox_limit, args.speed)
    harness.write_report([rep], args.out)
    for r in rep.rows:
        print(f"{r.controller:12s} NOx {r.nox_pct:+7.2f}%  FQ {r.fq_pct:+6.2f}%  "
              f"load error {r.load_error_pct:5.2f}%  {r.time_ms:.3f} ms/cycle")
    return 0


def cmd_run_experiment(args) -> int:
    recipe = harness.Recipe.load(args.recipe) if args.recipe else harness.Recipe()
    try:
        pipe = harness.run_experiment(recipe, args.out, _surrogate(args), args.stop_after)
    except harness.StageError as exc:
        log.error("%s", exc)
        return 1
    for r in pipe.results:
        print(f"{r.name:9s} {'cached' if r.cached else 'ran':6s} {r.seconds:8.2f} s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lpvmpc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        return p

    def length_args(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--cycles", type=int, default=2000)
        g.add_argument("--seconds", type=float, help="duration; converted to cycles at the given speed")

    p = add("simulate-plant", cmd_simulate_plant, "run the surrogate engine on an input CSV")
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plant", help="surrogate constants JSON (default: packaged set)")

    p = add("random-inputs", cmd_random_inputs, "write a random step input CSV for identification")
    length_args(p)
    p.add_argument("--speed", type=float, default=1500.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("make-reference", cmd_make_reference, "write a random piecewise-constant torque reference")
    length_args(p)
    p.add_argument("--speed", type=float, default=1500.0, help="only used with --seconds")
    p.add_argument("--low", type=float, default=50.0)
    p.add_argument("--high", type=float, default=350.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("identify", cmd_identify, "fit the LPV model (and a linear ARX baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arx-out")
    p.add_argument("--metrics")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1e5)
    p.add_argument("--train-fraction", type=float, default=0.8)

    p = add("tune", cmd_tune, "Bayesian optimisation of sigma and gamma")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", required=True)
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-dimension-gamma", action="store_true")
    p.add_argument("--train-fraction", type=float, default=0.8)

    def loop_args(p):
        p.add_argument("--reference", required=True)
        p.add_argument("--speed", type=float, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--plant")

    p = add("run-mpc", cmd_run_mpc, "closed-loop MPC run on the surrogate engine")
    p.add_argument("--model", required=True)
    p.add_argument("--arx", action="store_true", help="model file is a fixed linear model")
    p.add_argument("--config")
    p.add_argument("--linearization", choices=("taylor", "frozen"), default="taylor")
    loop_args(p)

    p = add("run-benchmark", cmd_run_benchmark, "closed-loop run of the feedforward benchmark")
    loop_args(p)

    p = add("collect-imitation-data", cmd_collect, "MPC runs at several speeds -> imitation dataset CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--linearization", choices=("taylor", "frozen"), default="taylor")
    p.add_argument("--speeds", type=float, nargs="+", default=[1200.0, 1400.0, 1500.0, 1600.0])
    length_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plant")

    p = add("train-imitation", cmd_train_imitation, "train the recurrent imitation network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--curves")

    p = add("run-imitation", cmd_run_imitation, "closed-loop run of the imitation controller")
    p.add_argument("--network", required=True)
    loop_args(p)

    p = add("evaluate", cmd_evaluate, "improvement report of controller logs vs a benchmark log")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--logs", nargs="+", required=True, help="NAME=PATH or PATH")
    p.add_argument("--speed", type=float, required=True)
    p.add_argument("--nox-limit", type=float, default=500.0)
    p.add_argument("--out", required=True)

    p = add("run-experiment", cmd_run_experiment, "run the full cached pipeline from a recipe")
    p.add_argument("--recipe")
    p.add_argument("--out", required=True)
    p.add_argument("--stop-after", choices=harness.Pipeline.STAGES)
    p.add_argument("--plant")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
