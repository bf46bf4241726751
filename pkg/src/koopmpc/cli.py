"""Command-line entry point: sample, train, eval-openloop, run-mpc, benchmark."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .closedloop import (
    ControllerSetup,
    benchmark_cpu,
    evaluate_openloop,
    run_closed_loop,
    tracking_summary,
)
from .dynamics import make_plant
from .errors import CheckpointFormatError, ConfigError, KoopmpcError, NumericalError
from .model import load_checkpoint
from .sampling import Dataset, generate_dataset
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ASSERT = 0, 2, 3, 4

# open-loop acceptance thresholds checked by ``eval-openloop --assert``
MAX_RELATIVE_RMSE = 0.05
MAX_FINAL_OFFSET = 0.01


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _plant(cfg):
    return make_plant(cfg["plant"]["name"], cfg["plant"]["params"])


def _checkpoint(cfg, key="checkpoint", required=True):
    path = cfg["io"][key]
    if not path:
        if required:
            raise ConfigError(f"io.{key} is not set")
        return None
    if not Path(path).exists():
        raise ConfigError(f"io.{key}: {path} does not exist")
    return load_checkpoint(path)


def _dataset_summary(ds: Dataset) -> str:
    lines = [f"train windows: {len(ds.train)}", f"validation windows: {len(ds.validation)}"]
    sc = ds.scaling
    for group in ("u", "x", "y"):
        lo = sc.inverse(group, np.zeros(len(sc.lo[group])))
        hi = sc.inverse(group, np.ones(len(sc.lo[group])))
        for i in range(len(lo)):
            tag = " (log)" if sc.log[group][i] else ""
            lines.append(f"  {group}{i + 1}: [{lo[i]:.6g}, {hi[i]:.6g}]{tag}")
    return "\n".join(lines)


def cmd_sample(cfg, out: Path) -> int:
    plant = _plant(cfg)
    ds = generate_dataset(plant, C.sampling_config(cfg), cfg["seed"], cfg["plant"]["params"])
    ds.save(out)
    C.freeze(cfg, out)
    print(_dataset_summary(ds))
    return EXIT_OK


def cmd_train(cfg, out: Path) -> int:
    if cfg["io"]["dataset"]:
        ds = Dataset.load(cfg["io"]["dataset"])
    else:
        ds = generate_dataset(_plant(cfg), C.sampling_config(cfg), cfg["seed"], cfg["plant"]["params"])
        ds.save(out / "dataset")
    start = _checkpoint(cfg, "resume", required=False)
    tc = C.train_config(cfg)
    every = max(1, tc.epochs // 20)

    def progress(epoch, tl, vl):
        if epoch % every == 0 or epoch == tc.epochs:
            print(f"epoch {epoch:6d}  train {tl:.4e}  val {vl if vl is None else format(vl, '.4e')}", flush=True)

    model, report = train(ds, C.model_spec(cfg), tc, model=start, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "best.ckpt")
    report.write(out)
    C.freeze(cfg, out)
    print(f"best epoch {report.best_epoch}, validation loss {report.best_val_loss:.6e}")
    return EXIT_OK


def openloop_failures(report, linear=None) -> list[str]:
    """Threshold checks of the open-loop acceptance test; empty when all pass."""
    fails = []
    ys = [i for i, c in enumerate(report.channels) if c.startswith("y")]
    final = report.plateau_offsets[-1]["relative_offset"] if report.plateau_offsets else None
    for i in ys:
        c = report.channels[i]
        if not report.relative_rmse[i] < MAX_RELATIVE_RMSE:
            fails.append(f"{c}: relative RMSE {report.relative_rmse[i]:.4g} >= {MAX_RELATIVE_RMSE}")
        if final is not None and not final[i] < MAX_FINAL_OFFSET:
            fails.append(f"{c}: final-plateau offset {final[i]:.4g} of range >= {MAX_FINAL_OFFSET}")
    if linear is not None and report.plateau_offsets:
        plant_imp = report.impurity_channel
        if plant_imp is not None:
            j = report.channel(plant_imp)
            a, b = report.plateau_offsets[-1]["offset"][j], linear.plateau_offsets[-1]["offset"][j]
            if not a < b:
                fails.append(f"impurity offset {a:.4g} not below the linear variant's {b:.4g}")
    return fails


def cmd_eval(cfg, out: Path, check: bool = False) -> int:
    plant = _plant(cfg)
    model = _checkpoint(cfg)
    linear_model = _checkpoint(cfg, "linear_checkpoint", required=False)
    prof, u0, duration = C.openloop_test(cfg, plant)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate_openloop(model, plant, prof, u0, duration, cfg["sampling"]["substeps"])
    rep.to_csv(out / "openloop.csv")
    summary = {"model": rep.summary()}
    lin = None
    if linear_model is not None:
        lin = evaluate_openloop(linear_model, plant, prof, u0, duration, cfg["sampling"]["substeps"])
        lin.to_csv(out / "openloop_linear.csv")
        summary["linear"] = lin.summary()
        rows = ["channel,rmse,linear_rmse,final_offset,linear_final_offset"]
        for i, c in enumerate(rep.channels):
            fo = rep.plateau_offsets[-1]["offset"][i] if rep.plateau_offsets else float("nan")
            lo = lin.plateau_offsets[-1]["offset"][i] if lin.plateau_offsets else float("nan")
            rows.append(f"{c},{rep.rmse[i]:.17g},{lin.rmse[i]:.17g},{fo:.17g},{lo:.17g}")
        (out / "comparison.csv").write_text("\n".join(rows) + "\n")
    _dump(out / "openloop.json", summary)
    C.freeze(cfg, out)
    for i, c in enumerate(rep.channels):
        print(f"{c:>4}  rmse {rep.rmse[i]:.4e}  rel {rep.relative_rmse[i]:.4f}  max {rep.max_error[i]:.4e}")
    if rep.diverged or (lin is not None and lin.diverged):
        print("diverged channels: " + ", ".join(rep.diverged + (lin.diverged if lin else [])), file=sys.stderr)
        return EXIT_NUMERICAL
    if check:
        fails = openloop_failures(rep, lin)
        for f in fails:
            print("FAIL " + f, file=sys.stderr)
        if fails:
            return EXIT_ASSERT
        print("all open-loop thresholds met")
    return EXIT_OK


def cmd_run_mpc(cfg, out: Path) -> int:
    plant = _plant(cfg)
    sc = C.scenario(cfg)
    key = "linear_checkpoint" if sc.controller == "koopman_lmpc" else "checkpoint"
    model = None if sc.controller == "ideal_nmpc" else _checkpoint(cfg, key)
    scaling = _scaling_for_ideal(cfg, model)
    problem = C.control_problem(cfg, plant)
    setup = ControllerSetup(problem, C.solver_config(cfg), scaling)
    log = run_closed_loop(plant, model, sc, setup, cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "closedloop.csv")
    summ = tracking_summary(log, sc, problem, plant.input_bounds)
    _dump(out / "closedloop.json", summ.to_dict())
    C.freeze(cfg, out)
    print(f"instants {len(log.k)}, held {summ.held_instants}, max steady tracking error "
          f"{100 * summ.max_relative_error:.3f} % of setpoint, input bound violations {summ.input_violations}")
    return EXIT_OK


def _scaling_for_ideal(cfg, model):
    # the full-plant controller optimizes in the same scaled units as the reduced ones
    if model is not None:
        return model.scaling
    for key in ("checkpoint", "linear_checkpoint"):
        m = _checkpoint(cfg, key, required=False)
        if m is not None:
            return m.scaling
    return None


def cmd_benchmark(cfg, out: Path) -> int:
    plant = _plant(cfg)
    models = {}
    for name in cfg["scenario"]["benchmark_controllers"]:
        if name == "koopman_nmpc":
            models[name] = _checkpoint(cfg)
        elif name == "koopman_lmpc":
            models[name] = _checkpoint(cfg, "linear_checkpoint")
        elif name == "ideal_nmpc":
            models[name] = None
        else:
            raise ConfigError(f"unknown controller {name!r}")
    scaling = next((m.scaling for m in models.values() if m is not None), None) or _scaling_for_ideal(cfg, None)
    setup = ControllerSetup(C.control_problem(cfg, plant), C.solver_config(cfg), scaling)
    table, logs = benchmark_cpu(plant, models, [C.scenario(cfg)], setup)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "benchmark.csv")
    (out / "benchmark.txt").write_text(table.to_text() + "\n")
    for name, ls in logs.items():
        ls[0].to_csv(out / f"closedloop_{name}.csv")
    C.freeze(cfg, out)
    print(table.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="koopmpc", description=__doc__, epilog=C.help_text(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("sample", "simulate the plant and write a windowed dataset"),
        ("train", "train a model; writes best.ckpt, losses.csv, report.json"),
        ("eval-openloop", "roll a checkpoint over the open-loop test"),
        ("run-mpc", "closed-loop run of one controller"),
        ("benchmark", "solve-time comparison of several controllers"),
    ]:
        p = sub.add_parser(name, help=text, description=text, epilog=C.help_text(), formatter_class=fmt)
        p.add_argument("--config", help="TOML config file (defaults apply to missing keys)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "train":
            p.add_argument("--dataset", help="overrides io.dataset")
            p.add_argument("--resume", help="overrides io.resume")
        if name in ("eval-openloop", "run-mpc", "benchmark"):
            p.add_argument("--checkpoint", help="overrides io.checkpoint")
            p.add_argument("--linear-checkpoint", help="overrides io.linear_checkpoint")
        if name == "eval-openloop":
            p.add_argument("--assert", dest="check", action="store_true",
                           help=f"exit 4 unless relative RMSE < {MAX_RELATIVE_RMSE} and final offset "
                                f"< {MAX_FINAL_OFFSET} of range on every output")
        if name == "run-mpc":
            p.add_argument("--controller", choices=["koopman_nmpc", "koopman_lmpc", "ideal_nmpc"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        for attr, key in (("dataset", "dataset"), ("resume", "resume"), ("checkpoint", "checkpoint"),
                          ("linear_checkpoint", "linear_checkpoint")):
            v = getattr(args, attr, None)
            if v:
                cfg["io"][key] = v
        if getattr(args, "controller", None):
            cfg["scenario"]["controller"] = args.controller
        out = Path(args.out)
        if args.command == "sample":
            return cmd_sample(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval-openloop":
            return cmd_eval(cfg, out, args.check)
        if args.command == "run-mpc":
            return cmd_run_mpc(cfg, out)
        return cmd_benchmark(cfg, out)
    except (ConfigError, CheckpointFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, KoopmpcError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
