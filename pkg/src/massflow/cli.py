"""``massflow`` command line: gen, train, eval, predict, gradcheck, bench.

Settings resolve in three layers: built-in defaults, then a JSON file given
with ``--config``, then explicit flags. Every command that writes output
also writes the resolved settings as ``config.json`` next to it.

Exit codes: 0 success, 1 usage, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import records
from . import trainer as tr
from .bench import bench
from .checkpoint import CheckpointError, decode_checkpoint, load_checkpoint, save_checkpoint
from .nn import LayoutError, ShapeError, build_compact_regressor, build_tiny_regressor
from .plots import emit_plots
from .rig import RigConfig, generate_dataset
from .runs import Run
from .volumetric import VolumetricCalibration, calibration_config, fit_calibration

log = logging.getLogger("massflow")

OUT_ENV = "MASSFLOW_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


DEFAULTS = {
    "gen": {"n_runs": 200, "seed": 0, "empty_fraction": 0.1, "min_frames": 30, "max_frames": 90,
            "height": 64, "width": 64, "channels": 3, "speed_fault_rate": 0.0,
            "clutter_rate": 0.0, "glare_rate": 0.0, "occluder_rate": 0.05},
    "train": {"model": "compact", "epochs": 100, "learning_rate": 1e-3, "lr_schedule": "cosine",
              "batch_size": 8, "smoothing": 0.05, "optimizer": "adam", "grayscale": False,
              "smooth_on_raw": False, "seed": 0, "deterministic": False},
    "eval": {"split": "test", "grayscale": False, "overlay": 3},
    "predict": {"split": "test", "grayscale": False},
    "gradcheck": {"seed": 0, "frames": 20, "smoothing": 0.05},
    "bench": {"batch_size": 8, "frames": 1000, "repeats": 5, "seed": 0, "grayscale": False},
}


def _out_default() -> str:
    return os.environ.get(OUT_ENV, "massflow-out")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="massflow", description="Per-frame mass flow from run-level weights.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON file of settings; flags override it")
        if out:
            sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./massflow-out)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--n-runs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--empty-fraction", type=float)
    g.add_argument("--min-frames", type=int)
    g.add_argument("--max-frames", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--channels", type=int, choices=(1, 3))
    g.add_argument("--speed-fault-rate", type=float)
    g.add_argument("--clutter-rate", type=float)
    g.add_argument("--glare-rate", type=float)
    g.add_argument("--occluder-rate", type=float)

    t = sub.add_parser("train", help="train the compact model or fit the volumetric calibration")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory written by gen")
    t.add_argument("--model", choices=("compact", "density-mlp"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    t.add_argument("--lr-schedule", choices=tr.SCHEDULES, help="per-epoch learning-rate schedule")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--smoothing", type=float, help="temporal smoothing weight (0 disables)")
    t.add_argument("--optimizer", choices=("sgd", "sgd-momentum", "adam"))
    t.add_argument("--grayscale", action="store_true", default=None)
    t.add_argument("--smooth-on-raw", action="store_true", default=None,
                   help="penalise differences of raw outputs instead of speed-scaled ones")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true", default=None,
                   help="record that outputs must be byte-reproducible (always true here)")

    e = sub.add_parser("eval", help="metrics, diagnostics and plots on one split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=tr.SPLIT_NAMES)
    e.add_argument("--checkpoint", help="compact model checkpoint (.mflb)")
    e.add_argument("--calibration", help="volumetric calibration (.json)")
    e.add_argument("--grayscale", action="store_true", default=None)
    e.add_argument("--overlay", type=int, help="number of runs to draw signal overlays for")

    pr = sub.add_parser("predict", help="per-frame predictions for a dataset split")
    common(pr)
    pr.add_argument("--data", required=True, help="dataset directory or .mfds file")
    pr.add_argument("--split", choices=tr.SPLIT_NAMES)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--grayscale", action="store_true", default=None)

    gc = sub.add_parser("gradcheck", help="streaming gradient vs direct and finite differences")
    common(gc, out=False)
    gc.add_argument("--seed", type=int)
    gc.add_argument("--frames", type=int)
    gc.add_argument("--smoothing", type=float)

    b = sub.add_parser("bench", help="forward-only inference throughput")
    common(b)
    b.add_argument("--checkpoint")
    b.add_argument("--batch-size", type=int)
    b.add_argument("--frames", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--grayscale", action="store_true", default=None)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    cfg = dict(DEFAULTS.get(args.command, {}))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        loaded = json.loads(path.read_text())
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"out", "data", "split", "checkpoint", "calibration"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose"):
            continue
        if value is not None:
            cfg[key] = value
    if "out" in cfg or hasattr(args, "out"):
        cfg["out"] = cfg.get("out") or _out_default()
    return cfg


def _echo(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2,
                                                sort_keys=True, default=str) + "\n")


def _split_paths(data: str, split: str) -> tuple[Path, Path]:
    d = Path(data)
    if d.is_file():
        return d, d.with_suffix(".mfsc")
    if not d.is_dir():
        raise FileNotFoundError(f"dataset {d} not found")
    rec = d / f"{split}.mfds"
    if not rec.is_file():
        raise FileNotFoundError(f"{rec} not found")
    return rec, d / f"{split}.mfsc"


def _train_config(cfg: dict) -> tr.TrainingConfig:
    return tr.TrainingConfig(smoothing=cfg["smoothing"], learning_rate=cfg["learning_rate"],
                             lr_schedule=cfg["lr_schedule"], batch_size=cfg["batch_size"],
                             epochs=cfg["epochs"], seed=cfg["seed"],
                             optimizer=cfg["optimizer"], grayscale=bool(cfg["grayscale"]),
                             smooth_on_scaled=not cfg["smooth_on_raw"])


def _model_for(shape, grayscale: bool):
    h, w, c = shape
    return build_compact_regressor((h, w, 1 if grayscale else c))


def _load_model_checkpoint(path, shape, grayscale: bool):
    params = decode_checkpoint(Path(path).read_bytes())
    stored_c = params.layout[0].in_dims[-1] if params.layout and params.layout[0].in_dims else None
    want_c = 1 if grayscale else shape[2]
    if stored_c is not None and stored_c != want_c:
        if grayscale:
            raise UsageError(f"--grayscale conflicts with a {stored_c}-channel checkpoint")
        raise UsageError(f"checkpoint expects {stored_c} channel(s); pass --grayscale")
    model = _model_for(shape, grayscale)
    return model, load_checkpoint(path, model)


def cmd_gen(cfg: dict) -> int:
    out = Path(cfg["out"])
    rig = RigConfig(frame_shape=(cfg["height"], cfg["width"], cfg["channels"]), n_runs=cfg["n_runs"],
                    run_length=(cfg["min_frames"], cfg["max_frames"]),
                    empty_fraction=cfg["empty_fraction"], occluder_rate=cfg["occluder_rate"],
                    speed_fault_rate=cfg["speed_fault_rate"], clutter_rate=cfg["clutter_rate"],
                    glare_rate=cfg["glare_rate"], seed=cfg["seed"])
    _echo(cfg, out, "gen")
    manifest = generate_dataset(rig, out)
    print(f"wrote {manifest['n_runs']} runs to {out} ({manifest['counts']})")
    return EXIT_OK


def _write_history(path: Path, history: list[dict]) -> None:
    keys = sorted({k for h in history for k in h})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    train_path, _ = _split_paths(cfg["data"], "train")
    runs = records.read_dataset(train_path)
    valid_path = Path(cfg["data"]) / "validation.mfds"
    valid = records.read_dataset(valid_path) if valid_path.is_file() else None
    tcfg = _train_config(cfg)
    _echo(cfg, out, "train")
    if cfg["model"] == "density-mlp":
        ccfg = calibration_config(seed=tcfg.seed)
        cal, mae = fit_calibration(runs, ccfg, holdout=valid, seed=tcfg.seed)
        cal.save(out / "calibration.json")
        print(f"beta={cal.beta:.6g} m^3/m, holdout MAE {mae:.2f}%")
        return EXIT_OK
    shape = records.dataset_header(train_path)["shape"]
    model = _model_for(shape, tcfg.grayscale)
    params = tr.init_output_bias(model, model.init_params(tcfg.seed), runs, tcfg)
    params, history = tr.train(runs, model, params, tcfg, valid=valid)
    save_checkpoint(params, out / "model.mflb")
    _write_history(out / "history.csv", history)
    last = history[-1] if history else {}
    print(f"trained {len(history)} epochs; last {last}")
    return EXIT_OK


def _overlay_ids(runs: list[Run], k: int) -> list[str]:
    nonempty = [r.id for r in runs if not r.empty]
    return nonempty[:k]


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["out"])
    rec, side_path = _split_paths(cfg["data"], cfg["split"])
    if not cfg.get("checkpoint") and not cfg.get("calibration"):
        raise UsageError("eval needs --checkpoint and/or --calibration")
    runs = records.read_dataset(rec)
    sidecars = records.read_sidecars(side_path) if side_path.is_file() else None
    dt = tr.TrainingConfig.dt
    _echo(cfg, out, "eval")
    signals: dict[str, list] = {}
    reports = {}
    if cfg.get("checkpoint"):
        shape = records.dataset_header(rec)["shape"]
        model, params = _load_model_checkpoint(cfg["checkpoint"], shape, bool(cfg["grayscale"]))
        tcfg = tr.TrainingConfig(grayscale=bool(cfg["grayscale"]))
        signals["vision"] = [ev.predict_signal(model, params, r, tcfg) for r in runs]
        reports["vision"] = ev.run_metrics(signals["vision"], runs, sidecars, dt)
    if cfg.get("calibration"):
        cal = VolumetricCalibration.load(cfg["calibration"])
        signals["volumetric"] = [ev.volumetric_signal(r, cal, dt) for r in runs]
        reports["volumetric"] = ev.run_metrics(signals["volumetric"], runs, sidecars, dt)
    primary = reports.get("vision") or reports["volumetric"]
    baseline = reports.get("volumetric") if "vision" in reports else None
    key = "vision" if "vision" in reports else "volumetric"
    diag = ev.diagnostics(primary, signals[key], runs, sidecars, baseline, dt)
    for name, rep in reports.items():
        rep.write_csv(out / f"runs_{name}.csv")
    with open(out / "group_bias.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "runs", "mean_signed_percent_error"])
        for g, (n, bias) in diag.group_bias.items():
            w.writerow([g, n, repr(bias)])
    truth = {r.id: sidecars[r.id].frame_mass(dt) for r in runs if sidecars and r.id in sidecars}
    emit_plots(signals, diag, out, _overlay_ids(runs, cfg["overlay"]), truth)
    metrics = {name: rep.summary() for name, rep in reports.items()}
    metrics["group_bias"] = diag.group_bias
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for name, rep in reports.items():
        r2 = f", frame R^2 {rep.frame_r2:.3f}" if rep.frame_r2 is not None else ""
        print(f"{name}: MAE {rep.mae_percent:.2f}% over {int((~rep.empty).sum())} runs{r2}")
    if diag.outliers:
        print("outliers: " + ", ".join(f"{o.run_id} ({o.reason})" for o in diag.outliers))
    return EXIT_OK


def cmd_predict(cfg: dict) -> int:
    out = Path(cfg["out"])
    rec, _ = _split_paths(cfg["data"], cfg["split"])
    shape = records.dataset_header(rec)["shape"]
    model, params = _load_model_checkpoint(cfg["checkpoint"], shape, bool(cfg["grayscale"]))
    tcfg = tr.TrainingConfig(grayscale=bool(cfg["grayscale"]))
    _echo(cfg, out, "predict")
    with open(out / "predictions.csv", "w", newline="") as fh, \
            open(out / "totals.csv", "w", newline="") as th:
        w, wt = csv.writer(fh), csv.writer(th)
        w.writerow(["run_id", "frame_index", "mass_kg", "cumulative_kg"])
        wt.writerow(["run_id", "frames", "predicted_kg", "recorded_kg"])
        for run in records.iter_dataset(rec):
            sig = ev.predict_signal(model, params, run, tcfg)
            for j in range(run.n):
                w.writerow([run.id, j, repr(sig.mass_flow[j]), repr(sig.cumulative[j])])
            wt.writerow([run.id, run.n, repr(sig.total), repr(run.total_mass)])
    print(f"wrote predictions to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    model = build_tiny_regressor()
    params = model.init_params(cfg["seed"], np.float64)
    n = cfg["frames"]
    if not 2 <= n <= 64:
        raise UsageError("--frames must lie in [2, 64]")
    run = Run("gradcheck", rng.random((n, *model.input_shape)), rng.uniform(1, 3, n),
              float(rng.uniform(5, 20)))
    tcfg = tr.TrainingConfig(smoothing=cfg["smoothing"], dtype="float64")
    report = tr.grad_check(model, params, run, tcfg)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_bench(cfg: dict) -> int:
    shape = (64, 64, 1 if cfg["grayscale"] else 3)
    if cfg.get("checkpoint"):
        model, params = _load_model_checkpoint(cfg["checkpoint"], (64, 64, 3), bool(cfg["grayscale"]))
    else:
        model = build_compact_regressor(shape)
        params = model.init_params(cfg["seed"])
    rep = bench(model, params, cfg["batch_size"], cfg["frames"], cfg["repeats"], seed=cfg["seed"])
    print(f"batch {rep.batch_size}: {rep.fps_mean:.1f} +/- {rep.fps_std:.1f} frames/s "
          f"over {rep.frames} frames")
    out = Path(cfg["out"])
    _echo(cfg, out, "bench")
    (out / "bench.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, records.DatasetFormatError, CheckpointError, LayoutError,
            ShapeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"invalid settings: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
