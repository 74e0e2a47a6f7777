"""Command-line interface: ``dpnet <subcommand> [options] [key=value ...]``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then ``key=value`` overrides and the dedicated flags, in
increasing precedence.  Exit codes: 0 success, 1 invalid input, 2 runtime
or solver failure, 3 failed verification.

Heavy modules are imported inside the commands so that ``--threads`` can
set the BLAS thread variables before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

DEFAULTS = {
    # geometry and data
    "size": 32,
    "n_detectors": 32,
    "n_angles": 30,
    "angle_lo": -1.0471975511965976,  # -pi/3
    "angle_hi": 1.0471975511965976,
    "n": 80,
    "n_test": None,  # None: n // 4
    "delta": 0.05,
    "seed": 0,
    # initial reconstruction
    "reg": "tv",
    "alpha": 0.003,
    "cp_iterations": 500,
    # network and training
    "arch": "dpnsn",
    "mode": "surrogate",
    "beta": None,  # None: delta times the mean noise norm of the training split
    "epochs": 50,
    "lr": 0.001,
    "batch_size": 4,
    "val_fraction": 0.1,
    # studies
    "rate_r": 1.0,
    "rate_k": 20,
    "rate_points": 9,
    "tv_alpha_search": True,
}

PAPER_SCALE = {"size": 128, "n_detectors": 128, "n_angles": 120, "n": 600, "n_test": 100}

# value types of the settings whose default is None
NONE_TYPES = {"n_test": int, "beta": float}

CHOICES = {
    "reg": ("fbp", "tv", "tikhonov", "landweber", "tsvd"),
    "arch": ("none", "res", "nsn", "dpnsn"),
    "mode": ("exact", "surrogate"),
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if default is None:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "null")):
            return None
        default = NONE_TYPES[key](0)
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise CliError(f"{key} expects true or false, got {raw!r}")
        if isinstance(default, int):
            try:
                return int(text)
            except ValueError:
                raise CliError(f"{key} expects an integer, got {raw!r}") from None
        if isinstance(default, float):
            try:
                return float(text)
            except ValueError:
                raise CliError(f"{key} expects a number, got {raw!r}") from None
        return text
    if isinstance(default, bool) and not isinstance(raw, bool):
        raise CliError(f"{key} expects true or false, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not float(raw).is_integer():
            raise CliError(f"{key} expects an integer, got {raw!r}")
        return int(raw)
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise CliError(f"{key} expects a number, got {raw!r}")
        return float(raw)
    return raw


def _check_keys(keys, where: str):
    unknown = sorted(set(keys) - set(DEFAULTS))
    if unknown:
        raise CliError(f"unknown setting(s) {', '.join(unknown)} in {where}; valid keys: {', '.join(sorted(DEFAULTS))}")


def build_config(args) -> dict:
    """Merge defaults, the paper-scale preset, the config file and overrides."""
    cfg = dict(DEFAULTS)
    if args.paper_scale:
        cfg.update(PAPER_SCALE)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        _check_keys(data, str(path))
        cfg.update({k: _coerce(k, v) for k, v in data.items()})
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    _check_keys(overrides, "overrides")
    cfg.update({k: _coerce(k, v) for k, v in overrides.items()})
    for key in ("n", "delta", "seed", "arch", "reg", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value) if isinstance(value, str) else value
    if cfg["n_test"] is None:
        cfg["n_test"] = cfg["n"] // 4
    _validate(cfg)
    return cfg


def _validate(cfg: dict):
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            raise CliError(f"{key} must be one of {', '.join(allowed)}, got {cfg[key]!r}")
    if cfg["delta"] < 0:
        raise CliError("delta must be nonnegative")
    for key in ("size", "n_detectors", "n_angles", "n", "cp_iterations", "epochs", "batch_size", "rate_k"):
        if cfg[key] < 1:
            raise CliError(f"{key} must be positive")
    if cfg["size"] < 2 or cfg["n_detectors"] < 2:
        raise CliError("size and n_detectors must be at least 2")
    if not 0 <= cfg["n_test"] <= cfg["n"]:
        raise CliError("n_test must lie between 0 and n")
    if cfg["alpha"] <= 0 or cfg["lr"] <= 0:
        raise CliError("alpha and lr must be positive")
    if cfg["beta"] is not None and cfg["beta"] < 0:
        raise CliError("beta must be nonnegative")
    if not 0 <= cfg["val_fraction"] < 1:
        raise CliError("val_fraction must lie in [0, 1)")
    if not 0 < cfg["rate_r"] <= 1:
        raise CliError("rate_r must lie in (0, 1]")
    if cfg["rate_points"] < 8:
        raise CliError("rate_points must be at least 8")
    if cfg["seed"] < 0:
        raise CliError("seed must be nonnegative")
    if not cfg["angle_lo"] < cfg["angle_hi"]:
        raise CliError("angle_lo must be smaller than angle_hi")


def _geometry(cfg):
    from .tomo import Geometry

    try:
        return Geometry.limited(cfg["size"], cfg["n_detectors"], cfg["n_angles"], cfg["angle_lo"], cfg["angle_hi"])
    except ValueError as exc:
        raise CliError(f"invalid geometry: {exc}") from None


def _out(args) -> Path:
    from .io import ensure_dir

    return ensure_dir(args.out)


def _initial(cfg, ds, op, idx):
    """Initial reconstructions B_alpha(y) for the samples ``idx``."""
    import numpy as np

    from .regularizers import Regularizer, reconstruct

    reg = Regularizer(cfg["reg"], cfg["alpha"] if cfg["reg"] != "fbp" else 1.0, cfg["cp_iterations"])
    return np.stack([reconstruct(reg, ds.y[i], op) for i in idx])


def _run_manifest(cfg, command: str) -> dict:
    from . import __version__

    return {"command": command, "config": cfg, "version": __version__}


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(cfg, args) -> int:
    from .io import write_json
    from .phantom import NoiseModel, make_dataset, save_dataset

    geom = _geometry(cfg)
    ds = make_dataset(cfg["n"], geom, NoiseModel(cfg["delta"], cfg["seed"]), cfg["seed"], n_test=cfg["n_test"])
    out = save_dataset(ds, _out(args))
    write_json(out / "manifest.json", _run_manifest(cfg, "gen-data"))
    print(f"wrote {len(ds)} samples ({len(ds.indices('train'))} train, {len(ds.indices('test'))} test) to {out}")
    print(f"delta = {cfg['delta']:g}, image {geom.n}x{geom.n}, {len(geom.angles)} angles x {geom.n_detectors} detectors")
    return EXIT_OK


def _load(args):
    from .phantom import load_dataset

    if not args.data:
        raise CliError("--data is required")
    return load_dataset(args.data)


def cmd_train(cfg, args) -> int:
    import csv
    import math

    from .io import write_json
    from .network import NetParams
    from .plotting import plot_training
    from .proxnet import TrainConfig, build_architecture, config_dict, estimate_beta, save_params, train
    from .tomo import RadonTransform

    if cfg["arch"] == "none":
        raise CliError("train needs an architecture (res, nsn or dpnsn)")
    ds = _load(args)
    op = RadonTransform(ds.geometry)
    tr = ds.indices("train")
    if len(tr) == 0:
        raise CliError("the dataset has no training samples")
    beta = cfg["beta"] if cfg["beta"] is not None else estimate_beta(ds.eta[tr], ds.noise.delta)
    tcfg = TrainConfig(cfg["epochs"], cfg["lr"], cfg["batch_size"], "adam", cfg["seed"], cfg["val_fraction"])
    z = _initial(cfg, ds, op, tr)
    arch = build_architecture(cfg["arch"], NetParams.init(cfg["seed"]), op, beta=beta, mode=cfg["mode"])
    print(f"training {cfg['arch']} on {len(tr)} samples ({cfg['reg']} initial reconstructions, beta = {beta:.6g})")
    params, log = train(arch, z, ds.x[tr], tcfg)
    for epoch, t, v in log.rows():
        print(f"epoch {epoch:3d}  train {t:.6g}  val {v:.6g}")
    out = _out(args)
    manifest = {
        "arch": cfg["arch"], "mode": cfg["mode"], "reg": cfg["reg"], "alpha": cfg["alpha"],
        "beta": beta, "seed": cfg["seed"], "training": config_dict(tcfg),
        "best_epoch": log.best_epoch, "initial_loss": log.initial_loss,
        "final_train_loss": log.train_loss[-1], "best_val_loss": None if math.isnan(log.val_loss[0]) else min(log.val_loss),
    }
    save_params(params, out / "weights", manifest)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, t, v in log.rows():
            w.writerow([epoch, f"{t:.12g}", f"{v:.12g}"])
    write_json(out / "manifest.json", _run_manifest(cfg, "train"))
    plot_training({cfg["arch"]: log}, out / "training.png")
    which = "training" if manifest["best_val_loss"] is None else "validation"
    best = log.train_loss[log.best_epoch - 1] if manifest["best_val_loss"] is None else manifest["best_val_loss"]
    print(f"best {which} loss {best:.6g} at epoch {log.best_epoch}; weights in {out / 'weights'}")
    return EXIT_OK


def cmd_reconstruct(cfg, args) -> int:
    import csv

    from .analysis import compute_metrics
    from .io import ensure_dir, write_json, write_pgm
    from .plotting import plot_montage
    from .proxnet import apply_architecture, build_architecture, load_params
    from .tomo import RadonTransform

    ds = _load(args)
    op = RadonTransform(ds.geometry)
    te = ds.indices("test")
    if len(te) == 0:
        te = ds.indices("train")
    z = _initial(cfg, ds, op, te)
    label = cfg["reg"]
    if args.weights:
        params, meta = load_params(Path(args.weights))
        kind = meta.get("arch", cfg["arch"])
        beta = cfg["beta"] if cfg["beta"] is not None else meta.get("beta", 0.0)
        arch = build_architecture(kind, params, op, beta=beta, mode=meta.get("mode", cfg["mode"]))
        z = apply_architecture(arch, z)
        label = f"{cfg['reg']}+{kind}"
    out = _out(args)
    img_dir = ensure_dir(out / "images")
    rows = []
    for i, (k, rec) in enumerate(zip(te, z)):
        write_pgm(img_dir / f"sample{int(k):04d}.pgm", rec)
        m = compute_metrics(rec, ds.x[k])
        rows.append((int(k), m))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "method", "mse", "psnr", "ssim"])
        for k, m in rows:
            w.writerow([k, label, f"{m.mse:.12g}", f"{m.psnr:.12g}", f"{m.ssim:.12g}"])
    write_json(out / "manifest.json", _run_manifest(cfg, "reconstruct"))
    plot_montage({label: z[0]}, out / "reconstruction.png", truth=ds.x[te[0]], ncols=2)
    mse = sum(m.mse for _, m in rows) / len(rows)
    print(f"{label}: {len(rows)} reconstructions, mean MSE {mse:.6g}; results in {out}")
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    from .io import write_json
    from .verify import run_suite

    report = run_suite(cfg["seed"], fault=args.inject_fault, quick=args.quick)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        value = "   error" if c["value"] is None else f"{c['value']:.3e}"
        print(f"{status}  {c['name']:<40s} value {value}  tolerance {c['tolerance']:.3e}  {c['detail']}")
    n_fail = sum(not c["passed"] for c in report["checks"])
    print(f"{len(report['checks']) - n_fail}/{len(report['checks'])} checks passed")
    if args.out:
        write_json(_out(args) / "report.json", report)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_rate_study(cfg, args) -> int:
    import numpy as np

    from .analysis import convergence_study, lipschitz_map, spectral_operator
    from .io import write_json
    from .plotting import plot_rate

    rng = np.random.default_rng(cfg["seed"])
    A = spectral_operator(30, 40, np.geomspace(1.0, 0.2, 30), rng)
    U, V = lipschitz_map(40, 20, rng, 0.5), lipschitz_map(40, 20, rng, 0.5)
    x_source = A.matrix.T @ (A.matrix @ rng.standard_normal(40))
    deltas = np.geomspace(1e-1, 1e-3, cfg["rate_points"])
    r = cfg["rate_r"]
    reg = cfg["reg"] if cfg["reg"] in ("tikhonov", "tsvd", "landweber") else "tikhonov"
    rep = convergence_study(A, U, x_source, deltas, reg_kind=reg, alpha_rule=lambda d: d ** (2 * r),
                            beta_rule=lambda d: d ** r, range_map=V, k=cfg["rate_k"], seed=cfg["seed"])
    out = _out(args)
    rep.write_csv(out / "rates.csv")
    manifest = dict(rep.manifest, r=r, error_slope=rep.error_slope, residual_slope=rep.residual_slope,
                    monotone=rep.error_monotone(0.1), shrink=float(rep.errors[-1] / rep.errors[0]),
                    alpha_rule="delta^(2r)", beta_rule="delta^r", lipschitz_U=0.5, lipschitz_V=0.5)
    write_json(out / "manifest.json", manifest)
    plot_rate(rep, out / "rates.png", title=f"{reg}, r = {r:g}")
    print(f"error slope {rep.error_slope:.3f}, residual slope {rep.residual_slope:.3f} (r = {r:g}); results in {out}")
    return EXIT_OK


def cmd_table(cfg, args) -> int:
    from .analysis import REFERENCE_TABLE, TableConfig, table_experiment, write_table_csv
    from .io import write_json
    from .phantom import NoiseModel, make_dataset
    from .plotting import plot_montage, plot_training

    tcfg = TableConfig(
        n=cfg["size"], n_detectors=cfg["n_detectors"], n_angles=cfg["n_angles"], delta=cfg["delta"],
        n_train=cfg["n"] - cfg["n_test"], n_test=cfg["n_test"], seed=cfg["seed"],
        tv_alpha=None if cfg["tv_alpha_search"] else cfg["alpha"], cp_iterations=cfg["cp_iterations"],
        epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], val_fraction=cfg["val_fraction"],
        mode=cfg["mode"],
    )
    dataset = None
    if args.data:
        dataset = _load(args)
    elif cfg["angle_lo"] != DEFAULTS["angle_lo"] or cfg["angle_hi"] != DEFAULTS["angle_hi"]:
        dataset = make_dataset(cfg["n"], _geometry(cfg), NoiseModel(cfg["delta"], cfg["seed"]), cfg["seed"],
                               n_test=cfg["n_test"])
    res = table_experiment(tcfg, dataset, progress=print)
    out = _out(args)
    write_table_csv(res.rows, out / "table.csv")
    write_json(out / "manifest.json", dict(res.manifest, command=_run_manifest(cfg, "table")))
    plot_montage(res.recon, out / "montage.png", truth=res.ground_truth)
    plot_training(res.logs, out / "training.png")
    print(f"{'method':<8s} {'MSE':>10s} {'PSNR':>8s} {'SSIM':>7s}   reference MSE")
    for name, m in res.rows.items():
        print(f"{name:<8s} {m.mse:10.5f} {m.psnr:8.3f} {m.ssim:7.4f}   {REFERENCE_TABLE[name][0]:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
    "rate-study": cmd_rate_study,
    "table": cmd_table,
}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpnet", description="Data-proximal null-space networks for limited-angle CT.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file with settings (a flat object)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--paper-scale", action="store_true", help="128x128 images, 120 angles, 500/100 split")
        p.add_argument("--threads", type=int, help="cap on BLAS threads")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help=f"setting overrides; keys: {', '.join(sorted(DEFAULTS))}")

    p = sub.add_parser("gen-data", help="simulate phantoms and noisy limited-angle data")
    common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--delta", type=float, help="noise level")

    p = sub.add_parser("train", help="train a network on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--arch", choices=CHOICES["arch"][1:])
    p.add_argument("--reg", choices=CHOICES["reg"])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("reconstruct", help="reconstruct the test split and score it")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--weights", help="weights directory from train (omit for the plain initial method)")
    p.add_argument("--reg", choices=CHOICES["reg"])

    p = sub.add_parser("verify", help="run the property and rate suite")
    common(p, out_required=False)
    p.add_argument("--quick", action="store_true", help="skip gradient checks, fewer samples")
    p.add_argument("--inject-fault", choices=("adjoint-sign",), help="deliberately break a component")

    p = sub.add_parser("rate-study", help="convergence and data-proximity rates on a dense test operator")
    common(p)

    p = sub.add_parser("table", help="train and score all seven method combinations")
    common(p)
    p.add_argument("--data", help="dataset directory (default: simulate one)")
    p.add_argument("--epochs", type=int)
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise CliError("--threads must be positive")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(args.threads)
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - map library failures to exit codes
        from .io import DataFileError

        if isinstance(exc, (DataFileError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        if isinstance(exc, ValueError):
            print(f"error: invalid input: {exc}", file=sys.stderr)
            return EXIT_INVALID
        from .linop import ConvergenceError
        from .proxnet import TrainingDivergedError

        if isinstance(exc, (ConvergenceError, TrainingDivergedError, ArithmeticError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        raise


if __name__ == "__main__":
    sys.exit(main())
