"""Command-line interface: ``delag <subcommand> ...``.

A JSON config file may carry one section per subcommand (``synth``, ``fit``,
``gp``, ``validate``) plus top-level ``seed``, ``workers`` and ``log_level``.
Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    DelagError,
    ValidationError,
    load_era5,
    load_features,
    load_stack,
    read_container,
    save_era5,
    save_features,
    save_stack,
    write_container,
)

logger = logging.getLogger("delag")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError("missing_file", f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError("bad_config", f"{path}: {exc}") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ValidationError("missing_file", f"{p} does not exist")


def _settings(args) -> dict:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed")
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    return {"cfg": cfg, "seed": seed, "workers": int(workers)}


def _stochastic(args, section: dict) -> int:
    s = _settings(args)
    if s["seed"] is None:
        raise ValidationError("missing_seed", "a seed is required (--seed or config 'seed')")
    logger.info("seed=%d config_hash=%s", s["seed"], config_hash({"seed": s["seed"], **section}))
    return int(s["seed"])


def parse_days(spec: str) -> np.ndarray:
    """'1..365', '5,10,20' or a mix: '1..10,50'."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    days = np.unique(np.asarray(out, dtype=np.int64))
    if days.size == 0 or days.min() < 1 or days.max() > 366:
        raise ValidationError("bad_days", f"day list {spec!r} must lie in 1..366")
    return days


# -- subcommands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    from .synth import StationConfig, SynthConfig, generate, make_stations, truth_params_doc
    from .validation import make_validation_split

    s = _settings(args)
    section = dict(s["cfg"].get("synth", {}))
    if s["seed"] is not None:
        section["seed"] = int(s["seed"])
    if "seed" not in section:
        raise ValidationError("missing_seed", "a seed is required (--seed or synth.seed)")
    cfg = SynthConfig.from_dict(section)
    logger.info("seed=%d config_hash=%s", cfg.seed, config_hash(cfg.to_dict()))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stack, era5, features, truth = generate(cfg)
    save_stack(stack, out / "stack.lstc")
    save_era5(era5, out / "era5.lstc")
    save_features(features, out / "features.lstc")
    write_container(out / "truth.lstc", truth.true_lst.astype(np.float32), truth.days, {"kind": "truth"})
    (out / "truth_params.json").write_text(json.dumps(truth_params_doc(cfg, truth), sort_keys=True))
    stations = make_stations(cfg, truth, stack, features, StationConfig(**s["cfg"].get("stations", {})))
    stations.write_csv(out / "stations.csv")
    vcfg = s["cfg"].get("validate", {})
    train, manifest = make_validation_split(stack, seed=cfg.seed, n_clear_days=vcfg.get("n_clear_days", 3))
    save_stack(train, out / "train.lstc")
    (out / "split.json").write_text(json.dumps(manifest, sort_keys=True))
    logger.info("wrote %d-day stack (%dx%d) to %s", len(stack.days), cfg.height, cfg.width, out)
    return 0


def cmd_split(args) -> int:
    from .validation import make_validation_split

    _require(args.stack)
    s = _settings(args)
    seed = _stochastic(args, s["cfg"].get("validate", {}))
    stack = load_stack(args.stack)
    train, manifest = make_validation_split(stack, seed=seed,
                                            n_clear_days=s["cfg"].get("validate", {}).get("n_clear_days", 3))
    save_stack(train, args.out_stack)
    Path(args.manifest).write_text(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_fit_atc(args) -> int:
    from .atc import FitConfig, fit_atc, save_ensemble

    _require(args.stack, args.era5, args.mask)
    s = _settings(args)
    section = s["cfg"].get("fit", {})
    seed = _stochastic(args, section)
    cfg = FitConfig.from_dict(section)
    stack = load_stack(args.stack, mask_path=args.mask)
    era5 = load_era5(args.era5)
    ens = fit_atc(stack, era5, cfg, seed=seed, workers=s["workers"])
    manifest = save_ensemble(ens, args.out)
    logger.info("final loss %.4f (initial %.4f); manifest %s",
                ens.loss_history[-1], ens.loss_history[0], manifest)
    return 0


def cmd_fit_gp(args) -> int:
    from .atc import load_ensemble
    from .gp import GpConfig, fit_gp_days, save_gp_dir
    from .recon import day_residuals

    _require(args.stack, args.features, args.era5)
    s = _settings(args)
    section = dict(s["cfg"].get("gp", {}))
    seed = _stochastic(args, section)
    section["seed"] = seed
    cfg = GpConfig.from_dict(section)
    stack = load_stack(args.stack)
    ens = load_ensemble(args.atc)
    era5 = load_era5(args.era5)
    features = load_features(args.features)
    models, skipped = fit_gp_days(day_residuals(stack, ens, era5), features, cfg, workers=s["workers"])
    save_gp_dir(models, skipped, args.out)
    logger.info("fitted %d day models, %d skipped", len(models), len(skipped))
    return 0


def cmd_reconstruct(args) -> int:
    from .atc import load_ensemble
    from .gp import load_gp_dir
    from .recon import MissingGpWarning, reconstruct

    _require(args.stack, args.era5, args.features, args.gp_dir)
    s = _settings(args)
    stack = load_stack(args.stack)
    ens = load_ensemble(args.atc)
    era5 = load_era5(args.era5)
    features = load_features(args.features)
    models, _ = load_gp_dir(args.gp_dir)
    days = parse_days(args.days)
    with warnings.catch_warnings():
        # fallbacks are already reported through the log
        warnings.simplefilter("ignore", MissingGpWarning)
        cube = reconstruct(ens, models, era5, features, stack, days, workers=s["workers"])
    paths = cube.save(args.out)
    if args.figures:
        from .plotting import plot_day

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        for d in parse_days(args.figure_days) if args.figure_days else days[:1]:
            j = cube.index(int(d))
            i = stack.day_index(int(d))
            obs = np.full(cube.mean.shape[1:], np.nan) if i is None else stack.temps[i]
            plot_day(obs, cube.mean[j], cube.lower95[j], cube.upper95[j], fig_dir / f"day_{int(d):03d}.png",
                     title=f"day {int(d)}")
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_validate(args) -> int:
    from .recon import ReconstructionCube
    from .validation import StationTable, validate_all, write_report

    _require(args.stack, args.split, args.stations)
    stack = load_stack(args.stack)
    cube = ReconstructionCube.load(args.recon)
    manifest = json.loads(Path(args.split).read_text())
    stations = StationTable.read_csv(args.stations) if args.stations else None
    report = validate_all(cube, stack, manifest, stations, dataset=args.dataset)
    write_report(report, args.out)
    rows = ["strategy,n,MAE,RMSE,R2,Bias,Cov95"]
    for name, block in report["strategies"].items():
        blocks = {name: block}
        if name == "air_temperature":
            blocks = {f"air_temperature_{k}": v for k, v in block.items() if isinstance(v, dict)}
        for label, b in blocks.items():
            if "metrics" in b:
                m = b["metrics"]
                rows.append(",".join([label, str(m["n"])] + [_fmt(m.get(k)) for k in ("MAE", "RMSE", "R2", "Bias",
                                                                                        "Cov95")]))
            else:
                rows.append(f"{label},skipped,,,,,")
    print("\n".join(rows))
    if args.figures:
        _validation_figures(args.figures, cube, stack, manifest)
    return 0


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def _validation_figures(directory, cube, stack, manifest) -> None:
    from .plotting import plot_scatter
    from .validation import _pooled

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for key, name in (("strategy1", "clear_sky"), ("strategy2", "heavy_cloud")):
        entries = [e for e in manifest.get(key, []) if e["test_index"]]
        if entries:
            pred, truth, _, _ = _pooled(entries, stack, cube)
            plot_scatter(pred, truth, directory / f"{name}.png", title=name.replace("_", " "))


def cmd_airtemp(args) -> int:
    from .recon import ReconstructionCube
    from .validation import StationTable, airtemp_comparison

    _require(args.stations, args.stack)
    stations = StationTable.read_csv(args.stations)
    stack = load_stack(args.stack)
    cube = ReconstructionCube.load(args.recon)
    result = airtemp_comparison(stations, stack, cube)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print("source,n,MAE,RMSE,R2,Bias")
    for source in ("observed", "reconstructed"):
        b = result.get(source, {})
        if "metrics" in b:
            m = b["metrics"]
            print(",".join([source, str(m["n"])] + [_fmt(m[k]) for k in ("MAE", "RMSE", "R2", "Bias")]))
        else:
            print(f"{source},skipped,,,,")
    return 0


def cmd_metrics(args) -> int:
    from .validation import compute_metrics

    _require(args.pred, args.truth, args.lower, args.upper)
    _, pred = read_container(args.pred)
    _, truth = read_container(args.truth)
    if pred.shape != truth.shape:
        raise ValidationError("shape_mismatch", f"{pred.shape} vs {truth.shape}")
    ok = np.isfinite(pred) & np.isfinite(truth)
    lo = hi = None
    if args.lower and args.upper:
        lo = read_container(args.lower)[1][ok]
        hi = read_container(args.upper)[1][ok]
    m = compute_metrics(pred[ok], truth[ok], lo, hi)
    print("n,MAE,RMSE,R2,Bias,Cov95")
    print(",".join([str(m.n), _fmt(m.mae), _fmt(m.rmse), _fmt(m.r2), _fmt(m.bias), _fmt(m.cov95)]))
    return 0


def cmd_crosstrack(args) -> int:
    from .geo import crosstrack_ratio, crosstrack_table, overlap_fraction, parse_range

    if args.table:
        table = crosstrack_table(parse_range(args.table))
        print("latitude_deg,ratio,overlap_fraction")
        for lat, r, f in table:
            print(f"{lat:g},{r:.4f},{f:.4f}")
        if args.plot:
            from .plotting import plot_crosstrack

            plot_crosstrack(table, args.plot)
        return 0
    if args.lat is None:
        raise ValidationError("missing_argument", "one of --lat or --table is required")
    print(f"ratio={crosstrack_ratio(args.lat):.4f} overlap_fraction={overlap_fraction(args.lat):.4f}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--workers", type=int, help="parallel workers (results do not depend on it)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")

    p = argparse.ArgumentParser(prog="delag", description="Daily LST reconstruction with eATC + GP ensembles.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    g = sub.add_parser("split", parents=[common], help="hold out validation cells from a stack")
    g.add_argument("--stack", required=True)
    g.add_argument("--out-stack", required=True)
    g.add_argument("--manifest", required=True)
    g.set_defaults(func=cmd_split)

    g = sub.add_parser("fit-atc", parents=[common], help="fit the eATC snapshot ensemble")
    g.add_argument("--stack", required=True)
    g.add_argument("--era5", required=True)
    g.add_argument("--mask", help="optional LSTC validity mask (nonzero = valid)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_fit_atc)

    g = sub.add_parser("fit-gp", parents=[common], help="fit per-day residual GPs")
    g.add_argument("--stack", required=True)
    g.add_argument("--atc", required=True)
    g.add_argument("--era5", required=True)
    g.add_argument("--features", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_fit_gp)

    g = sub.add_parser("reconstruct", parents=[common], help="write gap-free daily cubes")
    g.add_argument("--stack", required=True)
    g.add_argument("--atc", required=True)
    g.add_argument("--gp-dir", required=True)
    g.add_argument("--era5", required=True)
    g.add_argument("--features", required=True)
    g.add_argument("--days", default="1..365")
    g.add_argument("--out", required=True)
    g.add_argument("--figures", help="directory for per-day map figures")
    g.add_argument("--figure-days", help="days to plot (default: first)")
    g.set_defaults(func=cmd_reconstruct)

    g = sub.add_parser("validate", parents=[common], help="run the validation strategies")
    g.add_argument("--recon", required=True)
    g.add_argument("--stack", required=True, help="full observed stack (holds the withheld truth)")
    g.add_argument("--split", required=True, help="split manifest from generate/split")
    g.add_argument("--stations", help="station CSV")
    g.add_argument("--dataset", default="synthetic")
    g.add_argument("--out", required=True)
    g.add_argument("--figures", help="directory for scatter plots")
    g.set_defaults(func=cmd_validate)

    g = sub.add_parser("airtemp", parents=[common], help="observed vs reconstructed air-temperature models")
    g.add_argument("--stations", required=True)
    g.add_argument("--stack", required=True)
    g.add_argument("--recon", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_airtemp)

    g = sub.add_parser("metrics", parents=[common], help="MAE/RMSE/R2/bias between two cubes")
    g.add_argument("--pred", required=True)
    g.add_argument("--truth", required=True)
    g.add_argument("--lower")
    g.add_argument("--upper")
    g.set_defaults(func=cmd_metrics)

    g = sub.add_parser("crosstrack", parents=[common], help="Landsat cross-track coverage by latitude")
    g.add_argument("--lat", type=float)
    g.add_argument("--table", help="start:stop:step latitude range, emitted as CSV")
    g.add_argument("--plot", help="PNG path for the table figure")
    g.set_defaults(func=cmd_crosstrack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = args.log_level
    if level is None and args.config and Path(args.config).exists():
        try:
            level = json.loads(Path(args.config).read_text()).get("log_level")
        except json.JSONDecodeError:
            pass
    logging.basicConfig(level=getattr(logging, str(level or "INFO").upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except DelagError as exc:
        reason = getattr(exc, "reason", type(exc).__name__)
        msg = str(exc).replace("\n", " ")
        if not msg.startswith(f"{reason}: "):
            msg = f"{reason}: {msg}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except (OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {str(exc).replace(chr(10), ' ')}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
