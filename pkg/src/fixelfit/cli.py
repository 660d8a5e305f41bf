"""Command-line interface.

Subcommands: simulate, fit, eval, benchmark, check-grad. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numerical failure.
Thread count comes from --threads or the FIXELFIT_THREADS env var;
--threads 1 gives bitwise-deterministic runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import torch

from . import metrics as metrics_mod
from . import phantom as phantom_mod
from .acquisition import load_scheme_files, synthetic_scheme, write_scheme_files
from .config import RunConfig, load_config, save_resolved
from .errors import ConfigError, DataError, FixelfitError, NumericalError
from .forward_model import ModelConstants, predict_from_maps
from .gradient_engine import fd_check
from .objective import LossMode
from .optimizer import b0_normalize, fit_volume, init_params
from .volume_io import Volume, read_nifti, read_param_maps, write_nifti, write_param_maps

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _setup_threads(cfg_threads: int | None, flag_threads: int | None) -> int:
    n = flag_threads or cfg_threads
    if n is None:
        env = os.environ.get("FIXELFIT_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"FIXELFIT_THREADS must be an integer, got {env!r}") from None
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    torch.set_num_threads(n)
    return n


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    amap = vars(args)

    def has(name):
        return amap.get(name) is not None

    if has("seed"):
        cfg.fit.seed = args.seed
        cfg.phantom.seed = args.seed
    if has("snr"):
        cfg.phantom.snr = args.snr
    if has("voxels_per_angle"):
        cfg.phantom.voxels_per_angle = args.voxels_per_angle
    if has("angles"):
        cfg.phantom.angles_deg = [float(a) for a in args.angles.split(",") if a.strip()]
    if has("sigma_g"):
        cfg.phantom.sigma_g = args.sigma_g
    if has("mode"):
        cfg.fit.mode = args.mode
    if has("k"):
        cfg.fit.n_fibers = args.k
    if has("iterations"):
        cfg.fit.iterations = args.iterations
    if amap.get("no_calibration"):
        cfg.fit.calibration_enabled = False
    if amap.get("no_normalize"):
        cfg.fit.normalize = False
    if amap.get("repulsion_only"):
        cfg.fit.repulsion_only = True
    if has("f_detect"):
        cfg.metrics.f_detect = args.f_detect
    if has("angle_tol"):
        cfg.metrics.angle_tol_deg = args.angle_tol
    return cfg


def _scheme_from_config(cfg: RunConfig):
    return synthetic_scheme(
        cfg.phantom.shells, cfg.phantom.dirs_per_shell, cfg.phantom.n_b0, cfg.phantom.seed
    )


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _setup_threads(cfg.threads, args.threads)
    out = args.out
    os.makedirs(out, exist_ok=True)

    scheme = _scheme_from_config(cfg)
    spec = cfg.phantom_spec()
    data, truth = phantom_mod.build_benchmark(spec, scheme)
    if cfg.phantom.sigma_g > 0:
        gain_rng = np.random.default_rng([spec.seed, 7919])
        data, gains = phantom_mod.gain_perturb(data, cfg.phantom.sigma_g, gain_rng)
        truth.gains = gains

    write_nifti(Volume(data=data.astype(np.float32)), os.path.join(out, "data.nii"))
    write_scheme_files(scheme, os.path.join(out, "data.bval"), os.path.join(out, "data.bvec"))
    phantom_mod.write_ground_truth(truth, os.path.join(out, "ground_truth.json"))
    save_resolved(cfg, os.path.join(out, "config.resolved.json"))

    print(f"simulated {truth.n_voxels} voxels, N={scheme.n_measurements} measurements, "
          f"SNR={spec.snr:g}, angles={list(spec.angles_deg)}, "
          f"sigma_g={cfg.phantom.sigma_g:g}, seed={spec.seed}")
    print(f"wrote dataset to {out}")
    return EXIT_OK


def _load_fit_inputs(args, cfg: RunConfig):
    vol = read_nifti(args.data)
    scheme = load_scheme_files(args.bval, args.bvec)
    if vol.dims[3] != scheme.n_measurements:
        raise DataError(f"volume has {vol.dims[3]} measurements but the gradient "
                        f"table has {scheme.n_measurements}")
    y = vol.data.astype(np.float64)
    if args.mask:
        mask = read_nifti(args.mask).data[..., 0] > 0.5
        if mask.shape != y.shape[:3]:
            raise DataError("mask shape does not match data grid")
    else:
        mask = np.ones(y.shape[:3], dtype=bool)
    if cfg.fit.normalize:
        y, mask = b0_normalize(y, scheme, mask)
    return y, mask, scheme, vol


def cmd_fit(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _setup_threads(cfg.threads, args.threads)
    out = args.out
    os.makedirs(out, exist_ok=True)

    y, mask, scheme, vol = _load_fit_inputs(args, cfg)
    fit_cfg = cfg.fit_config()
    t0 = time.monotonic()
    fit = fit_volume(y, mask, scheme, fit_cfg)
    wall = time.monotonic() - t0

    write_param_maps(fit, out, voxel_size=vol.voxel_size, affine=vol.affine)
    with open(os.path.join(out, "fit_log.jsonl"), "w") as f:
        for rec in fit.traces:
            slab = rec["slab"]
            for it, row in enumerate(rec["trace"]):
                f.write(json.dumps({"slab": slab, "iteration": it, **row}) + "\n")

    y_hat = predict_from_maps(fit, scheme, fit_cfg.constants)
    recon = metrics_mod.reconstruction_mse(y_hat, y, mask)
    summary = {
        "mode": fit_cfg.mode.value,
        "n_fibers": fit_cfg.n_fibers,
        "iterations": fit_cfg.iterations,
        "n_masked_voxels": int(mask.sum()),
        "final_objective": fit.traces[-1]["trace"][-1]["total"],
        "reconstruction_mse": recon,
        "sigma": fit.sigma,
        "wall_time_s": wall,
        "calibration_enabled": fit_cfg.calibration_enabled,
        "seed": fit_cfg.seed,
        "data": os.path.abspath(args.data),
    }
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    save_resolved(cfg, os.path.join(out, "config.resolved.json"))
    print(f"fitted {summary['n_masked_voxels']} voxels in {wall:.1f}s "
          f"({fit_cfg.mode.value} mode, {fit_cfg.iterations} iterations); "
          f"final objective {summary['final_objective']:.6g}, "
          f"reconstruction MSE {recon:.3e}, sigma {fit.sigma:.4f}")
    print(f"wrote parameter maps to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _setup_threads(cfg.threads, args.threads)
    out = args.out or args.fit_dir

    maps = read_param_maps(args.fit_dir)
    truth = phantom_mod.read_ground_truth(args.truth)
    n_vox = int(np.prod(maps.s0.shape))
    if truth.n_voxels != n_vox:
        raise DataError(f"fit has {n_vox} voxels but ground truth has {truth.n_voxels}")

    peaks = metrics_mod.extract_peaks(
        maps.wm_fractions, maps.directions,
        f_detect=cfg.metrics.f_detect, merge_deg=cfg.metrics.merge_deg,
    )
    report = metrics_mod.evaluate_against_truth(
        truth, peaks, angle_tol=cfg.metrics.angle_tol_deg, f_detect=cfg.metrics.f_detect
    )

    summary_path = os.path.join(args.fit_dir, "summary.json")
    if os.path.isfile(summary_path):
        with open(summary_path) as f:
            fit_summary = json.load(f)
        report["reconstruction_mse"] = fit_summary.get("reconstruction_mse")
        report["mode"] = fit_summary.get("mode")
        if fit_summary.get("mode") == "nll" and truth.sigma:
            sig = fit_summary.get("sigma")
            report["sigma_fit"] = sig
            report["sigma_true"] = truth.sigma
            report["sigma_rel_error"] = metrics_mod.sigma_recovery(sig, truth.sigma)

    os.makedirs(out, exist_ok=True)
    metrics_mod.write_metrics_json(report, os.path.join(out, "metrics.json"))
    metrics_mod.write_metrics_csv(report, os.path.join(out, "metrics.csv"))

    print(f"{'angle':>8} {'n':>6} {'err(deg)':>9} {'recall':>7} {'F1':>6} {'missed':>7}")
    for row in report["per_angle"]:
        print(f"{row['label']:>8} {row['n_voxels']:>6} {row['mean_error_deg']:>9.2f} "
              f"{row['recall']:>7.3f} {row['f1']:>6.3f} {row['n_missed']:>7}")
    o = report["overall"]
    print(f"{'overall':>8} {o['n_voxels']:>6} {o['mean_error_deg']:>9.2f} "
          f"{o['recall']:>7.3f} {o['f1']:>6.3f} {o['n_missed']:>7}")
    if "sigma_rel_error" in report:
        print(f"sigma: fitted {report['sigma_fit']:.4f} vs true {report['sigma_true']:.4f} "
              f"(rel err {report['sigma_rel_error']:.3f})")
    print(f"(f_detect={report['f_detect']:g}, angle_tol={report['angle_tol_deg']:g} deg)")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .benchmark import run_benchmark  # deferred: pulls in the full pipeline

    cfg = _apply_overrides(load_config(args.config), args)
    n_threads = _setup_threads(cfg.threads, args.threads)
    cfg.fit.repulsion_only = True  # synthetic experiments use repulsion only
    if args.full:
        cfg.phantom.voxels_per_angle = 200
    elif args.voxels_per_angle is None:
        cfg.phantom.voxels_per_angle = 50

    os.makedirs(args.out, exist_ok=True)
    report = run_benchmark(
        cfg,
        sigma_g=args.sigma_g if args.sigma_g is not None else 0.2,
        include_optimizers=args.optimizers,
        progress=print,
    )
    report["threads"] = n_threads
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    save_resolved(cfg, os.path.join(args.out, "config.resolved.json"))

    print("\n=== crossing-fiber benchmark (best-match error, deg) ===")
    for mode_name in ("mse", "nll"):
        row = report["table"][mode_name]
        cells = " ".join(f"{label}:{val:.1f}" for label, val in row["per_angle"].items())
        print(f"PRISM_{mode_name.upper()}: overall {row['overall_error_deg']:.2f} deg, "
              f"recall {row['recall']:.3f}, F1 {row['f1']:.3f} | {cells}")
    gp = report["gain_perturbation"]
    print(f"\n=== gain perturbation (sigma_g={gp['sigma_g']:g}) ===")
    print(f"calibration off: error {gp['no_calibration']['mean_error_deg']:.2f} deg, "
          f"recon MSE {gp['no_calibration']['reconstruction_mse']:.3e}")
    print(f"calibration on:  error {gp['calibration']['mean_error_deg']:.2f} deg, "
          f"recon MSE {gp['calibration']['reconstruction_mse']:.3e}")
    if "optimizers" in report:
        oc = report["optimizers"]
        print(f"\nrprop final MSE {oc['rprop']['final_data_mse']:.3e} "
              f"(reaches 110% at iter {oc['rprop']['iters_to_110pct']}), "
              f"adam final MSE {oc['adam']['final_data_mse']:.3e}")
    print(f"\nwrote report to {os.path.join(args.out, 'report.json')}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    _setup_threads(cfg.threads, args.threads)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)

    dims = (4, 4, 3)
    scheme = synthetic_scheme([1000.0, 2500.0], 8, 1, seed=11)
    fit_cfg = cfg.fit_config()
    tissue, cal = init_params(dims, scheme, fit_cfg, seed=int(rng.integers(2 ** 31)))
    # randomize the state so constraint Jacobians are exercised off-init
    for t in tissue.tensors().values():
        t += torch.from_numpy(rng.normal(0, 0.3, size=tuple(t.shape)))
    cal.bias_grid += torch.from_numpy(rng.normal(0, 0.05, size=tuple(cal.bias_grid.shape)))
    cal.alpha += torch.from_numpy(rng.normal(0, 0.05, size=tuple(cal.alpha.shape)))
    cal.beta += torch.from_numpy(rng.normal(0, 0.01, size=tuple(cal.beta.shape)))

    mask = np.ones(dims, dtype=bool)
    mask[0, 0, 0] = False  # keep one voxel outside the mask
    y = np.abs(rng.normal(0.5, 0.2, size=(*dims, scheme.n_measurements)))

    from .forward_model import scheme_tensors
    b, g = scheme_tensors(scheme)
    worst = 0.0
    n_total = 0
    for mode in (LossMode.MSE, LossMode.RICIAN_NLL):
        rep = fd_check(
            tissue, cal, torch.from_numpy(y), b, g, mode, cfg.weights,
            fit_cfg.constants, torch.from_numpy(mask),
            h=args.h, n_probes=args.probes, seed=args.seed or 0,
        )
        print(f"mode={mode.value}: {rep.total_probes} probes, h={rep.h:g}")
        for name, grp in rep.groups.items():
            print(f"  {name:<16} max rel err {grp.max_rel_error:.3e} "
                  f"(analytic {grp.worst_analytic:+.6e}, numeric {grp.worst_numeric:+.6e})")
        worst = max(worst, rep.max_rel_error)
        n_total += rep.total_probes
    print(f"worst relative discrepancy over {n_total} probes: {worst:.3e} "
          f"(tolerance {args.tol:g})")
    if worst >= args.tol:
        print("GRADIENT CHECK FAILED")
        return EXIT_NUMERICAL
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fixelfit",
        description="Multi-compartment diffusion MRI fitting by analysis-by-synthesis",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="torch thread count (1 = bitwise deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("simulate", help="generate the synthetic crossing-fiber benchmark")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--snr", type=float, default=None)
    sp.add_argument("--voxels-per-angle", type=int, default=None)
    sp.add_argument("--angles", default=None, help="comma-separated crossing angles in degrees")
    sp.add_argument("--sigma-g", type=float, default=None,
                    help="per-measurement log-gain std deviation")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a volume")
    common(sp)
    sp.add_argument("--data", required=True, help=".nii signal volume")
    sp.add_argument("--bval", required=True)
    sp.add_argument("--bvec", required=True)
    sp.add_argument("--mask", default=None, help="optional .nii brain mask")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["mse", "nll"], default=None)
    sp.add_argument("--k", type=int, default=None, help="fiber count")
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--no-calibration", action="store_true",
                    help="freeze calibration at identity")
    sp.add_argument("--no-normalize", action="store_true",
                    help="skip b0 normalization at load")
    sp.add_argument("--repulsion-only", action="store_true",
                    help="disable all tissue priors except direction repulsion")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("eval", help="evaluate a fit against ground truth")
    common(sp)
    sp.add_argument("--fit-dir", required=True)
    sp.add_argument("--truth", required=True, help="ground_truth.json sidecar")
    sp.add_argument("--out", default=None)
    sp.add_argument("--f-detect", type=float, default=None)
    sp.add_argument("--angle-tol", type=float, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("benchmark", help="end-to-end synthetic benchmark")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--voxels-per-angle", type=int, default=None)
    sp.add_argument("--full", action="store_true", help="paper-scale 200 voxels/angle")
    sp.add_argument("--sigma-g", type=float, default=None)
    sp.add_argument("--optimizers", action="store_true",
                    help="include the Rprop-vs-Adam comparison")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("check-grad", help="finite-difference gradient verification")
    common(sp)
    sp.add_argument("--probes", type=int, default=20, help="probes per parameter group")
    sp.add_argument("--h", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_check_grad)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FixelfitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
