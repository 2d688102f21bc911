"""Single entry-point CLI: optimize, render, capture, evaluate, bench.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric failure,
3 I/O error. Non-zero exits print one machine-parseable line prefixed
``error[<category>]:``. ``--config`` supplies a JSON run configuration;
explicit flags win over config values. Every stochastic command accepts
``--seed`` and echoes it in its report.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__, _kernels, adjoint, bench, capture, dko, kernels, metrics, tensorio
from .errors import NumericError, TensorFormatError, ValidationError
from .fieldcore import (
    ApertureMask,
    GridSpec,
    OpticalConfig,
    PhaseProfile,
    make_circular_aperture,
)
from .propagate import SensorGrid, sensor_pitch
from .tensorio import RunConfig

__all__ = ["CommandOutcome", "run", "main"]

GAMMA_EXPONENT = 2.2  # PGM/PPM scenes are de-gamma'd with this exponent


@dataclass(frozen=True)
class CommandOutcome:
    exit_code: int
    report_path: str | None = None


class _UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 with usage instead of argparse's exit 2
        raise _UsageError(message, self.format_usage())


# --- config plumbing -------------------------------------------------------

def _add_common_flags(p: argparse.ArgumentParser, stochastic: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration (flags win over it)")
    p.add_argument("--json", action="store_true", help="machine-readable stdout")
    if stochastic:
        p.add_argument("--seed", type=int, default=None, help="RNG seed (echoed in reports)")


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", type=int, default=None, help="square grid sample count")
    p.add_argument("--pitch-m", type=float, default=None)
    p.add_argument("--wavelength-m", type=float, default=None)
    p.add_argument("--distance-m", type=float, default=None, help="sensor distance in meters")
    p.add_argument("--aperture-m", type=float, default=None, help="aperture diameter in meters")


def _effective_config(args) -> RunConfig:
    cfg = tensorio.load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "seed": getattr(args, "seed", None),
        "pitch_m": getattr(args, "pitch_m", None),
        "wavelength_m": getattr(args, "wavelength_m", None),
        "sensor_distance_m": getattr(args, "distance_m", None),
        "aperture_diameter_m": getattr(args, "aperture_m", None),
        "dko.max_iters": getattr(args, "max_iters", None),
        "dko.lr": getattr(args, "lr", None),
        "dko.init": getattr(args, "init", None),
        "capture.samples_per_tap": getattr(args, "samples_per_tap", None),
        "capture.stride": getattr(args, "stride", None),
    }
    grid_n = getattr(args, "grid", None)
    if grid_n is not None:
        overrides["n_x"] = grid_n
        overrides["n_y"] = grid_n
    noise = getattr(args, "noise", None)
    if noise is not None:
        kind, _, value = noise.partition(":")
        overrides["capture.noise"] = kind
        if kind == "gaussian":
            overrides["capture.noise_sigma"] = float(value or 0.0)
        elif kind == "poisson":
            overrides["capture.poisson_scale"] = float(value or 1.0)
        elif kind != "none":
            raise ValidationError(f"unknown noise spec {noise!r}")
    return tensorio.override_config(cfg, **overrides)


def _geometry(cfg: RunConfig) -> tuple[GridSpec, OpticalConfig, ApertureMask]:
    grid = GridSpec(cfg.n_x, cfg.n_y, cfg.pitch_m)
    optical = OpticalConfig(cfg.wavelength_m, cfg.sensor_distance_m)
    diameter = cfg.aperture_diameter_m
    if diameter is None:
        diameter = min(grid.extent_x_m, grid.extent_y_m)
    return grid, optical, make_circular_aperture(grid, diameter)


def _jobs(args) -> int:
    if getattr(args, "jobs", None):
        return max(1, args.jobs)
    env = os.environ.get("METAFORGE_JOBS", "")
    if env.isdigit() and int(env) >= 1:
        return int(env)
    return os.cpu_count() or 1


def _emit(args, payload: dict, lines: list[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        for line in lines:
            print(line)


def _load_scene(path) -> np.ndarray:
    if str(path).endswith((".pgm", ".ppm")):
        img = tensorio.load_image(path)
        return img ** GAMMA_EXPONENT
    arr, _ = tensorio.load_tensor(path)
    return arr


# --- dko commands ----------------------------------------------------------

def _build_targets(tensor: np.ndarray, cfg: RunConfig, grid: GridSpec,
                   optical: OpticalConfig):
    """Import, split, and embed a first-layer tensor; returns the plan,
    kernel list, and per-pair embedded targets."""
    spt = cfg.capture.samples_per_tap
    pitch = sensor_pitch(optical, grid)
    tap_pitch = cfg.tap_pitch_m if cfg.tap_pitch_m is not None else pitch * spt
    kerns = kernels.import_first_layer(tensor, tap_pitch_m=tap_pitch)
    L, C = tensor.shape[0], tensor.shape[1]
    plan = kernels.plan_array(L, "rgb-signed" if C == 3 else "mono-signed")
    sensor = SensorGrid(n_u=grid.n_x, n_v=grid.n_y, pitch_m=pitch)
    pairs = []
    for kern in kerns:
        halves = kernels.split_signed(kern)
        pairs.append((kernels.embed_target(halves.plus, sensor, spt),
                      kernels.embed_target(halves.minus, sensor, spt)))
    return plan, kerns, pairs


def _cmd_dko_optimize(args) -> CommandOutcome:
    cfg = _effective_config(args)
    if args.max_iters is not None and args.max_iters < 1:
        raise ValidationError("--max-iters must be >= 1")
    grid, optical, aperture = _geometry(cfg)
    tensor, _ = tensorio.load_tensor(args.kernels)
    if tensor.ndim != 4:
        raise ValidationError(f"--kernels must be a 4-D [L, C, k, k] tensor, got {tensor.shape}")
    if args.plan is not None:
        expected = "rgb-signed" if tensor.shape[1] == 3 else "mono-signed"
        if args.plan != expected:
            raise ValidationError(
                f"--plan {args.plan} does not match tensor channel count {tensor.shape[1]}"
            )
    plan, kerns, pairs = _build_targets(tensor, cfg, grid, optical)
    dcfg = dko.DkoConfig.from_settings(cfg.dko, seed=cfg.seed)
    jobs = _jobs(args)

    t0 = time.perf_counter()
    results = dko.optimize_layer(pairs, aperture, optical, dcfg, parallelism=jobs)
    elapsed = time.perf_counter() - t0

    os.makedirs(args.out, exist_ok=True)
    kernels.save_plan(plan, os.path.join(args.out, "plan.json"))

    element_rows, pair_rows, curves = [], [], {}
    failures = 0
    for e, res in enumerate(results):
        if isinstance(res, dko.DkoFailure):
            failures += 1
            element_rows.append({
                "index": e, "failed": True, "iteration": res.iteration,
                "message": res.message, "snapshot": res.snapshot_path,
            })
            continue
        tensorio.save_tensor(res.phase.values, os.path.join(args.out, f"phase_{e:03d}.npy"))
        tensorio.save_tensor(res.realized_psf.values, os.path.join(args.out, f"psf_{e:03d}.npy"))
        if args.dump_grad:
            grad = adjoint.dko_grad(res.phase, aperture, pairs[e // 2][e % 2], optical,
                                    fit_gain=cfg.dko.fit_gain)
            tensorio.save_tensor(grad.values, os.path.join(args.out, f"grad_{e:03d}.npy"))
        el = plan.elements[e]
        m = res.kernel_metrics
        element_rows.append({
            "index": e, "out_channel": el.out_channel, "color": el.color,
            "sign": "+" if el.sign > 0 else "-", "gain": res.gain,
            "iterations_run": res.iterations_run, "stop_reason": res.stop_reason,
            "ncc": m.ncc, "rmse": m.rmse, "mae": m.mae,
            "loss_first": float(res.loss_curve[0]), "loss_final": float(res.loss_curve[-1]),
            "failed": False,
        })
        curves[e] = res.loss_curve

    for p in range(len(pairs)):
        rp, rm = results[2 * p], results[2 * p + 1]
        if isinstance(rp, dko.DkoFailure) or isinstance(rm, dko.DkoFailure):
            continue
        comp = dko.composed_pair_metrics(rp, rm, pairs[p])
        pair_rows.append({
            "pair": p, "plus": 2 * p, "minus": 2 * p + 1, "gain": rp.gain,
            "composed_ncc": comp.ncc, "composed_rmse": comp.rmse, "composed_mae": comp.mae,
        })

    tensorio.save_loss_curves(os.path.join(args.out, "loss_curves.csv"), curves)

    ok_rows = [r for r in element_rows if not r["failed"]]
    layer = {}
    if pair_rows:
        layer = {
            "mean_composed_ncc": float(np.mean([r["composed_ncc"] for r in pair_rows])),
            "mean_composed_rmse": float(np.mean([r["composed_rmse"] for r in pair_rows])),
            "mean_composed_mae": float(np.mean([r["composed_mae"] for r in pair_rows])),
        }
    payload = {
        "command": "dko optimize",
        "seed": cfg.seed,
        "jobs": jobs,
        "kernel_tensor": os.path.abspath(args.kernels),
        "L": int(tensor.shape[0]), "C": int(tensor.shape[1]), "k": int(tensor.shape[2]),
        "samples_per_tap": cfg.capture.samples_per_tap,
        "elements": element_rows,
        "pairs": pair_rows,
        "layer": layer,
        "failures": failures,
        "wall_seconds": elapsed,
        "backend": _kernels.BACKEND,
    }
    report_path = os.path.join(args.out, "summary.json")
    tensorio.write_report(report_path, payload, cfg)

    lines = [f"optimized {len(ok_rows)}/{len(results)} elements in {elapsed:.1f} s "
             f"({jobs} jobs, backend {_kernels.BACKEND})"]
    if layer:
        lines.append(f"mean composed NCC {layer['mean_composed_ncc']:.4f}")
    lines.append(f"report: {report_path}")
    _emit(args, payload, lines)
    return CommandOutcome(2 if failures else 0, report_path)


def _cmd_dko_render_psf(args) -> CommandOutcome:
    cfg = _effective_config(args)
    grid, optical, aperture = _geometry(cfg)
    phase_arr, _ = tensorio.load_tensor(args.phase)
    if phase_arr.shape != grid.shape:
        raise ValidationError(
            f"phase shape {phase_arr.shape} does not match configured grid {grid.shape}; "
            "set --grid/--pitch-m or --config accordingly"
        )
    psf = adjoint.forward_psf(PhaseProfile(grid, phase_arr), aperture, optical)
    tensorio.save_tensor(psf.values, args.out)
    preview = os.path.splitext(args.out)[0] + ".pgm"
    peak = psf.values.max()
    tensorio.save_pgm(preview, psf.values / peak if peak > 0 else psf.values, maxval=65535)
    payload = {
        "command": "dko render-psf",
        "out": os.path.abspath(args.out),
        "preview": os.path.abspath(preview),
        "total_power": psf.total_power,
        "sensor_pitch_m": psf.sensor.pitch_m,
    }
    report_path = os.path.splitext(args.out)[0] + ".json"
    tensorio.write_report(report_path, payload, cfg)
    _emit(args, payload, [f"psf: {args.out}", f"preview: {preview}",
                          f"sensor pitch {psf.sensor.pitch_m:.3e} m"])
    return CommandOutcome(0, report_path)


def _cmd_kernels_split(args) -> CommandOutcome:
    tensor, _ = tensorio.load_tensor(args.kernels)
    if tensor.ndim != 4:
        raise ValidationError(f"--kernels must be a 4-D [L, C, k, k] tensor, got {tensor.shape}")
    kerns = kernels.import_first_layer(tensor, tap_pitch_m=1.0)
    plan = kernels.plan_array(tensor.shape[0], "rgb-signed" if tensor.shape[1] == 3 else "mono-signed")
    os.makedirs(args.out, exist_ok=True)
    kernels.save_plan(plan, os.path.join(args.out, "plan.json"))
    rows = []
    for i, kern in enumerate(kerns):
        halves = kernels.split_signed(kern)
        tensorio.save_tensor(halves.plus, os.path.join(args.out, f"half_{2 * i:03d}_plus.npy"))
        tensorio.save_tensor(halves.minus, os.path.join(args.out, f"half_{2 * i + 1:03d}_minus.npy"))
        rows.append({
            "kernel": i, "channel": kern.channel,
            "plus_mass": float(halves.plus.sum()), "minus_mass": float(halves.minus.sum()),
        })
    payload = {"command": "kernels split", "count": len(kerns), "halves": 2 * len(kerns),
               "kernels": rows, "note": "taps stored in optical (convolution) orientation"}
    report_path = os.path.join(args.out, "split.json")
    tensorio.write_report(report_path, payload)
    _emit(args, payload, [f"split {len(kerns)} kernels into {2 * len(kerns)} halves under {args.out}"])
    return CommandOutcome(0, report_path)


# --- capture ---------------------------------------------------------------

def _load_results_dir(results_dir: str):
    summary_path = os.path.join(results_dir, "summary.json")
    if not os.path.exists(summary_path):
        raise TensorFormatError(f"{results_dir}: missing summary.json (not a dko output dir?)")
    with open(summary_path) as f:
        summary = json.load(f)
    plan = kernels.load_plan(os.path.join(results_dir, "plan.json"))
    cfg = tensorio.config_from_dict(summary["config"])
    psfs = []
    for e in range(len(plan)):
        arr, _ = tensorio.load_tensor(os.path.join(results_dir, f"psf_{e:03d}.npy"))
        psfs.append(arr)
    return summary, plan, cfg, psfs


def _cmd_capture_simulate(args) -> CommandOutcome:
    summary, plan, run_cfg, psfs = _load_results_dir(args.results)
    if args.seed is not None:
        run_cfg = replace(run_cfg, seed=args.seed)
    noise = getattr(args, "noise", None)
    cap = run_cfg.capture
    if noise is not None:
        kind, _, value = noise.partition(":")
        if kind == "gaussian":
            cap = replace(cap, noise="gaussian", noise_sigma=float(value or 0.0))
        elif kind == "poisson":
            cap = replace(cap, noise="poisson", poisson_scale=float(value or 1.0))
        elif kind == "none":
            cap = replace(cap, noise="none")
        else:
            raise ValidationError(f"unknown noise spec {noise!r}")
        run_cfg = replace(run_cfg, capture=cap)

    scene = capture.SceneImage.from_array(_load_scene(args.scene))
    spt = cap.samples_per_tap
    k = summary["k"]
    footprint = k * spt

    pair_psfs, divisors = [], []
    for p in range(len(plan) // 2):
        alpha = summary["elements"][2 * p].get("gain")
        if summary["elements"][2 * p].get("failed") or alpha is None:
            raise ValidationError(f"pair {p} has no usable optimization result")
        if alpha <= 0:
            raise ValidationError(
                f"pair {p} has degenerate gain {alpha}; cannot calibrate its feature"
            )
        plus = _center_crop(psfs[2 * p], footprint)
        minus = _center_crop(psfs[2 * p + 1], footprint)
        pair_psfs.append((plus, minus))
        divisors.append(1.0 / alpha)

    ccfg = capture.CaptureConfig(
        samples_per_tap=spt, stride=cap.stride, noise=cap.noise,
        noise_sigma=cap.noise_sigma, poisson_scale=cap.poisson_scale,
        quantization_bits=cap.quantization_bits, seed=run_cfg.seed,
        gains=tuple(divisors),
    )
    features = capture.simulate_capture(scene, pair_psfs, plan, ccfg)
    tensorio.save_tensor(features.values, args.out)

    payload = {
        "command": "capture simulate",
        "seed": run_cfg.seed,
        "scene": os.path.abspath(args.scene),
        "results": os.path.abspath(args.results),
        "out": os.path.abspath(args.out),
        "feature_shape": list(features.values.shape),
        "noise": cap.noise,
    }
    lines = [f"features: {args.out} shape {features.values.shape}"]

    if args.compare_electronic:
        if spt != 1:
            raise ValidationError("--compare-electronic requires samples_per_tap == 1")
        if not args.kernels:
            raise ValidationError("--compare-electronic needs --kernels (the target tensor)")
        tensor, _ = tensorio.load_tensor(args.kernels)
        kerns = kernels.import_first_layer(tensor, tap_pitch_m=1.0)
        reference = capture.electronic_conv(scene, kerns, stride=cap.stride)
        rel = _relative_l2_per_channel(features.values, reference.values)
        payload["electronic_rel_l2"] = rel
        payload["electronic_rel_l2_mean"] = float(np.mean(rel))
        lines.append(f"relative L2 vs electronic conv: mean {np.mean(rel):.4f}")

    report_path = os.path.splitext(args.out)[0] + ".json"
    tensorio.write_report(report_path, payload, run_cfg)
    lines.append(f"report: {report_path}")
    _emit(args, payload, lines)
    return CommandOutcome(0, report_path)


def _center_crop(arr: np.ndarray, window: int) -> np.ndarray:
    ny, nx = arr.shape
    if window > ny or window > nx:
        raise ValidationError(f"crop window {window} exceeds array {arr.shape}")
    oy, ox = ny // 2 - window // 2, nx // 2 - window // 2
    return arr[oy:oy + window, ox:ox + window]


def _relative_l2_per_channel(got: np.ndarray, want: np.ndarray) -> list[float]:
    if got.shape != want.shape:
        raise ValidationError(f"feature shapes differ: {got.shape} vs {want.shape}")
    out = []
    for c in range(got.shape[0]):
        denom = float(np.linalg.norm(want[c]))
        num = float(np.linalg.norm(got[c] - want[c]))
        out.append(num / denom if denom > 0 else num)
    return out


# --- eval ------------------------------------------------------------------

def _cmd_eval_kernels(args) -> CommandOutcome:
    summary, plan, run_cfg, psfs = _load_results_dir(args.realized)
    tensor, _ = tensorio.load_tensor(args.targets)
    grid, optical, _ = _geometry(run_cfg)
    _, _, pairs = _build_targets(tensor, run_cfg, grid, optical)
    if 2 * len(pairs) != len(plan):
        raise ValidationError(
            f"target tensor implies {2 * len(pairs)} elements but results hold {len(plan)}"
        )

    element_rows, composed_rows, half_reports, composed_reports = [], [], [], []
    for p, pair in enumerate(pairs):
        alpha = summary["elements"][2 * p]["gain"]
        window = max(dko.metric_window(pair[0]), dko.metric_window(pair[1]))
        for s in (0, 1):
            e = 2 * p + s
            realized = alpha * _center_crop(psfs[e], window)
            wanted = _center_crop(pair[s].values, window)
            rep = metrics.kernel_metrics(realized, wanted)
            half_reports.append(rep)
            element_rows.append({"index": e, "ncc": rep.ncc, "rmse": rep.rmse, "mae": rep.mae})
        composed = alpha * (_center_crop(psfs[2 * p], window)
                            - _center_crop(psfs[2 * p + 1], window))
        wanted = _center_crop(pair[0].values, window) - _center_crop(pair[1].values, window)
        rep = metrics.kernel_metrics(composed, wanted)
        composed_reports.append(rep)
        composed_rows.append({"pair": p, "ncc": rep.ncc, "rmse": rep.rmse, "mae": rep.mae})

    layer_composed = metrics.layer_metrics(composed_reports)
    finite_halves = [r for r in half_reports if math.isfinite(r.ncc)]
    payload = {
        "command": "eval kernels",
        "realized": os.path.abspath(args.realized),
        "targets": os.path.abspath(args.targets),
        "elements": element_rows,
        "pairs": composed_rows,
        "layer": {
            "mean_composed_ncc": layer_composed.ncc,
            "mean_composed_rmse": layer_composed.rmse,
            "mean_composed_mae": layer_composed.mae,
            "mean_half_ncc": (metrics.layer_metrics(finite_halves).ncc
                              if finite_halves else math.nan),
        },
    }
    tensorio.write_report(args.report, payload, run_cfg)
    _emit(args, payload, [
        f"pairs evaluated: {len(composed_rows)}",
        f"mean composed NCC {layer_composed.ncc:.4f}, RMSE {layer_composed.rmse:.6f}, "
        f"MAE {layer_composed.mae:.6f}",
        f"report: {args.report}",
    ])
    return CommandOutcome(0, args.report)


def _cmd_eval_depth(args) -> CommandOutcome:
    pred, _ = tensorio.load_tensor(args.pred)
    gt, _ = tensorio.load_tensor(args.gt)
    mask = None
    if args.mask:
        mask_arr, _ = tensorio.load_tensor(args.mask)
        mask = mask_arr > 0.5
    rep = metrics.depth_metrics(pred, gt, mask)
    payload = {
        "command": "eval depth",
        "pred": os.path.abspath(args.pred), "gt": os.path.abspath(args.gt),
        "absrel": rep.absrel, "sqrel": rep.sqrel, "rmse_m": rep.rmse_m,
        "rms_log": rep.rms_log, "delta1": rep.delta1, "delta2": rep.delta2,
        "delta3": rep.delta3,
    }
    report_path = None
    if args.report:
        tensorio.write_report(args.report, payload)
        report_path = args.report
    _emit(args, payload, [
        f"AbsRel {rep.absrel:.4f}  SqRel {rep.sqrel:.4f}  RMSE {rep.rmse_m:.4f} m  "
        f"RMSlog {rep.rms_log:.4f}",
        f"delta<1.25 {rep.delta1:.4f}  delta<1.25^2 {rep.delta2:.4f}  "
        f"delta<1.25^3 {rep.delta3:.4f}",
    ])
    return CommandOutcome(0, report_path)


# --- bench -----------------------------------------------------------------

def _cmd_bench_accounting(args) -> CommandOutcome:
    plan = kernels.plan_array(args.L, args.plan)
    grid = GridSpec(args.grid, args.grid, args.pitch_m or 2.5e-6)
    acct = bench.count_parameters(plan, grid, L=args.L, C=args.C, k=args.k)
    payload = {
        "command": "bench accounting",
        "plan": args.plan, "L": args.L, "C": args.C, "k": args.k,
        "grid": args.grid, "elements": len(plan),
        "optical_params": acct.optical_params,
        "electronic_first_layer_params": acct.electronic_first_layer_params,
        "ratio": acct.ratio,
    }
    report_path = args.out
    if report_path:
        tensorio.write_report(report_path, payload)
    _emit(args, payload, [
        f"elements: {len(plan)}",
        f"optical_params: {acct.optical_params:,}",
        f"electronic_first_layer_params: {acct.electronic_first_layer_params:,}",
        f"ratio: {acct.ratio:,.0f}x",
    ])
    return CommandOutcome(0, report_path)


def _cmd_bench_steps(args) -> CommandOutcome:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    sizes = bench.BenchSizes(
        phase_n=args.phase_n, elements=args.elements, batch=args.batch,
        scene_n=args.scene_n, kernel_k=args.k,
    )
    seed = args.seed if args.seed is not None else 0
    timings = {m: bench.time_step(m, sizes, repeats=args.repeats, seed=seed) for m in modes}
    payload = {
        "command": "bench steps",
        "seed": seed,
        "sizes": {"phase_n": sizes.phase_n, "elements": sizes.elements,
                  "batch": sizes.batch, "scene_n": sizes.scene_n, "kernel_k": sizes.kernel_k},
        "timings_ms": {m: {"mean": t.mean_ms, "std": t.std_ms, "repeats": t.iterations_timed}
                       for m, t in timings.items()},
    }
    lines = [f"{m:>11s}: {t.mean_ms:9.2f} ms +- {t.std_ms:.2f}" for m, t in timings.items()]
    if "dko" in timings and "e2e" in timings:
        ratio = timings["e2e"].mean_ms / timings["dko"].mean_ms
        payload["e2e_over_dko"] = ratio
        payload["paper_context_ratio"] = bench.PAPER_E2E_OVER_DKO_MS_RATIO
        lines.append(f"measured e2e/dko ratio: {ratio:.1f}x "
                     f"(paper-scale context: {bench.PAPER_E2E_OVER_DKO_MS_RATIO:.0f}x, not comparable)")
    report_path = args.out
    if report_path:
        tensorio.write_report(report_path, payload)
        lines.append(f"report: {report_path}")
    _emit(args, payload, lines)
    return CommandOutcome(0, report_path)


def _cmd_bench_backends(args) -> CommandOutcome:
    n = args.n
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    phase = rng.uniform(-3, 3, (n, n))
    T = (rng.random((n, n)) > 0.2).astype(float)
    chirp = rng.uniform(0, 9, (n, n))
    results = {}
    for backend in _kernels.available_backends():
        _kernels.use_backend(backend)
        ops = {
            "modulate": lambda: _kernels.modulated_field(phase, T, chirp),
            "intensity": lambda: _kernels.field_intensity(
                _kernels.modulated_field(phase, T, chirp)),
            "dko_step": bench._dko_step_fn(
                bench.BenchSizes(phase_n=n, elements=2, kernel_k=min(11, n - 1)), 0),
        }
        results[backend] = {
            name: bench._time_callable(fn, repeats=args.repeats)[0]
            for name, fn in ops.items()
        }
    _kernels.use_backend(_kernels.available_backends()[0])
    payload = {"command": "bench backends", "grid_n": n, "timings_ms": results}
    lines = [f"grid {n}x{n}"]
    for backend, ops in results.items():
        lines.append(f"  {backend}: " + "  ".join(f"{k} {v:.3f} ms" for k, v in ops.items()))
    if len(results) == 2:
        speedup = {k: results["python"][k] / results["compiled"][k] for k in results["python"]}
        payload["compiled_speedup"] = speedup
        lines.append("  compiled speedup: " + "  ".join(f"{k} {v:.2f}x" for k, v in speedup.items()))
    else:
        lines.append("  compiled extension not available; python backend only")
    report_path = args.out
    if report_path:
        tensorio.write_report(report_path, payload)
    _emit(args, payload, lines)
    return CommandOutcome(0, report_path)


# --- selftest ---------------------------------------------------------------

def _selftest_checks(seed: int):
    """Embedded invariant suite; yields (name, ok, detail)."""
    from .fieldcore import PhaseProfile, make_modulation
    from .propagate import cfft2, fresnel_psf

    rng = np.random.default_rng(seed)

    def parseval():
        worst = 0.0
        for n in (16, 32):
            grid = GridSpec(n, n, 2.5e-6)
            optical = OpticalConfig(532e-9, 0.01)
            aperture = make_circular_aperture(grid, grid.extent_x_m)
            for _ in range(10):
                phi = PhaseProfile(grid, rng.uniform(-np.pi, np.pi, grid.shape))
                mod = make_modulation(phi, aperture)
                psf = fresnel_psf(mod, optical)
                power = float((np.abs(mod.values) ** 2).sum())
                worst = max(worst, abs(psf.total_power - power) / power)
        return worst < 1e-10, f"max rel {worst:.2e} (tol 1e-10)"

    def dft_oracle():
        worst = 0.0
        for _ in range(3):
            f = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
            got = cfft2(f)
            want = np.zeros_like(got)
            c = 4
            for p in range(8):
                for q in range(8):
                    i = np.arange(8) - c
                    ph = np.exp(-2j * np.pi * ((p - c) * i[:, None] + (q - c) * i[None, :]) / 8)
                    want[p, q] = (f * ph).sum() / 8.0
            worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
        return worst < 1e-10, f"max rel {worst:.2e} (tol 1e-10)"

    def fd_gradient():
        grid = GridSpec(16, 16, 2.5e-6)
        optical = OpticalConfig(532e-9, 0.01)
        aperture = make_circular_aperture(grid, grid.extent_x_m)
        phi = PhaseProfile(grid, rng.uniform(-np.pi, np.pi, grid.shape))
        sensor = adjoint.forward_psf(phi, aperture, optical).sensor
        target = kernels.embed_target(
            kernels.split_signed(kernels.gaussian_kernel(5, 1.0)).plus, sensor, 1)
        err = adjoint.fd_check(phi, aperture, target, optical, n_probes=8, step=1e-6,
                               seed=seed)
        return err < 1e-5, f"max rel {err:.2e} (tol 1e-5)"

    def split_reconstruct():
        for _ in range(20):
            kern = kernels.SignedKernel(rng.standard_normal((7, 7)))
            halves = kernels.split_signed(kern)
            if not np.array_equal(halves.reconstruct(), kern.taps):
                return False, "reconstruction mismatch"
            if (halves.plus * halves.minus != 0).any():
                return False, "halves overlap"
        return True, "20 random kernels, exact"

    def conv_oracle():
        worst = 0.0
        for _ in range(5):
            scene = rng.random((12, 12))
            taps = rng.random((3, 3))
            got = capture.render_measurement(scene, taps)
            want = np.zeros((10, 10))
            for i in range(10):
                for j in range(10):
                    want[i, j] = (scene[i:i + 3, j:j + 3] * taps[::-1, ::-1]).sum()
            worst = max(worst, float(np.abs(got - want).max() / np.abs(want).max()))
        return worst < 1e-10, f"max rel {worst:.2e} (tol 1e-10)"

    def pair_composition():
        worst = 0.0
        for _ in range(10):
            scene = capture.SceneImage(rng.random((1, 16, 16)))
            kern = kernels.SignedKernel(rng.standard_normal((5, 5)))
            halves = kernels.split_signed(kern)
            mp = capture.render_measurement(scene.values[0], halves.plus)
            mm = capture.render_measurement(scene.values[0], halves.minus)
            feat = capture.compose_feature(mp, mm, 1.0)
            want = capture.electronic_conv(scene, [kern]).values[0]
            worst = max(worst, float(np.abs(feat - want).max() / np.abs(want).max()))
        return worst < 1e-12, f"max rel {worst:.2e} (tol 1e-12)"

    yield "parseval", *parseval()
    yield "dft-oracle", *dft_oracle()
    yield "fd-gradient", *fd_gradient()
    yield "split-reconstruct", *split_reconstruct()
    yield "conv-oracle", *conv_oracle()
    yield "pair-composition", *pair_composition()


def _cmd_selftest(args) -> CommandOutcome:
    seed = args.seed if args.seed is not None else 0
    rows = []
    all_ok = True
    for name, ok, detail in _selftest_checks(seed):
        rows.append({"check": name, "ok": ok, "detail": detail})
        all_ok &= ok
    payload = {"command": "selftest", "seed": seed, "ok": all_ok, "checks": rows,
               "backend": _kernels.BACKEND}
    lines = [f"{'PASS' if r['ok'] else 'FAIL'}  {r['check']:<18s} {r['detail']}" for r in rows]
    lines.append("selftest: " + ("all checks passed" if all_ok else "FAILURES present"))
    _emit(args, payload, lines)
    if not all_ok:
        print("error[numeric]: selftest failed", file=sys.stderr)
    return CommandOutcome(0 if all_ok else 2, None)


# --- parser ----------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="metaforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"metaforge {__version__}")
    top = parser.add_subparsers(dest="group", required=True)

    g_dko = top.add_parser("dko", help="design metasurfaces").add_subparsers(
        dest="command", required=True)
    p = g_dko.add_parser("optimize", help="run direct kernel optimization for a layer")
    p.add_argument("--kernels", required=True, help="first-layer tensor, NPY [L,C,k,k]")
    p.add_argument("--plan", choices=kernels.COLOR_MODES, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker pool size (env METAFORGE_JOBS)")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--init", choices=("lens+jitter", "random", "zero"), default=None)
    p.add_argument("--samples-per-tap", type=int, default=None)
    p.add_argument("--dump-grad", action="store_true", help="save final per-element gradients")
    _add_grid_flags(p)
    _add_common_flags(p)
    p.set_defaults(fn=_cmd_dko_optimize)

    p = g_dko.add_parser("render-psf", help="propagate a phase profile to its PSF")
    p.add_argument("--phase", required=True, help="phase NPY matching the configured grid")
    p.add_argument("--out", required=True, help="output PSF NPY (PGM preview alongside)")
    _add_grid_flags(p)
    _add_common_flags(p, stochastic=False)
    p.set_defaults(fn=_cmd_dko_render_psf)

    g_k = top.add_parser("kernels", help="kernel utilities").add_subparsers(
        dest="command", required=True)
    p = g_k.add_parser("split", help="split signed kernels into nonnegative halves")
    p.add_argument("--kernels", required=True)
    p.add_argument("--out", required=True)
    _add_common_flags(p, stochastic=False)
    p.set_defaults(fn=_cmd_kernels_split)

    g_cap = top.add_parser("capture", help="simulate measurements").add_subparsers(
        dest="command", required=True)
    p = g_cap.add_parser("simulate", help="render feature maps through optimized PSFs")
    p.add_argument("--scene", required=True, help="NPY (HxW or HxWx3) or PGM/PPM scene")
    p.add_argument("--results", required=True, help="dko optimize output directory")
    p.add_argument("--out", required=True, help="output feature NPY")
    p.add_argument("--noise", default=None, help="none | gaussian:SIGMA | poisson:SCALE")
    p.add_argument("--compare-electronic", action="store_true")
    p.add_argument("--kernels", default=None, help="target tensor for --compare-electronic")
    _add_common_flags(p)
    p.set_defaults(fn=_cmd_capture_simulate)

    g_eval = top.add_parser("eval", help="evaluate kernels or depth maps").add_subparsers(
        dest="command", required=True)
    p = g_eval.add_parser("kernels", help="score realized PSFs against target kernels")
    p.add_argument("--realized", required=True, help="dko optimize output directory")
    p.add_argument("--targets", required=True, help="target tensor NPY")
    p.add_argument("--report", required=True, help="output report JSON")
    _add_common_flags(p, stochastic=False)
    p.set_defaults(fn=_cmd_eval_kernels)

    p = g_eval.add_parser("depth", help="standard depth metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--report", default=None)
    _add_common_flags(p, stochastic=False)
    p.set_defaults(fn=_cmd_eval_depth)

    g_bench = top.add_parser("bench", help="cost accounting and timing").add_subparsers(
        dest="command", required=True)
    p = g_bench.add_parser("accounting", help="exact parameter counts")
    p.add_argument("--plan", choices=kernels.COLOR_MODES, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--grid", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--pitch-m", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_common_flags(p, stochastic=False)
    p.set_defaults(fn=_cmd_bench_accounting)

    p = g_bench.add_parser("steps", help="time one forward+backward step per mode")
    p.add_argument("--modes", default="dko,e2e,electronic")
    p.add_argument("--phase-n", type=int, default=128)
    p.add_argument("--elements", type=int, default=12)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--scene-n", type=int, default=64)
    p.add_argument("--k", type=int, default=11)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None)
    _add_common_flags(p)
    p.set_defaults(fn=_cmd_bench_steps)

    p = g_bench.add_parser("backends", help="compare compiled vs pure-python kernels")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None)
    _add_common_flags(p)
    p.set_defaults(fn=_cmd_bench_backends)

    p = top.add_parser("selftest", help="run the embedded invariant suite")
    _add_common_flags(p)
    p.set_defaults(fn=_cmd_selftest)

    return parser


def run(argv: list[str] | None = None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        print(exc.usage, file=sys.stderr, end="")
        return CommandOutcome(1)
    except SystemExit as exc:  # --help / --version
        return CommandOutcome(int(exc.code or 0))
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return CommandOutcome(1)
    except (NumericError, FloatingPointError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return CommandOutcome(2)
    except (TensorFormatError, OSError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return CommandOutcome(3)


def main() -> None:
    sys.exit(run().exit_code)


if __name__ == "__main__":
    main()
