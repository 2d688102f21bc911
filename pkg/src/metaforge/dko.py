"""Direct kernel optimization: fit phase profiles so each realized PSF
matches a target half-kernel, one independent +/- pair at a time.

Each pair shares a closed-form radiometric gain (refit every iteration) and
is otherwise two independent phase problems. The layer driver runs the
pairs across a worker pool; every subproblem derives its RNG stream from
``seed XOR plan-element-index``, so results are bit-identical for any
parallelism degree or submission order.
"""

from __future__ import annotations

import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorio
from .adjoint import pair_loss_and_grad
from .errors import DivergenceError, ValidationError
from .fieldcore import ApertureMask, GridSpec, OpticalConfig, PhaseProfile, make_lens_phase
from .kernels import EmbeddedTarget
from .metrics import KernelMatchReport, kernel_metrics
from .propagate import Psf, SensorGrid, propagation_chirp, sensor_pitch

__all__ = [
    "DkoConfig",
    "DkoResult",
    "DkoFailure",
    "optimize_kernel",
    "optimize_layer",
    "composed_pair_metrics",
    "metric_window",
]

GUARD_TAPS = 2  # guard band around the target footprint for reported metrics


@dataclass(frozen=True)
class DkoConfig:
    """Optimization hyperparameters. Defaults are robust for this family of
    phase-retrieval-like objectives; nothing here is physically constrained."""

    max_iters: int = 2000
    lr: float = 0.02
    optimizer: str = "adam"  # or "gradient-descent"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "lens+jitter"  # or "random", "zero"
    init_sigma_rad: float = 0.1
    seed: int = 0
    rel_tol: float = 1e-6
    patience: int = 50
    fit_gain: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not (self.lr > 0):
            raise ValidationError("lr must be > 0")
        if self.rel_tol < 0:
            raise ValidationError("rel_tol must be >= 0")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.optimizer not in ("adam", "gradient-descent"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("lens+jitter", "random", "zero"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.seed < 0:
            raise ValidationError("seed must be a nonnegative 64-bit integer")

    @staticmethod
    def from_settings(s: tensorio.DkoSettings, seed: int) -> "DkoConfig":
        return DkoConfig(
            max_iters=s.max_iters, lr=s.lr, optimizer=s.optimizer, beta1=s.beta1,
            beta2=s.beta2, eps=s.eps, init=s.init, init_sigma_rad=s.init_sigma_rad,
            seed=seed, rel_tol=s.rel_tol, patience=s.patience, fit_gain=s.fit_gain,
        )


@dataclass(frozen=True)
class DkoResult:
    """Outcome for one metasurface (one sign of a pair)."""

    phase: PhaseProfile
    realized_psf: Psf
    gain: float
    loss_curve: np.ndarray = field(repr=False)
    iterations_run: int = 0
    stop_reason: str = "max_iters"  # "early_stop" | "max_iters" | "fixed_point"
    kernel_metrics: KernelMatchReport | None = None


@dataclass(frozen=True)
class DkoFailure:
    """Per-element abort record; other layer elements still complete."""

    element_index: int
    iteration: int
    message: str
    snapshot_path: str | None


class _Adam:
    def __init__(self, shape, cfg: DkoConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.cfg = cfg

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * (g * g)
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return x - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


class _GradientDescent:
    def __init__(self, shape, cfg: DkoConfig):
        self.lr = cfg.lr

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return x - self.lr * g


_OPTIMIZERS = {"adam": _Adam, "gradient-descent": _GradientDescent}


def _init_phase(cfg: DkoConfig, grid: GridSpec, optical: OpticalConfig,
                element_index: int) -> np.ndarray:
    rng = np.random.default_rng(int(np.uint64(cfg.seed) ^ np.uint64(element_index)))
    if cfg.init == "zero":
        return np.zeros(grid.shape)
    jitter = rng.uniform(-cfg.init_sigma_rad, cfg.init_sigma_rad, grid.shape)
    if cfg.init == "random":
        return jitter
    lens = make_lens_phase(grid, optical, focal_m=optical.sensor_distance_m)
    return lens.values + jitter


def metric_window(target: EmbeddedTarget) -> int:
    """Crop extent for reported metrics: footprint plus a 2-tap guard band."""
    window = target.footprint_window + 2 * GUARD_TAPS * target.samples_per_tap
    return min(window, min(target.sensor.shape))


def _crop_center(values: np.ndarray, window: int) -> np.ndarray:
    ny, nx = values.shape
    oy, ox = ny // 2 - window // 2, nx // 2 - window // 2
    return values[oy:oy + window, ox:ox + window]


def _check_target(target: EmbeddedTarget, grid: GridSpec, optical: OpticalConfig) -> None:
    if target.sensor.shape != grid.shape:
        raise ValidationError(
            f"target sensor shape {target.sensor.shape} does not match grid {grid.shape}"
        )
    expected = sensor_pitch(optical, grid)
    if not math.isclose(target.sensor.pitch_m, expected, rel_tol=1e-9):
        raise ValidationError("target was embedded for a different sensor pitch")
    if target.values.min() < 0:
        raise ValidationError("targets must be nonnegative")


def _dump_snapshot(phases: tuple[np.ndarray, np.ndarray]) -> str | None:
    try:
        fd, path = tempfile.mkstemp(prefix="dko-diverged-", suffix=".npy")
        os.close(fd)
        tensorio.save_tensor(np.stack(phases), path)
        return path
    except OSError:
        return None


def optimize_kernel(target_pair: tuple[EmbeddedTarget, EmbeddedTarget],
                    aperture: ApertureMask, optical: OpticalConfig, cfg: DkoConfig,
                    element_index: int = 0,
                    init_phases: tuple[PhaseProfile, PhaseProfile] | None = None,
                    ) -> tuple[DkoResult, DkoResult]:
    """Optimize the +/- pair for one signed kernel.

    ``element_index`` is the plan index of the plus element; the minus
    element uses ``element_index + 1``. ``init_phases`` overrides the
    configured initialization (used for warm starts and fixed-point tests).

    Returns the best-joint-loss iterate. An exactly-zero joint loss stops
    immediately ("fixed_point"); otherwise relative improvement below
    ``rel_tol`` for ``patience`` consecutive iterations stops early.
    """
    grid = aperture.grid
    for t in target_pair:
        _check_target(t, grid, optical)
    chirp = propagation_chirp(grid, optical)
    T = aperture.transmittance
    targets = (target_pair[0].values, target_pair[1].values)

    if init_phases is not None:
        phis = [np.array(p.values, dtype=np.float64) for p in init_phases]
    else:
        phis = [_init_phase(cfg, grid, optical, element_index + s) for s in (0, 1)]

    opt_cls = _OPTIMIZERS[cfg.optimizer]
    opts = [opt_cls(grid.shape, cfg) for _ in range(2)]

    curves: tuple[list[float], list[float]] = ([], [])
    best = None  # (joint, iter, phases, psfs, gain, losses)
    best_joint = math.inf
    stall = 0
    steps = 0
    stop_reason = "max_iters"

    for it in range(cfg.max_iters + 1):
        ev = pair_loss_and_grad((phis[0], phis[1]), T, targets, chirp, cfg.fit_gain)
        joint = ev.joint_loss
        if not math.isfinite(joint):
            snapshot = _dump_snapshot((phis[0], phis[1]))
            raise DivergenceError(
                f"non-finite loss at iteration {it} (element {element_index})",
                iteration=it, snapshot_path=snapshot,
            )
        curves[0].append(ev.losses[0])
        curves[1].append(ev.losses[1])
        if joint < best_joint:
            if joint < best_joint * (1.0 - cfg.rel_tol):
                stall = 0
            else:
                stall += 1
            best_joint = joint
            best = (it, (phis[0].copy(), phis[1].copy()), ev.psfs, ev.gain, ev.losses)
        else:
            stall += 1

        if joint == 0.0:
            stop_reason = "fixed_point"
            break
        if it == cfg.max_iters:
            stop_reason = "max_iters"
            break
        if stall >= cfg.patience:
            stop_reason = "early_stop"
            break

        phis[0] = opts[0].step(phis[0], ev.grads[0])
        phis[1] = opts[1].step(phis[1], ev.grads[1])
        steps += 1

    _, best_phis, best_psfs, best_gain, _ = best
    pitch = sensor_pitch(optical, grid)
    sensor = SensorGrid(n_u=grid.n_x, n_v=grid.n_y, pitch_m=pitch)

    results = []
    for s in (0, 1):
        window = metric_window(target_pair[s])
        realized = best_gain * _crop_center(best_psfs[s], window)
        wanted = _crop_center(target_pair[s].values, window)
        results.append(DkoResult(
            phase=PhaseProfile(grid, best_phis[s]),
            realized_psf=Psf(sensor, best_psfs[s]),
            gain=best_gain,
            loss_curve=np.asarray(curves[s]),
            iterations_run=steps,
            stop_reason=stop_reason,
            kernel_metrics=kernel_metrics(realized, wanted),
        ))
    return results[0], results[1]


def composed_pair_metrics(plus: DkoResult, minus: DkoResult,
                          target_pair: tuple[EmbeddedTarget, EmbeddedTarget],
                          ) -> KernelMatchReport:
    """Metrics for the final signed kernel, negatives already subtracted:
    gain * (psf+ - psf-) against (t+ - t-), over the metric crop window."""
    window = max(metric_window(target_pair[0]), metric_window(target_pair[1]))
    realized = plus.gain * (_crop_center(plus.realized_psf.values, window)
                            - _crop_center(minus.realized_psf.values, window))
    wanted = (_crop_center(target_pair[0].values, window)
              - _crop_center(target_pair[1].values, window))
    return kernel_metrics(realized, wanted)


def _worker_count(parallelism: int | None) -> int:
    if parallelism is not None and parallelism >= 1:
        return parallelism
    env = os.environ.get("METAFORGE_JOBS", "")
    if env.isdigit() and int(env) >= 1:
        return int(env)
    return os.cpu_count() or 1


def optimize_layer(target_pairs: list[tuple[EmbeddedTarget, EmbeddedTarget]],
                   aperture: ApertureMask, optical: OpticalConfig, cfg: DkoConfig,
                   parallelism: int | None = 1,
                   element_indices: list[int] | None = None,
                   ) -> list[DkoResult | DkoFailure]:
    """Run all pairs of a layer; results are flattened in plan order
    (plus before minus) and independent of the parallelism degree.

    ``element_indices`` carries each pair's plus-element plan index (default
    ``2 * position``) so that seeding travels with the element identity, not
    the submission order. A diverging pair is reported as two ``DkoFailure``
    slots; remaining pairs still complete.
    """
    if element_indices is None:
        element_indices = [2 * i for i in range(len(target_pairs))]
    if len(element_indices) != len(target_pairs):
        raise ValidationError("element_indices length must match target_pairs")

    def run_one(pair, ei):
        try:
            return optimize_kernel(pair, aperture, optical, cfg, element_index=ei)
        except DivergenceError as exc:
            failure = DkoFailure(
                element_index=ei, iteration=exc.iteration,
                message=str(exc), snapshot_path=exc.snapshot_path,
            )
            return failure, replace(failure, element_index=ei + 1)

    workers = _worker_count(parallelism)
    if workers <= 1 or len(target_pairs) <= 1:
        outcomes = [run_one(p, ei) for p, ei in zip(target_pairs, element_indices)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, target_pairs, element_indices))

    flat: list[DkoResult | DkoFailure] = []
    for pair_outcome in outcomes:
        flat.extend(pair_outcome)
    return flat
