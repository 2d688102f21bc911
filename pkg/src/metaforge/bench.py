"""Parameter accounting and per-step cost measurement.

Three modes are compared at desk scale: "dko" (one loss+gradient evaluation
per metasurface, no scene rendering), "e2e" (render a batch of scenes
through every current PSF and backpropagate to all phases plus a readout
head), and "electronic" (the plain first-layer convolution forward and
backward). Absolute milliseconds are hardware-specific; only orderings and
ratios are meaningful, and the reported ratio is printed beside the
paper-scale context value rather than asserted against it.

The end-to-end gradient path reuses ``adjoint.raw_phase_grad``, so the
finite-difference validation of the adjoint covers this module too.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from .adjoint import fit_gain_joint, raw_forward, raw_phase_grad
from .errors import DivergenceError, ValidationError
from .fieldcore import GridSpec, OpticalConfig, make_circular_aperture, make_lens_phase
from .kernels import ArrayPlan, smooth_random_kernel, split_signed
from .propagate import propagation_chirp

__all__ = [
    "ParamAccount",
    "BenchSizes",
    "StepTiming",
    "E2eToyConfig",
    "E2eTrainReport",
    "count_parameters",
    "time_step",
    "e2e_toy_train",
    "e2e_fd_check",
]

PAPER_E2E_OVER_DKO_MS_RATIO = 730.0  # 73,000 ms vs 100 ms, context only


@dataclass(frozen=True)
class ParamAccount:
    optical_params: int
    electronic_first_layer_params: int
    ratio: float


def count_parameters(plan: ArrayPlan, grid: GridSpec, L: int, C: int, k: int) -> ParamAccount:
    """Exact integer parameter counts: optical = elements * grid samples,
    electronic = L * C * k^2."""
    if L < 1 or C < 1 or k < 1:
        raise ValidationError("L, C, k must be >= 1")
    optical = len(plan) * grid.n_x * grid.n_y
    electronic = L * C * k * k
    return ParamAccount(optical, electronic, optical / electronic)


@dataclass(frozen=True)
class BenchSizes:
    """Desk-scale default: 128^2 phases, 12 elements, batch 4, 64^2 scenes."""

    phase_n: int = 128
    elements: int = 12
    batch: int = 4
    scene_n: int = 64
    kernel_k: int = 11
    pitch_m: float = 2.5e-6
    wavelength_m: float = 532e-9
    sensor_distance_m: float = 0.01

    def __post_init__(self):
        if self.elements % 2:
            raise ValidationError("element count must be even (sign pairs)")


@dataclass(frozen=True)
class StepTiming:
    mode: str
    sizes: BenchSizes
    mean_ms: float
    std_ms: float
    iterations_timed: int


def _smooth_scene(n: int, rng: np.random.Generator) -> np.ndarray:
    img = gaussian_filter(rng.random((n, n)), sigma=max(1.0, n / 16))
    img -= img.min()
    peak = img.max()
    return img / peak if peak > 0 else img


def _bench_problem(sizes: BenchSizes, seed: int):
    grid = GridSpec(sizes.phase_n, sizes.phase_n, sizes.pitch_m)
    optical = OpticalConfig(sizes.wavelength_m, sizes.sensor_distance_m)
    aperture = make_circular_aperture(grid, min(grid.extent_x_m, grid.extent_y_m))
    chirp = propagation_chirp(grid, optical)
    rng = np.random.default_rng(seed)

    targets = []
    for e in range(sizes.elements):
        kern = smooth_random_kernel(sizes.kernel_k, rng)
        half = split_signed(kern).plus if e % 2 == 0 else split_signed(kern).minus
        full = np.zeros(grid.shape)
        o = sizes.phase_n // 2 - sizes.kernel_k // 2
        full[o:o + sizes.kernel_k, o:o + sizes.kernel_k] = half
        targets.append(full)
    lens = make_lens_phase(grid, optical, optical.sensor_distance_m).values
    phases = [lens + rng.uniform(-0.1, 0.1, grid.shape) for _ in range(sizes.elements)]
    return grid, optical, aperture, chirp, phases, targets, rng


def _time_callable(fn, repeats: int, warmup: int = 1) -> tuple[float, float, int]:
    if repeats < 3:
        raise ValidationError("repeats must be >= 3")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(samples)
    return float(arr.mean()), float(arr.std()), repeats


def _dko_step_fn(sizes: BenchSizes, seed: int):
    _, _, aperture, chirp, phases, targets, _ = _bench_problem(sizes, seed)
    T = aperture.transmittance

    def step():
        for phi, t in zip(phases, targets):
            f, F, h = raw_forward(phi, T, chirp)
            alpha = fit_gain_joint([h], [t])
            residual = alpha * h - t
            raw_phase_grad(f, F, (2.0 * alpha) * residual)

    return step


def _electronic_step_fn(sizes: BenchSizes, seed: int):
    rng = np.random.default_rng(seed)
    L = sizes.elements // 2
    k = sizes.kernel_k
    weights = rng.standard_normal((L, 1, k, k))
    scenes = [_smooth_scene(sizes.scene_n, rng) for _ in range(sizes.batch)]
    out_n = sizes.scene_n - k + 1
    dout = rng.standard_normal((sizes.batch, L, out_n, out_n))

    def step():
        # forward
        outputs = [[fftconvolve(s, weights[l, 0], mode="valid") for l in range(L)]
                   for s in scenes]
        # backward: weight and input gradients
        for b, s in enumerate(scenes):
            for l in range(L):
                fftconvolve(s, dout[b, l, ::-1, ::-1], mode="valid")  # dW
                fftconvolve(dout[b, l], weights[l, 0], mode="full")   # dInput
        return outputs

    return step


class _E2eModel:
    """Toy hybrid model: per-element phases -> full PSFs -> rendered
    measurements -> block-mean pooling -> linear readout."""

    def __init__(self, grid: GridSpec, optical: OpticalConfig, aperture,
                 n_elements: int, scene_n: int, pool: int, rng: np.random.Generator):
        self.grid = grid
        self.chirp = propagation_chirp(grid, optical)
        self.T = aperture.transmittance
        # exposure normalization: keeps feature magnitudes O(scene) instead of
        # O(aperture power), which plain gradient descent cannot stomach
        self.exposure = 1.0 / float(self.T.sum())
        lens = make_lens_phase(grid, optical, optical.sensor_distance_m).values
        self.phases = [lens + rng.uniform(-0.1, 0.1, grid.shape) for _ in range(n_elements)]
        self.pool = pool
        meas_n = scene_n + grid.n_y - 1  # full-convolution rendering extent
        self.block = max(1, meas_n // pool)
        self.crop = self.block * pool
        self.w = rng.standard_normal((n_elements, pool, pool)) * 0.01
        self.b = 0.0

    @property
    def n_params(self) -> tuple[int, int]:
        optical = len(self.phases) * self.grid.n_x * self.grid.n_y
        readout = self.w.size + 1
        return optical, readout

    def _pool(self, meas: np.ndarray) -> np.ndarray:
        m = meas[:self.crop, :self.crop]
        p = self.pool
        return self.exposure * m.reshape(p, self.block, p, self.block).mean(axis=(1, 3))

    def loss_and_grads(self, scenes: np.ndarray, y: np.ndarray):
        """MSE loss, gradients for every phase and the readout head."""
        B = scenes.shape[0]
        E = len(self.phases)
        forwards = [raw_forward(phi, self.T, self.chirp) for phi in self.phases]
        pooled = np.empty((B, E, self.pool, self.pool))
        for e, (_, _, h) in enumerate(forwards):
            for b in range(B):
                meas = fftconvolve(scenes[b], h, mode="full")
                pooled[b, e] = self._pool(meas)
        pred = np.einsum("bepq,epq->b", pooled, self.w) + self.b
        err = pred - y
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise DivergenceError("non-finite end-to-end loss", iteration=-1)

        dpred = 2.0 * err / B
        dw = np.einsum("b,bepq->epq", dpred, pooled)
        db = float(dpred.sum())
        dphases = []
        inv_area = self.exposure / (self.block * self.block)
        meas_n = scenes.shape[1] + self.grid.n_y - 1
        for e, (f, F, _) in enumerate(forwards):
            dh = np.zeros((self.grid.n_y, self.grid.n_x))
            for b in range(B):
                dpool = dpred[b] * self.w[e]
                dmeas = np.zeros((meas_n, meas_n))
                dmeas[:self.crop, :self.crop] = np.kron(dpool, np.ones((self.block, self.block))) * inv_area
                # adjoint of full convolution w.r.t. the kernel
                dh += fftconvolve(dmeas, scenes[b][::-1, ::-1], mode="valid")
            dphases.append(raw_phase_grad(f, F, dh))
        return loss, dphases, dw, db


@dataclass(frozen=True)
class E2eToyConfig:
    elements: int = 4
    phase_n: int = 32
    scene_n: int = 32
    pool: int = 4
    batch: int = 8
    n_samples: int = 64
    steps: int = 200
    lr_phase: float = 0.05
    lr_head: float = 0.05
    seed: int = 0
    pitch_m: float = 2.5e-6
    wavelength_m: float = 532e-9
    sensor_distance_m: float = 0.01


@dataclass(frozen=True)
class E2eTrainReport:
    loss_curve: np.ndarray = field(repr=False)
    mean_step_ms: float = 0.0
    optical_params: int = 0
    readout_params: int = 0

    @property
    def total_params(self) -> int:
        return self.optical_params + self.readout_params


def _e2e_setup(cfg: E2eToyConfig):
    grid = GridSpec(cfg.phase_n, cfg.phase_n, cfg.pitch_m)
    optical = OpticalConfig(cfg.wavelength_m, cfg.sensor_distance_m)
    aperture = make_circular_aperture(grid, min(grid.extent_x_m, grid.extent_y_m))
    rng = np.random.default_rng(cfg.seed)
    model = _E2eModel(grid, optical, aperture, cfg.elements, cfg.scene_n, cfg.pool, rng)
    scenes = np.stack([_smooth_scene(cfg.scene_n, rng) for _ in range(cfg.n_samples)])
    # regression target: fixed random functional of the pinhole image
    v = rng.standard_normal((cfg.pool, cfg.pool))
    scene_block = max(1, cfg.scene_n // cfg.pool)
    crop = scene_block * cfg.pool
    pooled_scenes = scenes[:, :crop, :crop].reshape(
        cfg.n_samples, cfg.pool, scene_block, cfg.pool, scene_block).mean(axis=(2, 4))
    y = np.einsum("bpq,pq->b", pooled_scenes, v)
    return model, scenes, y, rng


def e2e_toy_train(cfg: E2eToyConfig) -> E2eTrainReport:
    """Jointly optimize all element phases and the linear readout by plain
    gradient descent through the capture simulation."""
    model, scenes, y, rng = _e2e_setup(cfg)
    losses = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, cfg.n_samples, size=cfg.batch)
        loss, dphases, dw, db = model.loss_and_grads(scenes[idx], y[idx])
        losses.append(loss)
        for e in range(cfg.elements):
            model.phases[e] = model.phases[e] - cfg.lr_phase * dphases[e]
        model.w -= cfg.lr_head * dw
        model.b -= cfg.lr_head * db
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    optical, readout = model.n_params
    return E2eTrainReport(
        loss_curve=np.asarray(losses),
        mean_step_ms=elapsed_ms / max(1, cfg.steps),
        optical_params=optical,
        readout_params=readout,
    )


def e2e_fd_check(cfg: E2eToyConfig | None = None, n_probes: int = 6,
                 step: float = 1e-6, seed: int = 0) -> float:
    """Finite-difference validation of the end-to-end gradient path on a
    micro configuration; returns the worst relative error."""
    if cfg is None:
        cfg = E2eToyConfig(elements=1, phase_n=8, scene_n=8, pool=2, batch=3,
                           n_samples=3, steps=1, seed=seed)
    model, scenes, y, _ = _e2e_setup(cfg)
    batch = scenes[:cfg.batch]
    yb = y[:cfg.batch]
    _, dphases, _, _ = model.loss_and_grads(batch, yb)

    rng = np.random.default_rng(seed)
    open_idx = np.argwhere(model.T > 0)
    picks = open_idx[rng.integers(0, len(open_idx), size=n_probes)]
    grad = dphases[0]
    floor = 1e-12 * max(1.0, float(np.abs(grad).max()))
    worst = 0.0
    phi = model.phases[0]
    for iy, ix in picks:
        orig = phi[iy, ix]
        phi[iy, ix] = orig + step
        lp, _, _, _ = model.loss_and_grads(batch, yb)
        phi[iy, ix] = orig - step
        lm, _, _, _ = model.loss_and_grads(batch, yb)
        phi[iy, ix] = orig
        fd = (lp - lm) / (2 * step)
        a = grad[iy, ix]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


def _e2e_step_fn(sizes: BenchSizes, seed: int):
    cfg = E2eToyConfig(
        elements=sizes.elements, phase_n=sizes.phase_n, scene_n=sizes.scene_n,
        pool=8, batch=sizes.batch, n_samples=sizes.batch, steps=1, seed=seed,
        pitch_m=sizes.pitch_m, wavelength_m=sizes.wavelength_m,
        sensor_distance_m=sizes.sensor_distance_m,
    )
    model, scenes, y, _ = _e2e_setup(cfg)

    def step():
        model.loss_and_grads(scenes, y)

    return step


_MODES = {"dko": _dko_step_fn, "e2e": _e2e_step_fn, "electronic": _electronic_step_fn}


def time_step(mode: str, sizes: BenchSizes | None = None, repeats: int = 5,
              seed: int = 0, warmup: int = 1) -> StepTiming:
    """Wall-clock one forward+backward step of the given mode (monotonic
    clock, warmup excluded, I/O and setup excluded)."""
    if mode not in _MODES:
        raise ValidationError(f"unknown bench mode {mode!r}; pick from {sorted(_MODES)}")
    sizes = sizes or BenchSizes()
    fn = _MODES[mode](sizes, seed)
    mean_ms, std_ms, n = _time_callable(fn, repeats, warmup)
    return StepTiming(mode=mode, sizes=sizes, mean_ms=mean_ms, std_ms=std_ms,
                      iterations_timed=n)
