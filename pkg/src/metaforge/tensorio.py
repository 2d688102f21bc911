"""Bit-exact file I/O: NPY v1.0 tensors, PGM/PPM/PFM images, JSON configs
and reports, CSV loss curves.

Tensors interchange as NPY v1.0 only (f32/f64, C order, little-endian on
disk regardless of host). v2/v3 headers, Fortran order, and pickled object
payloads are rejected with descriptive errors rather than round-tripped.
Writers go through a temp file followed by an atomic rename.
"""

from __future__ import annotations

import ast
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from .errors import TensorFormatError, ValidationError

__all__ = [
    "TensorHeader",
    "save_tensor",
    "load_tensor",
    "save_pgm",
    "save_ppm",
    "load_image",
    "save_pfm",
    "save_loss_curves",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "config_as_dict",
    "write_report",
]

FORMAT_VERSION = 1

_MAGIC = b"\x93NUMPY"
_DESCR_TO_DTYPE = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass(frozen=True)
class TensorHeader:
    dtype: str  # "f32" or "f64"
    shape: tuple[int, ...]
    order: str = "row-major"


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(tensor: np.ndarray, path) -> None:
    """Write an NPY v1.0 file; f32 input stays f32, everything else is f64."""
    tensor = np.asarray(tensor)
    if tensor.dtype == np.float32:
        descr, payload = "<f4", np.ascontiguousarray(tensor, dtype="<f4")
    else:
        descr, payload = "<f8", np.ascontiguousarray(tensor, dtype="<f8")
    shape_str = "(" + ", ".join(str(d) for d in tensor.shape) + ("," if tensor.ndim == 1 else "") + ")"
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}"
    base_len = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - base_len % 64) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    blob = _MAGIC + b"\x01\x00" + struct.pack("<H", len(header_bytes)) + header_bytes
    _atomic_write(path, blob + payload.tobytes(order="C"))


def load_tensor(path) -> tuple[np.ndarray, TensorHeader]:
    """Read an NPY v1.0 file written by any conforming producer."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 10 or data[:6] != _MAGIC:
        raise TensorFormatError(f"{path}: not an NPY file (bad magic bytes)")
    major, minor = data[6], data[7]
    if (major, minor) != (1, 0):
        raise TensorFormatError(
            f"{path}: unsupported NPY version {major}.{minor} (only 1.0 is handled)"
        )
    (header_len,) = struct.unpack("<H", data[8:10])
    header_end = 10 + header_len
    if len(data) < header_end:
        raise TensorFormatError(f"{path}: truncated NPY header")
    try:
        header = ast.literal_eval(data[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise TensorFormatError(f"{path}: unparsable NPY header ({exc})") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise TensorFormatError(f"{path}: NPY header missing required keys")
    descr = header["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise TensorFormatError(
            f"{path}: unsupported dtype descr {descr!r}; only little-endian f32/f64 "
            "payloads are accepted (pickled object arrays are rejected)"
        )
    if header["fortran_order"]:
        raise TensorFormatError(f"{path}: fortran_order=True is not supported")
    shape = tuple(int(d) for d in header["shape"])
    dtype = _DESCR_TO_DTYPE[descr]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - header_end
    if actual != expected:
        raise TensorFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for shape "
            f"{shape} {descr}, got {actual}"
        )
    arr = np.frombuffer(data[header_end:], dtype=dtype).reshape(shape).copy()
    return arr, TensorHeader(dtype="f32" if descr == "<f4" else "f64", shape=shape)


# --- image previews -------------------------------------------------------

def _quantize(img: np.ndarray, maxval: int) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(img * maxval).astype(">u2" if maxval > 255 else "u1")


def save_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Binary PGM (P5) from a float image in [0, 1]. 16-bit is big-endian."""
    if maxval not in (255, 65535):
        raise ValidationError("PGM maxval must be 255 or 65535")
    img = np.atleast_2d(img)
    if img.ndim != 2:
        raise ValidationError("PGM wants a 2-D image")
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    _atomic_write(path, head + _quantize(img, maxval).tobytes())


def save_ppm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Binary PPM (P6) from a float (H, W, 3) image in [0, 1]."""
    if maxval not in (255, 65535):
        raise ValidationError("PPM maxval must be 255 or 65535")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("PPM wants an (H, W, 3) image")
    head = f"P6\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    _atomic_write(path, head + _quantize(img, maxval).tobytes())


def load_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into floats in [0, 1] (no gamma handling here)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] not in (b"P5", b"P6"):
        raise TensorFormatError(f"{path}: not a binary PGM/PPM (magic {data[:2]!r})")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TensorFormatError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise TensorFormatError(f"{path}: bad PNM header tokens {tokens}") from exc
    channels = 3 if data[:2] == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    payload = data[pos:pos + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise TensorFormatError(
            f"{path}: payload size mismatch, expected {count * dtype.itemsize} bytes, "
            f"got {len(payload)}"
        )
    img = np.frombuffer(payload, dtype=dtype).astype(np.float64) / maxval
    img = img.reshape((height, width) if channels == 1 else (height, width, 3))
    return img


def save_pfm(path, img: np.ndarray) -> None:
    """PFM float preview (Pf/PF, little-endian, rows bottom-to-top)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValidationError("PFM wants (H, W) or (H, W, 3)")
    head = magic + f"\n{img.shape[1]} {img.shape[0]}\n-1.0\n".encode("ascii")
    _atomic_write(path, head + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def save_loss_curves(path, curves: dict[Any, Any]) -> None:
    """CSV with columns element,iteration,loss."""
    lines = ["element,iteration,loss"]
    for element, curve in curves.items():
        for i, loss in enumerate(curve):
            lines.append(f"{element},{i},{loss!r}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


# --- run configuration ----------------------------------------------------

@dataclass(frozen=True)
class DkoSettings:
    max_iters: int = 2000
    lr: float = 0.02
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "lens+jitter"
    init_sigma_rad: float = 0.1
    rel_tol: float = 1e-6
    patience: int = 50
    fit_gain: bool = True


@dataclass(frozen=True)
class CaptureSettings:
    samples_per_tap: int = 1
    stride: int = 1
    noise: str = "none"
    noise_sigma: float = 0.0
    poisson_scale: float = 1.0
    quantization_bits: int | None = None


@dataclass(frozen=True)
class RunConfig:
    """JSON mirror of all module configuration, SI units, unit-suffixed keys."""

    wavelength_m: float = 532e-9
    sensor_distance_m: float = 0.01
    n_x: int = 1025
    n_y: int = 1025
    pitch_m: float = 2.5e-6
    aperture_diameter_m: float | None = None  # None -> full grid extent
    tap_pitch_m: float | None = None  # None -> sensor pitch * samples_per_tap
    seed: int = 0
    dko: DkoSettings = field(default_factory=DkoSettings)
    capture: CaptureSettings = field(default_factory=CaptureSettings)


_SCALARS = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _coerce(value, annotation, path_str):
    if annotation == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"expected integer at {path_str}, got {type(value).__name__}")
        return value
    if annotation == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"expected number at {path_str}, got {type(value).__name__}")
        return float(value)
    if annotation == "string":
        if not isinstance(value, str):
            raise ValidationError(f"expected string at {path_str}, got {type(value).__name__}")
        return value
    if annotation == "boolean":
        if not isinstance(value, bool):
            raise ValidationError(f"expected boolean at {path_str}, got {type(value).__name__}")
        return value
    raise AssertionError(annotation)


def _dataclass_from_dict(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(f"expected object at {prefix or '$'}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path_str = f"{prefix}.{key}" if prefix else f"$.{key}"
        if key == "format_version" and not prefix:
            if value != FORMAT_VERSION:
                raise ValidationError(f"unsupported format_version {value} at $.format_version")
            continue
        if key not in known:
            raise ValidationError(f"unknown key at {path_str}")
        f = known[key]
        if f.name == "dko":
            kwargs[key] = _dataclass_from_dict(DkoSettings, value, path_str)
        elif f.name == "capture":
            kwargs[key] = _dataclass_from_dict(CaptureSettings, value, path_str)
        elif f.name in ("aperture_diameter_m", "tap_pitch_m"):
            kwargs[key] = None if value is None else _coerce(value, "number", path_str)
        elif f.name == "quantization_bits":
            kwargs[key] = None if value is None else _coerce(value, "integer", path_str)
        else:
            base = f.type if isinstance(f.type, type) else {"int": int, "float": float,
                                                            "str": str, "bool": bool}[f.type]
            kwargs[key] = _coerce(value, _SCALARS[base], path_str)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a JSON object; unknown keys are rejected with
    their JSON path, omitted keys take defaults."""
    cfg = _dataclass_from_dict(RunConfig, data, "")
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    checks = [
        (cfg.wavelength_m > 0, "$.wavelength_m must be > 0"),
        (cfg.sensor_distance_m > 0, "$.sensor_distance_m must be > 0"),
        (cfg.n_x >= 2 and cfg.n_y >= 2, "$.n_x and $.n_y must be >= 2"),
        (cfg.pitch_m > 0, "$.pitch_m must be > 0"),
        (cfg.dko.max_iters >= 1, "$.dko.max_iters must be >= 1"),
        (cfg.dko.lr > 0, "$.dko.lr must be > 0"),
        (cfg.dko.rel_tol >= 0, "$.dko.rel_tol must be >= 0"),
        (cfg.dko.patience >= 1, "$.dko.patience must be >= 1"),
        (cfg.dko.optimizer in ("adam", "gradient-descent"),
         "$.dko.optimizer must be 'adam' or 'gradient-descent'"),
        (cfg.dko.init in ("lens+jitter", "random", "zero"),
         "$.dko.init must be 'lens+jitter', 'random', or 'zero'"),
        (cfg.capture.samples_per_tap >= 1, "$.capture.samples_per_tap must be >= 1"),
        (cfg.capture.stride >= 1, "$.capture.stride must be >= 1"),
        (cfg.capture.noise in ("none", "gaussian", "poisson"),
         "$.capture.noise must be 'none', 'gaussian', or 'poisson'"),
        (cfg.capture.noise_sigma >= 0, "$.capture.noise_sigma must be >= 0"),
        (cfg.capture.poisson_scale > 0, "$.capture.poisson_scale must be > 0"),
        (cfg.seed >= 0, "$.seed must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ValidationError(message)


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_as_dict(cfg: RunConfig) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "wavelength_m": cfg.wavelength_m,
        "sensor_distance_m": cfg.sensor_distance_m,
        "n_x": cfg.n_x,
        "n_y": cfg.n_y,
        "pitch_m": cfg.pitch_m,
        "aperture_diameter_m": cfg.aperture_diameter_m,
        "tap_pitch_m": cfg.tap_pitch_m,
        "seed": cfg.seed,
        "dko": {f.name: getattr(cfg.dko, f.name) for f in fields(DkoSettings)},
        "capture": {f.name: getattr(cfg.capture, f.name) for f in fields(CaptureSettings)},
    }
    return d


def override_config(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply non-None overrides (CLI flags win over config-file values)."""
    top = {k: v for k, v in overrides.items() if v is not None and "." not in k}
    dko = {k.split(".", 1)[1]: v for k, v in overrides.items()
           if v is not None and k.startswith("dko.")}
    cap = {k.split(".", 1)[1]: v for k, v in overrides.items()
           if v is not None and k.startswith("capture.")}
    if dko:
        top["dko"] = replace(cfg.dko, **dko)
    if cap:
        top["capture"] = replace(cfg.capture, **cap)
    out = replace(cfg, **top)
    _validate_config(out)
    return out


def write_report(path, payload: dict, config: RunConfig | None = None) -> None:
    """JSON report carrying the effective config and format version."""
    body = dict(payload)
    body.setdefault("format_version", FORMAT_VERSION)
    if config is not None:
        body["config"] = config_as_dict(config)
    _atomic_write(path, (json.dumps(body, indent=2, sort_keys=False) + "\n").encode("utf-8"))
