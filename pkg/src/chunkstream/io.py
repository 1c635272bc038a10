"""File formats: STV1 tensor containers, run configs, PGM slices and metric CSVs."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

MAGIC = b"STV1"
DTYPE_F32 = 0
CONFIG_ENV = "STV_CONFIG"


class FormatError(ValueError):
    """Malformed input file."""


# --- tensor container -------------------------------------------------------

def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + struct.pack("<B", x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape) + struct.pack("<B", DTYPE_F32)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse a container; values are widened to float64."""
    if len(data) < 6 or data[:4] != MAGIC:
        raise FormatError("not an STV1 container (bad magic)")
    rank = data[4]
    head = 5 + 8 * rank + 1
    if len(data) < head:
        raise FormatError("truncated header")
    dims = struct.unpack(f"<{rank}Q", data[5:head - 1])
    dtype = data[head - 1]
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    n = math.prod(dims)
    if len(data) - head != 4 * n:
        raise FormatError(f"payload is {len(data) - head} bytes, expected {4 * n} for dims {dims}")
    return np.frombuffer(data, dtype="<f4", offset=head, count=n).astype(np.float64).reshape(dims)


def write_tensor(path, x: np.ndarray):
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_weights(directory, weights: dict[str, np.ndarray]):
    """One ``<name>.stv`` container per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, value in weights.items():
        write_tensor(d / f"{name}.stv", value)


def read_weights(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"weight directory {d} does not exist")
    return {p.name[:-4]: read_tensor(p) for p in sorted(d.glob("*.stv"))}


# --- run configuration -------------------------------------------------------

def _in(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
    return check


@dataclass(frozen=True)
class RunConfig:
    T: int = 1000
    beta0: float = 0.0085
    betaT: float = 0.0120
    ddim_steps: int = 50
    eta: float = 1.0
    omega_text: float = 7.5
    omega_anchor: float = 7.5
    F: int = 16
    F_cond: int = 8
    F_enh: int = 24
    O: int = 8
    Tprime: int = 600
    seed: int = 0
    flow_iters: int = 100
    flow_lambda: float = 0.1
    flow_levels: int = 3
    occlusion_thresh: float = 0.5
    scuts_window: int = 2
    scuts_ratio: float = 3.0
    scuts_min_content: float = 15.0 / 255.0

    def validate(self) -> "RunConfig":
        rules = {
            "T": _in(1, 10**7), "beta0": _in(0, 1, lo_open=True, hi_open=True),
            "betaT": _in(0, 1, lo_open=True, hi_open=True), "ddim_steps": _in(1, 10**6),
            "eta": _in(0, 10), "omega_text": math.isfinite, "omega_anchor": math.isfinite,
            "F": _in(1, 10**6), "F_cond": _in(1, 10**6), "F_enh": _in(1, 10**6), "O": _in(0, 10**6),
            "Tprime": _in(1, 10**7), "seed": _in(0, 2**64 - 1), "flow_iters": _in(1, 10**6),
            "flow_lambda": _in(0, math.inf, lo_open=True, hi_open=True), "flow_levels": _in(1, 16),
            "occlusion_thresh": _in(0, math.inf, hi_open=True), "scuts_window": _in(1, 10**6),
            "scuts_ratio": _in(0, math.inf, lo_open=True, hi_open=True),
            "scuts_min_content": _in(0, math.inf, hi_open=True),
        }
        for name, ok in rules.items():
            if not ok(getattr(self, name)):
                raise ValueError(f"config value {name}={getattr(self, name)} out of range")
        if self.beta0 > self.betaT:
            raise ValueError("config requires beta0 <= betaT")
        if self.F_cond > self.F:
            raise ValueError("config requires F_cond <= F")
        if self.O >= self.F_enh:
            raise ValueError("config requires O < F_enh")
        if self.Tprime >= self.T:
            raise ValueError("config requires Tprime < T")
        return self


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[key] = int(value, 0) if types[key] == "int" else float(value)
        except ValueError:
            raise ValueError(f"config line {lineno}: cannot parse {key}={value!r} as {types[key]}") from None
    return replace(base, **updates).validate()


def load_config(path=None) -> RunConfig:
    """Read ``path``, else the file named by $STV_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    return parse_config(Path(path).read_text())


# --- visualisation and reports ----------------------------------------------

def xt_slice(video: np.ndarray, row: int) -> np.ndarray:
    """(w, N) uint8 image: column f is row ``row`` of frame f, channel-averaged."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 3:
        video = video[..., None]
    if not 0 <= row < video.shape[1]:
        raise IndexError(f"row {row} outside [0, {video.shape[1]})")
    img = video[:, row].mean(axis=-1).T
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    return np.rint(scaled * 255).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    pixels = parts[4]
    if len(pixels) != w * h:
        raise FormatError("PGM payload size mismatch")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def format_value(v) -> str:
    # %-formatting ignores the locale, so the decimal point is always '.'
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.6g" % v


def metrics_csv(rows, header=("metric", "value")) -> str:
    lines = [",".join(header)]
    lines += [",".join([str(name)] + [format_value(v) for v in (vals if isinstance(vals, tuple) else (vals,))])
              for name, vals in rows]
    return "\n".join(lines) + "\n"
