"""Simulated video traces.

A trace replaces a real video with the handful of per-frame quantities the
scheduler cares about: the segmentation quality a key frame would reach, the
frame-to-frame motion, and where the scene cuts are. Propagating features
from key ``k`` to frame ``i`` loses quality as a linear-plus-quadratic
function of the motion accumulated in between, clamped at a floor.

Scalar query functions (``accumulated_motion``, ``prop_quality``, ...) serve
tests and per-frame schedulers; :class:`TraceBank` runs the same arithmetic
vectorised over many (trace, i, k) rows for the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng as crng
from .errors import BoundsError, ConfigError, FormatError, OrderingError, VersionError

TRACE_MAGIC = "KEYSCHED-TRACE"
TRACE_VERSION = "v1"
TRACE_HEADER = "frame,key_quality,motion,scene_change"


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 600
    base_quality_mean: float = 0.85
    base_quality_jitter: float = 0.04
    quality_corr: float = 0.98
    motion_mean: float = 0.3
    motion_jitter: float = 0.3
    motion_corr: float = 0.97
    scene_change_rate: float = 1.0
    scene_change_motion_spike: float = 20.0
    alpha: float = 0.02
    beta: float = 0.001
    quality_floor: float = 0.3
    feature_dim: int = 8
    feature_noise_sigma: float = 0.05
    agreement_kappa: float = 1.0

    def validate(self) -> None:
        if int(self.n_frames) != self.n_frames or self.n_frames < 2:
            raise ConfigError("n_frames", f"must be an integer >= 2, got {self.n_frames}")
        for name in ("base_quality_jitter", "motion_mean", "motion_jitter", "scene_change_rate",
                     "alpha", "beta", "feature_noise_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(name, f"must be a finite nonnegative number, got {v}")
        for name in ("quality_corr", "motion_corr"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(name, f"must lie in [0, 1), got {v}")
        if not self.scene_change_motion_spike >= 5:
            raise ConfigError("scene_change_motion_spike", f"must be >= 5, got {self.scene_change_motion_spike}")
        if not 0 <= self.quality_floor < 0.99:
            raise ConfigError("quality_floor", f"must lie in [0, 0.99), got {self.quality_floor}")
        if not self.quality_floor < self.base_quality_mean <= 1:
            raise ConfigError("base_quality_mean", "must lie in (quality_floor, 1]")
        if int(self.feature_dim) != self.feature_dim or self.feature_dim < 3:
            raise ConfigError("feature_dim", f"must be an integer >= 3, got {self.feature_dim}")
        if not (math.isfinite(self.agreement_kappa) and self.agreement_kappa > 0):
            raise ConfigError("agreement_kappa", f"must be positive, got {self.agreement_kappa}")


@dataclass(frozen=True, eq=False)
class Trace:
    key_quality: np.ndarray
    motion: np.ndarray
    scene_changes: tuple[int, ...] = ()
    alpha: float = 0.02
    beta: float = 0.001
    quality_floor: float = 0.3
    feature_dim: int = 8
    feature_noise_sigma: float = 0.05
    agreement_kappa: float = 1.0
    seed: int = 0
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        kq = np.array(self.key_quality, dtype=np.float64)
        mo = np.array(self.motion, dtype=np.float64)
        kq.setflags(write=False)
        if kq.ndim != 1 or kq.shape != mo.shape or kq.size < 1:
            raise ValueError("key_quality and motion must be equal-length 1-D arrays")
        if not np.all((kq >= 0) & (kq <= 1)):
            raise ValueError("key_quality entries must lie in [0, 1]")
        if not np.all(np.isfinite(mo)) or np.any(mo < 0):
            raise ValueError("motion entries must be finite and nonnegative")
        if mo[0] != 0:
            raise ValueError("motion[0] must be 0")
        if not self.quality_floor < kq.min():
            raise ValueError("quality_floor must be below every key_quality entry")
        cum = np.cumsum(mo)
        mo.setflags(write=False)
        cum.setflags(write=False)
        object.__setattr__(self, "key_quality", kq)
        object.__setattr__(self, "motion", mo)
        object.__setattr__(self, "scene_changes", tuple(int(s) for s in self.scene_changes))
        object.__setattr__(self, "seed", int(self.seed) & crng.MASK64)
        object.__setattr__(self, "_cum", cum)

    @property
    def n_frames(self) -> int:
        return int(self.key_quality.size)

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        scalars = [f.name for f in fields(self) if f.name not in ("key_quality", "motion", "_cum")]
        return (all(getattr(self, n) == getattr(other, n) for n in scalars)
                and np.array_equal(self.key_quality, other.key_quality)
                and np.array_equal(self.motion, other.motion))

    __hash__ = None

    def params(self) -> dict:
        return dict(alpha=self.alpha, beta=self.beta, quality_floor=self.quality_floor,
                    feature_dim=self.feature_dim, feature_noise_sigma=self.feature_noise_sigma,
                    agreement_kappa=self.agreement_kappa)


def _ar1(rng: np.random.Generator, n: int, corr: float) -> np.ndarray:
    eps = rng.standard_normal(n)
    z = np.empty(n)
    z[0] = eps[0]
    s = math.sqrt(1.0 - corr * corr)
    for t in range(1, n):
        z[t] = corr * z[t - 1] + s * eps[t]
    return z


def gen_trace(cfg: SynthConfig, seed: int) -> Trace:
    """Generate a synthetic trace.

    Draw order from ``numpy.random.Generator(PCG64(seed))``:

    1. ``poisson(scene_change_rate * n_frames / 100)`` scene changes, capped
       at ``n_frames - 1``;
    2. their positions, ``choice(n_frames - 1, size, replace=False) + 1``;
    3. ``n_frames`` standard normals driving a unit-variance AR(1) series
       ``z`` for log-motion: motion = motion_mean * exp(jitter * z - jitter**2 / 2);
    4. ``n_frames`` standard normals driving the AR(1) key-quality series.

    Frame 0 has zero motion; scene-change frames get motion
    ``scene_change_motion_spike * motion_mean``.
    """
    cfg.validate()
    n = int(cfg.n_frames)
    seed = int(seed) & crng.MASK64
    gen = np.random.Generator(np.random.PCG64(seed))
    n_sc = min(int(gen.poisson(cfg.scene_change_rate * n / 100.0)), n - 1)
    scenes = np.sort(gen.choice(n - 1, size=n_sc, replace=False) + 1) if n_sc else np.zeros(0, dtype=int)

    zm = _ar1(gen, n, cfg.motion_corr)
    j = cfg.motion_jitter
    motion = cfg.motion_mean * np.exp(j * zm - 0.5 * j * j)
    motion[0] = 0.0
    motion[scenes] = cfg.scene_change_motion_spike * cfg.motion_mean

    zq = _ar1(gen, n, cfg.quality_corr)
    lo = min(cfg.quality_floor + 0.01, 0.5 * (cfg.quality_floor + 1.0))
    kq = np.clip(cfg.base_quality_mean + cfg.base_quality_jitter * zq, lo, 1.0)

    return Trace(key_quality=kq, motion=motion, scene_changes=tuple(int(s) for s in scenes),
                 alpha=cfg.alpha, beta=cfg.beta, quality_floor=cfg.quality_floor,
                 feature_dim=int(cfg.feature_dim), feature_noise_sigma=cfg.feature_noise_sigma,
                 agreement_kappa=cfg.agreement_kappa, seed=seed)


# -- scalar queries ---------------------------------------------------------

def _check_pair(trace: Trace, i: int, k: int) -> None:
    n = trace.n_frames
    if not (0 <= k < n and 0 <= i < n):
        raise BoundsError(f"frame indices (k={k}, i={i}) outside [0, {n})")
    if k > i:
        raise OrderingError(f"key index {k} is after frame index {i}")


def accumulated_motion(trace: Trace, k: int, i: int) -> float:
    """Motion summed over frames k+1..i (0 when i == k)."""
    _check_pair(trace, i, k)
    return float(trace._cum[i] - trace._cum[k])


def _prop_kernel(kq, m, alpha, beta, floor):
    return np.maximum(floor, kq - alpha * m - beta * (m * m))


def prop_quality(trace: Trace, i: int, k: int) -> float:
    """Quality at frame i when features are propagated from key k."""
    _check_pair(trace, i, k)
    m = trace._cum[i] - trace._cum[k]
    return float(_prop_kernel(trace.key_quality[i], m, trace.alpha, trace.beta, trace.quality_floor))


def _deviation_kernel(m, gap, key, sigma, d):
    noise = crng.normals(key, d)
    out = sigma * noise
    mean = np.divide(m, gap, out=np.zeros_like(m), where=gap > 0)
    out[..., 0] += m
    out[..., 1] += m * m
    out[..., 2] += mean
    return out


def deviation_feature(trace: Trace, i: int, k: int) -> np.ndarray:
    _check_pair(trace, i, k)
    m = np.atleast_1d(trace._cum[i] - trace._cum[k])
    key = crng.pair_key(trace.seed, i, k)
    gap = np.atleast_1d(np.float64(i - k))
    return _deviation_kernel(m, gap, key, trace.feature_noise_sigma, trace.feature_dim)[0]


def _agreement_kernel(kq, prop, kappa):
    return np.clip(1.0 - kappa * (kq - prop), 0.0, 1.0)


def agreement(trace: Trace, i: int, k: int) -> float:
    """Pseudo-label accuracy of the propagated prediction against the key prediction."""
    p = prop_quality(trace, i, k)
    return float(_agreement_kernel(trace.key_quality[i], p, trace.agreement_kappa))


# -- batched queries ----------------------------------------------------------

class TraceBank:
    """Vectorised queries over a fixed list of traces.

    Rows are addressed by (trace id, frame i, key k) arrays. Results are
    bitwise identical to the scalar functions above.
    """

    def __init__(self, traces):
        self.traces = list(traces)
        if not self.traces:
            raise ConfigError("traces", "need at least one trace")
        dims = {t.feature_dim for t in self.traces}
        if len(dims) != 1:
            raise ConfigError("feature_dim", f"traces disagree on feature_dim: {sorted(dims)}")
        self.feature_dim = dims.pop()
        lengths = np.array([t.n_frames for t in self.traces])
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.kq = np.concatenate([t.key_quality for t in self.traces])
        self.cum = np.concatenate([t._cum for t in self.traces])
        self.seed = np.array([t.seed for t in self.traces], dtype=np.uint64)
        self.alpha = np.array([t.alpha for t in self.traces])
        self.beta = np.array([t.beta for t in self.traces])
        self.floor = np.array([t.quality_floor for t in self.traces])
        self.sigma = np.array([t.feature_noise_sigma for t in self.traces])
        self.kappa = np.array([t.agreement_kappa for t in self.traces])

    def motion(self, tid, i, k):
        o = self.offsets[tid]
        return self.cum[o + i] - self.cum[o + k]

    def prop_quality(self, tid, i, k):
        m = self.motion(tid, i, k)
        return _prop_kernel(self.kq[self.offsets[tid] + i], m, self.alpha[tid], self.beta[tid], self.floor[tid])

    def key_quality(self, tid, i):
        return self.kq[self.offsets[tid] + i]

    def agreement(self, tid, i, k):
        return _agreement_kernel(self.key_quality(tid, i), self.prop_quality(tid, i, k), self.kappa[tid])

    def deviation(self, tid, i, k):
        m = self.motion(tid, i, k)
        key = crng.pair_key(self.seed[tid], i, k)
        gap = np.asarray(i - k, dtype=np.float64)
        sig = self.sigma[tid][..., None]
        return _deviation_kernel(m, gap, key, sig, self.feature_dim)


# -- file I/O ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_trace(trace: Trace, path) -> None:
    path = Path(path)
    sc = set(trace.scene_changes)
    lines = [
        f"{TRACE_MAGIC} {TRACE_VERSION}",
        (f"params: n_frames={trace.n_frames} alpha={_fmt(trace.alpha)} beta={_fmt(trace.beta)} "
         f"floor={_fmt(trace.quality_floor)} d={trace.feature_dim} sigma={_fmt(trace.feature_noise_sigma)} "
         f"kappa={_fmt(trace.agreement_kappa)} seed={trace.seed}"),
        TRACE_HEADER,
    ]
    for i in range(trace.n_frames):
        lines.append(f"{i},{_fmt(trace.key_quality[i])},{_fmt(trace.motion[i])},{1 if i in sc else 0}")
    path.write_text("\n".join(lines) + "\n")


_PARAM_KEYS = {"n_frames": int, "alpha": float, "beta": float, "floor": float, "d": int,
               "sigma": float, "kappa": float, "seed": int}


def load_trace(path) -> Trace:
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(TRACE_MAGIC):
        raise FormatError(f"missing '{TRACE_MAGIC}' header", 1, path)
    parts = lines[0].split()
    if len(parts) != 2:
        raise FormatError("malformed header line", 1, path)
    if parts[1] != TRACE_VERSION:
        raise VersionError(f"unsupported trace version {parts[1]!r} (expected {TRACE_VERSION})", 1, path)
    if len(lines) < 2 or not lines[1].startswith("params:"):
        raise FormatError("missing 'params:' line", 2, path)
    params = {}
    for tok in lines[1][len("params:"):].split():
        key, sep, val = tok.partition("=")
        if not sep or key not in _PARAM_KEYS:
            raise FormatError(f"unexpected parameter token {tok!r}", 2, path)
        try:
            params[key] = _PARAM_KEYS[key](val)
        except ValueError:
            raise FormatError(f"bad value for {key}: {val!r}", 2, path) from None
    missing = set(_PARAM_KEYS) - set(params)
    if missing:
        raise FormatError(f"missing parameters: {sorted(missing)}", 2, path)
    if len(lines) < 3 or lines[2].strip() != TRACE_HEADER:
        raise FormatError(f"expected column header {TRACE_HEADER!r}", 3, path)
    n = params["n_frames"]
    body = lines[3:]
    if len(body) != n:
        raise FormatError(f"expected {n} frame rows, found {len(body)}", 3 + min(len(body), n) + 1, path)
    kq = np.empty(n)
    mo = np.empty(n)
    scenes = []
    for row, line in enumerate(body):
        lineno = row + 4
        cells = line.split(",")
        if len(cells) != 4:
            raise FormatError(f"expected 4 columns, found {len(cells)}", lineno, path)
        try:
            frame = int(cells[0])
            kq[row] = float(cells[1])
            mo[row] = float(cells[2])
            flag = int(cells[3])
        except ValueError:
            raise FormatError(f"unparseable row {line!r}", lineno, path) from None
        if frame != row:
            raise FormatError(f"frame index {frame} out of sequence (expected {row})", lineno, path)
        if flag not in (0, 1):
            raise FormatError(f"scene_change must be 0 or 1, got {flag}", lineno, path)
        if flag:
            scenes.append(row)
    try:
        return Trace(key_quality=kq, motion=mo, scene_changes=tuple(scenes), alpha=params["alpha"],
                     beta=params["beta"], quality_floor=params["floor"], feature_dim=params["d"],
                     feature_noise_sigma=params["sigma"], agreement_kappa=params["kappa"], seed=params["seed"])
    except ValueError as exc:
        raise FormatError(f"invalid trace contents: {exc}", None, path) from None
