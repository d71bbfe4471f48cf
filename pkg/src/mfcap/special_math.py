"""Special functions, seeded sampling and adaptive quadrature.

Everything runs in float64. Sampling goes through :class:`Rng`, a thin
wrapper over the counter-based Philox generator whose sub-streams are
derived from (seed, split path) so that parallel consumers never share
state.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special as _sp

__all__ = [
    "QuadratureSpec",
    "QuadratureError",
    "Rng",
    "log_gamma",
    "digamma",
    "integrate_adaptive",
    "sample_standard_normal",
    "sample_gamma",
]

_GL_NODES, _GL_WEIGHTS = leggauss(15)


class QuadratureError(ArithmeticError):
    """Adaptive integration ran out of subdivisions before meeting tolerance."""


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_subdivisions: int = 2000
    tail_cutoff_sigmas: float = 12.0

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError(f"abs_tol must be > 0, got {self.abs_tol}")
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol must be > 0, got {self.rel_tol}")
        if self.max_subdivisions < 1:
            raise ValueError(f"max_subdivisions must be >= 1, got {self.max_subdivisions}")
        if not self.tail_cutoff_sigmas >= 6:
            raise ValueError(f"tail_cutoff_sigmas must be >= 6, got {self.tail_cutoff_sigmas}")


class Rng:
    """Deterministic, splittable random stream.

    ``Rng(seed)`` and ``rng.split()`` children are independent Philox
    streams keyed by the seed and the split path. ``counter`` reports how
    many 64-bit words the stream has consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._children = 0
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._bitgen = np.random.Philox(seq)
        self._start = self._counter_value()
        self._gen = np.random.Generator(self._bitgen)

    def _counter_value(self) -> int:
        words = self._bitgen.state["state"]["counter"]
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    @property
    def counter(self) -> int:
        return self._counter_value() - self._start

    def split(self) -> "Rng":
        child = Rng(self.seed, self.path + (self._children,))
        self._children += 1
        return child

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws from U[0, 1)."""
        return self._gen.random(n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        return sample_standard_normal(self, math.prod(shape)).reshape(shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path}, counter={self.counter})"


def log_gamma(x: float) -> float:
    if not x > 0:
        raise ValueError(f"log_gamma domain error: x must be > 0, got {x}")
    return math.lgamma(x)


def digamma(x):
    """psi(x) for x > 0; accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(arr > 0):
        raise ValueError(f"digamma domain error: x must be > 0, got {x}")
    out = _sp.digamma(arr)
    return float(out) if out.ndim == 0 else out


def _panel_sums(f, a: np.ndarray, b: np.ndarray):
    """Gauss-Legendre sums over each [a_j, b_j] and over both halves.

    Returns (whole, halves) with the trailing axis indexing panels.
    """
    mid = 0.5 * (a + b)
    lo = np.concatenate([a, a, mid])
    hi = np.concatenate([b, mid, b])
    half = 0.5 * (hi - lo)
    x = (0.5 * (lo + hi))[:, None] + half[:, None] * _GL_NODES
    fx = np.asarray(f(x.ravel()), dtype=np.float64)
    fx = fx.reshape(fx.shape[:-1] + x.shape)
    sums = (fx @ _GL_WEIGHTS) * half
    n = len(a)
    return sums[..., :n], sums[..., n:2 * n] + sums[..., 2 * n:]


def integrate_adaptive(
    f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    spec: QuadratureSpec | None = None,
    scale: float = 1.0,
    center: float = 0.0,
    breakpoints=(),
):
    """Globally adaptive 15-point Gauss-Legendre integration.

    ``f`` is vectorized: it maps a 1-D array of abscissae to an array whose
    last axis matches, so vector-valued integrands (shape ``(m, n)``) are
    integrated component-wise in a single pass. Infinite endpoints are
    truncated at ``center +/- tail_cutoff_sigmas * scale``; the integrand
    must decay at least exponentially beyond that point.

    Each panel's error is estimated from the difference between the
    whole-panel rule and the sum over its two halves; the halved value is
    kept. Returns ``(value, err_estimate)``.
    """
    spec = spec or QuadratureSpec()
    cut = spec.tail_cutoff_sigmas * scale
    if math.isinf(lo):
        lo = center - cut if lo < 0 else center + cut
    if math.isinf(hi):
        hi = center + cut if hi > 0 else center - cut
    if lo == hi:
        return 0.0, 0.0
    sign = 1.0
    if lo > hi:
        lo, hi, sign = hi, lo, -1.0

    edges = np.unique(np.concatenate([[lo, hi], [p for p in breakpoints if lo < p < hi]]))
    a, b = edges[:-1], edges[1:]
    whole, halves = _panel_sums(f, a, b)
    errs = np.abs(whole - halves)

    # heap entries: (-max component error, tiebreak, a, b, value, err)
    heap = []
    total = np.zeros(whole.shape[:-1])
    total_err = np.zeros(whole.shape[:-1])
    for j in range(len(a)):
        heapq.heappush(heap, (-float(np.max(errs[..., j])), j, a[j], b[j], halves[..., j], errs[..., j]))
        total = total + halves[..., j]
        total_err = total_err + errs[..., j]
    tick = len(a)

    subdivisions = 0
    while np.any(total_err > np.maximum(spec.abs_tol, spec.rel_tol * np.abs(total))):
        if subdivisions >= spec.max_subdivisions:
            raise QuadratureError(
                f"no convergence after {subdivisions} subdivisions on [{lo}, {hi}]: "
                f"err {float(np.max(total_err)):.3e}"
            )
        _, _, pa, pb, pval, perr = heapq.heappop(heap)
        pm = 0.5 * (pa + pb)
        cw, ch = _panel_sums(f, np.array([pa, pm]), np.array([pm, pb]))
        cerr = np.abs(cw - ch)
        total = total - pval + ch[..., 0] + ch[..., 1]
        total_err = total_err - perr + cerr[..., 0] + cerr[..., 1]
        for j, (ca, cb) in enumerate(((pa, pm), (pm, pb))):
            heapq.heappush(heap, (-float(np.max(cerr[..., j])), tick, ca, cb, ch[..., j], cerr[..., j]))
            tick += 1
        subdivisions += 1

    # re-sum from panels to shed accumulated cancellation in the running total
    total = sum(entry[4] for entry in heap)
    err = float(np.max(total_err))
    if np.ndim(total) == 0:
        return sign * float(total), err
    return sign * np.asarray(total), err


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    """Box-Muller transform of paired uniforms."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return np.empty(0)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1]
    u2 = u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


def sample_gamma(rng: Rng, shape: float, rate: float, n: int) -> np.ndarray:
    """Marsaglia-Tsang squeeze sampler, shape-rate parameterization.

    For shape < 1 the draw is made at shape + 1 and scaled by U**(1/shape).
    """
    if not shape > 0 or not rate > 0:
        raise ValueError(f"shape and rate must be > 0, got shape={shape}, rate={rate}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(int(1.1 * (n - filled)) + 8, 64)
        z = sample_standard_normal(rng, m)
        u = 1.0 - rng.uniform(m)
        v = (1.0 + c * z) ** 3
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * z * z + d - d * v + d * np.log(v))
        acc = d * v[ok]
        take = min(len(acc), n - filled)
        out[filled:filled + take] = acc[:take]
        filled += take
    if boost:
        out *= (1.0 - rng.uniform(n)) ** (1.0 / shape)
    return out / rate
