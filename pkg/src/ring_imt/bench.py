"""Wall-clock latency of a single step of the estimator."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .net import RingParams, init_state, ring_step

__all__ = ["LatencyReport", "chain_parents", "step_latency"]


def chain_parents(n: int) -> tuple[int, ...]:
    """Serial chain ``(0, 1, ..., n - 1)``."""
    return tuple(range(n))


@dataclass
class LatencyReport:
    samples_us: np.ndarray

    @property
    def median_us(self) -> float:
        return float(np.median(self.samples_us))

    @property
    def p99_us(self) -> float | None:
        return float(np.percentile(self.samples_us, 99)) if len(self.samples_us) > 1 else None

    @property
    def std_us(self) -> float | None:
        return float(np.std(self.samples_us, ddof=1)) if len(self.samples_us) > 1 else None

    @property
    def max_rate_hz(self) -> float:
        return 1e6 / self.median_us

    def real_time(self, F: float) -> bool:
        """A step is real-time at ``F`` iff the median step finishes within ``1/F``."""
        return self.median_us * 1e-6 < 1.0 / F

    def lines(self, rates: Sequence[float]) -> list[str]:
        out = [f"iterations      {len(self.samples_us)}", f"median step     {self.median_us:.1f} us"]
        if self.p99_us is not None:
            out.append(f"p99 step        {self.p99_us:.1f} us")
            out.append(f"std             {self.std_us:.1f} us")
        out.append(f"max rate        {self.max_rate_hz:.0f} Hz")
        for F in rates:
            verdict = "real-time" if self.real_time(F) else "NOT real-time"
            out.append(f"{F:7.1f} Hz      {verdict}")
        return out


def step_latency(
    params: RingParams,
    n_bodies: int = 3,
    iterations: int = 1000,
    warmup: int = 50,
    seed: int = 0,
) -> LatencyReport:
    """Time ``iterations`` consecutive steps on random inputs, single-threaded."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    parents = chain_parents(n_bodies)
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((warmup + iterations, n_bodies, 10))
    xs[..., 9] = 0.01
    state = init_state(n_bodies, params.H)
    samples = np.empty(iterations)
    with threadpool_limits(limits=1):
        for k in range(warmup):
            state, _ = ring_step(state, xs[k], parents, params)
        for k in range(iterations):
            t0 = time.perf_counter()
            state, _ = ring_step(state, xs[warmup + k], parents, params)
            samples[k] = time.perf_counter() - t0
    return LatencyReport(samples * 1e6)
