"""Iteration control, traces and results shared by all solvers."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import ConeSystem, KktCertificate, Signal, kkt_certificate, weighted_sse


@dataclass
class IterControl:
    """Stopping rules for a solve.

    ``max_iterations`` counts full cycles for the cyclic projection methods
    and single updates otherwise. Without a ``reference`` a solve stops when
    the KKT certificate passes at ``stop_tolerance``; with one, it stops once
    ``||x - reference||_2 < stop_tolerance``.
    """

    max_iterations: int = 100_000
    time_budget: Optional[float] = None
    stop_tolerance: float = 1e-8
    trace_stride: int = 1
    reference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.stop_tolerance <= 0:
            raise ValueError("stop_tolerance must be positive")
        if self.trace_stride < 1:
            raise ValueError("trace_stride must be >= 1")


@dataclass(frozen=True)
class TraceSample:
    iteration: int
    cpu_time: float
    objective: float
    primal: float
    dual: float
    complementarity: float
    stationarity: float
    distance: float = math.nan


@dataclass
class SolverResult:
    x: np.ndarray
    lam: np.ndarray
    active_set: tuple  # saturated constraints (positive multiplier or zero slack)
    converged: bool
    certificate: KktCertificate
    iterations: int
    solver: str = ""
    info: dict = field(default_factory=dict)


@dataclass
class SolverTrace:
    samples: list
    result: SolverResult

    @property
    def distances(self) -> np.ndarray:
        return np.array([s.distance for s in self.samples])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([s.iteration for s in self.samples])


def saturated_set(cone: ConeSystem, x, lam, scale: float, tol: float = 1e-9) -> tuple:
    lam = np.asarray(lam)
    return tuple(int(i) for i in np.flatnonzero(lam > tol * scale))


class Recorder:
    """Collects trace samples, measures thread CPU time and decides when to stop."""

    def __init__(self, signal: Signal, cone: ConeSystem, ctl: IterControl):
        self.signal = signal
        self.cone = cone
        self.ctl = ctl
        self.samples: list[TraceSample] = []
        self.scale = max(1.0, float(np.abs(signal.y).max()))
        self.reference = None if ctl.reference is None else np.asarray(ctl.reference, dtype=float)
        self.t0 = time.thread_time()
        self.last_certificate: Optional[KktCertificate] = None

    def elapsed(self) -> float:
        return time.thread_time() - self.t0

    def out_of_time(self) -> bool:
        return self.ctl.time_budget is not None and self.elapsed() >= self.ctl.time_budget

    def record(self, iteration: int, x, lam) -> TraceSample:
        cert = kkt_certificate(self.signal, self.cone, x, lam)
        self.last_certificate = cert
        dist = math.nan
        if self.reference is not None:
            dist = float(np.linalg.norm(np.asarray(x) - self.reference))
        t = self.elapsed()
        if self.samples and t < self.samples[-1].cpu_time:
            t = self.samples[-1].cpu_time
        sample = TraceSample(
            iteration=int(iteration),
            cpu_time=t,
            objective=weighted_sse(self.signal, x),
            primal=cert.primal_residual,
            dual=cert.dual_residual,
            complementarity=cert.complementarity,
            stationarity=cert.stationarity,
            distance=dist,
        )
        if self.samples and sample.iteration <= self.samples[-1].iteration:
            # re-recording the same iterate; keep the latest values only
            self.samples[-1] = sample
        else:
            self.samples.append(sample)
        return sample

    def converged(self, sample: TraceSample | None = None) -> bool:
        sample = sample or self.samples[-1]
        if self.reference is not None:
            return sample.distance < self.ctl.stop_tolerance
        return self.last_certificate is not None and self.last_certificate.passes(self.ctl.stop_tolerance)

    def finish(self, x, lam, iterations: int, converged: bool, solver: str, **info) -> SolverTrace:
        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        self.record(iterations, x, lam)
        cert = kkt_certificate(self.signal, self.cone, x, lam)
        result = SolverResult(
            x=x,
            lam=lam,
            active_set=saturated_set(self.cone, x, lam, self.scale),
            converged=bool(converged),
            certificate=cert,
            iterations=int(iterations),
            solver=solver,
            info=info,
        )
        return SolverTrace(samples=self.samples, result=result)
