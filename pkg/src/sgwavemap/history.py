"""Ordered collection of stored slices with interpolation in t and r."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoundaryTime
from .fields import Slice

FIELDS = ("v", "p", "gamma", "omega")


@dataclass(eq=False)
class History:
    times: np.ndarray
    r: np.ndarray
    v: np.ndarray  # shape (nt, nr)
    p: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    alpha: float
    k: int

    @classmethod
    def from_slices(cls, slices: Sequence[Slice]) -> "History":
        if not slices:
            raise ValueError("empty history")
        times = np.array([s.t for s in slices])
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("history times must be strictly increasing")
        s0 = slices[0]
        stack = lambda name: np.array([getattr(s, name) for s in slices])
        return cls(times, np.array(s0.r), stack("v"), stack("p"), stack("gamma"),
                   stack("omega"), s0.alpha, s0.k)

    def __len__(self):
        return self.times.size

    @property
    def dr(self) -> float:
        return float(self.r[1] - self.r[0])

    @property
    def dt(self) -> float:
        """Stored cadence."""
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    def slice(self, j: int) -> Slice:
        return Slice(float(self.times[j]), self.r, self.v[j], self.p[j],
                     self.gamma[j], self.omega[j], self.alpha, self.k)

    def __iter__(self):
        return (self.slice(j) for j in range(len(self)))

    def index_of(self, t: float, interior: bool = False) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        tol = 1e-9 * max(1.0, abs(t))
        if abs(self.times[j] - t) > max(tol, 1e-6 * self.dt):
            raise ValueError(f"t={t} is not a stored time")
        if interior and (j == 0 or j == len(self) - 1):
            raise BoundaryTime(f"t={t} is the first or last stored slice")
        return j

    def at(self, t: float) -> Slice:
        """Slice linearly interpolated in time."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ValueError(f"t={t} outside history [{self.times[0]}, {self.times[-1]}]")
        j = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self) - 2))
        th = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        mix = lambda A: (1 - th) * A[j] + th * A[j + 1]
        return Slice(float(t), self.r, mix(self.v), mix(self.p), mix(self.gamma),
                     mix(self.omega), self.alpha, self.k)

    def interp(self, A: np.ndarray, t, r):
        """Bilinear interpolation of a (nt, nr) array at points (t, r)."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        dt = self.dt
        dr = self.dr
        x = np.clip((t - self.times[0]) / dt, 0.0, len(self) - 1.0)
        y = np.clip(r / dr, 0.0, self.r.size - 1.0)
        j = np.minimum(x.astype(int), len(self) - 2)
        i = np.minimum(y.astype(int), self.r.size - 2)
        tx = x - j
        ty = y - i
        return ((1 - tx) * ((1 - ty) * A[j, i] + ty * A[j, i + 1])
                + tx * ((1 - ty) * A[j + 1, i] + ty * A[j + 1, i + 1]))

    def time_derivative(self, A: np.ndarray, j: int) -> np.ndarray:
        """Centered difference in stored time at interior index j."""
        if j <= 0 or j >= len(self) - 1:
            raise BoundaryTime("time derivative needs an interior stored slice")
        return (A[j + 1] - A[j - 1]) / (self.times[j + 1] - self.times[j - 1])

    def second_time_derivative(self, A: np.ndarray, j: int) -> np.ndarray:
        if j <= 0 or j >= len(self) - 1:
            raise BoundaryTime("time derivative needs an interior stored slice")
        h = self.dt
        return (A[j + 1] - 2.0 * A[j] + A[j - 1]) / h**2
