"""Container for integrated paths, single or batched over samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from holosde.model import State
from holosde.stepper import StepRecord


@dataclass(eq=False)
class Trajectory:
    """States on the grid ``t_k = k T / N`` plus per-step diagnostics.

    Arrays carry an optional leading sample axis: ``r`` has shape
    ``(N+1, n)`` for one path or ``(S, N+1, n)`` for a batch. Per-step
    fields (``eta``, ``kappa``, ``lam``, residuals, iteration counts) have
    ``N`` entries along the time axis; entry ``k`` belongs to the step
    ``k -> k+1``. ``mu`` has ``N+1`` entries with ``mu[0] = 0``.

    For batches, ``status`` holds a per-sample code (0 = success) and
    ``failed_step`` the index of the failing step (-1 if none). Failed
    samples are NaN from the failing step on.
    """

    grid: np.ndarray
    r: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    kappa: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    newton_iters: Optional[np.ndarray] = None
    homotopy_segments: Optional[np.ndarray] = None
    constraint_residual: Optional[np.ndarray] = None
    tangency_residual: Optional[np.ndarray] = None
    status: Optional[np.ndarray] = None
    failed_step: Optional[np.ndarray] = None

    @property
    def batched(self) -> bool:
        return self.r.ndim == 3

    @property
    def n_steps(self) -> int:
        return self.grid.shape[0] - 1

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def states(self) -> list[State]:
        if self.batched:
            raise ValueError("states are only available for a single path")
        return [State(r, v) for r, v in zip(self.r, self.v)]

    @property
    def records(self) -> list[StepRecord]:
        if self.batched:
            raise ValueError("records are only available for a single path")
        if self.kappa is None:
            return []
        return [
            StepRecord(
                eta=float(self.eta[k]),
                kappa=self.kappa[k],
                lam=self.lam[k],
                newton_iters=int(self.newton_iters[k]),
                homotopy_segments=int(self.homotopy_segments[k]),
                constraint_residual=float(self.constraint_residual[k]),
                tangency_residual=float(self.tangency_residual[k]),
            )
            for k in range(self.n_steps)
        ]

    def sample(self, i: int) -> "Trajectory":
        """Single path ``i`` of a batch."""
        if not self.batched:
            raise ValueError("not a batch")

        def pick(a):
            return None if a is None else a[i]

        return Trajectory(
            grid=self.grid,
            r=self.r[i],
            v=self.v[i],
            mu=self.mu[i],
            eta=self.eta[i],
            kappa=pick(self.kappa),
            lam=pick(self.lam),
            newton_iters=pick(self.newton_iters),
            homotopy_segments=pick(self.homotopy_segments),
            constraint_residual=pick(self.constraint_residual),
            tangency_residual=pick(self.tangency_residual),
        )
