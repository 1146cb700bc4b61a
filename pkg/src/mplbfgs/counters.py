"""Evaluation tallies and training-trace records.

Counters track loss and gradient evaluations two ways: totals (every
evaluation anywhere) and parallel (per-device cost under one subdomain per
device). Within an outer iteration, work happens in synchronized phases:
global-phase evaluations count once, and each batch of concurrent
per-subdomain evaluations contributes the maximum over subdomains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["EvalCounters", "IterationRecord", "EpochRow", "RunTrace"]


class EvalCounters:
    """Monotone loss/gradient evaluation tallies with per-iteration deltas."""

    def __init__(self):
        self.loss_evals_total = 0
        self.grad_evals_total = 0
        self.loss_evals_parallel = 0
        self.grad_evals_parallel = 0
        self.linesearch_iters = 0
        self.newton_iters_used = 0
        self._global = [0, 0]
        self._batches = []

    def global_sink(self):
        """Counting callback for evaluations in the synchronization phase."""

        def sink(dl, dg):
            self._global[0] += dl
            self._global[1] += dg

        return sink

    def add_global(self, dl, dg):
        self._global[0] += dl
        self._global[1] += dg

    def add_local_batch(self, pairs):
        """One concurrent per-subdomain phase: [(loss, grad), ...]."""
        self._batches.append([(int(l), int(g)) for l, g in pairs])

    def end_iteration(self):
        """Fold the buffered phase counts into the running tallies."""
        dl_tot = self._global[0] + sum(l for b in self._batches for l, _ in b)
        dg_tot = self._global[1] + sum(g for b in self._batches for _, g in b)
        dl_par = self._global[0] + sum(max((l for l, _ in b), default=0) for b in self._batches)
        dg_par = self._global[1] + sum(max((g for _, g in b), default=0) for b in self._batches)
        self.loss_evals_total += dl_tot
        self.grad_evals_total += dg_tot
        self.loss_evals_parallel += dl_par
        self.grad_evals_parallel += dg_par
        self._global = [0, 0]
        self._batches = []
        return dl_tot, dg_tot, dl_par, dg_par

    def snapshot(self):
        return (
            self.loss_evals_total,
            self.grad_evals_total,
            self.loss_evals_parallel,
            self.grad_evals_parallel,
        )


@dataclass
class IterationRecord:
    """Measured quantities of one outer iteration, for cost prediction."""

    method: str
    its_ls: int = 0
    local_loss_max: int = 0
    local_grad_max: int = 0
    newton_iters: int = 0
    newton_ls_total: int = 0
    ls_failed: bool = False
    fallback: bool = False
    delta: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    l2_val: float
    loss_evals_total: int
    grad_evals_total: int
    loss_evals_parallel: int
    grad_evals_parallel: int
    beta_min: float
    beta_max: float
    wall_seconds: float


CSV_COLUMNS = (
    "epoch",
    "loss",
    "l2_val",
    "loss_evals_total",
    "grad_evals_total",
    "loss_evals_parallel",
    "grad_evals_parallel",
    "beta_min",
    "beta_max",
    "wall_seconds",
)


def format_row(row):
    parts = [
        str(row.epoch),
        f"{row.loss:.17g}",
        f"{row.l2_val:.17g}",
        str(row.loss_evals_total),
        str(row.grad_evals_total),
        str(row.loss_evals_parallel),
        str(row.grad_evals_parallel),
        f"{row.beta_min:.17g}",
        f"{row.beta_max:.17g}",
        f"{row.wall_seconds:.17g}",
    ]
    return ",".join(parts)


@dataclass
class RunTrace:
    """Everything a finished (or aborted) training run produced."""

    method: str
    rows: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    final_theta: np.ndarray | None = None
    aborted: bool = False
    abort_reason: str = ""
    pairs_offered: int = 0
    pairs_accepted: int = 0

    @property
    def losses(self):
        return [r.loss for r in self.rows]

    @property
    def errors(self):
        return [r.l2_val for r in self.rows]
