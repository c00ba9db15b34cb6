"""Piecewise-constant input parametrization and its linear constraints."""

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class ControlParam:
    """Piecewise-constant inputs: u(t) = values[i] on [breakpoints[i], breakpoints[i+1]).

    The flat decision vector stacks intervals: pi[i * n_u + c] is channel c on
    interval i.  Bounds and per-channel rate limits between consecutive
    intervals (and against the previously applied input, when given) are all
    expressible as linear inequalities on pi.
    """

    breakpoints: np.ndarray
    values: np.ndarray  # (n_intervals, n_u)
    lower: np.ndarray = None
    upper: np.ndarray = None
    rate_limits: dict = None
    prev_values: np.ndarray = None

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        if bp.ndim != 1 or len(bp) != vals.shape[0] + 1:
            raise ValueError("need one more breakpoint than intervals")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @property
    def n_intervals(self):
        return self.values.shape[0]

    @property
    def n_u(self):
        return self.values.shape[1]

    @property
    def n_params(self):
        return self.values.size

    @property
    def flat(self):
        return self.values.ravel()

    def param_index(self, interval, channel):
        return interval * self.n_u + channel

    def with_flat(self, pi):
        pi = np.asarray(pi, dtype=float)
        return replace(self, values=pi.reshape(self.n_intervals, self.n_u))

    def interval_of(self, t):
        bp = self.breakpoints
        i = int(np.searchsorted(bp, t, side="right")) - 1
        return min(max(i, 0), self.n_intervals - 1)

    def u_at(self, t):
        return self.values[self.interval_of(t)]

    def segments(self, t0, t1):
        """Yield (a, b, interval) covering [t0, t1] split at breakpoints."""
        bp = self.breakpoints
        cuts = [t0] + [float(b) for b in bp if t0 < b < t1] + [t1]
        for a, b in zip(cuts[:-1], cuts[1:]):
            yield a, b, self.interval_of(a)

    def bounds(self):
        """Box bounds on the flat vector (useful defaults: +-inf)."""
        n = self.n_params
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        if self.lower is not None:
            lo = np.tile(np.asarray(self.lower, dtype=float), self.n_intervals)
        if self.upper is not None:
            hi = np.tile(np.asarray(self.upper, dtype=float), self.n_intervals)
        return lo, hi

    def rate_inequalities(self):
        """Rows (A, b) with A pi <= b encoding |delta u_c| <= limit."""
        rows, rhs = [], []
        if not self.rate_limits:
            return np.zeros((0, self.n_params)), np.zeros(0)
        for c, lim in self.rate_limits.items():
            for i in range(self.n_intervals - 1):
                r = np.zeros(self.n_params)
                r[self.param_index(i + 1, c)] = 1.0
                r[self.param_index(i, c)] = -1.0
                rows.append(r.copy())
                rhs.append(lim)
                rows.append(-r)
                rhs.append(lim)
            if self.prev_values is not None:
                r = np.zeros(self.n_params)
                r[self.param_index(0, c)] = 1.0
                rows.append(r.copy())
                rhs.append(lim + self.prev_values[c])
                rows.append(-r)
                rhs.append(lim - self.prev_values[c])
        return np.array(rows), np.array(rhs)
