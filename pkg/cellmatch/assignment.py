"""Linear assignment with an unassignment option."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Matching:
    """Partial injective map between left and right indices.

    ``pairs`` is a tuple of ``(left, right)`` tuples sorted by left index.
    """

    pairs: tuple
    n_left: int
    n_right: int

    def __post_init__(self):
        pairs = tuple(sorted((int(i), int(s)) for i, s in self.pairs))
        lefts = [p[0] for p in pairs]
        rights = [p[1] for p in pairs]
        if len(set(lefts)) != len(lefts):
            raise ValueError('matching assigns a left node twice')
        if len(set(rights)) != len(rights):
            raise ValueError('matching assigns a right node twice')
        for i, s in pairs:
            if not (0 <= i < self.n_left and 0 <= s < self.n_right):
                raise ValueError('pair (%d, %d) out of range %dx%d'
                                 % (i, s, self.n_left, self.n_right))
        object.__setattr__(self, 'pairs', pairs)

    @classmethod
    def empty(cls, n_left, n_right):
        return cls((), n_left, n_right)

    def __len__(self):
        return len(self.pairs)

    def as_array(self):
        return np.array(self.pairs, dtype=int).reshape(-1, 2)

    def forward(self):
        return dict(self.pairs)

    def backward(self):
        return {s: i for i, s in self.pairs}

    def transposed(self):
        return Matching(tuple((s, i) for i, s in self.pairs),
                        self.n_right, self.n_left)


def solve_lap(costs):
    """Exact minimum-cost partial assignment.

    Parameters
    ----------
    costs : array_like, shape (n, m)
        Entries in R or +inf (forbidden). A pair is only worth taking when
        its cost is negative.

    Returns
    -------
    matching : Matching
    objective : float
        Sum of the selected entries.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        raise ValueError('cost table must be 2-D')
    n, m = costs.shape
    if n == 0 or m == 0:
        return Matching.empty(n, m), 0.0
    # rows n.. and columns m.. are dummies; taking one leaves a node unassigned
    big = np.full((n + m, m + n), np.inf)
    big[:n, :m] = costs
    big[:n, m:][np.diag_indices(n)] = 0.0
    big[n:, :m][np.diag_indices(m)] = 0.0
    big[n:, m:] = 0.0
    rows, cols = linear_sum_assignment(big)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)
             if r < n and c < m and np.isfinite(costs[r, c])]
    objective = float(sum(costs[r, c] for r, c in pairs))
    return Matching(tuple(pairs), n, m), objective


def lap_from_instance(inst):
    """Solve the linear part of a GmInstance; forbidden entries are +inf."""
    return solve_lap(inst.linear_table())
