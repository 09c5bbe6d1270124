"""Small utilities shared across test modules."""

import numpy as np


class ZeroFactors:
    """Factor source whose increments are identically zero.

    Lets the integrators run with the noise switched off so drift
    bookkeeping can be checked in isolation.
    """

    def __init__(self, grid, m, n_paths=1):
        self.grid = grid
        self.m = m
        self.n_paths = n_paths

    def block(self, lo, hi):
        return np.zeros((hi - lo, self.grid.n_steps, self.m))

    def path_increments(self, path_index):
        return np.zeros((self.grid.n_steps, self.m))


def random_simplex(rng, n_points, n, floor=1e-3):
    """Interior points of the weight simplex, every coordinate >= floor/n."""
    w = rng.dirichlet(np.ones(n), size=n_points)
    return (1.0 - floor) * w + floor / n


def random_covariance(rng, n, lo=0.2, hi=2.0):
    """Covariance matrix with eigenvalues drawn inside [lo, hi].

    Returns the matrix together with its exact spectrum so tests can use
    the true ellipticity constants instead of re-estimating them.
    """
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    lam = np.sort(rng.uniform(lo, hi, size=n))
    a = (q * lam) @ q.T
    return 0.5 * (a + a.T), lam
