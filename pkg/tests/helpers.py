"""Instance generators shared by the unit and acceptance tests."""

import numpy as np

from percdl.core import SeriesActivations
from percdl.csc import csc_solve

MAX_SUPPORTS = 1500


def n_supports(N, L, K):
    """Number of sets of disjoint (window, atom) placements."""
    f = [1] * (N + 1)
    for m in range(1, N + 1):
        f[m] = f[m - 1] + (K * f[m - L] if m >= L else 0)
    return f[N]


def random_csc_instance(rng, max_supports=MAX_SUPPORTS):
    """A small CSC instance (N <= 30, L <= 5, K <= 2) whose supports can be enumerated.

    The series mixes planted atom copies with Gaussian noise so that both
    empty and crowded optimal supports occur.
    """
    while True:
        L = int(rng.integers(1, 6))
        K = int(rng.integers(1, 3))
        N = int(rng.integers(L + 1, 31))
        if n_supports(N, L, K) <= max_supports:
            break
    P = int(rng.integers(1, 3))
    atoms = rng.standard_normal((K, L, P))
    atoms /= np.linalg.norm(atoms, axis=(1, 2), keepdims=True)
    x = 0.3 * rng.standard_normal((N, P))
    for _ in range(int(rng.integers(0, 3))):
        n = int(rng.integers(0, N - L + 1))
        x[n:n + L] += rng.uniform(0.2, 2.0) * atoms[int(rng.integers(K))]
    lam = float(rng.choice([0.001, 0.01, 0.1]))
    return x, atoms, lam


def csc_objective(x, atoms, acts, lam):
    """Objective of a CSC solution, recomputed densely."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    recon = np.zeros_like(x)
    L = atoms.shape[1]
    for n, k, z in zip(acts.positions, acts.atoms, acts.amplitudes):
        recon[n:n + L] += z * atoms[k].reshape(L, -1)
    return float(np.sum((x - recon) ** 2)) + lam * len(acts)


def solve_and_score(x, atoms, lam):
    acts = csc_solve(x, atoms, lam)
    return acts, csc_objective(x, atoms, acts, lam)


def empty_series():
    return SeriesActivations.empty()
