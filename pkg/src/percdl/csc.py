"""Exact l0 convolutional sparse coding under the no-overlap constraint.

When activated windows may not overlap, each window is explained by a single
atom and its best amplitude is the clipped inner product with the data.  The
problem then reduces to picking a set of disjoint windows of maximal total
gain, which a forward dynamic program over the window end solves exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import correlate

from .core import SeriesActivations

__all__ = ["sliding_inner_products", "window_gains", "csc_solve"]


def sliding_inner_products(x, atoms):
    """``<x[n:n+L], atom_k>`` for every position n and atom k.

    Parameters
    ----------
    x : (N, P) array
    atoms : (K, L, P) array

    Returns
    -------
    (K, N - L + 1) array
    """
    x = np.asarray(x, dtype=float)
    atoms = np.asarray(atoms, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if atoms.ndim == 2:
        atoms = atoms[:, :, None]
    K, L, P = atoms.shape
    N = x.shape[0]
    out = np.zeros((K, N - L + 1))
    for k in range(K):
        for p in range(P):
            out[k] += correlate(x[:, p], atoms[k, :, p], mode="valid")
    return out


def window_gains(x, atoms, lam):
    """Optimal amplitudes and objective decrease of every (atom, window).

    For a window ``y`` and atom ``phi`` the best nonnegative amplitude is
    ``max(0, <y, phi>) / ||phi||^2`` and placing it lowers the squared error
    by ``max(0, <y, phi>)^2 / ||phi||^2``; the penalty ``lam`` is subtracted.
    """
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 2:
        atoms = atoms[:, :, None]
    sq_norms = np.sum(atoms ** 2, axis=(1, 2))
    if np.any(sq_norms == 0):
        raise ValueError("csc_solve received a zero atom")
    corr = np.maximum(sliding_inner_products(x, atoms), 0.0)
    amplitudes = corr / sq_norms[:, None]
    gains = corr * amplitudes - lam
    return amplitudes, gains


def csc_solve(x, atoms, lam):
    """Exact minimizer of ``||x - sum_k z_k * atom_k||^2 + lam ||z||_0``.

    Activations are nonnegative and their windows pairwise disjoint.  Ties are
    broken towards fewer activations, then earlier windows, then lower atom
    index, so the output is deterministic.

    Parameters
    ----------
    x : (N, P) or (N,) array
    atoms : (K, L, P) array
        Atoms used for this series (already personalized).
    lam : float
        Nonnegative l0 penalty.

    Returns
    -------
    SeriesActivations
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 2:
        atoms = atoms[:, :, None]
    K, L, _ = atoms.shape
    N = x.shape[0]
    if L > N:
        raise ValueError(f"atom length {L} exceeds series length {N}")

    amplitudes, gains = window_gains(x, atoms, lam)
    best_k = np.argmax(gains, axis=0)            # lowest k on ties
    best_gain = gains[best_k, np.arange(gains.shape[1])].tolist()

    # value[m]: best total gain using windows inside x[:m]
    value = [0.0] * (N + 1)
    take = [False] * (N + 1)
    for m in range(L, N + 1):
        g = best_gain[m - L]
        skip = value[m - 1]
        if g > 0 and value[m - L] + g > skip:
            value[m] = value[m - L] + g
            take[m] = True
        else:
            value[m] = skip

    positions, chosen = [], []
    m = N
    while m >= L:
        if take[m]:
            positions.append(m - L)
            chosen.append(int(best_k[m - L]))
            m -= L
        else:
            m -= 1
    positions = np.array(positions[::-1], dtype=int)
    chosen = np.array(chosen[::-1], dtype=int)
    return SeriesActivations(positions, chosen, amplitudes[chosen, positions])
