"""Synthetic datasets of warped, non-overlapping pattern repetitions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (ActivationSet, Dictionary, PersonalizationMatrix,
                   SeriesActivations, TimeSeriesDataset, normalize_atom)
from .solvers import personalized_atoms, reconstruct
from .transforms import TimeWarpTransform
from .warp import WarpConfig, project_theta

__all__ = [
    "SynthSpec",
    "GroundTruth",
    "default_atoms",
    "gen_dataset",
    "add_gaussian_noise",
    "add_impulse_noise",
]

IMPULSE_AMP_LOW = 2.0
IMPULSE_AMP_HIGH = 2.5
IMPULSE_CORRUPTED_FRACTION = 0.25


def _bump(t):
    return np.exp(-0.5 * ((t - 0.4) / 0.12) ** 2)


def _sawtooth(t):
    return np.where(t < 0.8, t / 0.8, (1.0 - t) / 0.2) - 0.45


def _mexican_hat(t):
    u = (t - 0.5) / 0.1
    return (1 - u ** 2) * np.exp(-0.5 * u ** 2)


def _step_ramp(t):
    return np.where(t < 0.2, 0.0, np.where(t < 0.45, 1.0, np.where(
        t < 0.55, -1.0, -1.0 + (t - 0.55) / 0.45)))


_SHAPES = (_bump, _sawtooth, _mexican_hat, _step_ramp)


def default_atoms(K, L, P=1):
    """Up to four unit-norm reference shapes of shape (K, L, P).

    Channel ``p`` is the base shape delayed by ``p * L / (4 P)`` samples.
    """
    if K > len(_SHAPES):
        raise ValueError(f"only {len(_SHAPES)} default atoms; pass explicit atoms for K={K}")
    atoms = np.empty((K, L, P))
    t = np.arange(L) / L
    for k in range(K):
        for p in range(P):
            offset = p * (L / (4.0 * P)) / L
            atoms[k, :, p] = _SHAPES[k](np.mod(t - offset, 1.0))
        atoms[k] = normalize_atom(atoms[k])[0]
    return atoms


@dataclass
class SynthSpec:
    """Parameters of a synthetic dataset.

    ``noise`` is ``None``, ``("gaussian", snr_db)`` or ``("impulse", p)``.
    """

    S: int = 3
    N: int = 500
    K: int = 2
    r: int = 3
    L: int = 50
    P: int = 1
    D: int = 3
    W: int = 10
    sigma: float = 0.002
    theta_margin: float = 1e-3
    seed: int = 0
    base_atoms: Optional[np.ndarray] = None
    noise: Optional[tuple] = None

    def __post_init__(self):
        if self.K * self.r * self.L > self.N:
            raise ValueError(f"infeasible placement: K*r*L = {self.K * self.r * self.L} "
                             f"> N = {self.N}")
        if min(self.S, self.N, self.K, self.L, self.P, self.D, self.W) < 1 or self.r < 0:
            raise ValueError("dimensions must be positive")

    @property
    def warp(self):
        return WarpConfig(self.D, self.W, self.sigma, self.theta_margin)


@dataclass
class GroundTruth:
    dictionary: Dictionary
    activations: ActivationSet
    personalization: PersonalizationMatrix
    clean: TimeSeriesDataset
    transform: TimeWarpTransform = field(default=None)

    def personalized_atoms(self):
        return personalized_atoms(self.dictionary, self.personalization, self.transform)


def _placements(rng, N, L, m):
    """``m`` disjoint windows of length ``L``, uniform over feasible placements."""
    free = N - m * L
    slots = np.sort(rng.choice(free + m, size=m, replace=False))
    return slots + np.arange(m) * (L - 1)


def gen_dataset(spec):
    """Generate a dataset and its ground truth.

    Per series and atom, parameters are drawn uniformly in (-1, 1)^(D x W)
    and projected onto Theta; ``r`` unit-amplitude copies of each warped atom
    are placed at random disjoint positions.  Series use independent streams
    spawned from ``spec.seed``.
    """
    kind = TimeWarpTransform(spec.warp)
    if spec.base_atoms is None:
        base = default_atoms(spec.K, spec.L, spec.P)
    else:
        base = np.asarray(spec.base_atoms, dtype=float)
        if base.ndim == 2:
            base = base[:, :, None]
        base = np.stack([normalize_atom(a)[0] for a in base])
    dictionary = Dictionary(base)
    K, L, P = base.shape

    streams = np.random.SeedSequence(spec.seed).spawn(spec.S)
    params = np.empty((spec.S, K, spec.D, spec.W))
    series = []
    for s, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        for k in range(K):
            params[s, k] = project_theta(rng.uniform(-1, 1, (spec.D, spec.W)),
                                         spec.theta_margin)
        positions = _placements(rng, spec.N, L, K * spec.r)
        atom_ids = rng.permutation(np.repeat(np.arange(K), spec.r))
        series.append(SeriesActivations(positions, atom_ids, np.ones(positions.size)))
    activations = ActivationSet(series, K, spec.N, L)
    pers = PersonalizationMatrix(params)
    clean = reconstruct(activations, personalized_atoms(dictionary, pers, kind))
    truth = GroundTruth(dictionary, activations, pers, TimeSeriesDataset(clean), kind)

    data = TimeSeriesDataset(clean.copy())
    if spec.noise is not None:
        name, level = spec.noise
        noise_seed = np.random.SeedSequence(spec.seed).generate_state(2)[1]
        if name == "gaussian":
            data = add_gaussian_noise(data, level, int(noise_seed))
        elif name == "impulse":
            data = add_impulse_noise(data, level, int(noise_seed))
        else:
            raise ValueError(f"unknown noise {name!r}")
    return data, truth


def add_gaussian_noise(dataset, snr_db, seed=0):
    """Add white Gaussian noise at the given per-series SNR (dB).

    ``snr_db = inf`` returns an unchanged copy.
    """
    data = dataset.data.copy()
    if np.isinf(snr_db) and snr_db > 0:
        return TimeSeriesDataset(data, dataset.labels)
    rng = np.random.default_rng(seed)
    for s in range(data.shape[0]):
        power = np.mean(data[s] ** 2)
        if power == 0:
            raise ValueError(f"series {s} has zero power; SNR is undefined")
        noise = rng.standard_normal(data[s].shape)
        noise *= np.sqrt(power / 10 ** (snr_db / 10) / np.mean(noise ** 2))
        data[s] += noise
    return TimeSeriesDataset(data, dataset.labels)


def add_impulse_noise(dataset, p, seed=0, return_mask=False):
    """Corrupt a quarter of the series with random signed spikes.

    In each of ``ceil(S / 4)`` randomly chosen series, ``floor(p N)`` random
    time samples receive a spike of random sign and magnitude uniform in
    [2, 2.5) on every channel.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    data = dataset.data.copy()
    S, N, P = data.shape
    mask = np.zeros(data.shape, dtype=bool)
    rng = np.random.default_rng(seed)
    n_series = math.ceil(S * IMPULSE_CORRUPTED_FRACTION)
    n_samples = math.floor(p * N)
    corrupted = np.sort(rng.choice(S, size=n_series, replace=False))
    if n_samples > 0:
        for s in corrupted:
            idx = rng.choice(N, size=n_samples, replace=False)
            signs = rng.choice([-1.0, 1.0], size=(n_samples, P))
            mags = rng.uniform(IMPULSE_AMP_LOW, IMPULSE_AMP_HIGH, size=(n_samples, P))
            data[s, idx] += signs * mags
            mask[s, idx] = True
    out = TimeSeriesDataset(data, dataset.labels)
    if return_mask:
        return out, corrupted, mask
    return out
