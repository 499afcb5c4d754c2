"""Data model shared by the solvers: datasets, dictionaries, sparse activations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "UNIT_NORM_TOL",
    "TimeSeriesDataset",
    "Dictionary",
    "ActivationSet",
    "SeriesActivations",
    "PersonalizationMatrix",
    "FitConfig",
    "validate_dataset",
    "normalize_atom",
    "check_no_overlap",
]

UNIT_NORM_TOL = 1e-9


class TimeSeriesDataset:
    """S multichannel series of equal length, stored as an (S, N, P) array.

    Parameters
    ----------
    series : array-like of shape (S, N, P) or (S, N), or a sequence of
        (N, P) / (N,) arrays.
    labels : sequence of str, optional
        One label per series.
    """

    def __init__(self, series, labels: Optional[Sequence[str]] = None):
        arrays = [np.asarray(x, dtype=float) for x in series]
        if len(arrays) == 0:
            raise ValueError("empty dataset")
        arrays = [x[:, None] if x.ndim == 1 else x for x in arrays]
        shapes = {x.shape for x in arrays}
        if len(shapes) != 1:
            raise ValueError(f"ragged series: found shapes {sorted(shapes)}")
        self.data = np.stack(arrays)
        if self.data.ndim != 3:
            raise ValueError("series must be (N,) or (N, P) arrays")
        if labels is not None and len(labels) != len(arrays):
            raise ValueError("need one label per series")
        self.labels = list(labels) if labels is not None else None

    @property
    def n_series(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def n_channels(self):
        return self.data.shape[2]

    def __len__(self):
        return self.n_series

    def __getitem__(self, s):
        return self.data[s]

    def subset(self, indices):
        indices = list(indices)
        labels = None if self.labels is None else [self.labels[i] for i in indices]
        return TimeSeriesDataset(self.data[indices], labels)

    def copy(self):
        return TimeSeriesDataset(self.data.copy(), self.labels)


def validate_dataset(dataset):
    """Raise ``ValueError`` unless ``dataset`` is a well-formed dataset.

    Accepts a :class:`TimeSeriesDataset` or anything its constructor accepts
    (in particular a list of per-series arrays, where raggedness is caught).
    """
    if not isinstance(dataset, TimeSeriesDataset):
        dataset = TimeSeriesDataset(dataset)
    S, N, P = dataset.data.shape
    if S < 1 or N < 1 or P < 1:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(dataset.data)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(dataset.data))[0])
        raise ValueError(f"non-finite value at index {bad}")
    return dataset


def normalize_atom(atom):
    """Return ``(atom / ||atom||, ||atom||)`` with the norm taken over all entries."""
    atom = np.asarray(atom, dtype=float)
    norm = float(np.sqrt(np.sum(atom ** 2)))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("degenerate atom: zero or non-finite norm")
    return atom / norm, norm


class Dictionary:
    """K unit-norm atoms of shape (L, P), stored as a (K, L, P) array."""

    def __init__(self, atoms, normalize=False):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 2:
            atoms = atoms[:, :, None]
        if atoms.ndim != 3:
            raise ValueError("atoms must have shape (K, L, P) or (K, L)")
        if normalize:
            atoms = np.stack([normalize_atom(a)[0] for a in atoms])
        norms = np.sqrt(np.sum(atoms ** 2, axis=(1, 2)))
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError(f"atoms must have unit norm, got norms {norms}")
        self.atoms = atoms

    @property
    def n_atoms(self):
        return self.atoms.shape[0]

    @property
    def atom_length(self):
        return self.atoms.shape[1]

    @property
    def n_channels(self):
        return self.atoms.shape[2]

    def __getitem__(self, k):
        return self.atoms[k]

    def __len__(self):
        return self.n_atoms

    def copy(self):
        return Dictionary(self.atoms.copy())


@dataclass
class SeriesActivations:
    """Sparse activations of one series, sorted by position."""

    positions: np.ndarray
    atoms: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=int)
        self.atoms = np.asarray(self.atoms, dtype=int)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        order = np.argsort(self.positions, kind="stable")
        self.positions = self.positions[order]
        self.atoms = self.atoms[order]
        self.amplitudes = self.amplitudes[order]

    def __len__(self):
        return self.positions.size

    def select(self, k):
        """Positions and amplitudes of atom ``k``."""
        mask = self.atoms == k
        return self.positions[mask], self.amplitudes[mask]

    def copy(self):
        return SeriesActivations(self.positions.copy(), self.atoms.copy(),
                                 self.amplitudes.copy())


class ActivationSet:
    """Nonnegative, non-overlapping sparse activations for S series.

    Parameters
    ----------
    series : list of SeriesActivations
    n_atoms, n_samples, atom_length : int
        Dimensions K, N and L.
    """

    def __init__(self, series, n_atoms, n_samples, atom_length, check=True):
        self.series = list(series)
        self.n_atoms = int(n_atoms)
        self.n_samples = int(n_samples)
        self.atom_length = int(atom_length)
        if check:
            self.validate()

    @classmethod
    def empty(cls, n_series, n_atoms, n_samples, atom_length):
        return cls([SeriesActivations.empty() for _ in range(n_series)],
                   n_atoms, n_samples, atom_length)

    @property
    def n_series(self):
        return len(self.series)

    def __getitem__(self, s):
        return self.series[s]

    def count(self):
        return int(sum(len(a) for a in self.series))

    def counts(self):
        """(S, K) array of activation counts per series and atom."""
        out = np.zeros((self.n_series, self.n_atoms), dtype=int)
        for s, act in enumerate(self.series):
            np.add.at(out[s], act.atoms, 1)
        return out

    def validate(self):
        last = self.n_samples - self.atom_length
        for s, act in enumerate(self.series):
            if np.any(act.amplitudes < 0):
                raise ValueError(f"negative amplitude in series {s}")
            if np.any(act.positions < 0) or np.any(act.positions > last):
                raise ValueError(f"activation position out of range in series {s}")
            if np.any(act.atoms < 0) or np.any(act.atoms >= self.n_atoms):
                raise ValueError(f"atom index out of range in series {s}")
            check_no_overlap(act.positions, self.atom_length)

    def scale_atoms(self, factors):
        """Multiply amplitudes of atom k by ``factors[k]`` in place."""
        factors = np.asarray(factors, dtype=float)
        for act in self.series:
            act.amplitudes = act.amplitudes * factors[act.atoms]

    def copy(self):
        return ActivationSet([a.copy() for a in self.series], self.n_atoms,
                             self.n_samples, self.atom_length, check=False)

    def to_dense(self):
        """(S, K, N - L + 1) dense activation array."""
        out = np.zeros((self.n_series, self.n_atoms,
                        self.n_samples - self.atom_length + 1))
        for s, act in enumerate(self.series):
            out[s, act.atoms, act.positions] = act.amplitudes
        return out


def check_no_overlap(positions, atom_length):
    """Raise ``ValueError`` if two windows ``[pos, pos + L)`` intersect.

    Runs in O(n log n); positions need not be sorted.
    """
    pos = np.sort(np.asarray(positions, dtype=int))
    if pos.size > 1 and np.any(np.diff(pos) < atom_length):
        i = int(np.argmax(np.diff(pos) < atom_length))
        raise ValueError(f"overlapping activations at positions {pos[i]} and {pos[i + 1]}")


class PersonalizationMatrix:
    """Per-(series, atom) transformation parameters, an (S, K, *shape) array."""

    def __init__(self, params):
        self.params = np.asarray(params, dtype=float)
        if self.params.ndim < 2:
            raise ValueError("params must have shape (S, K, ...)")

    @classmethod
    def zeros(cls, n_series, n_atoms, shape):
        return cls(np.zeros((n_series, n_atoms) + tuple(shape)))

    @property
    def n_series(self):
        return self.params.shape[0]

    @property
    def n_atoms(self):
        return self.params.shape[1]

    @property
    def param_shape(self):
        return self.params.shape[2:]

    def __getitem__(self, idx):
        return self.params[idx]

    def copy(self):
        return PersonalizationMatrix(self.params.copy())


@dataclass
class FitConfig:
    """Options of the alternating solvers.

    ``cdu_mode`` selects the dictionary update: ``"least_squares"`` weighs
    segments by their amplitudes (exact minimizer of the objective), while
    ``"barycenter"`` averages the segments with unit weight.  ``perso_order``
    is ``"ipu_first"`` (IPU, CSC, dictionary update) or ``"csc_first"``
    (CSC, IPU, dictionary update).
    """

    lam: float = 1e-2
    n_init: int = 5
    n_perso: int = 5
    ipu_steps: int = 25
    ipu_step_scale: float = 1.0
    ipu_mode: str = "polyak"
    ipu_fixed_step: float = 1e-3
    recenter_atoms: bool = False
    cdu_mode: str = "least_squares"
    perso_order: str = "ipu_first"
    rng_seed: int = 0
    n_jobs: int = 1
    progress: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.n_init < 0 or self.n_perso < 0:
            raise ValueError("round counts must be nonnegative")
        if self.ipu_steps < 0 or not self.ipu_step_scale > 0:
            raise ValueError("invalid IPU settings")
        if self.ipu_mode not in ("polyak", "fixed"):
            raise ValueError(f"unknown ipu_mode {self.ipu_mode!r}")
        if self.cdu_mode not in ("least_squares", "barycenter"):
            raise ValueError(f"unknown cdu_mode {self.cdu_mode!r}")
        if self.perso_order not in ("ipu_first", "csc_first"):
            raise ValueError(f"unknown perso_order {self.perso_order!r}")
