"""Transformations turning a common atom into a personalized one.

Four kinds are provided:

* ``identity``: the atom is shared as is (population-level CDL),
* ``free``: the parameters *are* the personalized atom (individual CDL),
* ``timewarp``: the atom is resampled along a learned time warp,
* ``rotation``: every time step is left-multiplied by an orthogonal matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .warp import WarpConfig, build_warp_matrix

__all__ = [
    "IdentityTransform",
    "FreeTransform",
    "TimeWarpTransform",
    "RotationTransform",
    "make_transform",
    "apply_transform",
    "RotationFit",
    "rotation_fit",
    "is_orthogonal",
]

ORTHO_TOL = 1e-9


class IdentityTransform:
    name = "identity"
    linear = True

    def param_shape(self, L, P):
        return (0,)

    def zero_params(self, L, P):
        return np.zeros(0)

    def apply(self, phi, a):
        return np.asarray(phi, dtype=float)


class FreeTransform:
    name = "free"
    linear = False

    def param_shape(self, L, P):
        return (L, P)

    def zero_params(self, L, P):
        return np.zeros((L, P))

    def apply(self, phi, a):
        phi = np.asarray(phi, dtype=float)
        a = np.asarray(a, dtype=float)
        if a.size != phi.size:
            raise ValueError(f"free parameters of size {a.size} do not match atom "
                             f"shape {phi.shape}")
        return a.reshape(phi.shape)


@dataclass(frozen=True)
class TimeWarpTransform:
    cfg: WarpConfig = field(default_factory=WarpConfig)
    name = "timewarp"
    linear = True

    def param_shape(self, L, P):
        return self.cfg.shape

    def zero_params(self, L, P):
        return np.zeros(self.cfg.shape)

    def operator(self, a, L):
        return build_warp_matrix(a, self.cfg, L)

    def apply(self, phi, a):
        phi = np.asarray(phi, dtype=float)
        a = np.asarray(a, dtype=float)
        if a.shape != self.cfg.shape:
            raise ValueError(f"expected warp parameters of shape {self.cfg.shape}, "
                             f"got {a.shape}")
        return self.operator(a, phi.shape[0]) @ phi


@dataclass(frozen=True)
class RotationTransform:
    """Pointwise orthogonal transform of the channels.

    ``proper=True`` restricts :func:`rotation_fit` to rotations (det = +1).
    """

    proper: bool = False
    name = "rotation"
    linear = True

    def param_shape(self, L, P):
        return (P, P)

    def zero_params(self, L, P):
        # "no personalization" for a rotation is the identity matrix
        return np.eye(P)

    def apply(self, phi, a):
        phi = np.asarray(phi, dtype=float)
        O = np.asarray(a, dtype=float)
        if phi.ndim != 2 or phi.shape[1] < 2:
            raise ValueError("rotation requires a multichannel atom (P >= 2)")
        if O.shape != (phi.shape[1], phi.shape[1]):
            raise ValueError(f"rotation matrix must be {phi.shape[1]}x{phi.shape[1]}")
        if not is_orthogonal(O):
            raise ValueError("rotation parameter is not orthogonal")
        return phi @ O.T


def make_transform(name, warp=None, **kwargs):
    """Build a transform from its configuration name.

    ``name`` is one of ``"identity"``, ``"free"``, ``"timewarp"``, ``"rotation"``.
    """
    if name == "identity":
        return IdentityTransform()
    if name == "free":
        return FreeTransform()
    if name == "timewarp":
        return TimeWarpTransform(warp if warp is not None else WarpConfig(**kwargs))
    if name == "rotation":
        return RotationTransform(**kwargs)
    raise ValueError(f"unknown transform {name!r}")


def apply_transform(kind, phi, a):
    """Personalized atom ``f(phi, a)`` for the given transform."""
    return kind.apply(phi, a)


def is_orthogonal(O, tol=ORTHO_TOL):
    O = np.asarray(O, dtype=float)
    return bool(np.max(np.abs(O.T @ O - np.eye(O.shape[0]))) <= tol)


class RotationFit(NamedTuple):
    matrix: np.ndarray
    degenerate: bool


def rotation_fit(segments, phi, weights=None, proper=False):
    """Orthogonal matrix best mapping ``phi`` onto the observed segments.

    Minimizes ``sum_i ||X_i - w_i * phi @ O.T||^2`` over orthogonal ``O``.
    With ``M = sum_i w_i phi.T @ X_i = U S V^T`` the minimizer is ``V U^T``.

    Parameters
    ----------
    segments : sequence of (L, P) arrays
    phi : (L, P) array
    weights : sequence of float, optional
        Amplitudes of the segments; ones by default.
    proper : bool
        Restrict to det(O) = +1 by flipping the last singular direction.

    Returns
    -------
    RotationFit
        The matrix and a flag set when the cross matrix is rank-deficient,
        in which case the optimum is not unique.
    """
    segments = [np.asarray(x, dtype=float) for x in segments]
    if not segments:
        raise ValueError("rotation_fit needs at least one segment")
    phi = np.asarray(phi, dtype=float)
    if not np.any(phi):
        raise ValueError("rotation_fit needs a nonzero atom")
    if weights is None:
        weights = np.ones(len(segments))
    M = sum(w * phi.T @ X for w, X in zip(weights, segments)) / len(segments)
    U, sv, Vt = np.linalg.svd(M)
    V = Vt.T
    if proper and np.linalg.det(V @ U.T) < 0:
        V[:, -1] = -V[:, -1]
    degenerate = bool(sv[-1] <= 1e-12 * max(sv[0], 1e-300))
    return RotationFit(V @ U.T, degenerate)
