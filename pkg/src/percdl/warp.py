"""Time warping of sampled atoms.

A warp ``psi_a`` of the unit interval is the composition of ``D`` displacements
``Id + sum_w a[d, w] * sin(w pi t) / (w pi)``.  Every row of ``a`` with l1-norm
at most one keeps the displacement nondecreasing, so the composition is a
valid reparameterization with pinned endpoints.

A sampled atom ``phi`` (L x P) is resampled at ``psi_a(i / L)`` through a
softmax-weighted piecewise-linear interpolant, which makes the map
``phi -> warp(phi, a)`` linear.  The matrix of that map is returned by
:func:`build_warp_matrix` and its derivative with respect to ``a`` is
available through :func:`warp_loss_and_grad`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

__all__ = [
    "WarpConfig",
    "basis_eval",
    "psi_eval",
    "psi_grid",
    "interp_weights",
    "warp_matrix_from_times",
    "build_warp_matrix",
    "apply_timewarp",
    "project_l1_ball",
    "project_theta",
    "in_theta",
    "warp_loss",
    "warp_loss_and_grad",
    "grad_warp_params",
]

_THETA_TOL = 1e-9


@dataclass(frozen=True)
class WarpConfig:
    """Hyper-parameters of the time-warp transformation.

    Parameters
    ----------
    D : int
        Depth, the number of composed displacements.
    W : int
        Width, the number of sine basis functions per displacement.
    sigma : float
        Bandwidth of the interpolation weights, in normalized time.
    theta_margin : float
        Rows of the parameter block are projected onto the l1-ball of
        radius ``1 - theta_margin``.
    """

    D: int = 3
    W: int = 10
    sigma: float = 0.002
    theta_margin: float = 1e-3

    def __post_init__(self):
        if int(self.D) < 1 or int(self.W) < 1:
            raise ValueError("D and W must be positive integers")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.theta_margin < 1:
            raise ValueError("theta_margin must lie in [0, 1)")

    @property
    def shape(self):
        return (self.D, self.W)

    @property
    def n_params(self):
        return self.D * self.W


def basis_eval(w, t):
    """Sine basis ``b_w(t) = sin(w pi t) / (w pi)`` on [0, 1]."""
    t = np.asarray(t, dtype=float)
    if w < 1:
        raise ValueError("basis index must be >= 1")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    out = np.sin(w * np.pi * t) / (w * np.pi)
    return float(out) if out.ndim == 0 else out


def in_theta(a, tol=_THETA_TOL):
    """True when every depth row of ``a`` has l1-norm <= 1 (+ tol)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return bool(np.all(np.abs(a).sum(axis=1) <= 1.0 + tol))


def _check_params(a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise ValueError(f"warp parameters must be D x W, got shape {a.shape}")
    if not in_theta(a):
        raise ValueError("warp parameters outside Theta: a row has l1-norm > 1, "
                         "monotonicity is not guaranteed")
    return a


def _compose(a, t):
    """Run the displacement chain on times ``t``.

    Returns the final values and, per depth, the input times ``u_{d-1}`` and
    the derivative ``psi_d'(u_{d-1})``.
    """
    D, W = a.shape
    w = np.arange(1, W + 1)
    u = np.asarray(t, dtype=float)
    inputs, slopes = [], []
    for d in range(D):
        arg = np.pi * np.multiply.outer(u, w)
        inputs.append(u)
        slopes.append(1.0 + np.cos(arg) @ a[d])
        u = u + (np.sin(arg) / (w * np.pi)) @ a[d]
    return u, inputs, slopes


def psi_eval(a, t):
    """Evaluate the composed warp ``psi_a`` at ``t`` (scalar or array).

    Raises
    ------
    ValueError
        If ``a`` lies outside Theta or ``t`` outside [0, 1].
    """
    a = _check_params(a)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    u, _, _ = _compose(a, t_arr)
    return float(u) if u.ndim == 0 else u


def psi_grid(a, L):
    """``psi_a`` on the sampling grid ``t_i = i / L``, i = 1..L."""
    return psi_eval(a, np.arange(1, L + 1) / L)


def _nodes(L):
    return np.arange(1, L + 1) / L


def interp_weights(sigma, t, L):
    """Softmax interpolation weights of the ``L`` nodes ``l / L`` at time ``t``.

    ``t`` may be an array, in which case one row of weights is returned per
    entry.  Rows always sum to one.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = np.subtract.outer(np.asarray(t, dtype=float), _nodes(L))
    return softmax(-c ** 2 / (2.0 * sigma ** 2), axis=-1)


def _forward_difference_operator(L):
    # (phi_{l+1} - phi_l) with the clamp phi_{L+1} = phi_L.
    diff = -np.eye(L) + np.eye(L, k=1)
    diff[-1, -1] = 0.0
    return diff


def warp_matrix_from_times(u, L, sigma):
    """Matrix resampling an L-sample atom at the (normalized) times ``u``.

    Row ``i`` realizes ``sum_l w_l(u_i) [phi_l + L (u_i - t_l)(phi_{l+1} - phi_l)]``.
    """
    u = np.asarray(u, dtype=float)
    weights = interp_weights(sigma, u, L)
    slope = L * np.subtract.outer(u, _nodes(L)) * weights
    return weights + slope @ _forward_difference_operator(L)


def build_warp_matrix(a, cfg, L):
    """The L x L matrix of the warp with parameters ``a``."""
    a = _check_params(a)
    return warp_matrix_from_times(psi_grid(a, L), L, cfg.sigma)


def apply_timewarp(phi, a, cfg):
    """Warp an atom of shape (L,) or (L, P); each channel is warped alike."""
    phi = np.asarray(phi, dtype=float)
    return build_warp_matrix(a, cfg, phi.shape[0]) @ phi


def project_l1_ball(v, radius=1.0):
    """Euclidean projection of a vector onto the l1-ball of given radius.

    Sort-and-threshold algorithm of Duchi et al. (2008), O(n log n).
    """
    v = np.asarray(v, dtype=float)
    if radius <= 0:
        return np.zeros_like(v)
    if np.abs(v).sum() <= radius:
        return v.copy()
    u = np.sort(np.abs(v))[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    theta = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def project_theta(a, eps=1e-3):
    """Project every depth row of ``a`` onto the l1-ball of radius ``1 - eps``."""
    a = np.asarray(a, dtype=float)
    rows = np.atleast_2d(a)
    radius = 1.0 - eps
    out = rows.copy()
    outside = np.abs(rows).sum(axis=1) > radius
    if np.any(outside) and radius <= 0:
        out[outside] = 0.0
    elif np.any(outside):
        # row-wise sort-and-threshold
        v = rows[outside]
        u = -np.sort(-np.abs(v), axis=1)
        css = np.cumsum(u, axis=1)
        k = np.arange(1, v.shape[1] + 1)
        rho = np.sum(u * k > css - radius, axis=1) - 1
        theta = (css[np.arange(v.shape[0]), rho] - radius) / (rho + 1.0)
        out[outside] = np.sign(v) * np.maximum(np.abs(v) - theta[:, None], 0.0)
    return out.reshape(a.shape)


def warp_loss_and_grad(phi, a, target, cfg, weight=1.0):
    """Loss ``weight * ||target - warp(phi, a)||^2`` and its gradient in ``a``.

    The gradient is exact: it chains the derivative of the interpolant in the
    query time through the derivative of the composed displacements.

    Parameters
    ----------
    phi, target : ndarray, shape (L,) or (L, P)
    a : ndarray, shape (D, W)
    cfg : WarpConfig
    weight : float

    Returns
    -------
    loss : float
    grad : ndarray, shape (D, W)
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    if phi.ndim == 1:
        phi, target = phi[:, None], target[:, None]
    L = phi.shape[0]
    D, W = a.shape
    sigma = cfg.sigma

    nodes = _nodes(L)
    u, inputs, slopes = _compose(a, nodes)
    c = np.subtract.outer(u, nodes)                       # (L, L)
    weights = softmax(-c ** 2 / (2.0 * sigma ** 2), axis=1)
    delta = np.zeros_like(phi)                            # phi_{l+1} - phi_l, clamped
    delta[:-1] = phi[1:] - phi[:-1]
    out = weights @ phi + (L * c * weights) @ delta

    resid = target - out
    loss = weight * float(np.sum(resid ** 2))

    # d out_i / d u_i
    de = -c / sigma ** 2
    dw = weights * (de - np.sum(weights * de, axis=1, keepdims=True))
    dout = dw @ phi + (L * c * dw) @ delta + L * (weights @ delta)
    dloss_du = -2.0 * weight * np.sum(resid * dout, axis=1)        # (L,)

    grad = np.empty((D, W))
    w_idx = np.arange(1, W + 1)
    downstream = np.ones(L)
    for d in range(D - 1, -1, -1):
        basis = np.sin(np.pi * np.multiply.outer(inputs[d], w_idx)) / (w_idx * np.pi)
        grad[d] = (dloss_du * downstream) @ basis
        downstream = downstream * slopes[d]
    return loss, grad


def warp_loss(phi, a, target, cfg, weight=1.0):
    """Loss of :func:`warp_loss_and_grad` without the gradient (no validation)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    if phi.ndim == 1:
        phi, target = phi[:, None], target[:, None]
    L = phi.shape[0]
    nodes = _nodes(L)
    u = _compose(a, nodes)[0]
    c = np.subtract.outer(u, nodes)
    weights = softmax(-c ** 2 / (2.0 * cfg.sigma ** 2), axis=1)
    delta = np.zeros_like(phi)
    delta[:-1] = phi[1:] - phi[:-1]
    out = weights @ phi + (L * c * weights) @ delta
    return weight * float(np.sum((target - out) ** 2))


def grad_warp_params(phi, a, target, cfg):
    """Gradient in ``a`` of ``||target - warp(phi, a)||^2``."""
    return warp_loss_and_grad(phi, a, target, cfg)[1]
