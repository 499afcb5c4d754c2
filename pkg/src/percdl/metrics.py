"""Reconstruction, atom-distance and segmentation metrics."""

from __future__ import annotations

import numpy as np

from .core import ActivationSet, TimeSeriesDataset

__all__ = [
    "recon_error",
    "atom_distance",
    "dtw",
    "segmentation_eval",
    "TAU_TOL",
    "TAU_ACT",
]

TAU_TOL = 100
TAU_ACT = 0.02


def _array(x):
    return x.data if isinstance(x, TimeSeriesDataset) else np.asarray(x, dtype=float)


def recon_error(dataset, reconstruction, normalized=False):
    """Euclidean distance between a dataset and its reconstruction.

    ``normalized`` divides by the Euclidean norm of the dataset.
    """
    x = _array(dataset)
    xh = _array(reconstruction)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xh.shape}")
    err = float(np.sqrt(np.sum((x - xh) ** 2)))
    if normalized:
        norm = float(np.sqrt(np.sum(x ** 2)))
        if norm == 0:
            raise ValueError("normalized error of an all-zero dataset is undefined")
        return err / norm
    return err


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _shifted_distance(a, b, m):
    """Distance between ``a`` and ``b`` delayed by ``m`` on a common zero-padded support."""
    L = a.shape[0]
    lo, hi = min(0, m), max(L, L + m)
    pa = np.zeros((hi - lo,) + a.shape[1:])
    pb = np.zeros_like(pa)
    pa[-lo:-lo + L] = a
    pb[m - lo:m - lo + L] = b
    return float(np.sqrt(np.sum((pa - pb) ** 2)))


def dtw(a, b):
    """Dynamic time warping distance with Euclidean ground cost.

    Steps (1,1), (1,0) and (0,1), no band constraint; the result is the sum
    of ground costs along the optimal path.
    """
    a, b = _as_2d(a), _as_2d(b)
    n, m = len(a), len(b)
    cost = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return float(acc[n, m])


def atom_distance(a, b, metric="euclidean", align=True):
    """Distance between two atoms.

    ``euclidean`` is invariant to the sign of ``b`` and, with ``align``, to
    delays of up to L // 4 samples (the atoms are compared on their joint
    zero-padded support, which keeps the distance symmetric).  ``dtw`` is
    plain DTW, see :func:`dtw`.
    """
    a, b = _as_2d(a), _as_2d(b)
    if metric == "dtw":
        return dtw(a, b)
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    if a.shape != b.shape:
        raise ValueError("euclidean distance needs atoms of equal shape")
    shifts = range(-(a.shape[0] // 4), a.shape[0] // 4 + 1) if align else [0]
    return min(_shifted_distance(a, sgn * b, m) for m in shifts for sgn in (1.0, -1.0))


def segmentation_eval(predicted, truth_positions, tau_tol=TAU_TOL, tau_act=TAU_ACT, atom=None):
    """Event detection sensitivity and false-positive proportion.

    Predicted activations whose amplitude is below ``tau_act`` times the mean
    nonzero amplitude are discarded.  Predictions are matched one-to-one to
    true events within ``tau_tol`` samples, closest pairs first.

    Parameters
    ----------
    predicted : ActivationSet, or list of (positions, amplitudes) per series
    truth_positions : list of arrays, one per series
    tau_tol : int
    tau_act : float in [0, 1)
    atom : int, optional
        Only score activations of this atom.

    Returns
    -------
    dict with ``sensitivity``, ``fpr_proportion``, ``matched``,
    ``false_positives`` and ``n_truth``
    """
    if tau_tol < 0 or not 0 <= tau_act < 1:
        raise ValueError("need tau_tol >= 0 and 0 <= tau_act < 1")
    if isinstance(predicted, ActivationSet):
        preds = []
        for act in predicted.series:
            keep = np.ones(len(act), dtype=bool) if atom is None else act.atoms == atom
            preds.append((act.positions[keep], act.amplitudes[keep]))
    else:
        preds = [(np.asarray(p), np.asarray(z, dtype=float)) for p, z in predicted]
    if len(preds) != len(truth_positions):
        raise ValueError("need one truth list per series")

    amps = np.concatenate([np.abs(z) for _, z in preds]) if preds else np.zeros(0)
    nonzero = amps[amps > 0]
    threshold = tau_act * nonzero.mean() if nonzero.size else 0.0

    matched = false_pos = n_truth = 0
    for (pos, amp), truth in zip(preds, truth_positions):
        pos = np.asarray(pos)[np.abs(amp) >= threshold] if pos.size else np.asarray(pos)
        truth = np.asarray(truth)
        n_truth += truth.size
        pairs = sorted((abs(int(p) - int(t)), int(t), int(p), i, j)
                       for i, p in enumerate(pos) for j, t in enumerate(truth)
                       if abs(int(p) - int(t)) <= tau_tol)
        used_p, used_t = set(), set()
        for _, _, _, i, j in pairs:
            if i not in used_p and j not in used_t:
                used_p.add(i)
                used_t.add(j)
        matched += len(used_t)
        false_pos += pos.size - len(used_p)
    if n_truth == 0:
        raise ValueError("no ground-truth events")
    return {"sensitivity": matched / n_truth, "fpr_proportion": false_pos / n_truth,
            "matched": matched, "false_positives": false_pos, "n_truth": n_truth}
