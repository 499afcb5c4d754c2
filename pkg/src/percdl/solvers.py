"""Alternating solvers for personalized convolutional dictionary learning.

The driver :func:`fit` first learns a common dictionary by alternating exact
sparse coding (CSC) and dictionary updates (CDU), then personalizes it by
alternating individual parameter updates (IPU), sparse coding against the
personalized atoms and the personalized dictionary update (PerCDU).
"""

from __future__ import annotations

import sys
import time
import warnings
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
from joblib import Parallel, delayed

from .core import (ActivationSet, Dictionary, FitConfig, PersonalizationMatrix,
                   TimeSeriesDataset, check_no_overlap,
                   normalize_atom, validate_dataset)
from .csc import csc_solve
from .transforms import (FreeTransform, IdentityTransform, RotationTransform,
                         TimeWarpTransform, rotation_fit)
from .warp import (project_theta, psi_grid,
                   warp_loss, warp_loss_and_grad, warp_matrix_from_times)

__all__ = [
    "FitResult",
    "AtomUpdate",
    "IndCDLResult",
    "personalized_atoms",
    "extract_segments",
    "reconstruct",
    "objective",
    "initial_dictionary",
    "cdu_update",
    "weighted_mean",
    "ipu_update",
    "percdu_system",
    "solve_atom_system",
    "percdu_update",
    "recenter_atoms",
    "fit",
    "fit_popcdl",
    "fit_indcdl",
    "barycenter",
]

SINGULAR_COND = 1e12


class AtomUpdate(NamedTuple):
    """New dictionary, the norms divided out of each atom, and status flags."""

    dictionary: Dictionary
    scales: np.ndarray
    frozen: List[int]
    singular: List[int]


@dataclass
class FitResult:
    dictionary: Dictionary
    activations: ActivationSet
    personalization: PersonalizationMatrix
    transform: object
    objective_trace: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    flags: List[str] = field(default_factory=list)

    def personalized_atoms(self):
        return personalized_atoms(self.dictionary, self.personalization, self.transform)

    def reconstruction(self):
        return reconstruct(self.activations, self.personalized_atoms())


@dataclass
class IndCDLResult:
    individual: List[FitResult]
    barycenter: Dictionary
    wall_time: float = 0.0

    def personalized_atoms(self):
        return np.stack([r.dictionary.atoms for r in self.individual])

    @property
    def activations(self):
        first = self.individual[0].activations
        return ActivationSet([r.activations[0] for r in self.individual],
                             first.n_atoms, first.n_samples, first.atom_length)

    def reconstruction(self):
        return np.concatenate([r.reconstruction() for r in self.individual])


def _as_atoms(dictionary):
    return dictionary.atoms if isinstance(dictionary, Dictionary) else np.asarray(dictionary, dtype=float)


def personalized_atoms(dictionary, params, kind):
    """(S, K, L, P) array of ``f(phi_k, a^s_k)``."""
    atoms = _as_atoms(dictionary)
    p = params.params if isinstance(params, PersonalizationMatrix) else np.asarray(params)
    S, K = p.shape[:2]
    if isinstance(kind, IdentityTransform):
        return np.broadcast_to(atoms, (S,) + atoms.shape).copy()
    out = np.empty((S,) + atoms.shape)
    for s in range(S):
        for k in range(K):
            out[s, k] = kind.apply(atoms[k], p[s, k])
    return out


def extract_segments(x, positions, L):
    """(n, L, P) stack of windows ``x[pos:pos+L]``."""
    positions = np.asarray(positions, dtype=int)
    if positions.size == 0:
        return np.zeros((0, L, x.shape[1]))
    idx = positions[:, None] + np.arange(L)[None, :]
    return x[idx]


def reconstruct(activations, atoms):
    """Sum of amplitude-scaled atoms placed at the activated windows.

    Parameters
    ----------
    activations : ActivationSet
    atoms : (S, K, L, P) array of per-series atoms, or (K, L, P) shared atoms.

    Returns
    -------
    (S, N, P) array
    """
    atoms = _as_atoms(atoms)
    S = activations.n_series
    if atoms.ndim == 3:
        atoms = np.broadcast_to(atoms, (S,) + atoms.shape)
    L, P = atoms.shape[2:]
    out = np.zeros((S, activations.n_samples, P))
    for s, act in enumerate(activations.series):
        check_no_overlap(act.positions, L)
        for pos, k, z in zip(act.positions, act.atoms, act.amplitudes):
            out[s, pos:pos + L] += z * atoms[s, k]
    return out


def objective(dataset, activations, dictionary, params, lam, kind):
    """Squared reconstruction error plus ``lam`` times the activation count."""
    data = dataset.data if isinstance(dataset, TimeSeriesDataset) else np.asarray(dataset)
    recon = reconstruct(activations, personalized_atoms(dictionary, params, kind))
    return float(np.sum((data - recon) ** 2) + lam * activations.count())


def initial_dictionary(dataset, n_atoms, atom_length, init="first-signal", seed=0):
    """Starting dictionary from explicit atoms or a named policy.

    ``"first-signal"`` picks the ``n_atoms`` highest-energy disjoint windows of
    the first series (in time order); ``"random-unit"`` draws Gaussian atoms.
    """
    S, N, P = dataset.data.shape
    if isinstance(init, Dictionary):
        return init.copy()
    if not isinstance(init, str):
        atoms = np.asarray(init, dtype=float)
        if atoms.ndim == 2:
            atoms = atoms[:, :, None]
        if atoms.shape != (n_atoms, atom_length, P):
            raise ValueError(f"initial atoms must have shape {(n_atoms, atom_length, P)}")
        return Dictionary(atoms, normalize=True)
    if init == "random-unit":
        rng = np.random.default_rng(seed)
        return Dictionary(rng.standard_normal((n_atoms, atom_length, P)), normalize=True)
    if init == "first-signal":
        x = dataset.data[0]
        energy = np.convolve(np.sum(x ** 2, axis=1), np.ones(atom_length), mode="valid")
        picked = []
        for n in np.argsort(-energy, kind="stable"):
            if all(abs(n - m) >= atom_length for m in picked):
                picked.append(int(n))
            if len(picked) == n_atoms:
                break
        if len(picked) < n_atoms:
            raise ValueError("first series too short for the requested number of atoms")
        atoms = extract_segments(x, sorted(picked), atom_length)
        if np.any(np.sum(atoms ** 2, axis=(1, 2)) == 0):
            raise ValueError("first series has no energy to initialize atoms from")
        return Dictionary(atoms, normalize=True)
    raise ValueError(f"unknown initialization policy {init!r}")


def _segment_weights(amplitudes, mode):
    if mode == "barycenter":
        return np.ones_like(amplitudes), np.ones_like(amplitudes)
    return amplitudes, amplitudes ** 2


def cdu_update(dataset, activations, dictionary, mode="least_squares"):
    """Closed-form update of the common atoms from the activated segments.

    ``"barycenter"`` averages segments, ``"least_squares"`` computes
    ``sum z y / sum z^2``.  Each new atom is normalized and its norm returned
    in ``scales`` so callers can rescale the amplitudes.  Atoms without any
    activation keep their value (scale 1) and are listed in ``frozen``.
    """
    data = dataset.data
    atoms = _as_atoms(dictionary)
    K, L, P = atoms.shape
    num = np.zeros_like(atoms)
    den = np.zeros(K)
    if mode == "barycenter":
        # count-weighted mean of the per-series means: the pooled mean, computed
        # in the same order as the federated aggregation
        means = np.zeros((activations.n_series,) + atoms.shape)
        counts = activations.counts().astype(float)
        for s, act in enumerate(activations.series):
            for k in range(K):
                pos, _ = act.select(k)
                if pos.size:
                    means[s, k] = extract_segments(data[s], pos, L).mean(axis=0)
        for k in range(K):
            if counts[:, k].sum() > 0:
                num[k] = weighted_mean(means[:, k], counts[:, k])
                den[k] = 1.0
        return _finish_update(atoms, num, den)
    for s, act in enumerate(activations.series):
        for k in range(K):
            pos, amp = act.select(k)
            if pos.size == 0:
                continue
            w1, w2 = _segment_weights(amp, mode)
            num[k] += np.tensordot(w1, extract_segments(data[s], pos, L), axes=1)
            den[k] += w2.sum()
    return _finish_update(atoms, num, den)


def weighted_mean(items, weights):
    """``sum_s w_s items_s / sum_s w_s`` with the weights normalized first."""
    weights = np.asarray(weights, dtype=float)
    return np.tensordot(weights / weights.sum(), np.asarray(items), axes=1)


def _finish_update(atoms, num, den):
    new = atoms.copy()
    scales = np.ones(atoms.shape[0])
    frozen = []
    for k in range(atoms.shape[0]):
        if den[k] <= 0 or not np.any(num[k]):
            frozen.append(k)
            continue
        new[k], scales[k] = normalize_atom(num[k] / den[k])
    if frozen:
        warnings.warn(f"atoms {frozen} have no activation and are frozen this round")
    return AtomUpdate(Dictionary(new), scales, frozen, [])


def _timewarp_ipu(phi, a, segments, amps, kind, cfg):
    warp = kind.cfg
    z2 = float(np.sum(amps ** 2))
    if z2 == 0:
        return a
    target = np.tensordot(amps, segments, axes=1) / z2
    const = float(np.sum(segments ** 2)) - z2 * float(np.sum(target ** 2))

    def loss(b):
        return warp_loss(phi, b, target, warp, weight=z2) + const

    f, g = warp_loss_and_grad(phi, a, target, warp, weight=z2)
    f += const
    for _ in range(cfg.ipu_steps):
        gg = float(np.sum(g ** 2))
        if gg == 0.0 or f <= 0.0:
            break
        eta = cfg.ipu_step_scale * (f / gg if cfg.ipu_mode == "polyak" else cfg.ipu_fixed_step)
        accepted = False
        for _ in range(40):
            cand = project_theta(a - eta * g, warp.theta_margin)
            f_new = loss(cand)
            if f_new <= f:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        a = cand
        f, g = warp_loss_and_grad(phi, a, target, warp, weight=z2)
        f += const
    return a


def ipu_update(x, activations, atoms, params, kind, cfg):
    """Update the personalization parameters of one series.

    Time warps use projected gradient descent with the Polyak step (the
    objective's lower bound 0 stands in for its infimum), halving any step
    that would increase the objective.  Rotations use the closed-form
    orthogonal fit and free atoms the amplitude-weighted barycenter.

    Parameters
    ----------
    x : (N, P) array
    activations : SeriesActivations
    atoms : (K, L, P) common atoms
    params : (K, ...) current parameters of this series
    kind : transform
    cfg : FitConfig

    Returns
    -------
    (K, ...) array of updated parameters
    """
    atoms = _as_atoms(atoms)
    params = np.array(params, dtype=float, copy=True)
    if isinstance(kind, IdentityTransform):
        return params
    K, L, _ = atoms.shape
    for k in range(K):
        pos, amp = activations.select(k)
        if pos.size == 0:
            continue
        segments = extract_segments(x, pos, L)
        if isinstance(kind, TimeWarpTransform):
            params[k] = _timewarp_ipu(atoms[k], params[k], segments, amp, kind, cfg)
        elif isinstance(kind, RotationTransform):
            params[k] = rotation_fit(segments, atoms[k], weights=amp, proper=kind.proper).matrix
        elif isinstance(kind, FreeTransform):
            w1, w2 = _segment_weights(amp, cfg.cdu_mode)
            est = np.tensordot(w1, segments, axes=1) / w2.sum()
            if np.any(est):
                params[k] = normalize_atom(est)[0]
        else:
            raise TypeError(f"unsupported transform {kind!r}")
    return params


def percdu_system(dataset, activations, params, kind, atom_length, mode="least_squares"):
    """Normal equations of the personalized dictionary update.

    For each atom returns ``A_k = sum w2 L(a)^T L(a)`` (L x L) and
    ``B_k = sum w1 L(a)^T y`` (L x P) over all activated segments, with
    ``(w1, w2) = (z, z^2)`` in least-squares mode and ``(1, 1)`` in
    barycenter mode.  Only linear time-warp operators are supported.
    """
    data = dataset.data
    p = params.params if isinstance(params, PersonalizationMatrix) else np.asarray(params)
    K = p.shape[1]
    L, P = atom_length, data.shape[2]
    A = np.zeros((K, L, L))
    B = np.zeros((K, L, P))
    counts = np.zeros(K)
    for s, act in enumerate(activations.series):
        for k in range(K):
            pos, amp = act.select(k)
            if pos.size == 0:
                continue
            w1, w2 = _segment_weights(amp, mode)
            op = kind.operator(p[s, k], L)
            A[k] += w2.sum() * op.T @ op
            B[k] += op.T @ np.tensordot(w1, extract_segments(data[s], pos, L), axes=1)
            counts[k] += pos.size
    return A, B, counts


def solve_atom_system(A, B, fallback=None):
    """Solve ``A phi = B``; flag the system as singular above cond 1e12.

    In the singular case a single gradient step on ``||.||`` from
    ``fallback`` (or zeros) is returned instead, with step ``1 / ||A||_2``.
    """
    cond = np.linalg.cond(A)
    if np.isfinite(cond) and cond <= SINGULAR_COND:
        return np.linalg.solve(A, B), False
    start = np.zeros_like(B) if fallback is None else fallback
    lip = np.linalg.norm(A, 2)
    if lip == 0:
        return start, True
    return start - (A @ start - B) / lip, True


def percdu_update(dataset, activations, dictionary, params, kind, mode="least_squares"):
    """Personalized dictionary update given activations and parameters.

    Time warps solve the (amplitude-weighted) normal equations of the
    maximum-likelihood estimator; rotations have the closed form
    ``sum z y O / sum z^2``; identity falls back to :func:`cdu_update` and
    free atoms average the normalized individual atoms.
    """
    atoms = _as_atoms(dictionary)
    K, L, P = atoms.shape
    p = params.params if isinstance(params, PersonalizationMatrix) else np.asarray(params)
    if isinstance(kind, IdentityTransform):
        return cdu_update(dataset, activations, dictionary, mode)
    if isinstance(kind, FreeTransform):
        counts = activations.counts()
        num = np.zeros_like(atoms)
        for k in range(K):
            used = counts[:, k] > 0
            if np.any(used):
                num[k] = p[used, k].reshape((-1, L, P)).mean(axis=0)
        upd = _finish_update(atoms, num, (counts > 0).sum(axis=0).astype(float))
        # personalized atoms do not depend on the common ones
        return upd._replace(scales=np.ones(K))
    if isinstance(kind, RotationTransform):
        data = dataset.data
        num = np.zeros_like(atoms)
        den = np.zeros(K)
        for s, act in enumerate(activations.series):
            for k in range(K):
                pos, amp = act.select(k)
                if pos.size == 0:
                    continue
                w1, w2 = _segment_weights(amp, mode)
                num[k] += np.tensordot(w1, extract_segments(data[s], pos, L), axes=1) @ p[s, k]
                den[k] += w2.sum()
        return _finish_update(atoms, num, den)
    if not isinstance(kind, TimeWarpTransform):
        raise TypeError(f"unsupported transform {kind!r}")

    A, B, counts = percdu_system(dataset, activations, p, kind, L, mode)
    new = atoms.copy()
    scales = np.ones(K)
    frozen, singular = [], []
    for k in range(K):
        if counts[k] == 0:
            frozen.append(k)
            continue
        est, bad = solve_atom_system(A[k], B[k], fallback=atoms[k])
        if bad:
            singular.append(k)
        if not np.any(est):
            frozen.append(k)
            continue
        new[k], scales[k] = normalize_atom(est)
    if frozen:
        warnings.warn(f"atoms {frozen} have no activation and are frozen this round")
    if singular:
        warnings.warn(f"singular PerCDU system for atoms {singular}; took a gradient step")
    return AtomUpdate(Dictionary(new), scales, frozen, singular)


def recenter_atoms(dictionary, params, kind):
    """Warp every common atom by the mean of its individual warps.

    The mean is taken pointwise over series on the sampling grid; the result
    is renormalized.
    """
    atoms = _as_atoms(dictionary)
    p = params.params if isinstance(params, PersonalizationMatrix) else np.asarray(params)
    K, L, _ = atoms.shape
    new = np.empty_like(atoms)
    for k in range(K):
        mean_psi = np.mean([psi_grid(p[s, k], L) for s in range(p.shape[0])], axis=0)
        op = warp_matrix_from_times(mean_psi, L, kind.cfg.sigma)
        new[k] = normalize_atom(op @ atoms[k])[0]
    return Dictionary(new)


def _map(func, items, n_jobs):
    if n_jobs == 1:
        return [func(*it) for it in items]
    return Parallel(n_jobs=n_jobs)(delayed(func)(*it) for it in items)


def _csc_all(data, atoms, lam, n_jobs):
    """CSC for every series; ``atoms`` is (K, L, P) or per-series (S, K, L, P)."""
    S, N, _ = data.shape
    per_series = atoms.ndim == 4
    items = [(data[s], atoms[s] if per_series else atoms, lam) for s in range(S)]
    series = _map(csc_solve, items, n_jobs)
    K, L = atoms.shape[-3], atoms.shape[-2]
    return ActivationSet(series, K, N, L)


def _log(cfg, phase, i, value):
    if cfg.progress:
        print(f"[{phase} {i}] objective={value:.6g}", file=sys.stderr)


def _initial_params(kind, dictionary, S):
    K, L, P = dictionary.atoms.shape
    if isinstance(kind, FreeTransform):
        return PersonalizationMatrix(np.broadcast_to(dictionary.atoms, (S, K, L, P)).copy())
    zero = kind.zero_params(L, P)
    return PersonalizationMatrix(np.broadcast_to(zero, (S, K) + zero.shape).copy())


def fit(dataset, n_atoms, atom_length, kind=None, cfg=None, init="first-signal"):
    """Learn a common dictionary, per-series parameters and activations.

    Runs ``cfg.n_init`` rounds of (CSC, CDU) on the common atoms, then
    ``cfg.n_perso`` personalization rounds of (IPU, CSC, PerCDU), optionally
    followed by recentering.  Activations and parameters start at zero.

    Parameters
    ----------
    dataset : TimeSeriesDataset
    n_atoms, atom_length : int
    kind : transform, default time warp with default settings
    cfg : FitConfig
    init : array, Dictionary, "first-signal" or "random-unit"

    Returns
    -------
    FitResult
    """
    start = time.perf_counter()
    dataset = validate_dataset(dataset)
    kind = TimeWarpTransform() if kind is None else kind
    cfg = FitConfig() if cfg is None else cfg
    S, N, P = dataset.data.shape
    K, L = int(n_atoms), int(atom_length)
    if L >= N:
        raise ValueError(f"atom length {L} must be smaller than series length {N}")
    if isinstance(kind, RotationTransform) and P < 2:
        raise ValueError("rotation transform requires P >= 2")

    dictionary = initial_dictionary(dataset, K, L, init, cfg.rng_seed)
    params = _initial_params(kind, dictionary, S)
    activations = ActivationSet.empty(S, K, N, L)
    trace, flags = [], []

    for i in range(cfg.n_init):
        activations = _csc_all(dataset.data, dictionary.atoms, cfg.lam, cfg.n_jobs)
        upd = cdu_update(dataset, activations, dictionary, cfg.cdu_mode)
        dictionary = upd.dictionary
        activations.scale_atoms(upd.scales)
        flags += [f"init {i}: atom {k} frozen" for k in upd.frozen]
        value = objective(dataset, activations, dictionary, params, cfg.lam,
                          IdentityTransform())
        trace.append(value)
        _log(cfg, "init", i, value)

    if isinstance(kind, FreeTransform) and cfg.n_perso > 0:
        params = _initial_params(kind, dictionary, S)

    def ipu_step(activations, params):
        items = [(dataset.data[s], activations[s], dictionary.atoms, params[s], kind, cfg)
                 for s in range(S)]
        return PersonalizationMatrix(np.stack(_map(ipu_update, items, cfg.n_jobs)))

    def csc_step(params):
        patoms = personalized_atoms(dictionary, params, kind)
        return _csc_all(dataset.data, patoms, cfg.lam, cfg.n_jobs)

    for i in range(cfg.n_perso):
        if cfg.perso_order == "ipu_first":
            params = ipu_step(activations, params)
            activations = csc_step(params)
        else:
            activations = csc_step(params)
            params = ipu_step(activations, params)
        upd = percdu_update(dataset, activations, dictionary, params, kind, cfg.cdu_mode)
        dictionary = upd.dictionary
        activations.scale_atoms(upd.scales)
        flags += [f"perso {i}: atom {k} frozen" for k in upd.frozen]
        flags += [f"perso {i}: singular PerCDU for atom {k}" for k in upd.singular]
        if cfg.recenter_atoms and isinstance(kind, TimeWarpTransform):
            dictionary = recenter_atoms(dictionary, params, kind)
        value = objective(dataset, activations, dictionary, params, cfg.lam, kind)
        trace.append(value)
        _log(cfg, "perso", i, value)

    return FitResult(dictionary, activations, params, kind, trace,
                     time.perf_counter() - start, flags)


def fit_popcdl(dataset, n_atoms, atom_length, cfg=None, init="first-signal"):
    """Population CDL: ``n_init + n_perso`` rounds of (CSC, CDU), no personalization."""
    start = time.perf_counter()
    dataset = validate_dataset(dataset)
    cfg = FitConfig() if cfg is None else cfg
    S, N, P = dataset.data.shape
    K, L = int(n_atoms), int(atom_length)
    if L >= N:
        raise ValueError(f"atom length {L} must be smaller than series length {N}")
    kind = IdentityTransform()
    dictionary = initial_dictionary(dataset, K, L, init, cfg.rng_seed)
    params = PersonalizationMatrix.zeros(S, K, (0,))
    activations = ActivationSet.empty(S, K, N, L)
    trace, flags = [], []
    for i in range(cfg.n_init + cfg.n_perso):
        activations = _csc_all(dataset.data, dictionary.atoms, cfg.lam, cfg.n_jobs)
        upd = cdu_update(dataset, activations, dictionary, cfg.cdu_mode)
        dictionary = upd.dictionary
        activations.scale_atoms(upd.scales)
        flags += [f"round {i}: atom {k} frozen" for k in upd.frozen]
        value = objective(dataset, activations, dictionary, params, cfg.lam, kind)
        trace.append(value)
        _log(cfg, "popcdl", i, value)
    return FitResult(dictionary, activations, params, kind, trace,
                     time.perf_counter() - start, flags)


def _shift(atom, m):
    """Shift an (L, P) atom by ``m`` samples with zero fill."""
    out = np.zeros_like(atom)
    if m > 0:
        out[m:] = atom[:-m]
    elif m < 0:
        out[:m] = atom[-m:]
    else:
        out[:] = atom
    return out


def barycenter(atom_sets, align=True, max_shift=None):
    """Normalized Euclidean mean of several dictionaries, atom by atom.

    With ``align``, every atom is first shifted (zero fill, within
    ``max_shift`` samples, default L // 4) to maximize its correlation with
    the corresponding atom of the first dictionary.
    """
    sets = np.stack([_as_atoms(a) for a in atom_sets])      # (S, K, L, P)
    n, K, L, P = sets.shape
    max_shift = L // 4 if max_shift is None else max_shift
    out = np.empty((K, L, P))
    for k in range(K):
        ref = sets[0, k]
        acc = np.zeros((L, P))
        for s in range(n):
            atom = sets[s, k]
            if align:
                shifts = range(-max_shift, max_shift + 1)
                best = max(shifts, key=lambda m: (np.sum(ref * _shift(atom, m)), -abs(m)))
                atom = _shift(atom, best)
            acc += atom
        out[k] = normalize_atom(acc / n)[0]
    return Dictionary(out)


def fit_indcdl(dataset, n_atoms, atom_length, cfg=None, init="first-signal", align=True):
    """Independent CDL on every series plus the barycenter of the individual atoms."""
    start = time.perf_counter()
    dataset = validate_dataset(dataset)
    cfg = FitConfig() if cfg is None else cfg
    init_dict = initial_dictionary(dataset, n_atoms, atom_length, init, cfg.rng_seed)
    items = [(dataset.subset([s]), n_atoms, atom_length, cfg, init_dict.atoms)
             for s in range(dataset.n_series)]
    results = _map(fit_popcdl, items, cfg.n_jobs)
    bary = barycenter([r.dictionary for r in results], align=align)
    return IndCDLResult(results, bary, time.perf_counter() - start)
