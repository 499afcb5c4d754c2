"""In-process simulation of the federated variant of the solver.

Every series lives on its own local server.  Local servers only ever send
fixed-size summaries (counts, warp parameters and L x P atom statistics) to
the central server, which broadcasts the common atoms back.  Message sizes
therefore do not depend on the series length N.

Init rounds::

    local:   CSC against Phi, send (p_k, mean of the p_k activated segments)
    central: Phi_k = normalized mean over contributing servers

Personalization rounds::

    local:   CSC against the personalized atoms, IPU, send
             (p_k, a_k, sum_j L(a_k)^T y_j)
    central: Phi_k = (sum_s p_k L(a_k)^T L(a_k))^-1 sum_s phi~_k

With equal activation counts this reproduces :func:`percdl.solvers.fit`
with ``cdu_mode="barycenter"`` and ``perso_order="csc_first"``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .core import (ActivationSet, Dictionary, FitConfig, PersonalizationMatrix,
                   SeriesActivations, normalize_atom, validate_dataset)
from .csc import csc_solve
from .solvers import (FitResult, _map, extract_segments, initial_dictionary,
                      ipu_update, objective, solve_atom_system,
                      weighted_mean)
from .transforms import IdentityTransform, TimeWarpTransform
from .warp import build_warp_matrix, project_theta, warp_loss_and_grad

__all__ = [
    "LocalState",
    "Message",
    "RoundStats",
    "CommStats",
    "FederatedResult",
    "local_round_init",
    "central_aggregate_init",
    "local_round_perso",
    "central_aggregate_perso",
    "local_round_joint",
    "central_aggregate_joint",
    "run_federated",
    "check_privacy",
]

JOINT_WARMUP_STEPS = 10
JOINT_STEPS = 5


@dataclass
class LocalState:
    """Private state of one local server; never sent to the central server."""

    x: np.ndarray
    activations: SeriesActivations
    params: np.ndarray            # (K, D, W)
    scales: np.ndarray            # cached c_k

    @classmethod
    def new(cls, x, n_atoms, param_shape):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return cls(x, SeriesActivations.empty(), np.zeros((n_atoms,) + tuple(param_shape)),
                   np.ones(n_atoms))


@dataclass
class Message:
    """A message between a local server and the central server.

    ``kind`` is ``"individual_barycenter"``, ``"weighted_stats"`` or
    ``"broadcast"``; ``payload`` maps field names to arrays.  An atom absent
    from a local server has count ``p = 0`` and zero statistics.
    """

    direction: str
    kind: str
    payload: Dict[str, np.ndarray]

    @property
    def scalar_count(self):
        return int(sum(np.asarray(v).size for v in self.payload.values()))

    @property
    def byte_size(self):
        return 8 * self.scalar_count

    def to_json(self):
        return json.dumps({
            "direction": self.direction,
            "kind": self.kind,
            "payload": {k: {"shape": list(np.shape(v)),
                            "data": np.asarray(v, dtype=float).ravel().tolist()}
                        for k, v in self.payload.items()},
        })

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        payload = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
                   for k, v in raw["payload"].items()}
        return cls(raw["direction"], raw["kind"], payload)


def check_privacy(message, n_samples):
    """Raise if a payload field has an axis of length ``n_samples``."""
    for name, value in message.payload.items():
        if n_samples in np.shape(value):
            raise ValueError(f"field {name!r} has a series-length axis; refusing to send")


@dataclass
class RoundStats:
    round: int
    phase: str
    up_messages: int
    down_messages: int
    up_scalars: int
    down_scalars: int

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class CommStats:
    rounds: List[RoundStats] = field(default_factory=list)
    max_message_scalars: int = 0

    def record(self, index, phase, up, down):
        self.rounds.append(RoundStats(index, phase, len(up), len(down),
                                      sum(m.scalar_count for m in up),
                                      sum(m.scalar_count for m in down)))
        sizes = [m.scalar_count for m in up + down]
        self.max_message_scalars = max([self.max_message_scalars] + sizes)

    def to_json(self):
        return json.dumps([r.as_dict() for r in self.rounds])


@dataclass
class FederatedResult:
    fit: FitResult
    comm: CommStats
    flags: List[str] = field(default_factory=list)


def _broadcast(atoms, scales):
    return Message("down", "broadcast", {"atoms": np.array(atoms), "scales": np.array(scales)})


def _rescale(state, scales):
    act = state.activations
    act.amplitudes = act.amplitudes * np.asarray(scales)[act.atoms]


def local_round_init(state, atoms, scales, lam):
    """Init-phase local step: CSC against the common atoms, then segment means."""
    atoms = np.asarray(atoms, dtype=float)
    K, L, P = atoms.shape
    state.scales = np.asarray(scales, dtype=float)
    _rescale(state, state.scales)
    state.activations = csc_solve(state.x, atoms, lam)
    counts = np.zeros(K)
    means = np.zeros((K, L, P))
    for k in range(K):
        pos, _ = state.activations.select(k)
        if pos.size:
            counts[k] = pos.size
            means[k] = extract_segments(state.x, pos, L).mean(axis=0)
    return Message("up", "individual_barycenter", {"counts": counts, "atoms": means})


def _normalize_all(atoms, num, active):
    new = np.array(atoms, dtype=float, copy=True)
    scales = np.ones(len(new))
    frozen = []
    for k in range(len(new)):
        if not active[k] or not np.any(num[k]):
            frozen.append(k)
            continue
        new[k], scales[k] = normalize_atom(num[k])
    return new, scales, frozen


def central_aggregate_init(messages, atoms):
    """Mean of the contributed segment means, atom by atom.

    Returns the broadcast message and the list of frozen atoms (no server
    contributed).
    """
    atoms = np.asarray(atoms, dtype=float)
    counts = np.stack([m.payload["counts"] for m in messages])       # (S, K)
    means = np.stack([m.payload["atoms"] for m in messages])         # (S, K, L, P)
    num = _server_mean(counts, means)
    new, scales, frozen = _normalize_all(atoms, num, (counts > 0).any(axis=0))
    return _broadcast(new, scales), frozen


def _server_mean(counts, items):
    # unweighted mean over the servers holding each atom
    num = np.zeros(items.shape[1:])
    for k in range(items.shape[1]):
        present = counts[:, k] > 0
        if present.any():
            num[k] = weighted_mean(items[present, k], np.ones(present.sum()))
    return num


def _operator(kind, a, L):
    if isinstance(kind, IdentityTransform):
        return np.eye(L)
    return kind.operator(a, L)


def local_round_perso(state, atoms, scales, lam, kind, cfg):
    """Personalization-phase local step: CSC, IPU, weighted statistics."""
    atoms = np.asarray(atoms, dtype=float)
    K, L, P = atoms.shape
    state.scales = np.asarray(scales, dtype=float)
    _rescale(state, state.scales)
    patoms = np.stack([kind.apply(atoms[k], state.params[k]) for k in range(K)])
    state.activations = csc_solve(state.x, patoms, lam)
    state.params = ipu_update(state.x, state.activations, atoms, state.params, kind, cfg)
    counts = np.zeros(K)
    stats = np.zeros((K, L, P))
    for k in range(K):
        pos, _ = state.activations.select(k)
        if pos.size:
            counts[k] = pos.size
            op = _operator(kind, state.params[k], L)
            segments = extract_segments(state.x, pos, L)
            stats[k] = op.T @ np.tensordot(np.ones(pos.size), segments, axes=1)
    return Message("up", "weighted_stats",
                   {"counts": counts, "params": state.params.copy(), "atoms": stats})


def central_aggregate_perso(messages, atoms, kind):
    """Solve the count-weighted normal equations from the received statistics.

    The central server rebuilds every warp operator from its parameters.  A
    singular system falls back to the unweighted mean of ``phi~ / p``.
    Returns the broadcast message, frozen atoms and singular atoms.
    """
    atoms = np.asarray(atoms, dtype=float)
    K, L, P = atoms.shape
    num = np.zeros_like(atoms)
    active = np.zeros(K, dtype=bool)
    singular = []
    for k in range(K):
        A = np.zeros((L, L))
        B = np.zeros((L, P))
        fallback = []
        for m in messages:
            p = m.payload["counts"][k]
            if p == 0:
                continue
            op = _operator(kind, m.payload["params"][k], L)
            A += p * op.T @ op
            B += m.payload["atoms"][k]
            fallback.append(m.payload["atoms"][k] / p)
        if not fallback:
            continue
        active[k] = True
        est, bad = solve_atom_system(A, B)
        if bad:
            singular.append(k)
            est = np.mean(fallback, axis=0)
        num[k] = est
    new, scales, frozen = _normalize_all(atoms, num, active)
    return _broadcast(new, scales), frozen, singular


def _joint_descent(phi, a, segments, amps, kind, steps, scale):
    """Projected Polyak descent on (a, phi) for sum_j ||y_j - z_j L(a) phi||^2."""
    warp = kind.cfg
    L = phi.shape[0]
    z2 = float(np.sum(amps ** 2))
    if z2 == 0:
        return phi, a
    target = np.tensordot(amps, segments, axes=1) / z2
    const = float(np.sum(segments ** 2)) - z2 * float(np.sum(target ** 2))

    def value_and_grads(phi, a):
        f, ga = warp_loss_and_grad(phi, a, target, warp, weight=z2)
        op = build_warp_matrix(a, warp, L)
        gphi = 2.0 * z2 * op.T @ (op @ phi - target)
        return f + const, ga, gphi

    f, ga, gphi = value_and_grads(phi, a)
    for _ in range(steps):
        gg = float(np.sum(ga ** 2) + np.sum(gphi ** 2))
        if gg == 0.0 or f <= 0.0:
            break
        eta = scale * f / gg
        for _ in range(40):
            a_new = project_theta(a - eta * ga, warp.theta_margin)
            phi_new = phi - eta * gphi
            f_new = value_and_grads(phi_new, a_new)[0]
            if f_new <= f:
                break
            eta *= 0.5
        else:
            break
        phi, a = phi_new, a_new
        f, ga, gphi = value_and_grads(phi, a)
    return phi, a


def local_round_joint(state, atoms, scales, lam, kind, cfg, warmup=JOINT_WARMUP_STEPS,
                      steps=JOINT_STEPS):
    """Robust variant: IPU warm start, then joint descent on (a, phi~).

    The local atom estimate ``phi~`` starts from the broadcast atom.
    """
    atoms = np.asarray(atoms, dtype=float)
    K, L, P = atoms.shape
    state.scales = np.asarray(scales, dtype=float)
    _rescale(state, state.scales)
    patoms = np.stack([kind.apply(atoms[k], state.params[k]) for k in range(K)])
    state.activations = csc_solve(state.x, patoms, lam)
    warm = FitConfig(**{**cfg.__dict__, "ipu_steps": warmup})
    state.params = ipu_update(state.x, state.activations, atoms, state.params, kind, warm)
    counts = np.zeros(K)
    local = np.zeros((K, L, P))
    for k in range(K):
        pos, amp = state.activations.select(k)
        if pos.size == 0:
            continue
        counts[k] = pos.size
        local[k], state.params[k] = _joint_descent(
            atoms[k], state.params[k], extract_segments(state.x, pos, L), amp, kind,
            steps, cfg.ipu_step_scale)
    return Message("up", "weighted_stats",
                   {"counts": counts, "params": state.params.copy(), "atoms": local})


def central_aggregate_joint(messages, atoms):
    """Plain average of the local atom estimates over contributing servers."""
    atoms = np.asarray(atoms, dtype=float)
    counts = np.stack([m.payload["counts"] for m in messages])
    local = np.stack([m.payload["atoms"] for m in messages])
    num = _server_mean(counts, local)
    new, scales, frozen = _normalize_all(atoms, num, (counts > 0).any(axis=0))
    return _broadcast(new, scales), frozen


def run_federated(dataset, n_atoms, atom_length, kind=None, cfg=None,
                  variant="barycenter", init="first-signal"):
    """Simulate the federated protocol and return the fit and its traffic.

    Parameters
    ----------
    dataset : TimeSeriesDataset
        One series per local server.
    n_atoms, atom_length : int
    kind : TimeWarpTransform or IdentityTransform
    cfg : FitConfig
    variant : {"barycenter", "robust_joint"}
    init : as in :func:`percdl.solvers.fit`; ``"first-signal"`` is computed
        by the first local server and sent up once (recorded as round -1).

    Returns
    -------
    FederatedResult
    """
    start = time.perf_counter()
    dataset = validate_dataset(dataset)
    kind = TimeWarpTransform() if kind is None else kind
    cfg = FitConfig() if cfg is None else cfg
    if not isinstance(kind, (TimeWarpTransform, IdentityTransform)):
        raise ValueError("the federated protocol supports time-warp and identity transforms")
    if variant not in ("barycenter", "robust_joint"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "robust_joint" and not isinstance(kind, TimeWarpTransform):
        raise ValueError("robust_joint requires the time-warp transform")
    S, N, P = dataset.data.shape
    K, L = int(n_atoms), int(atom_length)
    if L >= N:
        raise ValueError(f"atom length {L} must be smaller than series length {N}")

    comm = CommStats()
    flags = []
    atoms = initial_dictionary(dataset, K, L, init, cfg.rng_seed).atoms
    if isinstance(init, str) and init == "first-signal":
        seed_msg = Message("up", "individual_barycenter", {"atoms": atoms.copy()})
        comm.record(-1, "seed", [seed_msg], [])
    scales = np.ones(K)
    shape = kind.zero_params(L, P).shape
    states = [LocalState.new(dataset.data[s], K, shape) for s in range(S)]
    trace = []

    def exchange(index, phase, up, down):
        for m in up + down:
            check_privacy(m, N)
        comm.record(index, phase, up, down)

    def run_locals(func, *args):
        # each task returns its updated state with the message
        def task(state):
            msg = func(state, *args)
            return state, msg
        out = _map(task, [(st,) for st in states], cfg.n_jobs)
        return [o[0] for o in out], [o[1] for o in out]

    for i in range(cfg.n_init):
        states, up = run_locals(local_round_init, atoms, scales, cfg.lam)
        msg, frozen = central_aggregate_init(up, atoms)
        flags += [f"init {i}: atom {k} frozen" for k in frozen]
        atoms, scales = msg.payload["atoms"], msg.payload["scales"]
        exchange(i, "init", up, [msg] * S)
        trace.append(_objective(states, atoms, scales, cfg.lam, IdentityTransform(), N))

    for i in range(cfg.n_perso):
        if variant == "barycenter":
            states, up = run_locals(local_round_perso, atoms, scales, cfg.lam, kind, cfg)
            msg, frozen, singular = central_aggregate_perso(up, atoms, kind)
            flags += [f"perso {i}: singular aggregation for atom {k}" for k in singular]
        else:
            states, up = run_locals(local_round_joint, atoms, scales, cfg.lam, kind, cfg)
            msg, frozen = central_aggregate_joint(up, atoms)
        flags += [f"perso {i}: atom {k} frozen" for k in frozen]
        atoms, scales = msg.payload["atoms"], msg.payload["scales"]
        exchange(cfg.n_init + i, "perso", up, [msg] * S)
        trace.append(_objective(states, atoms, scales, cfg.lam, kind, N))

    for st in states:
        _rescale(st, scales)
        st.scales = np.ones(K)
    activations = ActivationSet([st.activations for st in states], K, N, L)
    params = PersonalizationMatrix(np.stack([st.params for st in states]))
    result = FitResult(Dictionary(atoms), activations, params, kind, trace,
                       time.perf_counter() - start, flags)
    return FederatedResult(result, comm, flags)


def _objective(states, atoms, scales, lam, kind, N):
    """Objective after a round (simulation diagnostic, not part of the protocol)."""
    K, L, P = atoms.shape
    series = []
    for st in states:
        act = st.activations.copy()
        act.amplitudes = act.amplitudes * scales[act.atoms]
        series.append(act)
    acts = ActivationSet(series, K, N, L, check=False)
    data = np.stack([st.x for st in states])
    params = np.stack([st.params for st in states])
    return objective(data, acts, atoms, params, lam, kind)
