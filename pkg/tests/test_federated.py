import numpy as np
import pytest

from percdl.core import FitConfig, TimeSeriesDataset
from percdl.federated import Message, check_privacy, run_federated
from percdl.solvers import fit
from percdl.synth import SynthSpec, gen_dataset
from percdl.transforms import IdentityTransform, RotationTransform

EQUIV_CFG = FitConfig(n_init=3, n_perso=3, cdu_mode="barycenter", perso_order="csc_first")


def test_matches_centralized_solver():
    data, truth = gen_dataset(SynthSpec(S=4, K=1, r=3, seed=0))
    fed = run_federated(data, 1, 50, truth.transform, EQUIV_CFG)
    ref = fit(data, 1, 50, truth.transform, EQUIV_CFG)
    np.testing.assert_allclose(fed.fit.dictionary.atoms, ref.dictionary.atoms, atol=1e-8)
    np.testing.assert_allclose(fed.fit.personalization.params, ref.personalization.params,
                               atol=1e-8)
    np.testing.assert_allclose(fed.fit.objective_trace, ref.objective_trace, rtol=1e-8)
    for a, b in zip(fed.fit.activations.series, ref.activations.series):
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_allclose(a.amplitudes, b.amplitudes, atol=1e-8)


def test_identity_transform_matches_centralized_popcdl():
    data, _ = gen_dataset(SynthSpec(S=4, K=1, r=3, seed=1))
    fed = run_federated(data, 1, 50, IdentityTransform(), EQUIV_CFG)
    ref = fit(data, 1, 50, IdentityTransform(), EQUIV_CFG)
    np.testing.assert_allclose(fed.fit.dictionary.atoms, ref.dictionary.atoms, atol=1e-8)


@pytest.mark.parametrize("variant", ["barycenter", "robust_joint"])
def test_message_size_independent_of_length(variant):
    K, L, D, W, P = 2, 50, 3, 10, 1
    bound = K * (L * P + D * W + 2)
    sizes = []
    for N in (500, 5000, 50000):
        data, truth = gen_dataset(SynthSpec(S=2, N=N, seed=2))
        res = run_federated(data, K, L, truth.transform, FitConfig(n_init=1, n_perso=1),
                            variant=variant)
        assert res.comm.max_message_scalars <= bound
        sizes.append([(r.up_scalars, r.down_scalars) for r in res.comm.rounds])
    assert sizes[0] == sizes[1] == sizes[2]


def test_privacy_guard():
    check_privacy(Message("up", "weighted_stats", {"atoms": np.zeros((2, 50, 1))}), 500)
    with pytest.raises(ValueError, match="series-length"):
        check_privacy(Message("up", "weighted_stats", {"x": np.zeros((500, 1))}), 500)


def test_round_accounting():
    data, truth = gen_dataset(SynthSpec(S=3, seed=3))
    cfg = FitConfig(n_init=2, n_perso=2)
    res = run_federated(data, 2, 50, truth.transform, cfg)
    rounds = [r for r in res.comm.rounds if r.round >= 0]
    assert len(rounds) == 4
    for r in rounds:
        assert r.up_messages == r.down_messages == 3
    assert res.comm.rounds[0].phase == "seed"
    assert len(res.fit.objective_trace) == 4


def test_single_server_matches_centralized():
    data, truth = gen_dataset(SynthSpec(S=1, K=1, r=3, seed=4))
    fed = run_federated(data, 1, 50, truth.transform, EQUIV_CFG)
    ref = fit(data, 1, 50, truth.transform, EQUIV_CFG)
    np.testing.assert_allclose(fed.fit.dictionary.atoms, ref.dictionary.atoms, atol=1e-8)


def test_deterministic():
    data, truth = gen_dataset(SynthSpec(S=3, seed=5))
    cfg = FitConfig(n_init=2, n_perso=2)
    a = run_federated(data, 2, 50, truth.transform, cfg, variant="robust_joint")
    b = run_federated(data, 2, 50, truth.transform, cfg, variant="robust_joint")
    np.testing.assert_array_equal(a.fit.dictionary.atoms, b.fit.dictionary.atoms)
    assert a.fit.objective_trace == b.fit.objective_trace


def test_message_json_round_trip():
    rng = np.random.default_rng(6)
    msg = Message("up", "weighted_stats", {"counts": np.array([3.0, 0.0]),
                                           "params": rng.standard_normal((2, 3, 10)),
                                           "atoms": rng.standard_normal((2, 50, 1))})
    back = Message.from_json(msg.to_json())
    assert back.kind == msg.kind and back.direction == msg.direction
    for k in msg.payload:
        np.testing.assert_array_equal(back.payload[k], msg.payload[k])
    assert msg.scalar_count == 2 + 60 + 100


def test_absent_atom_sends_zero_count():
    data, truth = gen_dataset(SynthSpec(S=2, seed=7))
    data = TimeSeriesDataset(np.stack([data[0], np.zeros_like(data[1])]))
    res = run_federated(data, 2, 50, truth.transform, FitConfig(n_init=1, n_perso=1))
    assert res.fit.activations[1].positions.size == 0


def test_rejects_unsupported_transform():
    data, _ = gen_dataset(SynthSpec(S=2, seed=8))
    with pytest.raises(ValueError):
        run_federated(data, 2, 50, RotationTransform())
    with pytest.raises(ValueError):
        run_federated(data, 2, 50, IdentityTransform(), variant="robust_joint")
