import warnings

import numpy as np
import pytest

from oracles import dense_reconstruct
from percdl.core import (ActivationSet, Dictionary, FitConfig, PersonalizationMatrix,
                         SeriesActivations, TimeSeriesDataset)
from percdl.metrics import atom_distance, recon_error
from percdl.solvers import (cdu_update, extract_segments, fit, fit_indcdl, fit_popcdl,
                            ipu_update, objective, percdu_update, personalized_atoms,
                            reconstruct, recenter_atoms, barycenter)
from percdl.synth import SynthSpec, default_atoms, gen_dataset
from percdl.transforms import (FreeTransform, IdentityTransform, RotationTransform,
                               TimeWarpTransform)
from percdl.warp import WarpConfig, build_warp_matrix, project_theta, warp_loss


def planted(atoms, positions, atom_ids, amps, N):
    """One series with the given atoms planted at the given windows."""
    L = atoms.shape[1]
    x = np.zeros((N, atoms.shape[2]))
    for n, k, z in zip(positions, atom_ids, amps):
        x[n:n + L] += z * atoms[k]
    return x, SeriesActivations(positions, atom_ids, amps)


# reconstruct / objective -------------------------------------------------------

def test_reconstruct_empty():
    acts = ActivationSet.empty(2, 1, 30, 5)
    assert not np.any(reconstruct(acts, default_atoms(1, 5)))


def test_reconstruct_single_activation():
    atoms = default_atoms(1, 5)
    acts = ActivationSet([SeriesActivations([0], [0], [2.0])], 1, 30, 5)
    np.testing.assert_array_equal(reconstruct(acts, atoms)[0, :5], 2 * atoms[0])


def test_reconstruct_matches_dense_convolution():
    rng = np.random.default_rng(0)
    K, L, P, N = 3, 7, 2, 120
    atoms = rng.standard_normal((K, L, P))
    for _ in range(10):
        pos = np.sort(rng.choice(np.arange(0, N - L + 1, L), size=6, replace=False))
        acts = ActivationSet([SeriesActivations(pos, rng.integers(0, K, 6), rng.uniform(0, 3, 6))],
                             K, N, L)
        expected = dense_reconstruct(acts.to_dense()[0], atoms)
        np.testing.assert_allclose(reconstruct(acts, atoms)[0], expected, atol=1e-12)


def test_reconstruct_overlap_error():
    acts = ActivationSet([SeriesActivations([0, 2], [0, 0], [1.0, 1.0])], 1, 30, 5, check=False)
    with pytest.raises(ValueError, match="overlap"):
        reconstruct(acts, default_atoms(1, 5))


def test_objective_values():
    atoms = default_atoms(1, 10)
    x, act = planted(atoms, [5, 30], [0, 0], [1.0, 2.0], 60)
    data = TimeSeriesDataset([x])
    acts = ActivationSet([act], 1, 60, 10)
    params = PersonalizationMatrix.zeros(1, 1, (0,))
    kind = IdentityTransform()
    assert objective(data, ActivationSet.empty(1, 1, 60, 10), atoms, params, 0.1, kind) == \
        pytest.approx(np.sum(x ** 2))
    assert objective(data, acts, atoms, params, 0.1, kind) == pytest.approx(0.2, abs=1e-12)
    zero = TimeSeriesDataset([np.zeros((60, 1))])
    assert objective(zero, ActivationSet.empty(1, 1, 60, 10), atoms, params, 0.1, kind) == 0.0


def test_objective_recomputation():
    data, truth = gen_dataset(SynthSpec(seed=3))
    patoms = truth.personalized_atoms()
    rng = np.random.default_rng(1)
    series = [SeriesActivations(a.positions, a.atoms, rng.uniform(0, 2, len(a)))
              for a in truth.activations.series]
    acts = ActivationSet(series, 2, 500, 50)
    value = objective(data, acts, truth.dictionary, truth.personalization, 0.01, truth.transform)
    recon = reconstruct(acts, patoms)
    assert value == pytest.approx(np.sum((data.data - recon) ** 2) + 0.01 * acts.count(),
                                  abs=1e-10)


# CDU --------------------------------------------------------------------------

def _cdu_case(segments, amps):
    L = segments.shape[1]
    N = L * (2 * len(segments) + 1)
    positions = np.arange(len(segments)) * 2 * L
    x = np.zeros((N, segments.shape[2]))
    for n, seg in zip(positions, segments):
        x[n:n + L] = seg
    acts = ActivationSet([SeriesActivations(positions, np.zeros(len(segments), dtype=int), amps)],
                         1, N, L)
    return TimeSeriesDataset([x]), acts


@pytest.mark.parametrize("mode", ["barycenter", "least_squares"])
def test_cdu_identical_segments(mode):
    phi = default_atoms(1, 20)
    data, acts = _cdu_case(np.repeat(phi, 4, axis=0), np.ones(4))
    upd = cdu_update(data, acts, Dictionary(default_atoms(2, 20)[1:]), mode)
    np.testing.assert_allclose(upd.dictionary.atoms[0], phi[0], atol=1e-12)


def test_cdu_symmetric_perturbation():
    phi = default_atoms(1, 20)[0]
    delta = 0.1 * np.random.default_rng(2).standard_normal(phi.shape)
    data, acts = _cdu_case(np.stack([phi + delta, phi - delta]), np.ones(2))
    upd = cdu_update(data, acts, Dictionary(phi[None]), "barycenter")
    np.testing.assert_allclose(upd.dictionary.atoms[0], phi, atol=1e-12)


def test_cdu_least_squares_hand_case():
    phi = default_atoms(1, 20)[0]
    data, acts = _cdu_case(np.stack([2 * phi, phi]), np.array([2.0, 1.0]))
    upd = cdu_update(data, acts, Dictionary(phi[None]), "least_squares")
    # (2 * 2 phi + 1 * phi) / (4 + 1) = phi
    np.testing.assert_allclose(upd.dictionary.atoms[0], phi, atol=1e-15)
    assert upd.scales[0] == pytest.approx(1.0)


def test_cdu_freezes_unused_atom():
    atoms = default_atoms(2, 20)
    x, act = planted(atoms, [0], [0], [1.0], 60)
    with pytest.warns(UserWarning, match="frozen"):
        upd = cdu_update(TimeSeriesDataset([x]), ActivationSet([act], 2, 60, 20), Dictionary(atoms))
    assert upd.frozen == [1]
    np.testing.assert_array_equal(upd.dictionary.atoms[1], atoms[1])


# IPU --------------------------------------------------------------------------

def _warped_series(phi, a, cfg, n_copies=1, amp=1.0):
    L = phi.shape[0]
    seg = build_warp_matrix(a, cfg, L) @ phi
    positions = np.arange(n_copies) * 2 * L
    x = np.zeros((2 * L * n_copies + L, phi.shape[1]))
    for n in positions:
        x[n:n + L] = amp * seg
    return x, SeriesActivations(positions, np.zeros(n_copies, dtype=int), np.full(n_copies, amp))


def test_ipu_stationary_at_truth():
    rng = np.random.default_rng(3)
    cfg = WarpConfig()
    phi = default_atoms(1, 50)[0]
    a = project_theta(rng.uniform(-1, 1, (3, 10)))
    x, act = _warped_series(phi, a, cfg)
    out = ipu_update(x, act, phi[None], a[None], TimeWarpTransform(cfg), FitConfig())
    np.testing.assert_allclose(out[0], a, atol=1e-12)


def test_ipu_recovers_single_segment_warp():
    """Noise-free single warped segment, D=2, W=5, 250 steps from a = 0.

    The relative shape error of the recovered warp must be below 1e-2.
    """
    cfg = WarpConfig(2, 5)
    kind = TimeWarpTransform(cfg)
    phi = default_atoms(1, 50)[0]
    errors = []
    for seed in range(10):
        a_true = project_theta(np.random.default_rng(seed).uniform(-1, 1, (2, 5)))
        x, act = _warped_series(phi, a_true, cfg)
        a_hat = ipu_update(x, act, phi[None], np.zeros((1, 2, 5)), kind, FitConfig(ipu_steps=250))[0]
        err = np.linalg.norm(build_warp_matrix(a_hat, cfg, 50) @ phi
                             - build_warp_matrix(a_true, cfg, 50) @ phi) / np.linalg.norm(phi)
        errors.append(err)
    assert max(errors) < 1e-2, f"relative errors {np.round(errors, 4)}"


def test_ipu_stays_in_theta_and_descends():
    rng = np.random.default_rng(4)
    cfg = WarpConfig()
    kind = TimeWarpTransform(cfg)
    phi = default_atoms(1, 50)[0]
    for _ in range(5):
        a_true = project_theta(rng.uniform(-1, 1, (3, 10)))
        x, act = _warped_series(phi, a_true, cfg, n_copies=2)
        x += 0.05 * rng.standard_normal(x.shape)
        start = project_theta(rng.uniform(-1, 1, (3, 10)))
        a_hat = ipu_update(x, act, phi[None], start[None], kind, FitConfig(ipu_steps=50))[0]
        assert np.all(np.abs(a_hat).sum(axis=1) <= 1 - 1e-3 + 1e-12)
        segs = extract_segments(x, act.positions, 50)
        target = segs.mean(axis=0)
        assert warp_loss(phi, a_hat, target, cfg) <= warp_loss(phi, start, target, cfg) + 1e-12


def test_ipu_identity_is_noop():
    x, act = planted(default_atoms(1, 10), [0], [0], [1.0], 30)
    p = np.zeros((1, 0))
    assert ipu_update(x, act, default_atoms(1, 10), p, IdentityTransform(), FitConfig()).shape == (1, 0)


def test_ipu_rotation_uses_closed_form():
    phi = default_atoms(1, 20, P=2)
    c, s = np.cos(0.4), np.sin(0.4)
    O = np.array([[c, -s], [s, c]])
    x, act = planted(phi @ O.T, [3], [0], [1.0], 40)
    out = ipu_update(x, act, phi, np.eye(2)[None], RotationTransform(), FitConfig())
    np.testing.assert_allclose(out[0], O, atol=1e-10)


def test_free_transform_reduces_to_individual_cdu():
    data, truth = gen_dataset(SynthSpec(seed=1))
    atoms = truth.dictionary.atoms
    kind = FreeTransform()
    cfg = FitConfig()
    for s in range(data.n_series):
        p = np.broadcast_to(atoms, atoms.shape).copy()
        free = ipu_update(data[s], truth.activations[s], atoms, p, kind, cfg)
        single = ActivationSet([truth.activations[s]], 2, 500, 50)
        ind = cdu_update(data.subset([s]), single, Dictionary(atoms), cfg.cdu_mode)
        np.testing.assert_allclose(free, ind.dictionary.atoms, atol=1e-12)


# PerCDU -----------------------------------------------------------------------

def test_percdu_identity_operators_reduce_to_barycenter():
    data, truth = gen_dataset(SynthSpec(seed=2))
    kind = TimeWarpTransform(WarpConfig(3, 10, sigma=1e-4))
    zero = np.zeros((3, 2, 3, 10))
    upd = percdu_update(data, truth.activations, truth.dictionary, zero, kind, "barycenter")
    ref = cdu_update(data, truth.activations, truth.dictionary, "barycenter")
    np.testing.assert_allclose(upd.dictionary.atoms, ref.dictionary.atoms, atol=1e-10)


def test_percdu_recovers_atoms_with_true_z_and_a():
    data, truth = gen_dataset(SynthSpec(seed=0))
    start = Dictionary(truth.personalized_atoms()[0], normalize=True)
    upd = percdu_update(data, truth.activations, start, truth.personalization, truth.transform)
    true_atoms = truth.dictionary.atoms
    rel = np.linalg.norm(upd.dictionary.atoms - true_atoms) / np.linalg.norm(true_atoms)
    assert rel < 1e-6
    # oracle: stacked least squares over every activated segment
    for k in range(2):
        rows, rhs = [], []
        for s, act in enumerate(truth.activations.series):
            pos, amp = act.select(k)
            op = truth.transform.operator(truth.personalization[s, k], 50)
            for n, z in zip(pos, amp):
                rows.append(z * op)
                rhs.append(data[s][n:n + 50])
        direct = np.linalg.lstsq(np.concatenate(rows), np.concatenate(rhs), rcond=None)[0]
        direct /= np.linalg.norm(direct)
        np.testing.assert_allclose(upd.dictionary.atoms[k], direct, atol=1e-9)


def test_percdu_matches_cdu_for_zero_params():
    data, truth = gen_dataset(SynthSpec(seed=4))
    kind = TimeWarpTransform(WarpConfig(3, 10, sigma=0.002))
    upd = percdu_update(data, truth.activations, truth.dictionary, np.zeros((3, 2, 3, 10)), kind)
    ref = cdu_update(data, truth.activations, truth.dictionary, "least_squares")
    rel = np.linalg.norm(upd.dictionary.atoms - ref.dictionary.atoms) / np.linalg.norm(ref.dictionary.atoms)
    assert rel < 1e-6


def test_percdu_singular_flag():
    data, truth = gen_dataset(SynthSpec(seed=5))
    # a very wide interpolation kernel makes every operator rank two
    kind = TimeWarpTransform(WarpConfig(3, 10, sigma=100.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        upd = percdu_update(data, truth.activations, truth.dictionary, truth.personalization, kind)
    assert upd.singular == [0, 1]


# recentering ------------------------------------------------------------------

def test_recenter_zero_params_unchanged():
    atoms = default_atoms(2, 50)
    kind = TimeWarpTransform(WarpConfig())
    out = recenter_atoms(Dictionary(atoms), np.zeros((4, 2, 3, 10)), kind)
    np.testing.assert_allclose(out.atoms, atoms, atol=1e-9)


def test_recenter_identical_params_apply_that_warp():
    rng = np.random.default_rng(6)
    atoms = default_atoms(1, 50)
    cfg = WarpConfig()
    a = project_theta(rng.uniform(-1, 1, (3, 10)))
    out = recenter_atoms(Dictionary(atoms), np.broadcast_to(a, (5, 1, 3, 10)), TimeWarpTransform(cfg))
    expected = build_warp_matrix(a, cfg, 50) @ atoms[0]
    np.testing.assert_allclose(out.atoms[0], expected / np.linalg.norm(expected), atol=1e-12)


def test_recenter_opposite_warps_cancel():
    rng = np.random.default_rng(7)
    atoms = default_atoms(1, 50)
    cfg = WarpConfig(1, 10)
    a = project_theta(rng.uniform(-1, 1, (1, 10)))
    params = np.stack([a, -a])[:, None]
    out = recenter_atoms(Dictionary(atoms), params, TimeWarpTransform(cfg))
    assert np.linalg.norm(out.atoms[0] - atoms[0]) < 1e-3


# drivers ----------------------------------------------------------------------

def test_fit_identity_equals_popcdl():
    data, _ = gen_dataset(SynthSpec(seed=7))
    cfg = FitConfig(n_init=3, n_perso=3)
    a = fit(data, 2, 50, IdentityTransform(), cfg)
    b = fit_popcdl(data, 2, 50, cfg)
    assert a.objective_trace == b.objective_trace
    np.testing.assert_array_equal(a.dictionary.atoms, b.dictionary.atoms)
    for sa, sb in zip(a.activations.series, b.activations.series):
        np.testing.assert_array_equal(sa.positions, sb.positions)
        np.testing.assert_array_equal(sa.amplitudes, sb.amplitudes)


def test_fit_no_rounds_returns_init():
    data, truth = gen_dataset(SynthSpec(seed=8))
    res = fit(data, 2, 50, truth.transform, FitConfig(n_init=0, n_perso=0), init=truth.dictionary.atoms)
    np.testing.assert_allclose(res.dictionary.atoms, truth.dictionary.atoms, atol=1e-15)
    assert res.objective_trace == [] and res.activations.count() == 0


def test_fit_trace_non_increasing():
    data, truth = gen_dataset(SynthSpec(seed=9))
    res = fit(data, 2, 50, truth.transform, FitConfig())
    trace = np.array(res.objective_trace)
    assert np.all(np.diff(trace) <= 1e-8 * np.abs(trace[:-1]))


def test_fit_activations_never_overlap():
    data, truth = gen_dataset(SynthSpec(seed=10))
    res = fit(data, 2, 50, truth.transform, FitConfig(n_init=2, n_perso=2))
    res.activations.validate()


def test_fit_synthetic_reconstruction():
    """S=3, N=500, K=2, L=50, D=3, W=10, lambda=1e-2: normalized error below 0.05."""
    data, truth = gen_dataset(SynthSpec(seed=0))
    res = fit(data, 2, 50, truth.transform, FitConfig(lam=1e-2))
    assert recon_error(data, res.reconstruction(), normalized=True) < 0.05


def test_fit_rejects_long_atoms():
    data, truth = gen_dataset(SynthSpec(seed=0))
    with pytest.raises(ValueError):
        fit(data, 2, 500, truth.transform)


def test_popcdl_duplication_symmetry():
    data, _ = gen_dataset(SynthSpec(S=1, seed=11))
    cfg = FitConfig(n_init=3, n_perso=0)
    one = fit_popcdl(data, 2, 50, cfg)
    many = fit_popcdl(TimeSeriesDataset(np.repeat(data.data, 3, axis=0)), 2, 50, cfg)
    np.testing.assert_allclose(one.dictionary.atoms, many.dictionary.atoms, atol=1e-12)


def test_popcdl_recovers_clean_atom():
    rng = np.random.default_rng(12)
    phi = default_atoms(1, 30)
    x, _ = planted(phi, [10, 100, 200, 300], [0] * 4, [1.0, 1.5, 0.7, 1.2], 400)
    init = phi + 0.05 * rng.standard_normal(phi.shape)
    res = fit_popcdl(TimeSeriesDataset([x]), 1, 30, FitConfig(n_init=5, n_perso=0), init=init)
    np.testing.assert_allclose(res.dictionary.atoms, phi, atol=1e-6)


def test_popcdl_huge_lambda_freezes():
    data, _ = gen_dataset(SynthSpec(seed=13))
    with pytest.warns(UserWarning, match="frozen"):
        res = fit_popcdl(data, 2, 50, FitConfig(lam=1e6, n_init=2, n_perso=0))
    assert res.activations.count() == 0
    assert any("frozen" in f for f in res.flags)


def test_indcdl_single_series_equals_popcdl():
    data, _ = gen_dataset(SynthSpec(S=1, seed=14))
    cfg = FitConfig(n_init=3, n_perso=2)
    ind = fit_indcdl(data, 2, 50, cfg)
    pop = fit_popcdl(data, 2, 50, cfg)
    np.testing.assert_allclose(ind.individual[0].dictionary.atoms, pop.dictionary.atoms, atol=1e-14)
    np.testing.assert_allclose(ind.barycenter.atoms, pop.dictionary.atoms, atol=1e-12)


def test_indcdl_identical_series():
    data, _ = gen_dataset(SynthSpec(S=1, seed=15))
    cfg = FitConfig(n_init=3, n_perso=0)
    ind = fit_indcdl(TimeSeriesDataset(np.repeat(data.data, 3, axis=0)), 2, 50, cfg)
    for r in ind.individual:
        np.testing.assert_allclose(ind.barycenter.atoms, r.dictionary.atoms, atol=1e-12)


def test_barycenter_symmetric_perturbation():
    phi = default_atoms(2, 50)
    delta = 1e-3 * np.random.default_rng(16).standard_normal(phi.shape)
    bary = barycenter([phi + delta, phi - delta])
    for k in range(2):
        assert atom_distance(bary.atoms[k], phi[k]) < 1e-12


def test_personalized_atoms_shapes():
    _, truth = gen_dataset(SynthSpec(seed=17))
    patoms = personalized_atoms(truth.dictionary, truth.personalization, truth.transform)
    assert patoms.shape == (3, 2, 50, 1)
    ident = personalized_atoms(truth.dictionary, np.zeros((3, 2, 0)), IdentityTransform())
    np.testing.assert_array_equal(ident[2], truth.dictionary.atoms)
