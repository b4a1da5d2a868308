import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwseg import (DimensionMismatch, FeatureVector, HardSeg, Params, PriorTerm, SampleModel, SoftSeg,
                   Volume, feature_vector, loss, rw_energy, total_energy, harden)
from rwseg.energy import prior_energy
from rwseg.graph import laplacian_from_edges

from conftest import random_model, random_params, random_soft
from oracles import dense_energy


def chain_model():
    """2 voxels, 2 labels, one unit-weight edge, one identity prior at one-hot refs."""
    x = Volume((2, 1, 1), [0.0, 1.0])
    L = laplacian_from_edges(2, np.array([[0, 1]]), np.array([1.0]))
    ref = SoftSeg((2, 1, 1), [[1.0, 0.0], [0.0, 1.0]])
    return SampleModel(x, [L], [PriorTerm.uniform(ref)], 2)


RW_CHAIN = np.array([[2 / 3, 1 / 3], [1 / 3, 2 / 3]])


class TestPriorEnergy:
    def test_zero_at_reference(self, rng):
        y = random_soft(rng, (3, 2, 1), 3)
        assert prior_energy(y, PriorTerm.uniform(y)) == 0.0

    def test_zero_omega(self, rng):
        y = random_soft(rng, (3, 2, 1), 3)
        p = PriorTerm(random_soft(rng, (3, 2, 1), 3), np.zeros(6))
        assert prior_energy(y, p) == 0.0

    def test_worked_value(self):
        ref = SoftSeg((2, 1, 1), [[1 / 3, 2 / 3], [2 / 3, 1 / 3]])
        y = SoftSeg((2, 1, 1), [[0.0, 1.0], [1.0, 0.0]])
        assert prior_energy(y, PriorTerm.uniform(ref)) == pytest.approx(4 / 9, abs=1e-15)

    def test_validation(self, rng):
        ref = random_soft(rng, (2, 1, 1), 2)
        with pytest.raises(ValueError):
            PriorTerm(ref, [-1.0, 1.0])
        with pytest.raises(DimensionMismatch):
            PriorTerm(ref, [1.0, 1.0, 1.0])
        with pytest.raises(DimensionMismatch):
            prior_energy(random_soft(rng, (2, 1, 1), 3), PriorTerm.uniform(ref))


class TestFeatureVector:
    def test_chain_example(self):
        psi = feature_vector(chain_model(), SoftSeg((2, 1, 1), RW_CHAIN))
        assert psi.phi_alpha == pytest.approx([2 / 9], abs=1e-15)
        assert psi.phi_beta == pytest.approx([4 / 9], abs=1e-15)
        assert total_energy(Params([1.0], [1.0]), psi) == pytest.approx(2 / 3, abs=1e-15)

    def test_uniform_y_has_no_smoothness_cost(self, rng):
        m = random_model(rng, dims=(3, 3, 2), K=3)
        y = SoftSeg(m.x.dims, np.full((3, m.n), 1 / 3))
        assert np.all(feature_vector(m, y).phi_alpha == 0.0)

    def test_prior_reference_zero(self, rng):
        m = random_model(rng, dims=(3, 2, 2), K=3, n_prior=2)
        psi = feature_vector(m, m.priors[1].y_ref)
        assert psi.phi_beta[1] == 0.0

    def test_total_energy_mismatch(self):
        with pytest.raises(DimensionMismatch):
            total_energy(Params([1.0], [1.0]), FeatureVector(np.zeros(2), np.zeros(1)))

    def test_zero_weight_on_flat_term(self):
        psi = FeatureVector(np.array([0.0, 3.0]), np.array([5.0]))
        assert total_energy(Params([1.0, 0.0], [0.0]), psi) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_linearity_against_direct_energy(self, seed):
        r = np.random.default_rng(seed)
        m = random_model(r)
        w = random_params(r, m)
        y = random_soft(r, m.x.dims, m.K)
        psi = feature_vector(m, y)
        assert np.all(psi.vector >= 0)
        direct = dense_energy(m, w, y.probs)
        assert total_energy(w, psi) == pytest.approx(direct, rel=1e-10, abs=1e-10)
        assert rw_energy(m, w, y) == pytest.approx(direct, rel=1e-10, abs=1e-10)


class TestLoss:
    def test_examples(self):
        z = HardSeg((4, 1, 1), [0, 1, 2, 1], 3)
        assert loss(z, z.one_hot()) == 0.0
        y = HardSeg((4, 1, 1), [0, 1, 2, 0], 3).one_hot()
        assert loss(z, y) == 0.25
        assert loss(z, HardSeg((4, 1, 1), [1, 2, 0, 0], 3).one_hot()) == 1.0

    def test_truth_tie_break(self):
        z = HardSeg((1, 1, 1), [1], 2)
        y = SoftSeg((1, 1, 1), [[0.5], [0.5]])
        assert loss(z, y) == 1.0
        assert loss(z, y, prefer_truth=True) == 0.0

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            loss(HardSeg((2, 1, 1), [0, 1], 2), SoftSeg((3, 1, 1), np.full((2, 3), 0.5)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_recount_and_argmax_invariance(self, seed):
        r = np.random.default_rng(seed)
        n, K = int(r.integers(1, 30)), int(r.integers(2, 5))
        z = HardSeg((n, 1, 1), r.integers(0, K, n), K)
        y = random_soft(r, (n, 1, 1), K)
        want = np.mean(np.argmax(y.probs, axis=0) != z.labels)
        assert loss(z, y) == pytest.approx(want)
        assert 0.0 <= loss(z, y) <= 1.0
        # sharpen each voxel towards its argmax: hardened labels are unchanged
        sharp = SoftSeg.normalized(y.dims, y.probs ** 3)
        assert np.array_equal(harden(sharp).labels, harden(y).labels)
        assert loss(z, sharp) == loss(z, y)
