import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwseg import LaplacianSpec, SoftSeg, Volume, build_laplacian, build_neighborhood, default_family
from rwseg.core import DimensionMismatch
from rwseg.graph import laplacian_from_edges, laplacian_quadform

from oracles import brute_pairs, dense_laplacian

dims_st = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 2))


def lattice_count6(dims):
    nx, ny, nz = dims
    return (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)


class TestNeighborhood:
    def test_small_counts(self):
        assert len(build_neighborhood((2, 1, 1), 6).edges) == 1
        assert len(build_neighborhood((2, 2, 1), 6).edges) == 4

    def test_26_conn_matches_brute_force(self):
        got = build_neighborhood((3, 3, 2), 26).edges
        want = brute_pairs((3, 3, 2), 26)
        assert len(got) == len(want)
        assert sorted(map(tuple, got.tolist())) == want

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            build_neighborhood((2, 2, 2), 18)

    @settings(max_examples=40, deadline=None)
    @given(dims_st, st.sampled_from([6, 26]))
    def test_edges_match_enumeration(self, dims, conn):
        nb = build_neighborhood(dims, conn)
        e = nb.edges
        assert np.all(e[:, 0] < e[:, 1])
        assert sorted(map(tuple, e.tolist())) == brute_pairs(dims, conn)
        if conn == 6:
            assert len(e) == lattice_count6(dims)


class TestLaplacian:
    def test_equal_intensities(self):
        L = build_laplacian(Volume((2, 1, 1), [0.3, 0.3]), LaplacianSpec(beta_kernel=7.0))
        assert np.allclose(L.matrix.toarray(), [[1, -1], [-1, 1]])

    def test_unit_gap_kernel(self):
        L = build_laplacian(Volume((2, 1, 1), [0.0, 5.0]), LaplacianSpec(beta_kernel=1.0))
        assert L.matrix[0, 1] == pytest.approx(-0.36787944117144233, abs=1e-12)

    def test_constant_gradient_feature_gives_unit_weights(self):
        L = build_laplacian(Volume((3, 2, 1), np.full(6, 2.0)),
                            LaplacianSpec(feature="gradient-magnitude", beta_kernel=50.0))
        assert np.allclose(L.weights, 1.0)

    def test_weight_floor(self):
        L = build_laplacian(Volume((2, 1, 1), [0.0, 1.0]), LaplacianSpec(beta_kernel=1e4))
        assert L.weights[0] == pytest.approx(1e-6)

    def test_default_family(self):
        fam = default_family()
        assert len(fam) == 4
        assert {(s.feature, s.beta_kernel) for s in fam} == {
            ("intensity", 10.0), ("intensity", 100.0),
            ("gradient-magnitude", 10.0), ("gradient-magnitude", 100.0)}
        assert all(s.connectivity == 6 for s in fam)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LaplacianSpec(beta_kernel=0.0)
        with pytest.raises(ValueError):
            LaplacianSpec(epsilon_w=0.0)
        with pytest.raises(ValueError):
            LaplacianSpec(feature="texture")
        s = LaplacianSpec(beta_kernel=3.0, feature="gradient-magnitude", connectivity=26)
        assert LaplacianSpec.from_dict(s.to_dict()) == s

    @settings(max_examples=30, deadline=None)
    @given(dims_st, st.sampled_from(["intensity", "gradient-magnitude"]),
           st.sampled_from([6, 26]), st.floats(0.5, 200.0), st.integers(0, 10**6))
    def test_matches_dense_oracle(self, dims, feat, conn, beta, seed):
        r = np.random.default_rng(seed)
        x = Volume(dims, r.random(int(np.prod(dims))))
        spec = LaplacianSpec(beta_kernel=beta, feature=feat, connectivity=conn)
        A = build_laplacian(x, spec).matrix.toarray()
        D = dense_laplacian(x.data, dims, spec)
        assert np.allclose(A, D, atol=1e-12)
        assert np.allclose(A, A.T)
        assert np.allclose(A.sum(axis=1), 0.0, atol=1e-10)
        off = A - np.diag(np.diag(A))
        assert np.all(off <= 0) and np.all(np.diag(A) >= 0)


class TestQuadform:
    def test_constant_columns(self):
        x = Volume((3, 2, 1), np.linspace(0, 1, 6))
        L = build_laplacian(x, LaplacianSpec())
        y = SoftSeg((3, 2, 1), np.tile([[0.2], [0.8]], (1, 6)))
        assert laplacian_quadform(L, y) == pytest.approx(0.0, abs=1e-15)

    def test_two_voxel_chain(self):
        L = laplacian_from_edges(2, np.array([[0, 1]]), np.array([1.0]))
        y = SoftSeg((2, 1, 1), [[1.0, 0.0], [0.0, 1.0]])
        assert laplacian_quadform(L, y) == pytest.approx(2.0)

    def test_dimension_mismatch(self):
        L = laplacian_from_edges(2, np.array([[0, 1]]), np.array([1.0]))
        with pytest.raises(DimensionMismatch):
            laplacian_quadform(L, SoftSeg((3, 1, 1), np.full((2, 3), 0.5)))

    @settings(max_examples=40, deadline=None)
    @given(dims_st, st.integers(2, 4), st.integers(0, 10**6))
    def test_dense_and_psd(self, dims, K, seed):
        r = np.random.default_rng(seed)
        n = int(np.prod(dims))
        x = Volume(dims, r.random(n))
        L = build_laplacian(x, LaplacianSpec(beta_kernel=20.0, connectivity=26))
        Y = r.dirichlet(np.ones(K), size=n).T
        D = L.matrix.toarray()
        want = sum(Y[s] @ D @ Y[s] for s in range(K))
        got = laplacian_quadform(L, SoftSeg(dims, Y))
        assert got == pytest.approx(want, abs=1e-10)
        assert got >= 0.0

    def test_zero_iff_constant_on_components(self):
        # two disconnected 2-voxel components
        L = laplacian_from_edges(4, np.array([[0, 1], [2, 3]]), np.array([1.0, 2.0]))
        y = SoftSeg((4, 1, 1), [[0.1, 0.1, 0.7, 0.7], [0.9, 0.9, 0.3, 0.3]])
        assert laplacian_quadform(L, y) == 0.0
        y2 = SoftSeg((4, 1, 1), [[0.1, 0.2, 0.7, 0.7], [0.9, 0.8, 0.3, 0.3]])
        assert laplacian_quadform(L, y2) > 0.0
