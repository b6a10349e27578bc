import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings
from hypothesis import strategies as st

from spatent.lattice import (
    CholeskyFactor,
    GridSpec,
    NeighbourhoodScheme,
    NotPositiveDefiniteError,
    build_adjacency,
    build_precision,
    degree_matrix,
    log_det_precision,
    normalized_adjacency_eigenvalues,
    sparse_cholesky,
    write_edge_list,
)

FOUR = NeighbourhoodScheme.FOUR_NEAREST
TWELVE = NeighbourhoodScheme.TWELVE_NEAREST


class TestGridSpec:
    def test_cell_count(self):
        assert GridSpec(3, 5).n == 15

    @pytest.mark.parametrize("rows,cols", [(1, 5), (5, 1), (0, 2), (2, 0)])
    def test_rejects_degenerate_grids(self, rows, cols):
        with pytest.raises(ValueError):
            GridSpec(rows, cols)

    @given(st.integers(2, 10), st.integers(2, 10))
    def test_index_and_coords_are_inverse(self, rows, cols):
        grid = GridSpec(rows, cols)
        for index in range(grid.n):
            r, c = grid.coords_of(index)
            assert grid.index_of(r, c) == index

    def test_row_major_order(self):
        grid = GridSpec(3, 4)
        assert grid.index_of(0, 0) == 0
        assert grid.index_of(0, 3) == 3
        assert grid.index_of(1, 0) == 4
        assert grid.coords_of(7) == (1, 3)


class TestAdjacency:
    def test_3x3_four_nearest_degrees_by_hand(self):
        # corner 2, edge 3, centre 4 from enumerating the 3x3 graph
        A = build_adjacency(GridSpec(3, 3), FOUR)
        assert degree_matrix(A).tolist() == [2, 3, 2, 3, 4, 3, 2, 3, 2]

    def test_5x5_twelve_nearest_center_degree(self):
        # offsets {(0,+-1),(0,+-2),(+-1,0),(+-2,0),(+-1,+-1)} all in bounds
        A = build_adjacency(GridSpec(5, 5), TWELVE)
        center = GridSpec(5, 5).index_of(2, 2)
        assert degree_matrix(A)[center] == 12

    def test_2x2_four_nearest_all_degree_two(self):
        A = build_adjacency(GridSpec(2, 2), FOUR)
        assert degree_matrix(A).tolist() == [2, 2, 2, 2]

    @settings(deadline=None, max_examples=25)
    @given(st.integers(2, 8), st.integers(2, 8), st.sampled_from([FOUR, TWELVE]))
    def test_symmetric_zero_diagonal_and_degree_counts(self, rows, cols, scheme):
        grid = GridSpec(rows, cols)
        A = build_adjacency(grid, scheme)
        assert (A != A.T).nnz == 0
        assert A.diagonal().sum() == 0
        assert set(np.unique(A.toarray())) <= {0.0, 1.0}
        degrees = degree_matrix(A)
        for index in range(grid.n):
            r, c = grid.coords_of(index)
            in_bounds = sum(
                0 <= r + dr < rows and 0 <= c + dc < cols for dr, dc in scheme.offsets
            )
            assert degrees[index] == in_bounds

    @settings(deadline=None, max_examples=25)
    @given(st.integers(2, 8), st.integers(2, 8), st.sampled_from([FOUR, TWELVE]))
    def test_handshake_identity(self, rows, cols, scheme):
        A = build_adjacency(GridSpec(rows, cols), scheme)
        edges = sps.triu(A, k=1).nnz
        assert degree_matrix(A).sum() == 2 * edges

    def test_four_nearest_is_subgraph_of_twelve(self):
        grid = GridSpec(5, 6)
        A4 = build_adjacency(grid, FOUR).toarray()
        A12 = build_adjacency(grid, TWELVE).toarray()
        assert np.all(A12[A4 == 1] == 1)

    def test_parse(self):
        assert NeighbourhoodScheme.parse("4nn") is FOUR
        assert NeighbourhoodScheme.parse("12nn") is TWELVE
        with pytest.raises(ValueError):
            NeighbourhoodScheme.parse("8nn")


class TestPrecision:
    def test_rho_zero_is_diagonal(self):
        A = build_adjacency(GridSpec(3, 3), FOUR)
        d = degree_matrix(A)
        Q = build_precision(A, d, tau=2.0, rho=0.0)
        assert np.allclose(Q.matrix.toarray(), np.diag(2.0 * d))

    def test_2x2_row_by_hand(self):
        # tau=1, rho=0.5: diagonal = degree 2, off-diagonal -0.5 at both neighbours
        A = build_adjacency(GridSpec(2, 2), FOUR)
        Q = build_precision(A, degree_matrix(A), tau=1.0, rho=0.5).matrix.toarray()
        assert Q[0].tolist() == [2.0, -0.5, -0.5, 0.0]

    def test_positive_definite_dense_oracle(self):
        A = build_adjacency(GridSpec(3, 3), FOUR)
        Q = build_precision(A, degree_matrix(A), tau=0.1, rho=0.99)
        assert np.linalg.eigvalsh(Q.matrix.toarray()).min() > 0

    def test_rejects_bad_parameters(self):
        A = build_adjacency(GridSpec(2, 2), FOUR)
        d = degree_matrix(A)
        with pytest.raises(ValueError):
            build_precision(A, d, tau=0.0, rho=0.5)
        with pytest.raises(ValueError, match="singular or indefinite"):
            build_precision(A, d, tau=1.0, rho=1.0)
        with pytest.raises(ValueError, match="singular or indefinite"):
            build_precision(A, d, tau=1.0, rho=-1.0)


class TestCholesky:
    def test_diagonal_matrix_gives_sqrt_factor(self):
        q = np.array([4.0, 9.0, 16.0, 25.0])
        factor = CholeskyFactor(sps.diags(q))
        L = factor.dense_factor()
        assert np.allclose(np.sort(np.diag(L)), np.sort(np.sqrt(q)))
        assert np.allclose(L - np.diag(np.diag(L)), 0)

    def test_identity(self):
        factor = CholeskyFactor(sps.eye(6))
        assert np.allclose(factor.dense_factor(), np.eye(6))
        assert factor.log_det() == pytest.approx(0.0, abs=1e-14)

    def test_log_det_matches_dense_oracle(self):
        A = build_adjacency(GridSpec(3, 3), FOUR)
        Q = build_precision(A, degree_matrix(A), tau=0.1, rho=0.99)
        factor = sparse_cholesky(Q)
        _, dense = np.linalg.slogdet(Q.matrix.toarray())
        assert factor.log_det() == pytest.approx(dense, abs=1e-8)

    def test_reconstruction_within_tolerance(self):
        A = build_adjacency(GridSpec(6, 7), TWELVE)
        Q = build_precision(A, degree_matrix(A), tau=0.3, rho=0.9)
        assert sparse_cholesky(Q).reconstruction_error(Q.matrix) < 1e-10

    def test_not_positive_definite_raises(self):
        bad = sps.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NotPositiveDefiniteError, match="not positive definite"):
            CholeskyFactor(bad)

    def test_solve(self):
        A = build_adjacency(GridSpec(4, 4), FOUR)
        Q = build_precision(A, degree_matrix(A), tau=0.7, rho=0.4)
        factor = sparse_cholesky(Q)
        rhs = np.arange(16, dtype=float)
        assert np.allclose(Q.matrix @ factor.solve(rhs), rhs)


class TestLogDet:
    def test_rho_zero_closed_form(self):
        A = build_adjacency(GridSpec(4, 5), TWELVE)
        d = degree_matrix(A)
        expected = 20 * np.log(0.3) + np.log(d).sum()
        assert log_det_precision(d, A, tau=0.3, rho=0.0) == pytest.approx(expected, abs=1e-10)

    def test_regular_graph_closed_form(self):
        # complete graph on 5 nodes is 4-regular: logdet(1*(D - 0*A)) = 5 log 4
        A = sps.csr_matrix(np.ones((5, 5)) - np.eye(5))
        d = degree_matrix(A)
        assert d.tolist() == [4] * 5
        assert log_det_precision(d, A, tau=1.0, rho=0.0) == pytest.approx(5 * np.log(4))

    def test_matches_cholesky_route(self):
        A = build_adjacency(GridSpec(3, 3), FOUR)
        d = degree_matrix(A)
        eigen_route = log_det_precision(d, A, tau=0.1, rho=0.5)
        chol_route = sparse_cholesky(build_precision(A, d, 0.1, 0.5)).log_det()
        assert eigen_route == pytest.approx(chol_route, abs=1e-8)

    def test_agreement_over_random_parameters(self):
        rng = np.random.default_rng(42)
        for scheme in (FOUR, TWELVE):
            A = build_adjacency(GridSpec(8, 8), scheme)
            d = degree_matrix(A)
            eigs = normalized_adjacency_eigenvalues(A, d)
            for _ in range(20):
                tau = float(rng.uniform(0.01, 5.0))
                rho = float(rng.uniform(-0.999, 0.999))
                via_eigen = log_det_precision(d, A, tau, rho, eigs)
                via_chol = sparse_cholesky(build_precision(A, d, tau, rho)).log_det()
                assert via_eigen == pytest.approx(via_chol, abs=1e-8)

    def test_extreme_eigenvalue_is_one(self):
        # connected lattice: D^{-1/2} A D^{-1/2} attains eigenvalue exactly 1
        A = build_adjacency(GridSpec(5, 5), FOUR)
        eigs = normalized_adjacency_eigenvalues(A, degree_matrix(A))
        assert eigs.max() == pytest.approx(1.0, abs=1e-12)


def test_edge_list_export(tmp_path):
    A = build_adjacency(GridSpec(2, 2), FOUR)
    path = tmp_path / "edges.txt"
    write_edge_list(A, path)
    assert path.read_text().splitlines() == ["1 2", "1 3", "2 4", "3 4"]
