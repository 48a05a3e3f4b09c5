import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline
from scipy.linalg import block_diag

from ddpstar.basis import (
    BasisError,
    KnotVector,
    PSplineBasis,
    TensorAnovaBasis,
    bspline_design,
    decompose_penalty,
    diff_penalty,
    make_knots,
    tensor_anova_blocks,
    univariate_smooth_blocks,
)


def cox_de_boor(j, k, t, x):
    """Textbook recursive definition of the j-th B-spline of degree k."""
    if k == 0:
        return 1.0 if t[j] <= x < t[j + 1] else 0.0
    left = 0.0 if t[j + k] == t[j] else (x - t[j]) / (t[j + k] - t[j]) * cox_de_boor(j, k - 1, t, x)
    right = (0.0 if t[j + k + 1] == t[j + 1]
             else (t[j + k + 1] - x) / (t[j + k + 1] - t[j + 1]) * cox_de_boor(j + 1, k - 1, t, x))
    return left + right


class TestKnots:
    def test_seven_functions_on_unit_interval(self):
        kv = make_knots(0, 1, 7, 3)
        np.testing.assert_allclose(
            kv.knots, [-0.75, -0.5, -0.25, 0, 0.25, 0.5, 0.75, 1, 1.25, 1.5, 1.75], atol=1e-15)
        assert kv.n_basis == 7
        assert bspline_design(np.linspace(0, 1, 5), kv).shape == (5, 7)

    def test_single_segment(self):
        kv = make_knots(0, 1, 4, 3)
        assert kv.nseg == 1
        assert kv.knots[3] == 0.0 and kv.knots[4] == 1.0

    def test_toxicology_dimension(self):
        kv = make_knots(0, 10, 23, 3)
        assert kv.nseg == 20
        inner = kv.knots[3:24]
        np.testing.assert_allclose(np.diff(inner), 0.5, atol=1e-12)
        assert inner[0] == 0 and inner[-1] == 10

    @pytest.mark.parametrize("lo,hi,J", [(1, 1, 10), (2, 1, 10), (0, 1, 3), (0, 1, 2)])
    def test_invalid(self, lo, hi, J):
        with pytest.raises(BasisError):
            make_knots(lo, hi, J, 3)

    @given(st.floats(-100, 100), st.floats(0.01, 50), st.integers(4, 40))
    def test_count_identity(self, lo, width, J):
        kv = make_knots(lo, lo + width, J)
        assert len(kv.knots) == kv.nseg + 2 * kv.degree + 1
        assert len(kv.knots) - kv.degree - 1 == J
        assert np.all(np.diff(kv.knots) > 0)

    def test_roundtrip_dict(self):
        kv = make_knots(-1.5, 2.5, 12)
        kv2 = KnotVector.from_dict(kv.to_dict())
        np.testing.assert_array_equal(kv.knots, kv2.knots)


class TestDesign:
    def test_partition_of_unity(self):
        rng = np.random.default_rng(1)
        kv = make_knots(-3, 5, 17)
        v = rng.uniform(-3, 5, 1000)
        B = bspline_design(v, kv)
        assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12
        assert np.all(B >= 0)
        assert np.all((B > 0).sum(axis=1) <= 4)

    def test_against_recursive_oracle(self):
        rng = np.random.default_rng(2)
        kv = make_knots(0, 1, 10)
        v = rng.uniform(0, 1, 20)
        B = bspline_design(v, kv)
        ref = np.array([[cox_de_boor(j, 3, kv.knots, x) for j in range(10)] for x in v])
        assert np.max(np.abs(B - ref)) < 1e-12

    def test_against_scipy(self):
        kv = make_knots(2, 7, 15)
        v = np.linspace(2, 7, 333)
        ref = BSpline.design_matrix(v, kv.knots, 3).toarray()
        assert np.max(np.abs(bspline_design(v, kv) - ref)) < 1e-12

    def test_lower_boundary_support(self):
        # at the lower domain end the cubic B-splines 1..4 are the active ones;
        # B_4 vanishes exactly there, the others carry (1/6, 2/3, 1/6)
        kv = make_knots(0, 1, 9)
        row = bspline_design([0.0], kv)[0]
        np.testing.assert_allclose(row[:4], [1 / 6, 2 / 3, 1 / 6, 0], atol=1e-15)
        assert np.all(row[4:] == 0)

    def test_upper_boundary_closed(self):
        kv = make_knots(0, 1, 9)
        row = bspline_design([1.0], kv)[0]
        np.testing.assert_allclose(row[-4:], [0, 1 / 6, 2 / 3, 1 / 6], atol=1e-15)
        assert abs(row.sum() - 1) < 1e-14

    def test_out_of_domain(self):
        kv = make_knots(0, 1, 9)
        with pytest.raises(BasisError, match=r"1\.5.*\[0, 1\]"):
            bspline_design([0.5, 1.5], kv)
        with pytest.raises(BasisError):
            bspline_design([np.nan], kv)


class TestPenalty:
    def test_j4_frozen(self):
        P = diff_penalty(4, 2)
        expected = np.array([[1, -2, 1, 0], [-2, 5, -4, 1], [1, -4, 5, -2], [0, 1, -2, 1]])
        np.testing.assert_array_equal(P, expected)
        np.testing.assert_array_equal(P @ np.ones(4), 0)
        np.testing.assert_array_equal(P @ np.arange(1, 5), 0)

    @pytest.mark.parametrize("J", range(4, 41))
    def test_rank(self, J):
        assert np.linalg.matrix_rank(diff_penalty(J, 2)) == J - 2

    def test_first_order(self):
        P = diff_penalty(5, 1)
        assert np.linalg.matrix_rank(P) == 4

    def test_too_small(self):
        with pytest.raises(BasisError):
            diff_penalty(2, 2)

    def test_decomposition_j4(self):
        dec = decompose_penalty(diff_penalty(4))
        assert dec.rank == 2
        assert abs(dec.LambdaPlus.sum() - 12) < 1e-10
        assert dec.U0.shape == (4, 2) and dec.Uplus.shape == (4, 2)

    def test_zero_matrix_rejected(self):
        with pytest.raises(BasisError):
            decompose_penalty(np.zeros((5, 5)))

    @pytest.mark.parametrize("J", [5, 10, 23, 40])
    def test_decomposition_properties(self, J):
        P = diff_penalty(J)
        dec = decompose_penalty(P)
        U = dec.U
        np.testing.assert_allclose(U.T @ U, np.eye(J), atol=1e-12)
        assert np.max(np.abs(P @ dec.U0)) < 1e-10 * dec.LambdaPlus.max()
        recon = dec.Uplus @ np.diag(dec.LambdaPlus) @ dec.Uplus.T
        assert np.max(np.abs(recon - P)) < 1e-10 * dec.LambdaPlus.max()
        rng = np.random.default_rng(J)
        x = rng.standard_normal((50, J))
        qf = np.einsum("ij,jk,ik->i", x, P, x)
        qf2 = np.einsum("ij,jk,ik->i", x, recon, x)
        assert np.max(np.abs(qf - qf2)) < 1e-10 * max(1.0, np.abs(qf).max())


class TestUnivariate:
    def test_widths(self):
        v = np.linspace(0, 1, 50)
        blocks = univariate_smooth_blocks(v, 10)
        assert blocks.x_cols.shape == (50, 1)
        assert blocks.widths == [8]
        np.testing.assert_array_equal(blocks.x_cols[:, 0], v)

    def test_constant_rejected(self):
        with pytest.raises(BasisError):
            univariate_smooth_blocks(np.ones(10), 10)

    def test_reparametrisation_equivalence(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(-2, 3, 200)
        J = 15
        basis = PSplineBasis.fit(v, J)
        B = bspline_design(v, basis.knots)
        dec = decompose_penalty(diff_penalty(J))
        xi = rng.standard_normal((J, 20))
        lhs = B @ xi
        rhs = (B @ dec.U0) @ (dec.U0.T @ xi) + basis.z(v) @ (dec.Uplus.T @ xi)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_nullspace_is_linear(self):
        # B U0 spans {1, v}: a straight line is reproduced with zero penalised part
        v = np.linspace(0, 1, 40)
        basis = PSplineBasis.fit(v, 12)
        dec = decompose_penalty(diff_penalty(12))
        BU0 = bspline_design(v, basis.knots) @ dec.U0
        line = 0.3 - 2.0 * v
        coef, *_ = np.linalg.lstsq(BU0, line, rcond=None)
        assert np.max(np.abs(BU0 @ coef - line)) < 1e-10

    def test_serialisation(self):
        v = np.linspace(1, 4, 30)
        b = PSplineBasis.fit(v, 9)
        b2 = PSplineBasis.from_dict(b.to_dict())
        np.testing.assert_array_equal(b.z(v), b2.z(v))


class TestTensor:
    @pytest.mark.parametrize("J1,J2,widths", [(5, 5, [3, 3, 3, 3, 9]),
                                              (23, 13, [21, 11, 21, 11, 231])])
    def test_widths(self, J1, J2, widths):
        rng = np.random.default_rng(4)
        v1, v2 = rng.uniform(size=(2, 400))
        blocks = tensor_anova_blocks(v1, v2, J1, J2)
        assert blocks.widths == widths
        assert sum(blocks.widths) == J1 * J2 - 4
        assert blocks.x_cols.shape == (400, 3)

    def test_quadratic_form_matches_tensor_precision(self):
        rng = np.random.default_rng(5)
        J1, J2 = 8, 6
        v1, v2 = rng.uniform(size=(2, 100))
        tb = TensorAnovaBasis.fit(v1, v2, J1, J2)
        Y1 = decompose_penalty(diff_penalty(J1)).LambdaPlus
        Y2 = decompose_penalty(diff_penalty(J2)).LambdaPlus
        D1, D2 = np.diag(Y1), np.diag(Y2)
        Ktilde = block_diag(D1, D2, D1, D2,
                            np.kron(D1, np.eye(J2 - 2)) + np.kron(np.eye(J1 - 2), D2))
        tau2 = 0.37
        precs = tb.precisions()
        for _ in range(20):
            gam = rng.standard_normal(J1 * J2 - 4)
            parts = np.split(gam, np.cumsum([len(p) for p in precs])[:-1])
            lhs = sum(g @ (p * g) for g, p in zip(parts, precs)) / tau2
            rhs = gam @ Ktilde @ gam / tau2
            assert abs(lhs - rhs) < 1e-9

    def test_spans_full_tensor_space(self):
        rng = np.random.default_rng(6)
        J1, J2 = 6, 5
        v1, v2 = rng.uniform(size=(2, 300))
        blocks = tensor_anova_blocks(v1, v2, J1, J2)
        ours = np.column_stack([np.ones(300), blocks.x_cols] + list(blocks.z_blocks))
        kv1, kv2 = make_knots(v1.min(), v1.max(), J1), make_knots(v2.min(), v2.max(), J2)
        B1, B2 = bspline_design(v1, kv1), bspline_design(v2, kv2)
        T = np.einsum("ni,nj->nij", B1, B2).reshape(300, -1)
        assert ours.shape[1] == J1 * J2
        r = np.linalg.matrix_rank
        assert r(ours) == r(T) == r(np.column_stack([ours, T]))

    def test_blocks_orthogonal_to_parametric_part(self):
        rng = np.random.default_rng(7)
        v1, v2 = rng.uniform(size=(2, 250))
        blocks = tensor_anova_blocks(v1, v2, 7, 7)
        X = np.column_stack([np.ones(250), blocks.x_cols])
        for Z in blocks.z_blocks:
            assert np.max(np.abs(X.T @ Z)) < 1e-9

    def test_bilinear_surface_in_unpenalised_space(self):
        rng = np.random.default_rng(8)
        v1, v2 = rng.uniform(size=(2, 120))
        blocks = tensor_anova_blocks(v1, v2, 6, 6)
        X = np.column_stack([np.ones(120), blocks.x_cols])
        f = 1 + 2 * v1 - v2 + 0.5 * v1 * v2
        coef, *_ = np.linalg.lstsq(X, f, rcond=None)
        assert np.max(np.abs(X @ coef - f)) < 1e-12

    def test_new_points_reuse_centring(self):
        rng = np.random.default_rng(9)
        v1, v2 = rng.uniform(size=(2, 150))
        tb = TensorAnovaBasis.fit(v1, v2, 6, 7)
        tb2 = TensorAnovaBasis.from_dict(tb.to_dict())
        a = tb.blocks(v1[:5], v2[:5])
        b = tb2.blocks(v1[:5], v2[:5])
        full = tb.blocks(v1, v2)
        for za, zb, zf in zip(a.z_blocks, b.z_blocks, full.z_blocks):
            np.testing.assert_array_equal(za, zb)
            np.testing.assert_allclose(za, zf[:5], atol=1e-13)

    def test_constant_rejected(self):
        with pytest.raises(BasisError):
            tensor_anova_blocks(np.ones(30), np.linspace(0, 1, 30), 5, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 30), st.floats(-50, 50), st.floats(0.1, 100))
def test_partition_of_unity_property(J, lo, width):
    kv = make_knots(lo, lo + width, J)
    v = np.linspace(lo, lo + width, 97)
    assert np.max(np.abs(bspline_design(v, kv).sum(axis=1) - 1)) < 1e-12
