import numpy as np
import pytest

from bandit_control.policy import DrcParams, drc_control, flatten, l1_op_norm, unflatten


class TestDrcControl:
    def test_zero_policy(self):
        M = DrcParams.zeros(3, 2, 2)
        assert np.array_equal(drc_control(M, np.ones((3, 2))), np.zeros(2))

    def test_identity_memory_one(self):
        M = DrcParams(np.eye(3)[None])
        y = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(drc_control(M, y[None]), y)

    def test_lagged_block(self):
        M = DrcParams(np.stack([np.zeros((2, 2)), 2 * np.eye(2)]))
        u = drc_control(M, [[1.0, 0.0], [0.0, 3.0]])
        assert np.array_equal(u, [0.0, 6.0])

    def test_dimension_mismatch(self):
        M = DrcParams.zeros(2, 1, 2)
        with pytest.raises(ValueError):
            drc_control(M, np.zeros((3, 2)))
        with pytest.raises(ValueError):
            drc_control(M, np.zeros((2, 3)))

    def test_linearity(self, rng):
        for _ in range(50):
            M1 = DrcParams(rng.standard_normal((3, 2, 4)))
            M2 = DrcParams(rng.standard_normal((3, 2, 4)))
            ys = rng.standard_normal((3, 4))
            a, b = rng.standard_normal(2)
            lhs = drc_control(DrcParams(a * M1.M + b * M2.M), ys)
            rhs = a * drc_control(M1, ys) + b * drc_control(M2, ys)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_matches_explicit_sum(self, rng):
        M = DrcParams(rng.standard_normal((4, 3, 2)))
        ys = rng.standard_normal((4, 2))
        expected = sum(M.M[j] @ ys[j] for j in range(4))
        np.testing.assert_allclose(drc_control(M, ys), expected, rtol=1e-13)


class TestFlatten:
    def test_scalar(self):
        assert np.array_equal(flatten(DrcParams([[[5.0]]])), [5.0])

    def test_round_trip(self, rng):
        M = DrcParams(rng.standard_normal((3, 2, 4)))
        back = unflatten(flatten(M), 3, 2, 4)
        assert np.array_equal(back.M, M.M)

    def test_index_order(self, rng):
        H, du, dy = 3, 2, 4
        M = DrcParams(rng.standard_normal((H, du, dy)))
        v = flatten(M)
        for j in range(H):
            for a in range(du):
                for b in range(dy):
                    assert v[j * du * dy + a * dy + b] == M.M[j, a, b]

    def test_isometry(self, rng):
        for _ in range(20):
            M = DrcParams(rng.standard_normal((5, 3, 2)))
            assert np.linalg.norm(flatten(M)) == pytest.approx(M.fro_norm(), rel=1e-14)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            unflatten(np.zeros(7), 2, 2, 2)

    def test_flatten_copies(self):
        M = DrcParams.zeros(1, 1, 2)
        v = flatten(M)
        v[0] = 1.0
        assert M.M[0, 0, 0] == 0.0

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            DrcParams(np.zeros((2, 2)))


class TestL1OpNorm:
    def test_zero(self):
        assert l1_op_norm(DrcParams.zeros(3, 2, 2)) == 0.0

    def test_scaled_identities(self):
        M = DrcParams(np.stack([np.eye(2), 2 * np.eye(2)]))
        assert l1_op_norm(M) == pytest.approx(3.0, rel=1e-14)

    def test_against_explicit_svd(self, rng):
        M = rng.standard_normal((4, 3, 5))
        expected = sum(np.linalg.svd(b, compute_uv=False)[0] for b in M)
        assert l1_op_norm(DrcParams(M)) == pytest.approx(expected, rel=1e-12)
        assert l1_op_norm(M) == pytest.approx(expected, rel=1e-12)

    def test_bounded_by_sqrt_h_frobenius(self, rng):
        for _ in range(100):
            H = int(rng.integers(1, 8))
            M = DrcParams(rng.standard_normal((H, int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
            assert l1_op_norm(M) <= np.sqrt(H) * M.fro_norm() * (1 + 1e-12)

    def test_frobenius_ball_inside_l1_op_ball(self, rng):
        R = 2.5
        for _ in range(1000):
            H = int(rng.integers(1, 7))
            M = rng.standard_normal((H, 2, 3))
            M *= (R / np.sqrt(H)) * rng.uniform() ** 0.2 / np.linalg.norm(M)
            assert l1_op_norm(M) <= R + 1e-12


class TestCsv:
    def test_round_trip(self, rng):
        M = DrcParams(rng.standard_normal((3, 2, 2)))
        text = M.to_csv()
        assert text.splitlines()[0] == "j,a,b,value"
        assert len(text.splitlines()) == 1 + 12
        assert np.array_equal(DrcParams.from_csv(text).M, M.M)
