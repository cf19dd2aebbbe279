"""Observable dictionaries, lifting, projection, and gradients."""

import numpy as np
import pytest

from koopmanmpc.lifting import (Dictionary, Observable, identity_dictionary,
                                make_dictionary, monomial_dictionary,
                                quad27_dictionary)


class TestQuad27:
    def test_dimension_and_name(self):
        dic = quad27_dictionary()
        assert dic.dim == 27
        assert dic.name == "quad27"
        assert dic.state_dim == 6

    def test_constant_first(self):
        dic = quad27_dictionary()
        assert dic.observables[0].name == "1"
        rng = np.random.default_rng(0)
        X = rng.standard_normal((6, 5))
        assert np.allclose(dic.lift_cols(X)[0], 1.0)

    def test_projection_recovers_state(self):
        dic = quad27_dictionary()
        rng = np.random.default_rng(1)
        for _ in range(5):
            x = rng.standard_normal(6)
            assert np.allclose(dic.project(dic.lift(x)), x)

    def test_lift_at_origin(self):
        z = quad27_dictionary().lift(np.zeros(6))
        # constant and cos-family observables are 1, everything else 0
        names = [o.name for o in quad27_dictionary().observables]
        expected = np.array([1.0 if n in ("1", "cos(theta)") else 0.0
                             for n in names])
        assert np.allclose(z, expected)

    def test_lift_cols_matches_lift(self):
        dic = quad27_dictionary()
        rng = np.random.default_rng(2)
        X = rng.standard_normal((6, 7))
        Z = dic.lift_cols(X)
        for j in range(7):
            assert np.allclose(Z[:, j], dic.lift(X[:, j]))

    def test_gradients_match_finite_differences(self):
        dic = quad27_dictionary()
        rng = np.random.default_rng(3)
        x = rng.standard_normal(6)
        G = dic.gradient(x)
        h = 1e-7
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            fd = (dic.lift(x + e) - dic.lift(x - e)) / (2 * h)
            assert np.allclose(G[:, i], fd, atol=1e-6)

    def test_trig_identities(self):
        dic = quad27_dictionary()
        names = [o.name for o in dic.observables]
        i_sin = names.index("sin(theta)")
        i_cos = names.index("cos(theta)")
        i_sc = names.index("sin(theta)*cos(theta)")
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.standard_normal(6)
            z = dic.lift(x)
            assert z[i_sin] ** 2 + z[i_cos] ** 2 == pytest.approx(1.0)
            assert z[i_sc] == pytest.approx(z[i_sin] * z[i_cos])


class TestInputAugmentedLifting:
    def test_block_structure(self):
        dic = quad27_dictionary()
        rng = np.random.default_rng(5)
        x = rng.standard_normal(6)
        u = rng.standard_normal(2)
        zu = dic.lift_with_input(x, u)
        z = dic.lift(x)
        assert zu.shape == (27 * 3,)
        assert np.allclose(zu[:27], z)
        assert np.allclose(zu[27:54], z * u[0])
        assert np.allclose(zu[54:], z * u[1])

    def test_columnwise_matches_single(self):
        dic = quad27_dictionary()
        rng = np.random.default_rng(6)
        X = rng.standard_normal((6, 4))
        U = rng.standard_normal((2, 4))
        Zu = dic.lift_with_input_cols(X, U)
        for j in range(4):
            assert np.allclose(Zu[:, j], dic.lift_with_input(X[:, j], U[:, j]))


class TestIdentityDictionary:
    def test_is_identity(self):
        dic = identity_dictionary(4)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(4)
        assert np.allclose(dic.lift(x), x)
        assert np.allclose(dic.Cx, np.eye(4))

    def test_no_constant_required(self):
        dic = identity_dictionary(3)
        assert dic.dim == 3


class TestMonomialDictionary:
    def test_degree_two_size(self):
        # 1 + d + d(d+1)/2 observables for degree 2
        dic = monomial_dictionary(3, 2)
        assert dic.dim == 1 + 3 + 6

    def test_projection_exact(self):
        dic = monomial_dictionary(3, 2)
        rng = np.random.default_rng(8)
        x = rng.standard_normal(3)
        assert np.allclose(dic.project(dic.lift(x)), x)

    def test_values(self):
        dic = monomial_dictionary(2, 2)
        z = dic.lift(np.array([2.0, 3.0]))
        # ordering: 1, x0, x1, x0^2, x0*x1, x1^2
        assert np.allclose(z, [1, 2, 3, 4, 6, 9])

    def test_gradients(self):
        dic = monomial_dictionary(2, 3)
        x = np.array([0.7, -1.2])
        G = dic.gradient(x)
        h = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (dic.lift(x + e) - dic.lift(x - e)) / (2 * h)
            assert np.allclose(G[:, i], fd, atol=1e-6)


class TestMakeDictionary:
    def test_by_name(self):
        assert make_dictionary("quad27").dim == 27
        assert make_dictionary("identity", 4).dim == 4
        assert make_dictionary("monomials(2)", 3).dim == 10

    def test_unknown_rejected(self):
        with pytest.raises(ValueError):
            make_dictionary("fourier")

    def test_quad27_requires_6d(self):
        with pytest.raises(ValueError):
            make_dictionary("quad27", 4)


class TestDictionaryValidation:
    def test_too_small_rejected(self):
        obs = [Observable("1", lambda X: np.ones(X.shape[1]),
                          lambda x: np.zeros(2))]
        with pytest.raises(ValueError):
            Dictionary("tiny", 2, obs)

    def test_constant_must_come_first(self):
        def coord(X):
            return X[0].copy()
        obs = [Observable("x0", coord, lambda x: np.array([1.0, 0.0]))] * 4
        with pytest.raises(ValueError):
            Dictionary("noconst", 2, obs)

    def test_fit_projection(self):
        # dictionary without direct state slots learns Cx by least squares
        obs = [Observable("1", lambda X: np.ones(X.shape[1]),
                          lambda x: np.zeros(2)),
               Observable("2x0", lambda X: 2 * X[0], lambda x: np.array([2.0, 0.0])),
               Observable("3x1", lambda X: 3 * X[1], lambda x: np.array([0.0, 3.0]))]
        dic = Dictionary("scaled", 2, obs)
        rng = np.random.default_rng(9)
        X = rng.standard_normal((2, 50))
        dic.fit_projection(X)
        x = rng.standard_normal(2)
        assert np.allclose(dic.project(dic.lift(x)), x, atol=1e-10)
