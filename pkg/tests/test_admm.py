import numpy as np
import pytest

from mfeit import admm, fem
from mfeit.errors import NumericalError


def small_instance(seed=0, m=12, n=30, l=3):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    B = rng.normal(size=(m, l))
    model = admm.LinearizedModel(A, B)
    state = admm.AdmmState(
        X=rng.normal(size=(n, l)),
        Z=rng.normal(size=(n, l)),
        L1=rng.normal(size=(n, l)),
        L2=rng.normal(size=(m, l)),
    )
    return model, state


def first_step_objective(X, state, model, params):
    # quadratic X subproblem value at X given (Z, L1, L2)
    r = model.A @ X - model.B
    return (
        np.sum(state.L1 * X)
        + 0.5 * params.beta1 * np.sum((state.Z - X) ** 2)
        - np.sum(state.L2 * (model.A @ X))
        + 0.5 * params.beta2 * np.sum(r * r)
    )


class TestLaplacian:
    def test_annihilates_constants(self, grid32):
        L = admm.laplacian(grid32)
        x = np.ones(grid32.n)
        assert np.abs(L @ x).max() == 0.0

    def test_interior_row_stencil(self, grid32):
        L = admm.laplacian(grid32).toarray()
        # pick the pixel at the grid center: all four neighbours masked
        center = grid32.cell_of_point((0.031, 0.031))
        q = int(np.flatnonzero(grid32.flat_index == center)[0])
        row = L[q]
        assert row[q] == 4.0
        assert np.sort(row[row != 0]) [0] == -1.0
        assert (row == -1.0).sum() == 4

    def test_symmetry(self, grid32):
        L = admm.laplacian(grid32)
        assert (L != L.T).nnz == 0


class TestGnInit:
    def test_zero_data(self, smat32, grid32):
        L = admm.laplacian(grid32)
        X0 = admm.gn_init(smat32.entries, np.zeros((104, 4)), 1.0, L)
        assert np.abs(X0).max() == 0.0

    def test_shrinks_with_regularization(self, smat32, grid32):
        L = admm.laplacian(grid32)
        rng = np.random.default_rng(0)
        B = rng.normal(size=(104, 2))
        lam0 = admm.default_gn_lambda(smat32.entries, L)
        norms = [
            np.linalg.norm(admm.gn_init(smat32.entries, B, s * lam0, L))
            for s in (1e-2, 1e-1, 1.0, 10.0)
        ]
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_residual(self, smat32, grid32):
        L = admm.laplacian(grid32).toarray()
        rng = np.random.default_rng(1)
        B = rng.normal(size=(104, 3))
        A = smat32.entries
        lam = admm.default_gn_lambda(A, admm.laplacian(grid32))
        X0 = admm.gn_init(A, B, lam, L)
        H = A.T @ A + lam * (L.T @ L)
        lhs = H @ X0
        rhs = A.T @ B
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)

    def test_rejects_nonpositive_lambda(self, smat32, grid32):
        with pytest.raises(ValueError):
            admm.gn_init(smat32.entries, np.zeros((104, 1)), 0.0, admm.laplacian(grid32))


class TestWeightedL21:
    def test_zero(self):
        assert admm.weighted_l21(np.zeros((5, 3))) == 0.0

    def test_single_row(self):
        assert admm.weighted_l21(np.array([[3.0, 4.0]])) == pytest.approx(5.0)

    def test_weighted_rows(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert admm.weighted_l21(X, w=[2.0, 3.0]) == pytest.approx(5.0)


class TestGradient:
    def test_zero_at_closed_form(self):
        model, state = small_instance()
        params = admm.AdmmParams(beta1=0.7, beta2=1.3)
        state.X = admm.x_update_closed_form(state, model, params)
        G = admm.admm_gradient(state, model, params)
        rhs = params.beta1 * state.Z - state.L1 + params.beta2 * (
            model.A.T @ model.B
        ) + model.A.T @ state.L2
        assert np.linalg.norm(G) <= 1e-8 * np.linalg.norm(rhs)

    def test_zero_state_zero_data(self):
        model, _ = small_instance()
        model = admm.LinearizedModel(model.A, np.zeros_like(model.B))
        m, n, l = model.shape
        state = admm.AdmmState.zeros(m, n, l)
        G = admm.admm_gradient(state, model, admm.AdmmParams())
        assert np.abs(G).max() == 0.0

    def test_matches_finite_difference(self):
        model, state = small_instance(seed=5)
        params = admm.AdmmParams(beta1=0.9, beta2=1.1)
        G = admm.admm_gradient(state, model, params)
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(10):
            i = rng.integers(state.X.shape[0])
            j = rng.integers(state.X.shape[1])
            up = state.X.copy()
            up[i, j] += h
            dn = state.X.copy()
            dn[i, j] -= h
            su = admm.AdmmState(up, state.Z, state.L1, state.L2)
            sd = admm.AdmmState(dn, state.Z, state.L1, state.L2)
            fd = (
                first_step_objective(up, su, model, params)
                - first_step_objective(dn, sd, model, params)
            ) / (2 * h)
            assert abs(fd - G[i, j]) <= 1e-6 * max(1.0, abs(fd))


class TestXUpdates:
    def test_gd_zero_step(self):
        model, state = small_instance()
        params = admm.AdmmParams(eta=0.0)
        assert np.array_equal(admm.x_update_gd(state, model, params), state.X)

    def test_gd_scalar_instance(self):
        b = 3.5
        model = admm.LinearizedModel(np.array([[1.0]]), np.array([[b]]))
        state = admm.AdmmState.zeros(1, 1, 1)
        params = admm.AdmmParams(beta1=1.0, beta2=1.0, eta=0.25)
        X = admm.x_update_gd(state, model, params)
        assert X[0, 0] == pytest.approx(0.25 * 1.0 * b)

    def test_gd_descends(self):
        model, state = small_instance(seed=9)
        params = admm.AdmmParams()
        eta = admm.default_eta(model.A)
        params = admm.AdmmParams(eta=eta)
        before = first_step_objective(state.X, state, model, params)
        X1 = admm.x_update_gd(state, model, params)
        after = first_step_objective(X1, state, model, params)
        assert after <= before

    def test_closed_form_scalar_instance(self):
        model = admm.LinearizedModel(np.array([[2.0]]), np.array([[4.0]]))
        state = admm.AdmmState.zeros(1, 1, 1)
        params = admm.AdmmParams(beta1=1.0, beta2=1.0)
        X = admm.x_update_closed_form(state, model, params)
        assert X[0, 0] == pytest.approx(1.6)

    def test_gd_converges_to_closed_form(self):
        model, state = small_instance(seed=3, m=8, n=12, l=2)
        params = admm.AdmmParams(eta=admm.default_eta(model.A))
        target = admm.x_update_closed_form(state, model, params)
        st = admm.AdmmState(state.X.copy(), state.Z, state.L1, state.L2)
        for _ in range(500):
            st.X = admm.x_update_gd(st, model, params)
        assert np.linalg.norm(st.X - target) <= 1e-4 * np.linalg.norm(target)

    def test_closed_form_size_guard(self):
        n = admm.CLOSED_FORM_SIZE_GUARD + 1
        model = admm.LinearizedModel(np.ones((1, n)), np.ones((1, 1)))
        state = admm.AdmmState.zeros(1, n, 1)
        with pytest.raises(ValueError):
            admm.x_update_closed_form(state, model, admm.AdmmParams())


class TestRowShrink:
    def test_below_threshold_zeroes(self):
        U = np.array([[0.3, 0.4], [0.0, 0.0]])
        Z = admm.row_shrink(U, np.array([1.0, 1.0]))
        assert np.abs(Z).max() == 0.0

    def test_known_value(self):
        Z = admm.row_shrink(np.array([[3.0, 4.0]]), np.array([1.0]))
        assert np.allclose(Z, [[2.4, 3.2]])

    def test_prox_oracle(self):
        # golden-section minimization of 0.5||z-u||^2 + t||z|| along the ray
        rng = np.random.default_rng(4)

        def golden(f, lo, hi, tol=1e-10):
            phi = (np.sqrt(5.0) - 1.0) / 2.0
            a, b = lo, hi
            c = b - phi * (b - a)
            d = a + phi * (b - a)
            while b - a > tol:
                if f(c) < f(d):
                    b, d = d, c
                    c = b - phi * (b - a)
                else:
                    a, c = c, d
                    d = a + phi * (b - a)
            return 0.5 * (a + b)

        for _ in range(50):
            l = int(rng.integers(1, 6))
            u = rng.normal(size=l) * rng.uniform(0.1, 3.0)
            t = rng.uniform(0.0, 2.0)
            norm = np.linalg.norm(u)
            direction = u / norm if norm > 0 else u

            def ray_objective(alpha):
                z = alpha * direction
                return 0.5 * np.sum((z - u) ** 2) + t * abs(alpha)

            alpha = golden(ray_objective, 0.0, norm + 2 * t + 1.0)
            z_oracle = alpha * direction
            z = admm.row_shrink(u[None, :], np.array([t]))[0]
            assert np.abs(z - z_oracle).max() < 1e-6


class TestMultipliers:
    def test_zero_residuals_fixed(self):
        model, state = small_instance(seed=6)
        n, l = state.X.shape
        # make X = Z and B = A X so both residuals vanish
        state.Z = state.X.copy()
        model = admm.LinearizedModel(model.A, model.A @ state.X)
        L1, L2 = admm.multiplier_updates(state, model, admm.AdmmParams())
        assert np.array_equal(L1, state.L1)
        assert np.abs(L2 - state.L2).max() < 1e-12

    def test_gamma_zero_freezes(self):
        model, state = small_instance(seed=7)
        with pytest.raises(ValueError):
            admm.AdmmParams(gamma1=0.0)

    def test_unit_residual_half_step(self):
        model, state = small_instance(seed=8)
        state.Z = state.X - 1.0
        params = admm.AdmmParams(gamma1=0.5, beta1=1.0)
        L1, _ = admm.multiplier_updates(state, model, params)
        assert np.allclose(L1 - state.L1, 0.5)


class TestSolve:
    def test_zero_data_fixed_point(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(10, 25))
        model = admm.LinearizedModel(A, np.zeros((10, 2)))
        _, Z, history = admm.solve(model, admm.AdmmParams(K=20))
        assert np.abs(Z).max() == 0.0
        assert max(history["objective"]) == 0.0

    def test_support_recovery(self):
        rng = np.random.default_rng(12)
        m, n, l = 40, 120, 4
        A = rng.normal(size=(m, n))
        support = rng.choice(n, size=5, replace=False)
        X_true = np.zeros((n, l))
        X_true[support] = rng.normal(size=(5, l)) + np.sign(
            rng.normal(size=(5, l))
        )
        B = A @ X_true
        model = admm.LinearizedModel(A, B)
        _, Z, history = admm.solve(model, admm.AdmmParams(K=300), x_update="closed_form")
        top5 = set(np.argsort(np.linalg.norm(Z, axis=1))[-5:])
        assert top5 == set(support)
        rel = np.linalg.norm(Z - X_true) / np.linalg.norm(X_true)
        assert rel < 1e-2
        # data residual collapses on the noiseless instance
        assert history["data_residual"][99] < 0.01 * history["data_residual"][0]

    def test_history_tracks_rmse(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(8, 20))
        X_true = np.zeros((20, 2))
        B = A @ X_true
        model = admm.LinearizedModel(A, B)
        _, _, history = admm.solve(model, admm.AdmmParams(K=5), x_true=X_true)
        assert len(history["rmse"]) == 5
        assert history["rmse"][-1] == 0.0

    def test_shapes_and_finiteness(self):
        model, _ = small_instance(seed=10)
        m, n, l = model.shape
        X, Z, _ = admm.solve(model, admm.AdmmParams(K=10), x_update="gd")
        assert X.shape == (n, l) and Z.shape == (n, l)
        assert np.all(np.isfinite(X)) and np.all(np.isfinite(Z))

    def test_divergence_guard(self):
        model, _ = small_instance(seed=11)
        params = admm.AdmmParams(eta=1e6)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalError):
                admm.solve(model, params, x_update="gd")

    def test_gn_init_requires_laplacian(self):
        model, _ = small_instance()
        with pytest.raises(ValueError):
            admm.solve(model, admm.AdmmParams(K=1), init="gn")
