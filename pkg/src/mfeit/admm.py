"""Classical MMV reconstruction: one-step Gauss-Newton initialization and
weighted l2,1 ADMM with row-wise shrinkage.

The update cycle per iteration is
    X  <- X - eta * G              (or the closed-form quadratic minimizer)
    Z  <- shrink(X + L1/beta1, w/beta1)
    L1 <- L1 + gamma1*beta1*(X - Z)
    L2 <- L2 + gamma2*beta2*(B - A X)
with G the gradient of the quadratic X subproblem.  Both X updates are
provided; the closed-form one factors (beta1 I + beta2 AtA) once per solve.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from mfeit.errors import NumericalError

CLOSED_FORM_SIZE_GUARD = 4096


@dataclass
class LinearizedModel:
    """Sensitivity map paired with a normalized measurement frame."""

    A: np.ndarray  # (m, n)
    B: np.ndarray  # (m, l)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise ValueError("A and B must be 2-D")
        if self.A.shape[0] != self.B.shape[0]:
            raise ValueError(
                f"A has {self.A.shape[0]} rows but B has {self.B.shape[0]}"
            )
        if not np.all(np.isfinite(self.A)):
            raise ValueError("A contains non-finite entries")

    @property
    def shape(self):
        m, n = self.A.shape
        return m, n, self.B.shape[1]


@dataclass
class AdmmParams:
    beta1: float = 1.0
    beta2: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    eta: float = None
    w: np.ndarray = None  # per-row weights, default all-ones
    K: int = 100

    def __post_init__(self):
        for name in ("beta1", "beta2", "gamma1", "gamma2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.K < 1:
            raise ValueError("iteration budget K must be >= 1")
        if self.w is not None:
            self.w = np.asarray(self.w, dtype=float)
            if np.any(self.w <= 0):
                raise ValueError("row weights must be positive")

    def weights(self, n):
        if self.w is None:
            return np.ones(n)
        if self.w.shape != (n,):
            raise ValueError(f"w has shape {self.w.shape}, expected ({n},)")
        return self.w


@dataclass
class AdmmState:
    X: np.ndarray
    Z: np.ndarray
    L1: np.ndarray
    L2: np.ndarray

    @classmethod
    def zeros(cls, m, n, l):
        return cls(
            X=np.zeros((n, l)),
            Z=np.zeros((n, l)),
            L1=np.zeros((n, l)),
            L2=np.zeros((m, l)),
        )


def laplacian(grid):
    """5-point Laplacian on the masked pixels, Neumann style: neighbours
    outside the mask are dropped and the diagonal reduced accordingly."""
    H, W = grid.H, grid.W
    lookup = np.full(H * W, -1, dtype=np.int64)
    lookup[grid.flat_index] = np.arange(grid.n)
    rows, cols, vals = [], [], []
    deg = np.zeros(grid.n)
    for q, flat in enumerate(grid.flat_index):
        i, j = divmod(int(flat), W)
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ii, jj = i + di, j + dj
            if 0 <= ii < H and 0 <= jj < W:
                r = lookup[ii * W + jj]
                if r >= 0:
                    rows.append(q)
                    cols.append(int(r))
                    vals.append(-1.0)
                    deg[q] += 1.0
    rows.extend(range(grid.n))
    cols.extend(range(grid.n))
    vals.extend(deg)
    return sp.coo_matrix((vals, (rows, cols)), shape=(grid.n, grid.n)).tocsr()


def default_gn_lambda(A, L):
    """1e-2 * trace(AtA) / trace(LtL); a scale-free starting point."""
    tr_a = float(np.sum(A * A))
    tr_l = float(np.sum(L.multiply(L).sum())) if sp.issparse(L) else float(np.sum(L * L))
    return 1e-2 * tr_a / tr_l


def gn_init(A, B, lam, L):
    """One-step regularized Gauss-Newton image: solves
    (AtA + lam LtL) X0 = At B column-by-column via a Cholesky factorization."""
    if lam <= 0:
        raise ValueError("regularization weight must be positive")
    A = np.asarray(A, dtype=float)
    Ld = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
    H = A.T @ A + lam * (Ld.T @ Ld)
    try:
        factor = sla.cho_factor(H, lower=True)
    except sla.LinAlgError as exc:
        raise NumericalError(f"Gauss-Newton system is not SPD: {exc}") from exc
    return sla.cho_solve(factor, A.T @ np.asarray(B, dtype=float))


def weighted_l21(X, w=None):
    """Sum over rows of w_i * ||row_i||_2."""
    norms = np.linalg.norm(np.atleast_2d(X), axis=1)
    if w is None:
        return float(norms.sum())
    return float(np.dot(np.asarray(w, dtype=float), norms))


def spectral_norm_est(A, iters=50):
    """Deterministic power iteration estimate of ||A||_2."""
    n = A.shape[1]
    v = np.ones(n) / np.sqrt(n)
    for _ in range(iters):
        u = A @ v
        v = A.T @ u
        nrm = np.linalg.norm(v)
        if nrm == 0:
            return 0.0
        v /= nrm
    return float(np.linalg.norm(A @ v))


def default_eta(A, beta1=1.0, beta2=1.0):
    s = spectral_norm_est(A)
    return 1.0 / (beta1 + beta2 * s * s)


def admm_gradient(state, model, params):
    """Gradient of the quadratic X subproblem at the current state; the
    normal-equations product is never materialized."""
    A, B = model.A, model.B
    rhs = (
        params.beta1 * state.Z
        - state.L1
        + params.beta2 * (A.T @ B)
        + A.T @ state.L2
    )
    return params.beta1 * state.X + params.beta2 * (A.T @ (A @ state.X)) - rhs


def x_update_gd(state, model, params):
    eta = params.eta if params.eta is not None else default_eta(
        model.A, params.beta1, params.beta2
    )
    return state.X - eta * admm_gradient(state, model, params)


class _ClosedFormUpdater:
    """Cholesky factorization of (beta1 I + beta2 AtA), shared across
    iterations of one solve."""

    def __init__(self, A, beta1, beta2):
        n = A.shape[1]
        if n > CLOSED_FORM_SIZE_GUARD:
            raise ValueError(
                f"closed-form X update refused for n={n} > {CLOSED_FORM_SIZE_GUARD}"
            )
        H = beta2 * (A.T @ A)
        H[np.diag_indices(n)] += beta1
        self._factor = sla.cho_factor(H, lower=True)
        self._beta1 = beta1
        self._beta2 = beta2

    def update(self, state, model):
        rhs = (
            self._beta1 * state.Z
            - state.L1
            + self._beta2 * (model.A.T @ model.B)
            + model.A.T @ state.L2
        )
        return sla.cho_solve(self._factor, rhs)


def x_update_closed_form(state, model, params):
    return _ClosedFormUpdater(model.A, params.beta1, params.beta2).update(
        state, model
    )


def row_shrink(U, t):
    """Row-wise shrinkage: row_i scaled by max(||row_i|| - t_i, 0)/||row_i||,
    zero rows stay zero."""
    U = np.atleast_2d(U)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("shrinkage thresholds must be nonnegative")
    norms = np.linalg.norm(U, axis=1)
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = np.maximum(norms[nz] - np.broadcast_to(t, norms.shape)[nz], 0.0)
    scale[nz] /= norms[nz]
    return U * scale[:, None]


def multiplier_updates(state, model, params):
    L1 = state.L1 + params.gamma1 * params.beta1 * (state.X - state.Z)
    L2 = state.L2 + params.gamma2 * params.beta2 * (
        model.B - model.A @ state.X
    )
    return L1, L2


def solve(
    model,
    params,
    x_update="closed_form",
    init="auto",
    laplace=None,
    gn_lambda=None,
    x_true=None,
):
    """Run K iterations of the four-step cycle; Z is the image estimate.

    init "gn" needs a Laplacian (from the pixel grid); "auto" picks "gn"
    when one is supplied and "zeros" otherwise.  When x_true is given the
    history also tracks the per-iteration RMSE of Z against it.
    """
    m, n, l = model.shape
    w = params.weights(n)
    if init == "auto":
        init = "gn" if laplace is not None else "zeros"
    state = AdmmState.zeros(m, n, l)
    if init == "gn":
        if laplace is None:
            raise ValueError("Gauss-Newton init needs the Laplacian")
        lam = gn_lambda if gn_lambda is not None else default_gn_lambda(
            model.A, laplace
        )
        state.X = gn_init(model.A, model.B, lam, laplace)
    elif init != "zeros":
        raise ValueError(f"unknown init mode {init!r}")

    if x_update == "closed_form":
        updater = _ClosedFormUpdater(model.A, params.beta1, params.beta2)
        step = lambda st: updater.update(st, model)
    elif x_update == "gd":
        eta = params.eta if params.eta is not None else default_eta(
            model.A, params.beta1, params.beta2
        )
        gd_params = AdmmParams(
            beta1=params.beta1,
            beta2=params.beta2,
            gamma1=params.gamma1,
            gamma2=params.gamma2,
            eta=eta,
            w=params.w,
            K=params.K,
        )
        step = lambda st: x_update_gd(st, model, gd_params)
    else:
        raise ValueError(f"unknown x_update mode {x_update!r}")

    history = {
        "iteration": [],
        "primal_residual": [],
        "data_residual": [],
        "objective": [],
    }
    if x_true is not None:
        history["rmse"] = []

    thresholds = w / params.beta1
    for k in range(1, params.K + 1):
        state.X = step(state)
        state.Z = row_shrink(state.X + state.L1 / params.beta1, thresholds)
        state.L1, state.L2 = multiplier_updates(state, model, params)
        if not (
            np.all(np.isfinite(state.X)) and np.all(np.isfinite(state.Z))
        ):
            raise NumericalError(f"ADMM iterate diverged at iteration {k}")
        history["iteration"].append(k)
        history["primal_residual"].append(
            float(np.linalg.norm(state.X - state.Z))
        )
        history["data_residual"].append(
            float(np.linalg.norm(model.A @ state.X - model.B))
        )
        history["objective"].append(weighted_l21(state.Z, w))
        if x_true is not None:
            err = state.Z - x_true
            history["rmse"].append(float(np.sqrt(np.mean(err * err))))
    return state.X, state.Z, history
