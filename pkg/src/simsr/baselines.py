"""Classical per-frame baselines: barycentric (embedded) interpolation,
Gaussian RBF interpolation, and moving-least-squares reconstruction.

Both scattered-data methods measure proximity by geodesic distance over the
rest surface graph, with lattice vertices placed at their assigned surface
vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .meshes import apply_embedding


class BaselineError(RuntimeError):
    pass


def embedded_predict(embedding, lr_disp):
    """The floor baseline: barycentric interpolation of lattice displacements."""
    return apply_embedding(embedding, lr_disp)


def default_sigma(center_dists):
    """Median nearest-neighbor geodesic spacing among the mapped centers."""
    d = np.asarray(center_dists, dtype=np.float64).copy()
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


# ---------------------------------------------------------------------------
# Gaussian radial basis interpolation

@dataclass
class RbfModel:
    """Per-frame fitted weights for a shared RBF system."""

    weights: np.ndarray  # (N, 3)
    sigma: float


class RbfBaseline:
    """Shared rest-pose context: kernel matrices and their factorization.

    The collocation matrix depends only on geometry and sigma, so it is
    factored once and reused for every frame.
    """

    RESIDUAL_TOL = 1e-8
    MAX_REFINE = 8

    def __init__(self, center_dists, eval_dists, sigma=None):
        center_dists = np.asarray(center_dists, dtype=np.float64)
        n = center_dists.shape[0]
        if center_dists.shape != (n, n):
            raise BaselineError(f"center distance matrix must be square, got {center_dists.shape}")
        if eval_dists.shape[0] != n:
            raise BaselineError(
                f"evaluation distances have {eval_dists.shape[0]} rows, expected {n}"
            )
        self.sigma = float(sigma) if sigma is not None else default_sigma(center_dists)
        if self.sigma <= 0:
            raise BaselineError(f"kernel width must be positive, got {self.sigma}")
        self.phi = np.exp(-(center_dists**2) / self.sigma**2)
        self.phi_eval = np.exp(-(np.asarray(eval_dists, dtype=np.float64) ** 2) / self.sigma**2)
        try:
            self._lu = lu_factor(self.phi)
        except np.linalg.LinAlgError as exc:
            raise BaselineError("singular RBF collocation matrix") from exc

    def fit(self, lr_disp):
        """Solve phi @ W = lr_disp, refining until the residual is tiny."""
        rhs = np.asarray(lr_disp, dtype=np.float64)
        w = lu_solve(self._lu, rhs)
        for _ in range(self.MAX_REFINE):
            residual = rhs - self.phi @ w
            err = np.abs(residual).max() if residual.size else 0.0
            if err < self.RESIDUAL_TOL:
                break
            w = w + lu_solve(self._lu, residual)
        else:
            cond = np.linalg.cond(self.phi)
            raise BaselineError(
                f"RBF system failed to reach residual {self.RESIDUAL_TOL:g} "
                f"(reached {err:.3e}); condition estimate {cond:.3e}"
            )
        return RbfModel(w, self.sigma)

    def predict(self, model):
        """Evaluate the fitted field at every surface vertex."""
        return self.phi_eval.T @ model.weights


# ---------------------------------------------------------------------------
# moving least squares

@dataclass(frozen=True)
class MlsConfig:
    degree: int = 2
    sigma: float | None = None     # None = median center spacing
    trivariate: bool = False       # full 3-coordinate polynomial basis

    def __post_init__(self):
        if self.degree < 0:
            raise BaselineError(f"polynomial degree must be >= 0, got {self.degree}")
        if self.sigma is not None and self.sigma <= 0:
            raise BaselineError(f"kernel width must be positive, got {self.sigma}")


COND_LIMIT = 1e12
RIDGE = 1e-9


def _monomial_powers(degree):
    """Exponent triples for the trivariate basis, total degree <= degree."""
    powers = []
    for total in range(degree + 1):
        for i in range(total, -1, -1):
            for j in range(total - i, -1, -1):
                powers.append((i, j, total - i - j))
    return powers


def _solve_weighted(basis, theta, rhs):
    """Batched weighted normal equations; returns the constant coefficient.

    basis: (B, k, t), theta: (B, k), rhs: (B, k). Ill-conditioned systems are
    ridge-regularized.
    """
    bt = basis * theta[:, :, None]
    normal = np.einsum("bkt,bks->bts", bt, basis)
    moment = np.einsum("bkt,bk->bt", bt, rhs)
    cond = np.linalg.cond(normal)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if bad.any():
        t = normal.shape[1]
        normal[bad] += RIDGE * np.eye(t)
    coeff = np.linalg.solve(normal, moment[:, :, None])
    return coeff[:, 0, 0]


def mls_reconstruct(lattice_rest, lr_disp, surface_rest, table, config=MlsConfig()):
    """Per-vertex weighted polynomial fit of the lattice displacements.

    For surface vertex j, the fit runs over its geodesic neighbor set from
    the table, Gaussian-weighted by the tabulated distances, with the basis
    re-centered at the vertex so the prediction is the constant coefficient.
    The default basis is univariate in the predicted component's own
    coordinate, degree 2; trivariate mode uses the full 3D monomial basis.
    """
    lattice_rest = np.asarray(lattice_rest, dtype=np.float64)
    surface_rest = np.asarray(surface_rest, dtype=np.float64)
    lr_disp = np.asarray(lr_disp, dtype=np.float64)
    k = table.k
    terms = (
        len(_monomial_powers(config.degree)) if config.trivariate else config.degree + 1
    )
    if k < terms:
        raise BaselineError(f"{k} neighbors cannot support a {terms}-term basis")

    sigma = config.sigma
    if sigma is None:
        d = np.asarray(table.distances)
        spacing = d[:, 1] if k > 1 else d[:, 0]
        sigma = float(np.median(spacing[spacing > 0])) if (spacing > 0).any() else 1.0
    theta = np.exp(-(np.asarray(table.distances) ** 2) / sigma**2)  # (M, k)

    nbr_pos = lattice_rest[table.indices]   # (M, k, 3)
    nbr_disp = lr_disp[table.indices]       # (M, k, 3)
    m = len(surface_rest)
    out = np.empty((m, 3))

    if config.trivariate:
        delta = nbr_pos - surface_rest[:, None, :]  # (M, k, 3)
        powers = np.array(_monomial_powers(config.degree))  # (t, 3)
        basis = np.prod(delta[:, :, None, :] ** powers[None, None, :, :], axis=3)
        for c in range(3):
            out[:, c] = _solve_weighted(basis, theta, nbr_disp[:, :, c])
    else:
        for c in range(3):
            delta = nbr_pos[:, :, c] - surface_rest[:, None, c]  # (M, k)
            basis = delta[:, :, None] ** np.arange(config.degree + 1)
            out[:, c] = _solve_weighted(basis, theta, nbr_disp[:, :, c])
    return out
