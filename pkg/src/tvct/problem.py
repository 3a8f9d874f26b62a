"""Nonnegativity-constrained TV least-squares objective.

Solvers only rely on the small duck-typed interface shared by
:class:`TVProblem` and :class:`QuadraticProblem`:

``evaluate(x) -> (value, state)``
    objective value plus an opaque state that makes a following
    ``gradient(x, state)`` cheaper (the residual ``Ax - b`` for TV problems);
``gradient(x, state=None)``, ``value(x)``, ``value_and_gradient(x)``;
``project(x)`` onto the feasible set; ``size`` (number of unknowns).

All iterates are flat float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import JosephProjector, ProjectionGeometry, Sinogram, Volume, get_projector
from .regularizer import TVConfig, tv_gradient, tv_value


def _flat(x) -> np.ndarray:
    if isinstance(x, Volume):
        return x.flat
    return np.asarray(x, dtype=np.float64).reshape(-1)


def project_feasible(x):
    """Projection onto the nonnegative orthant."""
    if isinstance(x, Volume):
        return Volume(np.maximum(x.values, 0.0), x.spacing)
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


class TVProblem:
    """``1/2 ||A x - b||^2 + alpha * TV_tau(x)`` over ``x >= 0``.

    Parameters
    ----------
    geometry : ProjectionGeometry
    b : Sinogram or array
        Measured projections, ordered as the geometry's rays.
    dims : (nx, ny, nz)
    alpha : float
        TV weight, > 0.
    tv : TVConfig
        Smoothing threshold must be > 0.
    spacing : float or triple
    projector : JosephProjector, optional
        Reuse an existing projector instead of the shared cache.
    """

    def __init__(self, geometry: ProjectionGeometry, b, dims, alpha: float, tv: TVConfig = TVConfig(), spacing=1.0,
                 projector: JosephProjector | None = None):
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha!r}")
        if not tv.tau > 0:
            raise ValueError("the TV smoothing threshold tau must be positive")
        self.geometry = geometry
        self.dims = tuple(int(n) for n in dims)
        self.spacing = spacing
        self.alpha = float(alpha)
        self.tv = tv
        self.A = projector if projector is not None else get_projector(geometry, self.dims, spacing)
        b = b.flat if isinstance(b, Sinogram) else np.asarray(b, dtype=np.float64).reshape(-1)
        if b.size != self.A.n_rays:
            raise ValueError(f"data has {b.size} values, geometry has {self.A.n_rays} rays")
        if not np.all(np.isfinite(b)):
            raise ValueError("projection data must be finite")
        self.b = b.copy()
        self.b.setflags(write=False)

    @property
    def size(self) -> int:
        return self.A.n_voxels

    @property
    def shape3(self) -> tuple:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def _check(self, x) -> np.ndarray:
        x = _flat(x)
        if x.size != self.size:
            raise ValueError(f"iterate has {x.size} voxels, problem grid has {self.size}")
        return x

    def evaluate(self, x):
        x = self._check(x)
        r = self.A.forward(x) - self.b
        f = 0.5 * float(r @ r) + self.alpha * tv_value(x.reshape(self.shape3), self.tv)
        return f, r

    def gradient(self, x, state=None) -> np.ndarray:
        x = self._check(x)
        r = state if state is not None else self.A.forward(x) - self.b
        g = self.A.adjoint(r)
        g += self.alpha * tv_gradient(x.reshape(self.shape3), self.tv).reshape(-1)
        return g

    def value(self, x) -> float:
        return self.evaluate(x)[0]

    def value_and_gradient(self, x):
        f, r = self.evaluate(x)
        return f, self.gradient(x, r)

    def project(self, x) -> np.ndarray:
        return np.maximum(x, 0.0)

    def to_volume(self, x) -> Volume:
        return Volume.from_flat(self._check(x), self.dims, self.spacing)


class QuadraticProblem:
    """``1/2 x'Hx - c'x + const``, optionally over ``x >= 0``.

    Handy for checks against known curvature bounds: for symmetric positive
    semidefinite ``H`` the strong-convexity and Lipschitz constants are its
    extreme eigenvalues.
    """

    def __init__(self, H, c, const: float = 0.0, nonnegative: bool = True):
        self.H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)
        if self.H.shape != (self.c.size, self.c.size):
            raise ValueError("H must be square and match c")
        self.const = float(const)
        self.nonnegative = nonnegative

    @property
    def size(self) -> int:
        return self.c.size

    def evaluate(self, x):
        x = _flat(x)
        Hx = self.H @ x
        return 0.5 * float(x @ Hx) - float(self.c @ x) + self.const, Hx

    def gradient(self, x, state=None) -> np.ndarray:
        x = _flat(x)
        Hx = state if state is not None else self.H @ x
        return Hx - self.c

    def value(self, x) -> float:
        return self.evaluate(x)[0]

    def value_and_gradient(self, x):
        f, Hx = self.evaluate(x)
        return f, self.gradient(x, Hx)

    def project(self, x) -> np.ndarray:
        return np.maximum(x, 0.0) if self.nonnegative else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class GradientMapResult:
    point: np.ndarray
    gmap: np.ndarray
    norm_scaled: float


def objective_value(p, x) -> float:
    return p.value(_flat(x))


def objective_gradient(p, x):
    g = p.gradient(_flat(x))
    if isinstance(x, Volume):
        return Volume.from_flat(g, x.dims, x.spacing)
    return g


def gradient_map(p, x, nu: float, grad=None) -> GradientMapResult:
    """``nu * (x - P(x - grad/nu))`` and its norm divided by the number of unknowns."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu!r}")
    x = _flat(x)
    g = p.gradient(x) if grad is None else grad
    point = p.project(x - g / nu)
    gmap = nu * (x - point)
    return GradientMapResult(point, gmap, float(np.linalg.norm(gmap)) / x.size)


def stop_check(p, x, nu: float, eps: float, grad=None) -> bool:
    return gradient_map(p, x, nu, grad).norm_scaled <= eps


def estimate_dynamic_range(projector: JosephProjector, b) -> float:
    """Rough upper bound on the image intensity from the data alone.

    Each ray sum divided by the ray's path length through the grid is a mean
    intensity along that ray; rays that only graze the grid are skipped.
    """
    b = b.flat if isinstance(b, Sinogram) else np.asarray(b, dtype=np.float64).reshape(-1)
    length = projector.forward(np.ones(projector.n_voxels))
    if length.max() <= 0:
        return 0.0
    good = length >= 0.5 * length.max()
    return float(np.max(np.abs(b[good]) / length[good]))


def default_tau(projector: JosephProjector, b, rel: float = 1e-4) -> float:
    r = estimate_dynamic_range(projector, b)
    return rel * r if r > 0 else rel
