"""Parallel-beam acquisition geometry and Joseph-style projectors.

The system matrix is never assembled densely. Ray weights are generated per
view from the geometry; they are either applied on the fly or, by default,
cached once in sparse form so that forward and back projection share the
exact same weights (the back projector is the transpose, not an approximation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

# detector width / volume width at the 91 px over 64 voxel reference setup
DETECTOR_RATIO = 91.0 / 64.0


def _triple(value, name):
    if np.isscalar(value):
        value = (value, value, value)
    out = tuple(float(v) for v in value)
    if len(out) != 3:
        raise ValueError(f"{name} must have three components")
    return out


@dataclass(frozen=True)
class Volume:
    """3D image on a regular grid.

    ``values`` is stored with shape ``(nz, ny, nx)`` so that its C-order
    flattening runs x fastest, then y, then z.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume values must be a non-empty 3D array, got shape {values.shape}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ValueError("voxel spacing must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def zeros(cls, dims, spacing=1.0) -> "Volume":
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx)), spacing)

    @classmethod
    def from_flat(cls, flat, dims, spacing=1.0) -> "Volume":
        nx, ny, nz = (int(d) for d in dims)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != nx * ny * nz:
            raise ValueError(f"expected {nx * ny * nz} values for dims {dims}, got {flat.size}")
        return cls(flat.reshape(nz, ny, nx), spacing)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam views, one detector plane per view.

    Attributes
    ----------
    directions : ndarray, shape (n_views, 3)
        Unit ray directions.
    det_u, det_v : ndarray, shape (n_views, 3)
        Orthonormal in-plane detector basis; ``det_u`` runs along detector
        columns, ``det_v`` along rows.
    detector_rows, detector_cols : int
    detector_pixel_size : float
        Same length unit as the voxel spacing.
    """

    directions: np.ndarray
    det_u: np.ndarray
    det_v: np.ndarray
    detector_rows: int
    detector_cols: int
    detector_pixel_size: float = 1.0

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        u = np.atleast_2d(np.asarray(self.det_u, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.det_v, dtype=np.float64))
        if d.shape[1] != 3 or d.shape != u.shape or d.shape != v.shape or len(d) < 1:
            raise ValueError("directions and detector bases must all have shape (n_views, 3)")
        if self.detector_rows < 1 or self.detector_cols < 1 or self.detector_pixel_size <= 0:
            raise ValueError("detector dimensions and pixel size must be positive")
        tol = 1e-12
        for name, arr in (("direction", d), ("det_u", u), ("det_v", v)):
            if np.max(np.abs(np.linalg.norm(arr, axis=1) - 1.0)) > tol:
                raise ValueError(f"every {name} vector must have unit norm")
        dots = np.abs(np.concatenate([np.sum(d * u, 1), np.sum(d * v, 1), np.sum(u * v, 1)]))
        if dots.max() > tol:
            raise ValueError("detector basis must be orthogonal to the direction and to itself")
        for name, arr in (("directions", d), ("det_u", u), ("det_v", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "detector_rows", int(self.detector_rows))
        object.__setattr__(self, "detector_cols", int(self.detector_cols))
        object.__setattr__(self, "detector_pixel_size", float(self.detector_pixel_size))

    @property
    def n_views(self) -> int:
        return len(self.directions)

    @property
    def pixels_per_view(self) -> int:
        return self.detector_rows * self.detector_cols

    @property
    def n_rays(self) -> int:
        return self.n_views * self.pixels_per_view

    @property
    def sinogram_shape(self) -> tuple:
        return (self.n_views, self.detector_rows, self.detector_cols)

    def key(self) -> tuple:
        """Hashable identity used for projector caching."""
        return (
            self.directions.tobytes(),
            self.det_u.tobytes(),
            self.det_v.tobytes(),
            self.detector_rows,
            self.detector_cols,
            self.detector_pixel_size,
        )


@dataclass(frozen=True)
class Sinogram:
    """Projection data, shape ``(n_views, detector_rows, detector_cols)``."""

    values: np.ndarray
    geometry: ProjectionGeometry = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        shape = self.geometry.sinogram_shape
        if values.size != int(np.prod(shape)):
            raise ValueError(f"sinogram needs {int(np.prod(shape))} values for geometry {shape}, got {values.size}")
        object.__setattr__(self, "values", values.reshape(shape))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def golden_spiral_directions(n: int) -> np.ndarray:
    """Quasi-uniform unit vectors on the upper half sphere.

    Parallel rays along ``d`` and ``-d`` measure the same line integrals, so
    only one hemisphere is covered.
    """
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def detector_basis(direction) -> tuple:
    """Deterministic orthonormal pair spanning the plane orthogonal to ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(d)))] = 1.0
    u = helper - np.dot(helper, d) * d
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    v /= np.linalg.norm(v)
    return u, v


def make_geometry(n_views: int, detector_rows: int, detector_cols: int, detector_pixel_size: float = 1.0) -> ProjectionGeometry:
    """Evenly spread parallel-beam views with a detector centred on the origin."""
    for name, val in (("n_views", n_views), ("detector_rows", detector_rows), ("detector_cols", detector_cols)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val!r}")
    if not detector_pixel_size > 0:
        raise ValueError(f"detector_pixel_size must be positive, got {detector_pixel_size!r}")
    d = golden_spiral_directions(int(n_views))
    bases = [detector_basis(di) for di in d]
    u = np.array([b[0] for b in bases])
    v = np.array([b[1] for b in bases])
    return ProjectionGeometry(d, u, v, int(detector_rows), int(detector_cols), float(detector_pixel_size))


def detector_size_for(n: int) -> int:
    """Detector pixel count covering an ``n``-voxel wide volume at the reference ratio."""
    return max(1, int(round(DETECTOR_RATIO * n)))


def min_pairwise_angle(directions) -> float:
    d = np.asarray(directions, dtype=np.float64)
    if len(d) < 2:
        return math.pi
    cos = np.clip(d @ d.T, -1.0, 1.0)
    np.fill_diagonal(cos, -1.0)
    return float(np.arccos(cos.max()))


class JosephProjector:
    """Ray-driven line integrals with bilinear interpolation.

    For each ray the axis most aligned with the ray is stepped slice by
    slice; within each slice the volume is bilinearly interpolated at the
    ray crossing and weighted by the path length per slice. Samples falling
    outside the grid see zero.

    Parameters
    ----------
    geometry : ProjectionGeometry
    dims : (nx, ny, nz)
    spacing : float or triple
    cache_weights : bool
        Keep all ray weights in a sparse matrix (fast, memory ~ 4 * rays *
        slices). With ``False`` weights are regenerated view by view on every
        call.
    """

    def __init__(self, geometry: ProjectionGeometry, dims, spacing=1.0, cache_weights: bool = True):
        self.geometry = geometry
        self.dims = tuple(int(n) for n in dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"invalid volume dims {dims!r}")
        self.spacing = _triple(spacing, "spacing")
        if min(self.spacing) <= 0:
            raise ValueError("voxel spacing must be strictly positive")
        self.n_voxels = int(np.prod(self.dims))
        self.n_rays = geometry.n_rays
        self.cache_weights = cache_weights
        self._matrix = None
        self._matrix_t = None
        if cache_weights:
            self._build_matrix()

    @property
    def shape(self) -> tuple:
        return (self.n_rays, self.n_voxels)

    def view_weights(self, view: int) -> tuple:
        """Sparse triplets ``(ray, voxel, weight)`` for one view.

        Ray indices are local to the view (column fastest, then row).
        """
        g = self.geometry
        d, u, v = g.directions[view], g.det_u[view], g.det_v[view]
        n = self.dims
        h = self.spacing
        a = int(np.argmax(np.abs(d)))
        b, c = [ax for ax in range(3) if ax != a]

        pix = g.detector_pixel_size
        col_pos = (np.arange(g.detector_cols) - 0.5 * (g.detector_cols - 1)) * pix
        row_pos = (np.arange(g.detector_rows) - 0.5 * (g.detector_rows - 1)) * pix
        rr, cc = np.meshgrid(row_pos, col_pos, indexing="ij")
        origin = rr.reshape(-1, 1) * v + cc.reshape(-1, 1) * u
        n_local = origin.shape[0]

        slices = (np.arange(n[a]) - 0.5 * (n[a] - 1)) * h[a]
        t = (slices[None, :] - origin[:, a, None]) / d[a]
        fb = (origin[:, b, None] + t * d[b]) / h[b] + 0.5 * (n[b] - 1)
        fc = (origin[:, c, None] + t * d[c]) / h[c] + 0.5 * (n[c] - 1)
        ib0 = np.floor(fb).astype(np.int64)
        ic0 = np.floor(fc).astype(np.int64)
        wb1 = fb - ib0
        wc1 = fc - ic0
        step = h[a] / abs(d[a])

        ray = np.broadcast_to(np.arange(n_local)[:, None], t.shape)
        ia = np.broadcast_to(np.arange(n[a])[None, :], t.shape)
        strides = (1, n[0], n[0] * n[1])

        rays, voxels, weights = [], [], []
        for db, wb in ((0, 1.0 - wb1), (1, wb1)):
            for dc, wc in ((0, 1.0 - wc1), (1, wc1)):
                ib = ib0 + db
                ic = ic0 + dc
                w = step * wb * wc
                keep = (ib >= 0) & (ib < n[b]) & (ic >= 0) & (ic < n[c]) & (w != 0.0)
                rays.append(ray[keep])
                voxels.append(ia[keep] * strides[a] + ib[keep] * strides[b] + ic[keep] * strides[c])
                weights.append(w[keep])
        return np.concatenate(rays), np.concatenate(voxels), np.concatenate(weights)

    def _build_matrix(self):
        per_view = self.geometry.pixels_per_view
        rays, voxels, weights = [], [], []
        for k in range(self.geometry.n_views):
            r, vx, w = self.view_weights(k)
            rays.append(r + k * per_view)
            voxels.append(vx)
            weights.append(w)
        mat = sp.csr_matrix(
            (np.concatenate(weights), (np.concatenate(rays), np.concatenate(voxels))),
            shape=self.shape,
        )
        mat.sum_duplicates()
        mat.sort_indices()
        self._matrix = mat
        self._matrix_t = mat.T.tocsr()
        self._matrix_t.sort_indices()

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.n_voxels:
            raise ValueError(f"volume has {x.size} voxels, projector expects {self.n_voxels}")
        if self._matrix is not None:
            return self._matrix @ x
        per_view = self.geometry.pixels_per_view
        out = np.zeros(self.n_rays)
        for k in range(self.geometry.n_views):
            r, vx, w = self.view_weights(k)
            out[k * per_view:(k + 1) * per_view] = np.bincount(r, w * x[vx], minlength=per_view)
        return out

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != self.n_rays:
            raise ValueError(f"sinogram has {y.size} values, projector expects {self.n_rays}")
        if self._matrix_t is not None:
            return self._matrix_t @ y
        per_view = self.geometry.pixels_per_view
        out = np.zeros(self.n_voxels)
        for k in range(self.geometry.n_views):
            r, vx, w = self.view_weights(k)
            out += np.bincount(vx, w * y[k * per_view + r], minlength=self.n_voxels)
        return out

    def norm_estimate(self, n_iter: int = 50, seed: int = 0) -> float:
        """Power-iteration estimate of the largest singular value."""
        x = np.random.default_rng(seed).standard_normal(self.n_voxels)
        x /= np.linalg.norm(x)
        s = 0.0
        for _ in range(n_iter):
            z = self.adjoint(self.forward(x))
            s = np.linalg.norm(z)
            if s == 0:
                return 0.0
            x = z / s
        return math.sqrt(s)


_PROJECTORS: dict = {}
_MAX_CACHED = 8


def get_projector(geometry: ProjectionGeometry, dims, spacing=1.0) -> JosephProjector:
    """Cached projector for a geometry/grid pair."""
    key = (geometry.key(), tuple(int(n) for n in dims), _triple(spacing, "spacing"))
    proj = _PROJECTORS.get(key)
    if proj is None:
        if len(_PROJECTORS) >= _MAX_CACHED:
            _PROJECTORS.pop(next(iter(_PROJECTORS)))
        proj = JosephProjector(geometry, dims, spacing)
        _PROJECTORS[key] = proj
    return proj


def forward_project(x: Volume, g: ProjectionGeometry) -> Sinogram:
    """Line integrals of ``x`` along every detector-pixel ray of ``g``."""
    if not isinstance(x, Volume):
        raise TypeError("forward_project expects a Volume")
    proj = get_projector(g, x.dims, x.spacing)
    return Sinogram(proj.forward(x.flat), g)


def back_project(y: Sinogram, g: ProjectionGeometry, dims, spacing=1.0) -> Volume:
    """Exact adjoint of :func:`forward_project` onto a grid of size ``dims``."""
    if not isinstance(y, Sinogram):
        raise TypeError("back_project expects a Sinogram")
    if y.geometry.sinogram_shape != g.sinogram_shape:
        raise ValueError(f"sinogram shape {y.values.shape} does not match geometry {g.sinogram_shape}")
    proj = get_projector(g, dims, spacing)
    return Volume.from_flat(proj.adjoint(y.flat), dims, spacing)
