"""Phantoms, measurement noise, and on-disk formats.

Volume/sinogram files are a short ASCII header followed by raw float64
samples::

    TVTOMO1
    kind: volume
    dims: 16 16 16
    spacing: 1.0 1.0 1.0
    dtype: f64
    endianness: little
    <further key: value lines>
    <blank line>
    <payload>

Payload order is x fastest, then y, then z for volumes and detector column
fastest, then row, then view for sinograms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import ProjectionGeometry, Sinogram, Volume, make_geometry
from .solvers import ConvergenceRecord

MAGIC = "TVTOMO1"
RNG_ID = "numpy-PCG64-standard_normal"
MAX_ELEMENTS = 2**34
HISTORY_COLUMNS = ("iter", "objective", "gradmap_norm_scaled", "step_or_Linv", "mu_k", "L_k", "line_search_count")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    intensity: float
    rotation: tuple = (0.0, 0.0, 0.0)  # intrinsic z-y-x Euler angles, radians

    def __post_init__(self):
        if len(self.center) != 3 or len(self.semi_axes) != 3 or len(self.rotation) != 3:
            raise ValueError("center, semi_axes and rotation need three components each")
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")

    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("ZYX", self.rotation).as_matrix()

    def contains(self, points) -> np.ndarray:
        """Membership of points (``(..., 3)``, normalized xyz coordinates)."""
        local = (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) @ self.matrix()
        return np.sum((local / np.asarray(self.semi_axes)) ** 2, axis=-1) <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    ellipsoids: tuple

    def __post_init__(self):
        if len(self.ellipsoids) < 1:
            raise ValueError("a phantom needs at least one ellipsoid")


def head_phantom() -> PhantomSpec:
    """Head-like ellipsoid phantom: a 1.10 shell around 1.05 soft tissue with
    low-contrast inserts between 1.04 and 1.07."""
    e = Ellipsoid
    return PhantomSpec((
        e((0.0, 0.0, 0.0), (0.72, 0.90, 0.82), 1.10),
        e((0.0, 0.0, 0.0), (0.66, 0.84, 0.76), -0.05),
        e((-0.22, 0.10, 0.05), (0.12, 0.24, 0.16), -0.01, (0.3, 0.0, 0.0)),
        e((0.22, 0.10, 0.05), (0.12, 0.24, 0.16), -0.01, (-0.3, 0.0, 0.0)),
        e((0.0, -0.45, -0.10), (0.16, 0.12, 0.14), 0.02),
        e((0.0, 0.40, 0.20), (0.10, 0.10, 0.10), 0.01),
        e((0.25, -0.25, -0.30), (0.08, 0.08, 0.12), 0.015, (0.0, 0.4, 0.0)),
        e((-0.25, -0.25, 0.35), (0.07, 0.07, 0.07), 0.02),
    ))


def voxel_centers(dims) -> np.ndarray:
    """Normalized ``[-1, 1]`` voxel-centre coordinates, shape ``(nz, ny, nx, 3)`` holding xyz."""
    nx, ny, nz = dims
    ax = [(2.0 * np.arange(n) + 1.0) / n - 1.0 for n in (nx, ny, nz)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def generate_phantom(dims, spec: PhantomSpec | None = None, spacing=1.0) -> Volume:
    """Sum of ellipsoid intensities at each voxel centre."""
    spec = head_phantom() if spec is None else spec
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"invalid dims {dims!r}")
    pts = voxel_centers(dims)
    values = np.zeros(pts.shape[:3])
    for ell in spec.ellipsoids:
        values[ell.contains(pts)] += ell.intensity
    return Volume(values, spacing)


# ------------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseSpec:
    relative_level: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.relative_level >= 0:
            raise ValueError("relative noise level must be nonnegative")


def add_noise(s, n: NoiseSpec):
    """White Gaussian noise rescaled so that ``||e|| / ||s||`` equals the requested level.

    Accepts a :class:`Sinogram` or a plain array and returns the same kind.
    """
    values = s.values if isinstance(s, Sinogram) else np.asarray(s, dtype=np.float64)
    if n.relative_level == 0:
        noisy = values.copy()
    else:
        norm = np.linalg.norm(values)
        if norm == 0:
            raise ValueError("cannot scale relative noise for an all-zero signal")
        e = np.random.Generator(np.random.PCG64(n.seed)).standard_normal(values.shape)
        e *= n.relative_level * norm / np.linalg.norm(e)
        noisy = values + e
    if isinstance(s, Sinogram):
        return Sinogram(noisy, s.geometry)
    return noisy


# --------------------------------------------------------------- raw files

def _write(path, header: dict, values: np.ndarray):
    lines = [MAGIC] + [f"{k}: {v}" for k, v in header.items()]
    text = "\n".join(lines) + "\n\n"
    if "\n\n" in text[:-2]:
        raise ValueError("header values must not contain blank lines")
    with open(path, "wb") as fh:
        fh.write(text.encode("ascii"))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _read(path):
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n\n")
    if cut < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        lines = raw[:cut].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not ASCII") from exc
    if lines[0] != MAGIC:
        raise FormatError(f"{path}: bad magic {lines[0]!r}")
    header = {}
    for line in lines[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"{path}: malformed header line {line!r}")
        header[key.strip()] = value.strip()
    for key in ("kind", "dims", "dtype", "endianness"):
        if key not in header:
            raise FormatError(f"{path}: header lacks {key!r}")
    if header["dtype"] != "f64":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    order = {"little": "<", "big": ">"}.get(header["endianness"])
    if order is None:
        raise FormatError(f"{path}: unknown endianness {header['endianness']!r}")
    try:
        dims = tuple(int(t) for t in header["dims"].split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad dims {header['dims']!r}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: bad dims {dims}")
    count = math.prod(dims)
    if count > MAX_ELEMENTS:
        raise FormatError(f"{path}: dims {dims} exceed the supported size")
    payload = raw[cut + 2:]
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header dims require {8 * count}")
    values = np.frombuffer(payload, dtype=order + "f8").astype(np.float64)
    return header, dims, values


def write_volume(v: Volume, path, extra: dict | None = None):
    header = {
        "kind": "volume",
        "dims": " ".join(str(d) for d in v.dims),
        "spacing": " ".join(repr(s) for s in v.spacing),
        "dtype": "f64",
        "endianness": "little",
    }
    header.update(extra or {})
    _write(path, header, v.flat)


def read_volume(path) -> Volume:
    header, dims, values = _read(path)
    if header["kind"] != "volume":
        raise FormatError(f"{path}: expected a volume file, found {header['kind']!r}")
    spacing = tuple(float(t) for t in header.get("spacing", "1 1 1").split())
    return Volume.from_flat(values, dims, spacing)


def geometry_header(g: ProjectionGeometry, volume_dims=None, spacing=None) -> dict:
    out = {
        "dims": f"{g.detector_cols} {g.detector_rows} {g.n_views}",
        "geometry": "parallel golden-spiral-half",
        "n_views": str(g.n_views),
        "detector_rows": str(g.detector_rows),
        "detector_cols": str(g.detector_cols),
        "detector_pixel_size": repr(g.detector_pixel_size),
    }
    if volume_dims is not None:
        out["volume_dims"] = " ".join(str(int(d)) for d in volume_dims)
    if spacing is not None:
        out["spacing"] = " ".join(repr(float(s)) for s in np.broadcast_to(spacing, 3))
    return out


def write_sinogram(s: Sinogram, path, volume_dims=None, spacing=None, extra: dict | None = None):
    header = {"kind": "sinogram", **geometry_header(s.geometry, volume_dims, spacing),
              "dtype": "f64", "endianness": "little"}
    header.update(extra or {})
    _write(path, header, s.flat)


def read_sinogram(path):
    """Returns ``(Sinogram, header)``; the geometry is rebuilt from the header."""
    header, dims, values = _read(path)
    if header["kind"] != "sinogram":
        raise FormatError(f"{path}: expected a sinogram file, found {header['kind']!r}")
    try:
        g = make_geometry(int(header["n_views"]), int(header["detector_rows"]), int(header["detector_cols"]),
                          float(header["detector_pixel_size"]))
    except KeyError as exc:
        raise FormatError(f"{path}: header lacks geometry key {exc}") from exc
    if dims != (g.detector_cols, g.detector_rows, g.n_views):
        raise FormatError(f"{path}: dims {dims} disagree with geometry fields")
    return Sinogram(values, g), header


# ----------------------------------------------------------------- history

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_history(records, path):
    records = list(records)
    if not records:
        raise ValueError("history is empty")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in HISTORY_COLUMNS])


def read_history(path) -> list:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or tuple(header) != HISTORY_COLUMNS:
            raise FormatError(f"{path}: unexpected history header {header!r}")
        for line_no, row in enumerate(rows, start=2):
            if len(row) != len(HISTORY_COLUMNS):
                raise FormatError(f"{path}:{line_no}: expected {len(HISTORY_COLUMNS)} fields")
            opt = [float(t) if t else None for t in row[4:6]]
            rec = ConvergenceRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                    opt[0], opt[1], int(row[6]) if row[6] else 0)
            if out and rec.iter <= out[-1].iter:
                raise FormatError(f"{path}:{line_no}: iteration column must increase")
            out.append(rec)
    return out
