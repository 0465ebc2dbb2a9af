"""Volumes, their on-disk format, and synthetic data generators.

A Volume is a scalar or 3-vector sample array with voxel spacing and origin;
the origin is the physical position of the *center* of voxel (0, 0, 0), so
voxel i sits at origin + i * spacing. Files use a short self-describing text
header followed by a raw little-endian payload (float32 on disk, float64 in
memory; writing narrows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import bspline_core as core


class FormatError(ValueError):
    """Raised for malformed or truncated data files."""


@dataclass
class Volume:
    """3D scalar field (d1, d2, d3) or 3-vector field (d1, d2, d3, 3)."""

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 4 and self.data.shape[3] == 3:
            pass
        elif self.data.ndim != 3:
            raise ValueError(f"volume data must be (d1,d2,d3) or (d1,d2,d3,3), got {self.data.shape}")
        if any(d < 1 for d in self.data.shape[:3]):
            raise ValueError(f"volume dims must all be >= 1, got {self.data.shape[:3]}")
        self.spacing = core._triple(self.spacing, "spacing")
        self.origin = core._triple(self.origin, "origin")
        if any(s <= 0 or not np.isfinite(s) for s in self.spacing):
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def components(self) -> int:
        return 1 if self.data.ndim == 3 else 3

    def axis_coords(self, axis: int) -> np.ndarray:
        """Physical coordinates of voxel centers along one axis."""
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def center_span(self) -> tuple:
        """Physical distance between first and last voxel centers per axis."""
        return tuple((d - 1) * s for d, s in zip(self.dims, self.spacing))

    def same_geometry(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _read_header_line(fh) -> str:
    raw = bytearray()
    while True:
        b = fh.read(1)
        if not b:
            raise FormatError("unexpected end of file inside header")
        if b == b"\n":
            break
        raw += b
        if len(raw) > 512:
            raise FormatError("header line too long; not a valid header")
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII text") from exc


def _header_fields(line: str, key: str, count: int) -> list:
    parts = line.split()
    if len(parts) != count + 1 or parts[0] != key:
        raise FormatError(f"malformed header line {line!r}, expected '{key}' with {count} values")
    return parts[1:]


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_volume(volume: Volume, path):
    """Write a VOL1 file. Data narrows to float32 on disk."""
    with open(path, "wb") as fh:
        fh.write(b"VOL1\n")
        fh.write(f"dims {volume.dims[0]} {volume.dims[1]} {volume.dims[2]}\n".encode())
        fh.write(f"spacing {_fmt(volume.spacing)}\n".encode())
        fh.write(f"origin {_fmt(volume.origin)}\n".encode())
        fh.write(b"dtype float32\n")
        fh.write(f"components {volume.components}\n".encode())
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    """Read a VOL1 file back into a float64 Volume."""
    with open(path, "rb") as fh:
        magic = _read_header_line(fh)
        if magic != "VOL1":
            raise FormatError(f"not a VOL1 file (magic {magic!r})")
        dims = tuple(int(v) for v in _header_fields(_read_header_line(fh), "dims", 3))
        spacing = tuple(float(v) for v in _header_fields(_read_header_line(fh), "spacing", 3))
        origin = tuple(float(v) for v in _header_fields(_read_header_line(fh), "origin", 3))
        dtype = _header_fields(_read_header_line(fh), "dtype", 1)[0]
        if dtype != "float32":
            raise FormatError(f"unsupported element type {dtype!r}")
        components = int(_header_fields(_read_header_line(fh), "components", 1)[0])
        if components not in (1, 3):
            raise FormatError(f"component count must be 1 or 3, got {components}")
        payload = fh.read()
    count = dims[0] * dims[1] * dims[2] * components
    if len(payload) != count * 4:
        raise FormatError(f"truncated payload: expected {count * 4} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    shape = dims if components == 1 else dims + (3,)
    return Volume(data=data.reshape(shape), spacing=spacing, origin=origin)


def write_grid(grid: core.ControlPointGrid, path):
    """Write a BSPG1 coefficient file (float64 payload, component-major)."""
    geom = grid.geometry
    with open(path, "wb") as fh:
        fh.write(b"BSPG1\n")
        fh.write(f"tiles {geom.tile_counts[0]} {geom.tile_counts[1]} {geom.tile_counts[2]}\n".encode())
        fh.write(f"spacing {_fmt(geom.tile_spacing)}\n".encode())
        fh.write(f"origin {_fmt(geom.origin)}\n".encode())
        fh.write(np.ascontiguousarray(grid.coefficients, dtype="<f8").tobytes())


def read_grid(path) -> core.ControlPointGrid:
    with open(path, "rb") as fh:
        magic = _read_header_line(fh)
        if magic != "BSPG1":
            raise FormatError(f"not a BSPG1 file (magic {magic!r})")
        tiles = tuple(int(v) for v in _header_fields(_read_header_line(fh), "tiles", 3))
        spacing = tuple(float(v) for v in _header_fields(_read_header_line(fh), "spacing", 3))
        origin = tuple(float(v) for v in _header_fields(_read_header_line(fh), "origin", 3))
        payload = fh.read()
    try:
        geometry = core.GridGeometry(tiles, spacing, origin)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    shape = (3,) + geometry.lattice_shape
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(payload)}")
    coeffs = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return core.ControlPointGrid(geometry, coeffs)


# ---------------------------------------------------------------------------
# Interpolation and resampling
# ---------------------------------------------------------------------------

def trilinear_sample(volume: Volume, points: np.ndarray, gradient: bool = False):
    """Trilinear interpolation of a scalar volume at physical points.

    Returns (values, inside_mask) or, with gradient=True, also the exact
    spatial gradient of the interpolant (per mm) at each point. Points outside
    the voxel-center hull get value 0 and mask False.
    """
    if volume.components != 1:
        raise ValueError("trilinear_sample expects a scalar volume")
    pts = np.asarray(points, dtype=float)
    idx = (pts - np.array(volume.origin)) / np.array(volume.spacing)
    dims = np.array(volume.dims)
    inside = np.all((idx >= 0.0) & (idx <= dims - 1), axis=-1)
    base = np.clip(np.floor(idx).astype(np.int64), 0, np.maximum(dims - 2, 0))
    frac = np.clip(idx - base, 0.0, 1.0)

    data = volume.data
    corners = np.empty(pts.shape[:-1] + (2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                corners[..., a, b, c] = data[
                    np.minimum(base[..., 0] + a, dims[0] - 1),
                    np.minimum(base[..., 1] + b, dims[1] - 1),
                    np.minimum(base[..., 2] + c, dims[2] - 1),
                ]
    f1, f2, f3 = frac[..., 0], frac[..., 1], frac[..., 2]
    c00 = corners[..., 0, 0, 0] * (1 - f3) + corners[..., 0, 0, 1] * f3
    c01 = corners[..., 0, 1, 0] * (1 - f3) + corners[..., 0, 1, 1] * f3
    c10 = corners[..., 1, 0, 0] * (1 - f3) + corners[..., 1, 0, 1] * f3
    c11 = corners[..., 1, 1, 0] * (1 - f3) + corners[..., 1, 1, 1] * f3
    c0 = c00 * (1 - f2) + c01 * f2
    c1 = c10 * (1 - f2) + c11 * f2
    values = np.where(inside, c0 * (1 - f1) + c1 * f1, 0.0)
    if not gradient:
        return values, inside

    d3 = corners[..., :, :, 1] - corners[..., :, :, 0]  # (..., 2, 2)
    g3 = (
        d3[..., 0, 0] * (1 - f1) * (1 - f2)
        + d3[..., 0, 1] * (1 - f1) * f2
        + d3[..., 1, 0] * f1 * (1 - f2)
        + d3[..., 1, 1] * f1 * f2
    )
    g2 = (c01 - c00) * (1 - f1) + (c11 - c10) * f1
    g1 = c1 - c0
    grads = np.stack(
        [
            g1 / volume.spacing[0],
            g2 / volume.spacing[1],
            g3 / volume.spacing[2],
        ],
        axis=-1,
    )
    grads = np.where(inside[..., None], grads, 0.0)
    return values, grads, inside


def warp_volume(moving: Volume, grid: core.ControlPointGrid, like: Volume) -> Volume:
    """Resample `moving` through the transform x -> x + v(x) onto `like`'s voxels."""
    axes = [like.axis_coords(d) for d in range(3)]
    disp = core.sample_displacement(grid, axes)
    pts = np.empty(like.dims + (3,))
    pts[..., 0] = axes[0][:, None, None]
    pts[..., 1] = axes[1][None, :, None]
    pts[..., 2] = axes[2][None, None, :]
    values, _ = trilinear_sample(moving, pts + disp)
    return Volume(data=values, spacing=like.spacing, origin=like.origin)


def box_downsample(volume: Volume, factor: int) -> Volume:
    """Integer-factor box-filter downsample; trailing voxels that do not fill a
    box are dropped. The origin moves to the center of the first box."""
    if volume.components != 1:
        raise ValueError("box_downsample expects a scalar volume")
    f = int(factor)
    if f < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if f == 1:
        return Volume(volume.data.copy(), volume.spacing, volume.origin)
    dims = tuple((d // f) for d in volume.dims)
    if any(d < 1 for d in dims):
        raise ValueError(f"volume {volume.dims} too small for factor {f}")
    cropped = volume.data[: dims[0] * f, : dims[1] * f, : dims[2] * f]
    data = cropped.reshape(dims[0], f, dims[1], f, dims[2], f).mean(axis=(1, 3, 5))
    spacing = tuple(s * f for s in volume.spacing)
    origin = tuple(o + (f - 1) / 2.0 * s for o, s in zip(volume.origin, volume.spacing))
    return Volume(data=data, spacing=spacing, origin=origin)


def covering_geometry(volume: Volume, tile_spacing, origin=None) -> core.GridGeometry:
    """Smallest grid with the given tile spacing whose extent covers every voxel center."""
    spacing = core._triple(tile_spacing, "tile_spacing")
    base = volume.origin if origin is None else core._triple(origin, "origin")
    span = volume.center_span()
    counts = []
    for d in range(3):
        needed = volume.origin[d] + span[d] - base[d]
        counts.append(max(1, int(np.ceil(needed / spacing[d] - 1e-9))))
    return core.GridGeometry(tuple(counts), spacing, base)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def make_phantom(kind: str, dims, spacing, seed: int = 0, origin=(0.0, 0.0, 0.0)) -> Volume:
    """Deterministic synthetic test image.

    blobs    sum of anisotropic Gaussian bumps with seeded placement
    gradient voxel value equals its x1 coordinate in mm
    checker  20 mm checkerboard of 0/1
    """
    dims = tuple(int(d) for d in dims)
    vol = Volume(data=np.zeros(dims), spacing=spacing, origin=origin)
    axes = [vol.axis_coords(d) for d in range(3)]
    if kind == "gradient":
        vol.data += axes[0][:, None, None]
        return vol
    if kind == "checker":
        period = 20.0
        par = [np.floor(a / period).astype(int) % 2 for a in axes]
        vol.data[:] = (par[0][:, None, None] ^ par[1][None, :, None] ^ par[2][None, None, :]).astype(float)
        return vol
    if kind != "blobs":
        raise ValueError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng(seed)
    span = vol.center_span()
    volume_mm3 = max(np.prod([max(s, 1.0) for s in span]), 1.0)
    n_blobs = int(np.clip(volume_mm3 / 32.0 ** 3, 8, 60))
    for _ in range(n_blobs):
        center = [rng.uniform(0, span[d]) + vol.origin[d] for d in range(3)]
        width = rng.uniform(6.0, 16.0, size=3)
        amp = rng.uniform(0.5, 1.5)
        parts = [np.exp(-(((axes[d] - center[d]) / width[d]) ** 2)) for d in range(3)]
        vol.data += amp * parts[0][:, None, None] * parts[1][None, :, None] * parts[2][None, None, :]
    return vol


def random_coefficient_grid(
    geometry: core.GridGeometry, amplitude: float, seed: int = 0
) -> core.ControlPointGrid:
    """IID normal coefficients with the given standard deviation (mm)."""
    rng = np.random.default_rng(seed)
    return core.ControlPointGrid(
        geometry, rng.normal(0.0, amplitude, size=(3,) + geometry.lattice_shape)
    )


def _edge_taper_window(shape) -> np.ndarray:
    """Separable window that is zero on the outer lattice shells and ramps to 1,
    so the generated field (and its derivatives) vanish toward the boundary."""

    def taper_1d(count: int) -> np.ndarray:
        zero = min(2, max(0, (count - 4) // 3))
        ramp = max(1, min(3, (count - 2 * zero - 1) // 2))
        w = np.ones(count)
        for i in range(count):
            edge = min(i, count - 1 - i)
            if edge < zero:
                w[i] = 0.0
            else:
                t = min(1.0, (edge - zero + 1) / (ramp + 1))
                w[i] = 0.5 * (1.0 - np.cos(np.pi * t))
        return w

    w1, w2, w3 = (taper_1d(n) for n in shape)
    return w1[:, None, None] * w2[None, :, None] * w3[None, None, :]


def make_smooth_grid(
    geometry: core.GridGeometry,
    amplitude: float,
    smoothness: float,
    seed: int = 0,
    edge_taper: bool = True,
) -> core.ControlPointGrid:
    """Smooth random coefficient grid: white noise blurred to the given physical
    correlation scale, optionally tapered to zero at the lattice boundary, and
    scaled so the largest coefficient vector has magnitude `amplitude`."""
    rng = np.random.default_rng(seed)
    shape = geometry.lattice_shape
    sigmas = [smoothness / r for r in geometry.tile_spacing]
    coeffs = rng.normal(size=(3,) + shape)
    coeffs = np.stack([gaussian_filter(coeffs[c], sigma=sigmas, mode="constant") for c in range(3)])
    if edge_taper:
        coeffs *= _edge_taper_window(shape)[None]
    peak = np.max(np.linalg.norm(coeffs, axis=0))
    if peak > 0:
        coeffs *= amplitude / peak
    return core.ControlPointGrid(geometry, coeffs)


def make_ground_truth_field(
    geometry: core.GridGeometry,
    amplitude: float,
    smoothness: float,
    seed: int = 0,
    n_landmarks: int = 300,
    edge_taper: bool = True,
    max_attempts: int = 20,
):
    """Smooth random displacement field with a fold-free guarantee, plus paired
    landmarks: random fixed points and their exact warps through the field.

    Returns (grid, fixed_landmarks, warped_landmarks). Draws are rejected until
    the minimum Jacobian determinant is positive; the amplitude must stay below
    a third of the smoothness scale or rejection rarely terminates.
    """
    from .field_metrics import LandmarkSet, jacobian_map, warp_landmarks
    from .regularizers_numeric import SamplingSpec

    if amplitude < 0 or not np.isfinite(amplitude):
        raise ValueError(f"amplitude must be finite and >= 0, got {amplitude}")
    if amplitude >= smoothness / 3.0:
        raise ValueError(
            f"amplitude {amplitude} too large for smoothness {smoothness}; "
            "need amplitude < smoothness / 3 to keep the field diffeomorphic"
        )

    spec = SamplingSpec.per_tile((4, 4, 4))
    grid = None
    for attempt in range(max_attempts):
        candidate = make_smooth_grid(geometry, amplitude, smoothness, seed + attempt, edge_taper)
        if amplitude == 0.0:
            grid = candidate
            break
        _, min_j = jacobian_map(candidate, spec)
        if min_j > 1e-3:
            grid = candidate
            break
    if grid is None:
        raise RuntimeError(
            f"could not draw a fold-free field in {max_attempts} attempts "
            f"(amplitude {amplitude}, smoothness {smoothness})"
        )

    rng = np.random.default_rng(seed + 7919)
    lo = np.array(geometry.origin)
    hi = np.array(geometry.far_corner())
    margin = amplitude + 0.01 * (hi - lo)
    pts = rng.uniform(lo + margin, hi - margin, size=(n_landmarks, 3))
    fixed = LandmarkSet(points=pts, label="fixed")
    warped = warp_landmarks(grid, fixed)
    return grid, fixed, warped
