"""Uniform cubic B-spline displacement fields on a tile-aligned control lattice.

A field is parameterized by three scalar coefficient lattices (one per vector
component). Space is partitioned into tiles of size r1 x r2 x r3 mm; every
point inside a tile is supported by the same 4x4x4 block of control points.
Basis evaluation is expressed through 4x4 matrices Q = B R D acting on the
monomial vector [1, x, x^2, x^3] of the physical offset within the tile, so
that derivatives come out in physical units (per mm) directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Rows are the four basis pieces beta_0..beta_3, columns are powers of u.
BASIS_COEFFS = np.array(
    [
        [1.0, -3.0, 3.0, -1.0],
        [4.0, 0.0, -6.0, 3.0],
        [1.0, 3.0, 3.0, -3.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
) / 6.0
BASIS_COEFFS.setflags(write=False)

MIN_TILE_SPACING = 1e-6  # mm; below this the 1/r^3 scaling is meaningless

# Small relative slack when classifying points against the grid extent, so that
# points computed as `origin + n * spacing` land inside despite rounding.
_EXTENT_SLACK = 1e-9


def _derivative_matrix(order: int) -> np.ndarray:
    """Matrix D with D[m, m-order] = m!/(m-order)! mapping monomial coefficients
    to those of the order-th derivative (acting as Q = B R D on [1,x,x^2,x^3])."""
    mat = np.zeros((4, 4))
    for m in range(order, 4):
        coef = 1.0
        for t in range(m - order + 1, m + 1):
            coef *= t
        mat[m, m - order] = coef
    return mat


DERIVATIVE_MATRICES = tuple(_derivative_matrix(d) for d in range(4))
for _m in DERIVATIVE_MATRICES:
    _m.setflags(write=False)


def _triple(value, name: str, dtype=float) -> tuple:
    arr = np.asarray(value)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have exactly 3 entries, got shape {arr.shape}")
    return tuple(dtype(v) for v in arr)


@dataclass(frozen=True)
class GridGeometry:
    """Tile layout of a control-point grid: counts, physical tile size, origin."""

    tile_counts: tuple
    tile_spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "tile_counts", _triple(self.tile_counts, "tile_counts", int))
        object.__setattr__(self, "tile_spacing", _triple(self.tile_spacing, "tile_spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        if any(n < 1 for n in self.tile_counts):
            raise ValueError(f"tile_counts must all be >= 1, got {self.tile_counts}")
        if any(not np.isfinite(r) or r < MIN_TILE_SPACING for r in self.tile_spacing):
            raise ValueError(
                f"tile_spacing must be finite and >= {MIN_TILE_SPACING} mm, got {self.tile_spacing}"
            )
        if any(not np.isfinite(o) for o in self.origin):
            raise ValueError("origin must be finite")

    @property
    def lattice_shape(self) -> tuple:
        """Control points per axis: one tile needs 4, each further tile adds 1."""
        return tuple(n + 3 for n in self.tile_counts)

    @property
    def extent(self) -> tuple:
        """Physical size of the gridded region in mm."""
        return tuple(n * r for n, r in zip(self.tile_counts, self.tile_spacing))

    @property
    def tile_total(self) -> int:
        n1, n2, n3 = self.tile_counts
        return n1 * n2 * n3

    def far_corner(self) -> tuple:
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    def greville(self, axis: int) -> np.ndarray:
        """Physical positions attached to the lattice indices along `axis` (0..2).

        A lattice whose values sample a linear function at these positions
        reproduces that function exactly.
        """
        count = self.lattice_shape[axis]
        return self.origin[axis] + (np.arange(count) - 1.0) * self.tile_spacing[axis]

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        for d in range(3):
            lo = self.origin[d]
            hi = lo + self.extent[d]
            slack = _EXTENT_SLACK * max(1.0, abs(lo), abs(hi))
            if p[d] < lo - slack or p[d] > hi + slack:
                return False
        return True


class ControlPointGrid:
    """Coefficient lattices p1, p2, p3 (mm) over a GridGeometry.

    Coefficients are stored as one float64 array of shape (3, P1, P2, P3).
    Evaluation never mutates; updates happen through `with_coefficients` or by
    assigning into `coefficients` between evaluation phases.
    """

    __slots__ = ("geometry", "coefficients")

    def __init__(self, geometry: GridGeometry, coefficients):
        coeffs = np.ascontiguousarray(coefficients, dtype=np.float64)
        expected = (3,) + geometry.lattice_shape
        if coeffs.shape != expected:
            raise ValueError(f"coefficient array must have shape {expected}, got {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must all be finite")
        self.geometry = geometry
        self.coefficients = coeffs

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "ControlPointGrid":
        return cls(geometry, np.zeros((3,) + geometry.lattice_shape))

    @classmethod
    def from_components(cls, geometry: GridGeometry, p1, p2, p3) -> "ControlPointGrid":
        return cls(geometry, np.stack([np.asarray(p) for p in (p1, p2, p3)]))

    def component(self, index: int) -> np.ndarray:
        return self.coefficients[index]

    def copy(self) -> "ControlPointGrid":
        return ControlPointGrid(self.geometry, self.coefficients.copy())

    def with_coefficients(self, coefficients) -> "ControlPointGrid":
        return ControlPointGrid(self.geometry, coefficients)


@dataclass(frozen=True)
class LocalCoord:
    """A point expressed as its tile plus normalized offsets u in [0, 1]."""

    tile_index: tuple
    u: tuple


@dataclass(frozen=True)
class QMatrix:
    """4x4 operator whose product with [1, x, x^2, x^3] gives the four basis
    values (or their physical derivatives of the given order) at offset x."""

    entries: np.ndarray
    axis: int
    order: int


def eval_basis(u: float, piece: int, order: int = 0) -> float:
    """Order-th derivative with respect to u of basis piece `piece` at u in [0, 1]."""
    if not 0 <= piece <= 3:
        raise ValueError(f"basis piece must be in 0..3, got {piece}")
    if not 0 <= order <= 3:
        raise ValueError(f"derivative order must be in 0..3, got {order}")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    poly = BASIS_COEFFS[piece] @ DERIVATIVE_MATRICES[order]
    return float(poly @ np.array([1.0, u, u * u, u ** 3]))


def build_q(spacing: float, order: int, axis: int = 1) -> QMatrix:
    """Q = B R Delta for one axis. `spacing` is the tile size along that axis in mm."""
    if not np.isfinite(spacing) or spacing < MIN_TILE_SPACING:
        raise ValueError(f"tile spacing must be >= {MIN_TILE_SPACING} mm, got {spacing}")
    if not 0 <= order <= 3:
        raise ValueError(f"derivative order must be in 0..3, got {order}")
    if axis not in (1, 2, 3):
        raise ValueError(f"axis must be 1, 2 or 3, got {axis}")
    scale = np.diag([1.0, 1.0 / spacing, 1.0 / spacing ** 2, 1.0 / spacing ** 3])
    entries = BASIS_COEFFS @ scale @ DERIVATIVE_MATRICES[order]
    entries.setflags(write=False)
    return QMatrix(entries=entries, axis=axis, order=order)


def _locate_axis(geometry: GridGeometry, axis: int, value: float) -> tuple:
    origin = geometry.origin[axis]
    spacing = geometry.tile_spacing[axis]
    count = geometry.tile_counts[axis]
    s = (value - origin) / spacing
    slack = _EXTENT_SLACK * max(1.0, abs(s))
    if s < -slack or s > count + slack:
        raise ValueError(
            f"point coordinate {value} outside grid extent "
            f"[{origin}, {origin + count * spacing}] on axis {axis + 1}"
        )
    s = min(max(s, 0.0), float(count))
    tile = int(s)
    if tile >= count:  # far face closes onto the last tile at u = 1
        tile = count - 1
    return tile, s - tile


def locate(geometry: GridGeometry, point) -> LocalCoord:
    """Tile index and normalized local coordinates of a physical point."""
    p = np.asarray(point, dtype=float)
    if p.shape != (3,):
        raise ValueError(f"point must be a 3-vector, got shape {p.shape}")
    located = [_locate_axis(geometry, d, p[d]) for d in range(3)]
    return LocalCoord(
        tile_index=tuple(t for t, _ in located),
        u=tuple(u for _, u in located),
    )


def _point_weights(geometry: GridGeometry, coord: LocalCoord, orders) -> list:
    """Per-axis 4-vectors of basis (derivative) values at a located point."""
    weights = []
    for d in range(3):
        spacing = geometry.tile_spacing[d]
        q = build_q(spacing, orders[d], axis=d + 1).entries
        x = coord.u[d] * spacing
        weights.append(q @ np.array([1.0, x, x * x, x ** 3]))
    return weights


def eval_displacement(grid: ControlPointGrid, point) -> np.ndarray:
    """Displacement vector (mm) at a physical point inside the grid extent."""
    coord = locate(grid.geometry, point)
    w1, w2, w3 = _point_weights(grid.geometry, coord, (0, 0, 0))
    t1, t2, t3 = coord.tile_index
    block = grid.coefficients[:, t1 : t1 + 4, t2 : t2 + 4, t3 : t3 + 4]
    return np.einsum("l,m,n,clmn->c", w1, w2, w3, block)


def _check_multi_index(orders) -> tuple:
    idx = tuple(int(o) for o in orders)
    if len(idx) != 3 or any(o < 0 or o > 3 for o in idx) or sum(idx) > 3:
        raise ValueError(
            f"derivative multi-index must be 3 entries in 0..3 with total <= 3, got {orders}"
        )
    return idx


def eval_partial(grid: ControlPointGrid, point, component: int, orders) -> float:
    """Mixed partial derivative of one displacement component, in physical units.

    `orders` is the (d1, d2, d3) multi-index; e.g. (1, 0, 0) is d/dx1 and
    (1, 1, 0) is d^2/dx1 dx2. Total order at most 3.
    """
    if component not in (1, 2, 3):
        raise ValueError(f"component must be 1, 2 or 3, got {component}")
    idx = _check_multi_index(orders)
    coord = locate(grid.geometry, point)
    w1, w2, w3 = _point_weights(grid.geometry, coord, idx)
    t1, t2, t3 = coord.tile_index
    block = grid.coefficients[component - 1, t1 : t1 + 4, t2 : t2 + 4, t3 : t3 + 4]
    return float(np.einsum("l,m,n,lmn->", w1, w2, w3, block))


def tile_coefficients(grid: ControlPointGrid, tile_index) -> tuple:
    """The three 64-vectors of coefficients supporting one tile.

    Flattening order is fixed: entry 16*l + 4*m + n holds lattice offset
    (l, m, n), i.e. the third axis varies fastest. The integrated tile
    operators use the same Kronecker order, so `tile_term` contracts these
    vectors directly.
    """
    t = tuple(int(i) for i in tile_index)
    counts = grid.geometry.tile_counts
    if len(t) != 3 or any(i < 0 or i >= n for i, n in zip(t, counts)):
        raise IndexError(f"tile index {tile_index} out of range for counts {counts}")
    block = grid.coefficients[:, t[0] : t[0] + 4, t[1] : t[1] + 4, t[2] : t[2] + 4]
    flat = block.reshape(3, 64)
    return flat[0].copy(), flat[1].copy(), flat[2].copy()


@lru_cache(maxsize=32)
def _support_index_map(tile_counts: tuple) -> np.ndarray:
    n1, n2, n3 = tile_counts
    p2, p3 = n2 + 3, n3 + 3
    t1, t2, t3 = np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3), indexing="ij")
    tiles = np.stack([t1.ravel(), t2.ravel(), t3.ravel()], axis=1)  # (T, 3)
    l, m, n = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    local = np.stack([l.ravel(), m.ravel(), n.ravel()], axis=1)  # (64, 3)
    idx = (
        (tiles[:, None, 0] + local[None, :, 0]) * p2 + (tiles[:, None, 1] + local[None, :, 1])
    ) * p3 + (tiles[:, None, 2] + local[None, :, 2])
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    idx.setflags(write=False)
    return idx


def support_index_map(geometry: GridGeometry) -> np.ndarray:
    """(tile_total, 64) flat lattice indices of every tile's supporting block.

    Tiles are ordered with the third axis fastest; within a tile the 64 entries
    follow the `tile_coefficients` flattening order.
    """
    return _support_index_map(geometry.tile_counts)


def axis_weight_matrix(geometry: GridGeometry, axis: int, coords, order: int = 0) -> np.ndarray:
    """Dense (len(coords), P_axis) matrix of basis-derivative weights.

    Row s holds the four nonzero weights of sample coords[s] placed at the
    lattice columns supporting it; everything else is zero. Contracting these
    per-axis matrices against the lattice evaluates the field (or a physical
    derivative) on an axis-aligned sample grid.
    """
    coords = np.asarray(coords, dtype=float)
    spacing = geometry.tile_spacing[axis]
    q = build_q(spacing, order, axis=axis + 1).entries
    located = [_locate_axis(geometry, axis, c) for c in coords]
    tiles = np.array([t for t, _ in located])
    xl = np.array([u for _, u in located]) * spacing
    xv = np.stack([np.ones_like(xl), xl, xl ** 2, xl ** 3], axis=1)
    local = xv @ q.T  # (S, 4)
    out = np.zeros((len(coords), geometry.lattice_shape[axis]))
    rows = np.arange(len(coords))
    for piece in range(4):
        out[rows, tiles + piece] += local[:, piece]
    return out


def _contract(lattice: np.ndarray, w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> np.ndarray:
    out = np.tensordot(w1, lattice, axes=(1, 0))  # (S1, P2, P3)
    out = np.tensordot(out, w2, axes=(1, 1))      # (S1, P3, S2)
    out = np.tensordot(out, w3, axes=(1, 1))      # (S1, S2, S3)
    return out


def sample_displacement(grid: ControlPointGrid, axes) -> np.ndarray:
    """Displacement on the outer product of three coordinate arrays.

    Returns (S1, S2, S3, 3). Fast path for dense evaluation: the sample grid
    is separable so each axis is contracted once.
    """
    ws = [axis_weight_matrix(grid.geometry, d, axes[d], 0) for d in range(3)]
    out = np.empty((len(axes[0]), len(axes[1]), len(axes[2]), 3))
    for c in range(3):
        out[..., c] = _contract(grid.coefficients[c], *ws)
    return out


def sample_partial(grid: ControlPointGrid, axes, component: int, orders) -> np.ndarray:
    """One mixed partial of one component on a separable sample grid."""
    if component not in (1, 2, 3):
        raise ValueError(f"component must be 1, 2 or 3, got {component}")
    idx = _check_multi_index(orders)
    ws = [axis_weight_matrix(grid.geometry, d, axes[d], idx[d]) for d in range(3)]
    return _contract(grid.coefficients[component - 1], *ws)


def scatter_separable(values: np.ndarray, w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Adjoint of the separable contraction: accumulate per-sample values into
    a lattice-shaped array using the same weight matrices."""
    out = np.tensordot(values, w3, axes=(2, 0))  # (S1, S2, P3)
    out = np.tensordot(out, w2, axes=(1, 0))     # (S1, P3, P2)
    out = np.tensordot(out, w1, axes=(0, 0))     # (P3, P2, P1)
    return out.transpose(2, 1, 0)


def monomial_lattice_1d(positions: np.ndarray, spacing: float, power: int) -> np.ndarray:
    """Per-axis coefficient values that make the cubic B-spline series reproduce
    x^power exactly (power 0..3). Quadratic and cubic need the classic
    -spacing^2/3 and -spacing^2 corrections on top of the sampled monomial."""
    g = np.asarray(positions, dtype=float)
    if power == 0:
        return np.ones_like(g)
    if power == 1:
        return g.copy()
    if power == 2:
        return g ** 2 - spacing ** 2 / 3.0
    if power == 3:
        return g ** 3 - spacing ** 2 * g
    raise ValueError(f"power must be in 0..3, got {power}")


def monomial_grid(geometry: GridGeometry, component: int, powers, scale: float = 1.0) -> ControlPointGrid:
    """Grid whose `component` field equals scale * x1^a x2^b x3^c (others zero).

    Each per-axis power must be at most 3; such separable polynomials are
    reproduced exactly by the cubic basis.
    """
    if component not in (1, 2, 3):
        raise ValueError(f"component must be 1, 2 or 3, got {component}")
    pw = tuple(int(p) for p in powers)
    if len(pw) != 3 or any(p < 0 or p > 3 for p in pw):
        raise ValueError(f"per-axis powers must be in 0..3, got {powers}")
    axes = [
        monomial_lattice_1d(geometry.greville(d), geometry.tile_spacing[d], pw[d])
        for d in range(3)
    ]
    lattice = scale * axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    coeffs = np.zeros((3,) + geometry.lattice_shape)
    coeffs[component - 1] = lattice
    return ControlPointGrid(geometry, coeffs)


def linear_field_grid(geometry: GridGeometry, matrix=None, offset=None) -> ControlPointGrid:
    """Grid reproducing the affine field v(x) = matrix @ x + offset exactly."""
    mat = np.zeros((3, 3)) if matrix is None else np.asarray(matrix, dtype=float)
    off = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
    if mat.shape != (3, 3) or off.shape != (3,):
        raise ValueError("matrix must be 3x3 and offset a 3-vector")
    coeffs = np.zeros((3,) + geometry.lattice_shape)
    grev = [geometry.greville(d) for d in range(3)]
    for c in range(3):
        coeffs[c] += off[c]
        coeffs[c] += mat[c, 0] * grev[0][:, None, None]
        coeffs[c] += mat[c, 1] * grev[1][None, :, None]
        coeffs[c] += mat[c, 2] * grev[2][None, None, :]
    return ControlPointGrid(geometry, coeffs)
