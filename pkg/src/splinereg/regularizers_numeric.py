"""Sampled numerical penalties: the validation oracle and the speedup baseline.

Two routes are provided. `fd_penalty` mirrors the conventional numerical
approach: sample the displacement field densely, take finite differences of
the samples, square/multiply, and sum times cell volume. `quadrature_penalty`
is the stronger oracle: the derivatives themselves are exact (evaluated from
the basis), so only the midpoint integration is approximate and the error
shrinks as O(h^2) toward the closed-form values.

Both compute the same five penalty definitions as the analytic module, written
here as the explicit ordered sums over components and derivative directions so
the analytic multiplicity bookkeeping is checked rather than shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bspline_core as core
from .volume_io import Volume

# skip-boundary margins per regularizer: widest per-axis stencil half-width
# among that regularizer's derivative stencils (third order composes a
# second-difference with a central first difference, half-width 2).
_REG_MARGINS = (1, 1, 1, 2, 0)  # S1..S5


@dataclass(frozen=True)
class SamplingSpec:
    """Where the numeric penalties sample the field.

    voxel-grid mode places samples at voxel centers of an implied image with
    the given spacing; per-tile-samples mode places a fixed count of cell
    centers inside every tile. skip-boundary drops samples whose stencil would
    leave the sampled block; clamp replicates edge samples instead.
    """

    mode: str
    voxel_spacing: tuple | None = None
    samples_per_tile: tuple | None = None
    boundary_policy: str = "skip-boundary"

    def __post_init__(self):
        if self.mode not in ("voxel-grid", "per-tile-samples"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.boundary_policy not in ("skip-boundary", "clamp"):
            raise ValueError(f"unknown boundary policy {self.boundary_policy!r}")
        if self.mode == "voxel-grid":
            if self.voxel_spacing is None:
                raise ValueError("voxel-grid mode requires voxel_spacing")
            object.__setattr__(self, "voxel_spacing", core._triple(self.voxel_spacing, "voxel_spacing"))
            if any(s <= 0 for s in self.voxel_spacing):
                raise ValueError(f"voxel_spacing must be positive, got {self.voxel_spacing}")
        else:
            if self.samples_per_tile is None:
                raise ValueError("per-tile-samples mode requires samples_per_tile")
            spt = tuple(int(s) for s in core._triple(self.samples_per_tile, "samples_per_tile", int))
            if any(s < 1 for s in spt):
                raise ValueError(f"samples_per_tile must be >= 1, got {spt}")
            object.__setattr__(self, "samples_per_tile", spt)

    @classmethod
    def voxel_grid(cls, spacing, boundary_policy: str = "skip-boundary") -> "SamplingSpec":
        return cls(mode="voxel-grid", voxel_spacing=spacing, boundary_policy=boundary_policy)

    @classmethod
    def per_tile(cls, samples, boundary_policy: str = "skip-boundary") -> "SamplingSpec":
        return cls(mode="per-tile-samples", samples_per_tile=samples, boundary_policy=boundary_policy)


def sample_axes(geometry: core.GridGeometry, spec: SamplingSpec) -> tuple:
    """Per-axis sample coordinates (cell centers) and their spacings.

    Cell centers avoid double counting tile edges and make the sum times cell
    volume a midpoint rule.
    """
    axes = []
    steps = []
    for d in range(3):
        extent = geometry.extent[d]
        if spec.mode == "voxel-grid":
            h = spec.voxel_spacing[d]
            n = int(np.floor(extent / h + 1e-9))
            if n < 1:
                raise ValueError(f"voxel spacing {h} exceeds grid extent {extent} on axis {d + 1}")
        else:
            per = spec.samples_per_tile[d]
            n = geometry.tile_counts[d] * per
            h = geometry.tile_spacing[d] / per
        axes.append(geometry.origin[d] + (np.arange(n) + 0.5) * h)
        steps.append(h)
    return axes, tuple(steps)


def dense_field(grid: core.ControlPointGrid, spec: SamplingSpec) -> Volume:
    """Displacement vector at every sample point, as a 3-vector Volume."""
    axes, steps = sample_axes(grid.geometry, spec)
    data = core.sample_displacement(grid, axes)
    origin = tuple(float(a[0]) for a in axes)
    return Volume(data=data, spacing=steps, origin=origin)


@dataclass
class PenaltyValueBreakdown:
    """Unweighted S1..S5 values and the weighted total."""

    terms: np.ndarray  # (5,)
    value: float

    def breakdown(self) -> dict:
        from .regularizers_analytic import REGULARIZER_NAMES

        return dict(zip(REGULARIZER_NAMES, (float(t) for t in self.terms)))


def _central1(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    mid = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo = [slice(None)] * 3
    mid[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    out[tuple(mid)] = (arr[tuple(hi)] - arr[tuple(lo)]) / (2.0 * h)
    return out

def _central2(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.zeros_like(arr)
    mid = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo = [slice(None)] * 3
    mid[axis] = slice(1, -1)
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    out[tuple(mid)] = (arr[tuple(hi)] - 2.0 * arr[tuple(mid)] + arr[tuple(lo)]) / (h * h)
    return out


def _fd_derivative(samples: np.ndarray, orders, steps) -> np.ndarray:
    """Tensor-product central stencil for one derivative multi-index.

    Third order along an axis nests a central first difference over the
    standard second difference (half-width 2, error O(h^2)). Entries inside
    the stencil margin of the block edge are garbage and must be excluded by
    the caller; that margin is what skip-boundary drops.
    """
    out = samples
    for axis in range(3):
        o = orders[axis]
        if o == 0:
            continue
        if o == 1:
            out = _central1(out, axis, steps[axis])
        elif o == 2:
            out = _central2(out, axis, steps[axis])
        elif o == 3:
            out = _central1(_central2(out, axis, steps[axis]), axis, steps[axis])
        else:
            raise ValueError(f"unsupported derivative order {o}")
    return out


def _interior(shape, margin: int):
    if margin == 0:
        return (slice(None),) * 3
    if any(s <= 2 * margin for s in shape):
        raise ValueError(
            f"sample block {shape} too small for stencil margin {margin}; refine the sampling"
        )
    return (slice(margin, -margin),) * 3


def fd_penalty(grid, weights, spec: SamplingSpec, terms=None) -> PenaltyValueBreakdown:
    """Finite-difference penalties over a dense sampling of the field.

    With skip-boundary, each regularizer sums only samples whose stencils stay
    inside the block; with clamp, the block is edge-padded first so every
    sample contributes. Requires at least 4 samples per tile per axis so the
    stencils resolve the piecewise-cubic structure.

    `terms` optionally restricts which of S1..S5 are computed (0-based
    indices); the rest stay zero. Benchmarks use this to time one regularizer
    at a time.
    """
    from .regularizers_analytic import RegularizerWeights

    if not isinstance(weights, RegularizerWeights):
        weights = RegularizerWeights.from_array(weights)
    wanted = frozenset(range(5)) if terms is None else frozenset(int(t) for t in terms)
    axes, steps = sample_axes(grid.geometry, spec)
    for d in range(3):
        per_tile = grid.geometry.tile_spacing[d] / steps[d]
        if per_tile < 4 - 1e-9:
            raise ValueError(
                f"insufficient sampling: {per_tile:.2f} samples per tile on axis {d + 1}, need >= 4"
            )
    field = core.sample_displacement(grid, axes)

    clamp = spec.boundary_policy == "clamp"
    if clamp:
        field = np.pad(field, ((2, 2), (2, 2), (2, 2), (0, 0)), mode="edge")

    cell = float(np.prod(steps))
    maps: dict = {}

    def deriv(comp: int, orders) -> np.ndarray:
        key = (comp, orders)
        if key not in maps:
            maps[key] = _fd_derivative(field[..., comp], orders, steps)
        return maps[key]

    def region(margin: int):
        if clamp:
            return (slice(2, -2),) * 3  # padding absorbs the stencil margin
        return _interior(field.shape[:3], margin)

    out = np.zeros(5)

    if 0 in wanted:
        # S1: ordered sum over components i and directions j of (d nu_i / d x_j)^2
        r1 = region(_REG_MARGINS[0])
        for c in range(3):
            for d in range(3):
                orders = tuple(1 if a == d else 0 for a in range(3))
                out[0] += np.sum(deriv(c, orders)[r1] ** 2)

    if 1 in wanted:
        # S2: ordered sum over (j, k); mixed partials appear twice
        r2 = region(_REG_MARGINS[1])
        for c in range(3):
            for j in range(3):
                for k in range(3):
                    orders = tuple((1 if a == j else 0) + (1 if a == k else 0) for a in range(3))
                    out[1] += np.sum(deriv(c, orders)[r2] ** 2)

    if 2 in wanted:
        # S3: the nine first-derivative squares plus the three divergence-style
        # cross products of distinct diagonal first derivatives, each once
        r3 = region(_REG_MARGINS[2])
        s3 = 0.0
        for c in range(3):
            for d in range(3):
                orders = tuple(1 if a == d else 0 for a in range(3))
                s3 += np.sum(deriv(c, orders)[r3] ** 2)
        diag = [deriv(c, tuple(1 if a == c else 0 for a in range(3))) for c in range(3)]
        for a in range(3):
            for b in range(a + 1, 3):
                s3 += np.sum((diag[a] * diag[b])[r3])
        out[2] = s3

    if 3 in wanted:
        # S4: ordered sum over (j, k, q) of squared third derivatives
        r4 = region(_REG_MARGINS[3])
        for c in range(3):
            for j in range(3):
                for k in range(3):
                    for q in range(3):
                        orders = tuple(
                            (1 if a == j else 0) + (1 if a == k else 0) + (1 if a == q else 0)
                            for a in range(3)
                        )
                        out[3] += np.sum(deriv(c, orders)[r4] ** 2)

    if 4 in wanted:
        # S5: squared magnitude at every sample
        r5 = region(_REG_MARGINS[4])
        for c in range(3):
            out[4] += np.sum(field[..., c][r5] ** 2)

    out *= cell
    return PenaltyValueBreakdown(terms=out, value=float(weights.as_array() @ out))


def _tile_midpoint_weights(geometry: core.GridGeometry, samples_per_tile) -> list:
    """Per-axis basis-derivative weights at tile-local midpoint samples.

    The sample layout repeats identically in every tile, so one (samples, 4)
    matrix per axis and derivative order serves the whole grid.
    """
    weights = []
    for d in range(3):
        r = geometry.tile_spacing[d]
        n = samples_per_tile[d]
        x = (np.arange(n) + 0.5) * (r / n)
        xv = np.stack([np.ones_like(x), x, x ** 2, x ** 3], axis=1)
        weights.append([xv @ core.build_q(r, o).entries.T for o in range(4)])
    return weights


def quadrature_penalty(grid, weights, samples_per_tile) -> PenaltyValueBreakdown:
    """Midpoint-rule penalties using exact basis derivatives at the samples.

    The integrand values are exact; only the integration is approximate, which
    makes this the reference oracle for the closed-form path. Converges O(h^2)
    in the per-axis sample spacing.
    """
    from .regularizers_analytic import RegularizerWeights

    if not isinstance(weights, RegularizerWeights):
        weights = RegularizerWeights.from_array(weights)
    spt = tuple(int(s) for s in core._triple(samples_per_tile, "samples_per_tile", int))
    if any(s < 2 for s in spt):
        raise ValueError(f"need at least 2 samples per tile per axis, got {spt}")

    geometry = grid.geometry
    gmap = core.support_index_map(geometry)
    blocks = [grid.coefficients[c].ravel()[gmap].reshape(-1, 4, 4, 4) for c in range(3)]
    wts = _tile_midpoint_weights(geometry, spt)
    cell = float(np.prod(geometry.tile_spacing)) / float(np.prod(spt))

    terms = np.zeros(5)
    diag_firsts = []
    for c in range(3):
        maps: dict = {}

        def deriv(orders, comp=c) -> np.ndarray:
            if orders not in maps:
                a = np.tensordot(blocks[comp], wts[0][orders[0]], axes=([1], [1]))  # (T,4,4,s1)
                a = np.tensordot(a, wts[1][orders[1]], axes=([1], [1]))             # (T,4,s1,s2)
                a = np.tensordot(a, wts[2][orders[2]], axes=([1], [1]))             # (T,s1,s2,s3)
                maps[orders] = a
            return maps[orders]

        f0 = deriv((0, 0, 0))
        terms[4] += np.sum(f0 * f0)
        for j in range(3):
            orders = tuple(1 if a == j else 0 for a in range(3))
            g = deriv(orders)
            terms[0] += np.sum(g * g)
            for k in range(3):
                orders2 = tuple((1 if a == j else 0) + (1 if a == k else 0) for a in range(3))
                g2 = deriv(orders2)
                terms[1] += np.sum(g2 * g2)
                for q in range(3):
                    orders3 = tuple(
                        (1 if a == j else 0) + (1 if a == k else 0) + (1 if a == q else 0)
                        for a in range(3)
                    )
                    g3 = deriv(orders3)
                    terms[3] += np.sum(g3 * g3)
        diag_firsts.append(deriv(tuple(1 if a == c else 0 for a in range(3))))

    s3_cross = 0.0
    for a in range(3):
        for b in range(a + 1, 3):
            s3_cross += np.sum(diag_firsts[a] * diag_firsts[b])
    terms[2] = terms[0] + s3_cross

    terms *= cell
    return PenaltyValueBreakdown(terms=terms, value=float(weights.as_array() @ terms))
