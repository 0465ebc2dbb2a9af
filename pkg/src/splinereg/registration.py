"""Mean-squared-error B-spline registration with analytic gradients.

The driver minimizes C = sum (M(x + v(x)) - F(x))^2 + S(v) over the coefficient
lattice using a limited-memory quasi-Newton loop (two-loop recursion) with
Armijo backtracking. Stages run coarse to fine; each stage fits its grid to
the previous stage's field by separable least squares before optimizing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bspline_core as core
from .regularizers_analytic import (
    RegularizerWeights,
    build_vbank,
    weighted_value_and_gradient,
)
from .volume_io import Volume, box_downsample, covering_geometry, trilinear_sample


@dataclass(frozen=True)
class RegistrationStage:
    grid_spacing: tuple
    max_iterations: int = 100
    image_downsample: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grid_spacing", core._triple(self.grid_spacing, "grid_spacing"))
        if any(s <= 0 for s in self.grid_spacing):
            raise ValueError(f"grid spacing must be positive, got {self.grid_spacing}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.image_downsample < 1:
            raise ValueError("image_downsample must be >= 1")


@dataclass(frozen=True)
class OptimizerSettings:
    history_size: int = 10
    gradient_tolerance: float = 1e-4
    step_tolerance: float = 1e-9

    def __post_init__(self):
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")


@dataclass(frozen=True)
class RegistrationConfig:
    stages: tuple
    weights: RegularizerWeights = RegularizerWeights()
    optimizer: OptimizerSettings = OptimizerSettings()

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("need at least one registration stage")
        for prev, cur in zip(stages, stages[1:]):
            if any(c > p for c, p in zip(cur.grid_spacing, prev.grid_spacing)):
                raise ValueError("stage grid spacings must be non-increasing coarse to fine")
        object.__setattr__(self, "stages", stages)


@dataclass
class StageHistory:
    grid_spacing: tuple
    iterations: int
    costs: list = field(default_factory=list)
    stop_reason: str = ""


def mse_cost_grad(
    fixed: Volume,
    moving: Volume,
    grid: core.ControlPointGrid,
    grad_mode: str = "exact",
) -> tuple:
    """Sum of squared intensity differences under the warp, and its gradient
    with respect to every coefficient.

    Moving-image values come from trilinear interpolation. grad_mode picks the
    image-gradient model: 'exact' differentiates the trilinear interpolant
    itself (the finite-difference check of the cost closes to roundoff);
    'central' interpolates precomputed central-difference gradient volumes,
    which is smoother but no longer the exact derivative of the cost.
    Out-of-bounds warped samples contribute nothing to value or gradient.
    """
    if not fixed.same_geometry(moving):
        raise ValueError("fixed and moving volumes must share dims, spacing and origin")
    if fixed.components != 1 or moving.components != 1:
        raise ValueError("registration expects scalar volumes")
    if grad_mode not in ("exact", "central"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")

    geometry = grid.geometry
    axes = [fixed.axis_coords(d) for d in range(3)]
    near = [axes[0][0], axes[1][0], axes[2][0]]
    far = [axes[0][-1], axes[1][-1], axes[2][-1]]
    if not (geometry.contains(near) and geometry.contains(far)):
        raise ValueError("grid extent does not cover the fixed image")

    disp = core.sample_displacement(grid, axes)
    pts = np.empty(fixed.dims + (3,))
    pts[..., 0] = axes[0][:, None, None]
    pts[..., 1] = axes[1][None, :, None]
    pts[..., 2] = axes[2][None, None, :]
    warped_pts = pts + disp

    if grad_mode == "exact":
        m_vals, m_grads, inside = trilinear_sample(moving, warped_pts, gradient=True)
    else:
        m_vals, inside = trilinear_sample(moving, warped_pts)
        g_axes = np.gradient(moving.data, *moving.spacing)
        m_grads = np.empty(fixed.dims + (3,))
        for d in range(3):
            gvol = Volume(data=g_axes[d], spacing=moving.spacing, origin=moving.origin)
            m_grads[..., d], _ = trilinear_sample(gvol, warped_pts)
        m_grads = np.where(inside[..., None], m_grads, 0.0)

    diff = np.where(inside, m_vals - fixed.data, 0.0)
    value = float(np.sum(diff * diff))

    ws = [core.axis_weight_matrix(geometry, d, axes[d], 0) for d in range(3)]
    gradient = np.empty((3,) + geometry.lattice_shape)
    for c in range(3):
        weighted = 2.0 * diff * m_grads[..., c]
        gradient[c] = core.scatter_separable(weighted, *ws)
    return value, gradient


def fit_grid_to_field(
    geometry: core.GridGeometry, axes, field_samples: np.ndarray
) -> core.ControlPointGrid:
    """Least-squares coefficients reproducing a displacement field sampled on a
    separable grid. The design matrix is a Kronecker product, so the normal
    equations split per axis; fields exactly representable on the lattice are
    recovered exactly."""
    ws = [core.axis_weight_matrix(geometry, d, axes[d], 0) for d in range(3)]
    solvers = []
    for w in ws:
        gram = w.T @ w
        solvers.append(np.linalg.solve(gram, w.T))  # (P, S)
    coeffs = np.empty((3,) + geometry.lattice_shape)
    for c in range(3):
        out = np.tensordot(solvers[0], field_samples[..., c], axes=(1, 0))  # (P1,S2,S3)
        out = np.tensordot(out, solvers[1], axes=(1, 1))                    # (P1,S3,P2)
        out = np.tensordot(out, solvers[2], axes=(1, 1))                    # (P1,P2,P3)
        coeffs[c] = out
    return core.ControlPointGrid(geometry, coeffs)


def _lbfgs(fun, x0: np.ndarray, max_iterations: int, settings: OptimizerSettings) -> tuple:
    """Two-loop-recursion L-BFGS with Armijo backtracking.

    Returns (x, costs, stop_reason). costs holds the accepted iterate values,
    monotone non-increasing by construction of the line search.
    """
    x = x0.copy()
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise RuntimeError(f"non-finite cost at the initial point: f={f}")
    costs = [f]
    s_hist: list = []
    y_hist: list = []
    reason = "max_iterations"
    flat_count = 0

    for _ in range(max_iterations):
        gmax = float(np.max(np.abs(g)))
        if gmax < settings.gradient_tolerance:
            reason = "gradient_tolerance"
            break

        q = g.copy()
        depth = len(s_hist)
        rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
        alphas = [0.0] * depth
        for i in range(depth - 1, -1, -1):
            alphas[i] = rhos[i] * float(s_hist[i] @ q)
            q -= alphas[i] * y_hist[i]
        if depth:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
            q *= gamma
        for i in range(depth):
            beta = rhos[i] * float(y_hist[i] @ q)
            q += s_hist[i] * (alphas[i] - beta)
        direction = -q

        slope = float(g @ direction)
        if slope >= 0:  # curvature information went bad; fall back to steepest descent
            direction = -g
            slope = -float(g @ g)

        step = 1.0
        accepted = False
        for _ in range(40):
            x_new = x + step * direction
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            reason = "line_search_failure"
            break
        if not np.all(np.isfinite(g_new)):
            raise RuntimeError("non-finite gradient during optimization")

        s_vec = x_new - x
        y_vec = g_new - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-10 * float(np.linalg.norm(s_vec)) * float(np.linalg.norm(y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > settings.history_size:
                s_hist.pop(0)
                y_hist.pop(0)

        rel_drop = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        costs.append(f)
        if rel_drop < settings.step_tolerance:
            flat_count += 1
            if flat_count >= 3:
                reason = "step_tolerance"
                break
        else:
            flat_count = 0
    return x, costs, reason


def optimize(fixed: Volume, moving: Volume, config: RegistrationConfig) -> tuple:
    """Multi-stage registration of `moving` onto `fixed`.

    Returns the final ControlPointGrid (on the last stage's geometry) and a
    list of StageHistory records. Costs within a stage are monotone
    non-increasing; a non-finite cost aborts with a diagnostic.
    """
    if not fixed.same_geometry(moving):
        raise ValueError("fixed and moving volumes must share dims, spacing and origin")

    grid = None
    histories = []
    for stage in config.stages:
        vol_f = box_downsample(fixed, stage.image_downsample)
        vol_m = box_downsample(moving, stage.image_downsample)
        # every stage's lattice covers the full-resolution domain so that
        # coarse fields can always be resampled onto finer stages
        geometry = covering_geometry(fixed, stage.grid_spacing)
        bank = build_vbank(stage.grid_spacing)

        if grid is None:
            stage_grid = core.ControlPointGrid.zeros(geometry)
        else:
            axes = [vol_f.axis_coords(d) for d in range(3)]
            samples = core.sample_displacement(grid, axes)
            stage_grid = fit_grid_to_field(geometry, axes, samples)

        shape = (3,) + geometry.lattice_shape

        def cost(x, geometry=geometry, bank=bank, vol_f=vol_f, vol_m=vol_m, shape=shape):
            g = core.ControlPointGrid(geometry, x.reshape(shape))
            mse_val, mse_grad = mse_cost_grad(vol_f, vol_m, g)
            pen_val, pen_grad = weighted_value_and_gradient(g, config.weights, bank)
            return mse_val + pen_val, (mse_grad + pen_grad).ravel()

        x, costs, reason = _lbfgs(
            cost, stage_grid.coefficients.ravel(), stage.max_iterations, config.optimizer
        )
        grid = core.ControlPointGrid(geometry, x.reshape(shape))
        histories.append(
            StageHistory(
                grid_spacing=stage.grid_spacing,
                iterations=len(costs) - 1,
                costs=[float(c) for c in costs],
                stop_reason=reason,
            )
        )
    return grid, histories
