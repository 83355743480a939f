"""Uniform structured grid with a stair-step obstacle mask and discrete operators.

Cells are indexed row-major, ``c = iy * nx + ix``, with cell centers at
``((ix + 0.5) * dx, (iy + 0.5) * dy)``.  All fields are flat arrays of length
``nx * ny``; solid cells carry zeros and never enter weighted inner products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ConfigurationError(ValueError):
    """Invalid grid or solver configuration."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the computational domain.

    The obstacle is a disk discretized by stair-step cell masking: a cell is
    solid iff its center lies inside the disk.  ``obstacle_radius = 0`` means
    no obstacle.
    """

    nx: int
    ny: int
    lx: float
    ly: float
    obstacle_center: tuple[float, float] = (0.0, 0.0)
    obstacle_radius: float = 0.0
    fluid: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 6 or self.ny < 6:
            raise ConfigurationError(f"grid must be at least 6x6, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ConfigurationError("domain extents must be positive")
        if self.obstacle_radius < 0:
            raise ConfigurationError("obstacle radius must be nonnegative")
        if self.obstacle_radius > 0:
            cx, cy = self.obstacle_center
            r = self.obstacle_radius
            if not (r < cx < self.lx - r and r < cy < self.ly - r):
                raise ConfigurationError("obstacle must be fully interior to the domain")
        xc, yc = self.cell_centers()
        if self.obstacle_radius > 0:
            cx, cy = self.obstacle_center
            solid = (xc - cx) ** 2 + (yc - cy) ** 2 <= self.obstacle_radius**2
        else:
            solid = np.zeros(self.n_cells, dtype=bool)
        object.__setattr__(self, "fluid", ~solid)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        xc = np.tile((ix + 0.5) * self.dx, self.ny)
        yc = np.repeat((iy + 0.5) * self.dy, self.nx)
        return xc, yc

    def weights(self) -> np.ndarray:
        """Per-cell area weights: ``dx*dy`` on fluid cells, zero on solid cells."""
        w = np.where(self.fluid, self.cell_area, 0.0)
        return w


def _axis_rows(grid: GridSpec, axis: int):
    """Stencil rows of the one-dimensional derivative along ``axis`` (0=x, 1=y).

    Central second order in the interior, one-sided second order at the
    domain boundary (first order where only a single neighbor exists).
    Solid cells enter the stencils as ordinary neighbors: they carry the
    stored zero velocity, which keeps the skew-symmetric convective form
    energy-stable at the obstacle and keeps the full-order and reduced
    discretizations identical.
    """
    nx, ny = grid.nx, grid.ny
    fluid = grid.fluid
    h = grid.dx if axis == 0 else grid.dy
    step = 1 if axis == 0 else nx

    rows, cols, vals = [], [], []

    def has(ix, iy):
        return 0 <= ix < nx and 0 <= iy < ny

    for iy in range(ny):
        for ix in range(nx):
            c = iy * nx + ix
            if not fluid[c]:
                continue
            if axis == 0:
                m1, p1 = has(ix - 1, iy), has(ix + 1, iy)
                p2, m2 = has(ix + 2, iy), has(ix - 2, iy)
            else:
                m1, p1 = has(ix, iy - 1), has(ix, iy + 1)
                p2, m2 = has(ix, iy + 2), has(ix, iy - 2)
            if m1 and p1:
                rows += [c, c]
                cols += [c + step, c - step]
                vals += [0.5 / h, -0.5 / h]
            elif p1 and p2:
                rows += [c, c, c]
                cols += [c, c + step, c + 2 * step]
                vals += [-1.5 / h, 2.0 / h, -0.5 / h]
            elif m1 and m2:
                rows += [c, c, c]
                cols += [c, c - step, c - 2 * step]
                vals += [1.5 / h, -2.0 / h, 0.5 / h]
            elif p1:
                rows += [c, c]
                cols += [c, c + step]
                vals += [-1.0 / h, 1.0 / h]
            elif m1:
                rows += [c, c]
                cols += [c, c - step]
                vals += [1.0 / h, -1.0 / h]
            # isolated along this axis: derivative row stays zero
    n = grid.n_cells
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


_OPS_CACHE: dict = {}


def diff_ops(grid: GridSpec) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse first-derivative operators ``(Dx, Dy)``, rows on fluid cells."""
    key = (grid.nx, grid.ny, grid.lx, grid.ly, grid.fluid.tobytes())
    if key not in _OPS_CACHE:
        _OPS_CACHE[key] = (_axis_rows(grid, 0), _axis_rows(grid, 1))
    return _OPS_CACHE[key]


def boundary_edges(grid: GridSpec) -> list[tuple[int, float, float, float]]:
    """Domain-boundary edges adjacent to fluid cells.

    Returns tuples ``(cell, n_x, n_y, length)`` with the outward unit normal;
    field values on an edge are taken from the adjacent cell center
    (edge-midpoint quadrature with edge length as weight).
    """
    nx, ny = grid.nx, grid.ny
    fluid = grid.fluid
    edges = []
    for iy in range(ny):
        c = iy * nx
        if fluid[c]:
            edges.append((c, -1.0, 0.0, grid.dy))
        c = iy * nx + nx - 1
        if fluid[c]:
            edges.append((c, 1.0, 0.0, grid.dy))
    for ix in range(nx):
        c = ix
        if fluid[c]:
            edges.append((c, 0.0, -1.0, grid.dx))
        c = (ny - 1) * nx + ix
        if fluid[c]:
            edges.append((c, 0.0, 1.0, grid.dx))
    return edges


def inlet_edges(grid: GridSpec) -> list[tuple[int, float, float, float]]:
    """Edges of the single Dirichlet patch (the left/inflow boundary)."""
    return [e for e in boundary_edges(grid) if e[1] == -1.0]
