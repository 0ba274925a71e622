"""Grids, field states, particle ensembles, and velocity recovery.

The velocity is determined by the state only up to an additive constant
(its slope is fixed by du/dx = G - psi*rho).  The constant is anchored so
the total momentum int rho*u dx equals a prescribed target, which the
alignment force conserves by antisymmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import KernelSpec, get_plan, KernelError


class ConstructionError(ValueError):
    """A state or derived object violates its construction hypotheses."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform 1D grid, either periodic ('torus') or a finite 'window'."""

    kind: str
    n: int
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("torus", "window"):
            raise ConstructionError(f"unknown domain kind {self.kind!r}")
        if self.n < 16:
            raise ConstructionError("grid needs at least 16 cells")
        if self.kind == "torus" and self.n % 2 != 0:
            raise ConstructionError("torus grids need an even cell count")
        if not self.x_max > self.x_min:
            raise ConstructionError("grid extent must be positive")

    @classmethod
    def torus(cls, length: float, n: int) -> "Grid1D":
        return cls("torus", n, 0.0, float(length))

    @classmethod
    def window(cls, x_min: float, x_max: float, n: int) -> "Grid1D":
        return cls("window", n, float(x_min), float(x_max))

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n) + 0.5) * self.dx

    def edges(self) -> np.ndarray:
        return self.x_min + np.arange(self.n + 1) * self.dx

    def wrap(self, x):
        """Map positions into the fundamental domain (torus only)."""
        if self.kind != "torus":
            return x
        return self.x_min + np.mod(x - self.x_min, self.length)

    def key(self):
        return (self.kind, self.n, self.x_min, self.x_max)


@dataclass(frozen=True)
class FieldState:
    """Grid sampling of the density rho and the quantity G at one time.

    g holds the full-kernel quantity G = du/dx + psi*rho (offset included
    when the kernel carries one).
    """

    t: float
    rho: np.ndarray
    g: np.ndarray
    grid: Grid1D

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho) * self.grid.dx)


def make_state(t: float, rho, g, grid: Grid1D) -> FieldState:
    rho = np.ascontiguousarray(rho, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    if rho.shape != (grid.n,) or g.shape != (grid.n,):
        raise ConstructionError("field arrays must match the grid size")
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(g))):
        raise ConstructionError("field arrays contain non-finite entries")
    if np.any(rho < 0.0):
        raise ConstructionError("density must be non-negative")
    if not np.sum(rho) * grid.dx > 0.0:
        raise ConstructionError("total mass must be positive")
    return FieldState(float(t), rho, g, grid)


def torus_compatibility_residual(kernel: KernelSpec, state: FieldState) -> float:
    """int (G - psi*rho) dx on the torus; must vanish for a periodic u."""
    if state.grid.kind != "torus":
        return 0.0
    plan = get_plan(kernel, state.grid)
    conv_avg = plan.cellavg(state.rho) + kernel.c * state.mass
    return float(np.sum(state.g - conv_avg) * state.grid.dx)


@dataclass
class VelocityField:
    """Recovered velocity: exact interface and cell-center values.

    dudx holds the exact cell averages of du/dx = G - psi*rho; u is the
    piecewise-linear field with these slopes, so interface values are exact
    for cell-constant (rho, G).
    """

    centers: np.ndarray
    interfaces: np.ndarray
    dudx: np.ndarray
    conv_avg: np.ndarray
    momentum: float

    @property
    def max_speed(self) -> float:
        return float(np.max(np.abs(self.interfaces)))

    def at(self, grid: Grid1D, x):
        """Evaluate u at arbitrary positions (slope-consistent interpolation)."""
        xq = np.atleast_1d(np.asarray(x, dtype=float))
        if grid.kind == "torus":
            xq = grid.wrap(xq)
        j = np.clip(((xq - grid.x_min) / grid.dx).astype(int), 0, grid.n - 1)
        e_j = grid.x_min + j * grid.dx
        out = self.interfaces[j] + self.dudx[j] * (xq - e_j)
        return out if np.ndim(x) else float(out[0])


def recover_velocity(kernel: KernelSpec, state: FieldState,
                     momentum_target: float = 0.0) -> VelocityField:
    """Integrate du/dx = G - psi*rho and anchor by total momentum.

    On a torus the compatibility residual int (G - psi*rho) dx must vanish,
    otherwise no periodic velocity exists and a ConstructionError names the
    residual.
    """
    grid = state.grid
    plan = get_plan(kernel, grid)
    mass = state.mass
    offset = kernel.c * mass
    conv_avg = plan.cellavg(state.rho) + offset
    savg = state.g - conv_avg
    dx = grid.dx

    if grid.kind == "torus":
        residual = float(np.sum(savg) * dx)
        scale = float(np.sum(np.abs(state.g)) * dx + np.sum(conv_avg) * dx) + 1e-300
        if abs(residual) > 1e-7 * scale:
            raise ConstructionError(
                f"torus incompatibility: int(G - psi*rho) dx = {residual:.3e} "
                f"(relative {abs(residual) / scale:.3e}); no periodic velocity exists")

    interfaces = np.empty(grid.n + 1)
    interfaces[0] = 0.0
    np.cumsum(savg * dx, out=interfaces[1:])

    # exact center values: u(x_i) = int G - int psi*rho, both in closed form
    w_c = plan.cumint_centers(state.rho)
    w_e0 = plan.cumint_edges(state.rho)[0]
    x_c = grid.centers()
    g_cum = np.concatenate(([0.0], np.cumsum(state.g * dx)))[:-1] + state.g * dx / 2
    centers = g_cum - (w_c - w_e0) - offset * (x_c - grid.edges()[0])

    # centers and interfaces share the reference u(e_0) = 0, so one anchor
    # shift keeps them consistent
    anchor = (momentum_target - float(np.sum(state.rho * centers) * dx)) / mass
    centers = centers + anchor
    interfaces = interfaces + anchor

    return VelocityField(centers=centers, interfaces=interfaces, dudx=savg,
                         conv_avg=conv_avg, momentum=momentum_target)


# ---------------------------------------------------------------------------
# Lagrangian ensembles
# ---------------------------------------------------------------------------

@dataclass
class ParticleEnsemble:
    """Sorted alignment particles with carried field values for diagnostics."""

    t: float
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    rho_c: np.ndarray
    g_c: np.ndarray
    grid: Grid1D

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def mass(self) -> float:
        return float(np.sum(self.m))

    @property
    def momentum(self) -> float:
        return float(np.sum(self.m * self.v))

    def gaps(self) -> np.ndarray:
        if self.grid.kind == "torus":
            g = np.diff(self.x)
            wrap = self.grid.length - (self.x[-1] - self.x[0])
            return np.concatenate((g, [wrap]))
        return np.diff(self.x)

    def copy(self, **kw) -> "ParticleEnsemble":
        base = dict(t=self.t, x=self.x.copy(), m=self.m, v=self.v.copy(),
                    rho_c=self.rho_c.copy(), g_c=self.g_c.copy(), grid=self.grid)
        base.update(kw)
        return ParticleEnsemble(**base)


def sample_cells(values: np.ndarray, grid: Grid1D, x):
    """Linear interpolation of cell-centered values at positions x."""
    xq = np.atleast_1d(np.asarray(x, dtype=float))
    if grid.kind == "torus":
        xq = grid.wrap(xq)
    pos = (xq - grid.x_min) / grid.dx - 0.5
    if grid.kind == "torus":
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        a = values[np.mod(i0, grid.n)]
        b = values[np.mod(i0 + 1, grid.n)]
    else:
        pos = np.clip(pos, 0.0, grid.n - 1.0)
        i0 = np.clip(np.floor(pos).astype(int), 0, grid.n - 2)
        frac = pos - i0
        a = values[i0]
        b = values[i0 + 1]
    out = a + frac * (b - a)
    return out if np.ndim(x) else float(out[0])


def particles_from_fields(kernel: KernelSpec, state: FieldState, n_particles: int,
                          momentum_target: float = 0.0) -> ParticleEnsemble:
    """Place equal-mass particles at mass quantiles of rho.

    Velocities sample the recovered field; carried rho and G interpolate the
    grid values.  The deposited density converges to rho in L1 as N grows.
    """
    if n_particles < 2:
        raise ConstructionError("need at least 2 particles")
    grid = state.grid
    dx = grid.dx
    mass = state.mass
    cum = np.concatenate(([0.0], np.cumsum(state.rho * dx)))
    targets = (np.arange(n_particles) + 0.5) * (cum[-1] / n_particles)
    j = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, grid.n - 1)
    local = state.rho[j]
    local = np.where(local > 0, local, 1.0)  # targets never fall inside vacuum
    x = grid.edges()[j] + (targets - cum[j]) / local
    vel = recover_velocity(kernel, state, momentum_target)
    v = vel.at(grid, x)
    rho_c = sample_cells(state.rho, grid, x)
    g_c = sample_cells(state.g, grid, x)
    m = np.full(n_particles, mass / n_particles)
    return ParticleEnsemble(t=state.t, x=np.asarray(x, dtype=float), m=m,
                            v=np.asarray(v, dtype=float),
                            rho_c=np.asarray(rho_c, dtype=float),
                            g_c=np.asarray(g_c, dtype=float), grid=grid)


def deposit_density(ens: ParticleEnsemble, grid: Grid1D) -> np.ndarray:
    """Conservative block deposit of particle masses onto a grid density.

    Each particle's mass is spread uniformly over the interval between the
    midpoints to its neighbours (the inverse of the quantile construction),
    then integrated exactly over the grid cells.  Exactly mass-conserving
    and first-order accurate in the particle spacing.
    """
    x = np.asarray(ens.x, dtype=float)
    n_p = len(x)
    if n_p < 2:
        raise ConstructionError("deposit needs at least 2 particles")
    inner = 0.5 * (x[:-1] + x[1:])
    if grid.kind == "torus":
        L = grid.length
        e0 = 0.5 * (x[0] + x[-1] - L)
        block_edges = np.concatenate(([e0], inner, [e0 + L]))
    else:
        e0 = x[0] - 0.5 * (x[1] - x[0])
        eN = x[-1] + 0.5 * (x[-1] - x[-2])
        block_edges = np.concatenate(([e0], inner, [eN]))
    cum = np.concatenate(([0.0], np.cumsum(ens.m)))  # mass below each edge
    total = cum[-1]

    def mass_below(q):
        """Piecewise-linear cumulative mass at positions q (one period)."""
        j = np.clip(np.searchsorted(block_edges, q) - 1, 0, n_p - 1)
        w = block_edges[j + 1] - block_edges[j]
        frac = np.clip((q - block_edges[j]) / np.maximum(w, 1e-300), 0.0, 1.0)
        out = cum[j] + frac * ens.m[j]
        out = np.where(q <= block_edges[0], 0.0, out)
        out = np.where(q >= block_edges[-1], total, out)
        return out

    edges = grid.edges()
    if grid.kind == "torus":
        L = grid.length
        winds = np.floor((edges - block_edges[0]) / L)
        q = edges - winds * L
        M = winds * total + mass_below(q)
    else:
        M = mass_below(edges)
    return np.diff(M) / grid.dx


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Termination:
    status: str                      # 'completed' | 'blowup' | 'aborted'
    last_time: float
    kind: str | None = None          # blowup kind
    time_estimate: float | None = None
    location: float | None = None
    reason: str | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Trajectory:
    """Snapshots plus per-step diagnostic series and the termination record."""

    snapshots: list = field(default_factory=list)            # FieldState
    particle_snapshots: list = field(default_factory=list)   # ParticleEnsemble
    series: dict = field(default_factory=dict)               # name -> ndarray
    marked_labels: list = field(default_factory=list)
    termination: Termination | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.series.get("t", np.array([]))

    def marked_positions(self) -> np.ndarray:
        """Tracked characteristic paths, shape (steps, n_marked)."""
        return self.series.get("marked_x", np.empty((0, 0)))
