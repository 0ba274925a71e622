"""Initial-data families with threshold-linked parameters.

Profiles are sums of a fixed smooth compactly supported bump eta with
max exactly 1 and support (0, 1), plus plateau profiles with smooth
shoulders.  Builders are pure functions of their parameters: a fixed grid
reproduces bit-identical initial arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ConstructionError, FieldState, Grid1D, make_state
from .kernels import (KernelSpec, aggregation_velocity, eval_psi, kernel_l1,
                      convolve_density_cellavg, validate_kernel)

KINDS = ("subcritical", "supercritical", "critical_interval", "critical_regular",
         "pure_aggregation", "separated_supports", "bounded_baseline")


def eta(x):
    """Smooth bump: eta >= 0, max eta = 1, supp eta = (0, 1)."""
    x = np.asarray(x, dtype=float)
    inside = (x > 0.0) & (x < 1.0)
    xs = np.clip(x, 1e-12, 1.0 - 1e-12)
    return np.where(inside, np.exp(1.0 - 1.0 / (4.0 * xs * (1.0 - xs))), 0.0)


def smooth_ramp(u):
    """C-infinity monotone 0 -> 1 transition on [0, 1]."""
    u = np.asarray(u, dtype=float)
    uc = np.clip(u, 1e-12, 1.0 - 1e-12)
    a = np.exp(-1.0 / uc)
    b = np.exp(-1.0 / (1.0 - uc))
    out = a / (a + b)
    return np.where(u <= 0.0, 0.0, np.where(u >= 1.0, 1.0, out))


def plateau(x, x1, x2, w):
    """1 on [x1, x2], smooth shoulders of width w, support (x1-w, x2+w)."""
    x = np.asarray(x, dtype=float)
    up = smooth_ramp((x - (x1 - w)) / w)
    down = smooth_ramp(((x2 + w) - x) / w)
    return np.where(x < x1, up, 1.0) * np.where(x > x2, down, 1.0)


@dataclass
class Scenario:
    """A named initial-data construction bound to a kernel and a grid."""

    kind: str
    kernel: KernelSpec
    grid: Grid1D
    rho0: np.ndarray
    g0: np.ndarray
    momentum: float = 0.0
    params: dict = field(default_factory=dict)
    marked: dict = field(default_factory=dict)

    def initial_state(self) -> FieldState:
        return make_state(0.0, self.rho0.copy(), self.g0.copy(), self.grid)

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho0) * self.grid.dx)

    def u0_norm(self) -> float:
        from .fields import recover_velocity
        vel = recover_velocity(self.kernel, self.initial_state(), self.momentum)
        return float(np.max(np.abs(vel.centers)))


def _mass_quantiles(rho, grid, k=8):
    cum = np.cumsum(rho) * grid.dx
    total = cum[-1]
    targets = (np.arange(k) + 0.5) / k * total
    idx = np.searchsorted(cum, targets)
    return [float(grid.centers()[min(i, grid.n - 1)]) for i in idx]


def _enforce_torus_compat(kernel, grid, rho0, g_floor, shape):
    """Scale the nonnegative part of G0 so int G0 = |psi|_L1 * mass."""
    l1 = kernel_l1(kernel, grid)
    mass = float(np.sum(rho0) * grid.dx)
    L = grid.length
    need = l1 * mass - g_floor * L
    shape_int = float(np.sum(shape) * grid.dx)
    if shape_int <= 0.0 and abs(need) > 1e-14:
        raise ConstructionError("cannot satisfy torus compatibility with a "
                                "zero G-profile")
    beta = need / shape_int if shape_int > 0 else 0.0
    if beta < 0.0:
        raise ConstructionError(
            f"torus compatibility needs int G0 = {l1 * mass:.4g} below the "
            f"floor contribution {g_floor * L:.4g}; reduce the mass or floor")
    return g_floor + beta * shape, beta


# ---------------------------------------------------------------------------
# Builders (one per kind)
# ---------------------------------------------------------------------------

def _build_subcritical(params, kernel, grid):
    if grid.kind != "torus":
        raise ConstructionError("subcritical scenario runs on a torus")
    g_min = params.get("g_min", 0.5)
    if not g_min > 0.0:
        raise ConstructionError(
            f"subcritical hypothesis inf G0 > 0 violated: g_min={g_min}")
    x = grid.centers()
    center = params.get("bump_center", 0.2)
    width = params.get("bump_width", 0.9)
    base = params.get("rho_base", 0.1)
    amp = params.get("rho_amp", 0.3)
    shape = eta((x - center) / width)
    rho0 = base + amp * shape
    g0, beta = _enforce_torus_compat(kernel, grid, rho0, g_min, shape)
    marked = {f"q{i}": v for i, v in enumerate(_mass_quantiles(rho0, grid))}
    return rho0, g0, marked, {"g_min": g_min, "beta": beta}


def _build_supercritical(params, kernel, grid):
    g_min = params.get("g_min", -1.0)
    if not g_min < 0.0:
        raise ConstructionError(
            f"supercritical hypothesis inf G0 < 0 violated: g_min={g_min}")
    x = grid.centers()
    if grid.kind == "torus":
        base = params.get("rho_base", 0.1)
        amp = params.get("rho_amp", 0.3)
        shape = eta((x - params.get("bump_center", 0.2)) / params.get("bump_width", 0.9))
        rho0 = base + amp * shape
        gshape = eta((x - params.get("g_center", 1.05)) / params.get("g_width", 0.8))
        g0, _ = _enforce_torus_compat(kernel, grid, rho0, g_min, gshape)
        marked = {}
        extra = {"g_min": g_min}
    else:
        # isolated-path variant: compactly supported kernel, the mass far
        # enough away that psi*rho vanishes identically on the G support,
        # making the tracked minimum follow the pure Riccati law
        if kernel.family != "bounded_lipschitz":
            raise ConstructionError("isolated supercritical windows need the "
                                    "compactly supported bounded kernel")
        half = params.get("plateau_half_width", 0.6)
        shoulder = params.get("shoulder", 0.5)
        sep = params.get("separation", 6.0)
        rho_amp = params.get("rho_amp", 0.3)
        g0 = g_min * plateau(x, -half, half, shoulder)
        rho0 = rho_amp * eta(x - sep)
        marked = {"g_min_path": 0.0}
        extra = {"g_min": g_min, "separation": sep,
                 "plateau_half_width": half}
    return rho0, g0, marked, extra


def _critical_interval_profiles(params, grid):
    x = grid.centers()
    a = params.get("a", 0.0)
    b = params.get("b", 1.0)
    c = params.get("floor_c", 1.0)
    shoulder = params.get("shoulder", 0.25)
    if not b > a:
        raise ConstructionError("interval needs b > a")
    if not c > 0.0:
        raise ConstructionError("density floor must be positive")
    rho0 = c * plateau(x, a, b, shoulder)
    return rho0, a, b, c


def _build_critical_interval(params, kernel, grid):
    rho0, a, b, c = _critical_interval_profiles(params, grid)
    x = grid.centers()
    g_amp = params.get("g_amp", 1e-3)
    g_dist = params.get("g_dist", 2.0)
    g0 = g_amp * (eta(x - (b + g_dist)) + eta(x - (a - g_dist - 1.0)))
    if grid.kind == "torus":
        shape = g0 / max(g_amp, 1e-300)
        g0, _ = _enforce_torus_compat(kernel, grid, rho0, 0.0, shape)
    if not np.all(g0 >= 0.0):
        raise ConstructionError("critical-interval hypothesis G0 >= 0 violated")
    marked = {"pair_a": a, "pair_b": b}
    return rho0, g0, marked, {"a": a, "b": b, "floor_c": c}


def _build_critical_regular(params, kernel, grid):
    x = grid.centers()
    center = params.get("bump_center", 0.0)
    width = params.get("bump_width", 1.0)
    q_base = params.get("q_base", 0.5)
    q_amp = params.get("q_amp", 0.25)
    gshape = eta((x - center) / width)
    qprof = q_base + q_amp * np.cos(np.pi * (x - center) / max(width, 1e-12))
    if grid.kind == "torus":
        l1 = kernel_l1(kernel, grid)
        # rho0 = q * G0 with G0 = beta * shape; compatibility fixes beta scale
        # via int G0 = l1 * int(q G0), i.e. independent of beta: adjust q_base
        num = float(np.sum(gshape) * grid.dx)
        den = float(l1 * np.sum(qprof * gshape) * grid.dx)
        qprof = qprof * (num / den)
    g0 = params.get("g_amp", 1.0) * gshape
    rho0 = qprof * g0
    if np.any(rho0 < 0.0):
        raise ConstructionError("critical-regular ratio q0 must keep rho0 >= 0")
    marked = {}
    return rho0, g0, marked, {"q_norm": float(np.max(np.abs(qprof)))}


def _build_pure_aggregation(params, kernel, grid):
    if grid.kind == "torus":
        raise ConstructionError("aggregation runs need a window domain "
                                "(no periodic velocity primitive exists)")
    rho0, a, b, c = _critical_interval_profiles(params, grid)
    g0 = np.zeros(grid.n)
    marked = {"pair_a": a, "pair_b": b}
    return rho0, g0, marked, {"a": a, "b": b, "floor_c": c}


def counterexample_params(rho0, grid, kernel: KernelSpec, u0_norm: float,
                          a: float, b: float, floor_c: float,
                          t_star: float | None = None) -> dict:
    """Constants of the density-blows-while-G-stays-bounded construction.

    C = psi(1) * m bounds psi*rho on the far G-support while the supports
    stay separated by at least 1; eps = C / (2 exp(C T*) - 1) keeps G >= -C
    until T*; L = 2 + 2 T* |u0| keeps the supports separated that long.
    t_star defaults to the comparison-principle bound and may be replaced by
    a measured collapse time of the matching aggregation run.
    """
    mass = float(np.sum(np.asarray(rho0)) * grid.dx)
    s = kernel.s
    lam = kernel.lam
    if t_star is None:
        t_star = 2.0 ** s / (floor_c * (b - a) ** (1.0 - s) * lam * s)
    psi1 = float(eval_psi(kernel, 1.0))
    C = psi1 * mass
    if C <= 0.0:
        return {"C": 0.0, "T_star": t_star, "L": 2.0, "epsilon": None,
                "note": "psi(1) = 0: psi*rho vanishes on the far support and "
                        "G follows the pure Riccati law"}
    eps = C / (2.0 * math.exp(C * t_star) - 1.0)
    L = 2.0 + 2.0 * t_star * u0_norm
    return {"C": C, "T_star": t_star, "L": L, "epsilon": eps}


def _build_separated_supports(params, kernel, grid):
    if grid.kind == "torus":
        raise ConstructionError("the separated-supports construction lives "
                                "on the line")
    rho0, a, b, c = _critical_interval_profiles(params, grid)
    x = grid.centers()

    # velocity scale of the aggregation phase fixes the separation L
    state = make_state(0.0, rho0, np.zeros(grid.n), grid)
    u_aggr = aggregation_velocity(kernel, state)
    t_star = params.get("t_star")  # optional measured collapse time
    cp = counterexample_params(rho0, grid, kernel, float(np.max(np.abs(u_aggr))),
                               a, b, c, t_star=t_star)
    if cp["epsilon"] is None:
        raise ConstructionError("kernel vanishes at distance 1; the bounded-G "
                                "construction degenerates (see params note)")
    eps = params.get("epsilon", cp["epsilon"])
    L = params.get("L_dist", cp["L"])
    g0 = -eps * eta(x - L)
    if grid.x_max < L + 1.0 + 2.0 * kernel.tail_length:
        raise ConstructionError(
            f"window too small for the separation L={L:.3g}; "
            f"needs x_max >= {L + 1 + 2 * kernel.tail_length:.3g}")
    marked = {"pair_a": a, "pair_b": b, "g_path": L + 0.5}
    extra = dict(cp, a=a, b=b, floor_c=c, epsilon=eps, L_dist=L)
    return rho0, g0, marked, extra


def _build_bounded_baseline(params, kernel, grid):
    if kernel.family not in ("bounded_lipschitz", "constant"):
        raise ConstructionError("bounded-baseline contrast needs a bounded "
                                "kernel family")
    return _build_critical_interval(params, kernel, grid)


_BUILDERS = {
    "subcritical": _build_subcritical,
    "supercritical": _build_supercritical,
    "critical_interval": _build_critical_interval,
    "critical_regular": _build_critical_regular,
    "pure_aggregation": _build_pure_aggregation,
    "separated_supports": _build_separated_supports,
    "bounded_baseline": _build_bounded_baseline,
}


def build_scenario(kind: str, kernel: KernelSpec, grid: Grid1D,
                   params: dict | None = None,
                   momentum: float = 0.0) -> Scenario:
    """Construct and validate a scenario of the given kind."""
    if kind not in KINDS:
        raise ConstructionError(f"unknown scenario kind {kind!r}")
    if grid.kind == "torus" and kernel.c > 0.0:
        raise ConstructionError("constant kernel offsets are incompatible "
                                "with torus domains (no periodic primitive)")
    validate_kernel(kernel)
    params = dict(params or {})
    rho0, g0, marked, extra = _BUILDERS[kind](params, kernel, grid)
    sc = Scenario(kind=kind, kernel=kernel, grid=grid, rho0=rho0, g0=g0,
                  momentum=momentum, params={**params, **extra}, marked=marked)
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario) -> None:
    """Independent re-check of the kind invariants on the built arrays."""
    rho0, g0 = sc.rho0, sc.g0
    if np.any(rho0 < 0.0) or not np.sum(rho0) * sc.grid.dx > 0.0:
        raise ConstructionError("rho0 must be non-negative with positive mass")
    gmin = float(np.min(g0))
    kind = sc.kind
    if kind == "subcritical" and not gmin > 0.0:
        raise ConstructionError(f"subcritical needs inf G0 > 0, got {gmin}")
    if kind == "supercritical" and not gmin < 0.0:
        raise ConstructionError(f"supercritical needs inf G0 < 0, got {gmin}")
    if kind in ("critical_interval", "bounded_baseline"):
        if gmin < 0.0:
            raise ConstructionError("critical data needs G0 >= 0")
        a, b = sc.params["a"], sc.params["b"]
        c = sc.params["floor_c"]
        x = sc.grid.centers()
        on = (x >= a) & (x <= b)
        if np.any(np.abs(g0[on]) > 1e-14):
            raise ConstructionError("G0 must vanish on the marked interval")
        if np.any(rho0[on] < c * (1.0 - 1e-12)):
            raise ConstructionError("rho0 must stay at or above the floor "
                                    "on the marked interval")
    if kind == "pure_aggregation" and np.any(g0 != 0.0):
        raise ConstructionError("aggregation reduction needs G0 == 0")
    if kind == "critical_regular":
        if gmin < 0.0:
            raise ConstructionError("critical-regular needs G0 >= 0")
        live = g0 > 1e-13 * np.max(g0)
        q = rho0[live] / g0[live]
        if not np.all(np.isfinite(q)):
            raise ConstructionError("ratio rho0/G0 must stay bounded")
    if kind == "separated_supports":
        supp_r = sc.grid.centers()[rho0 > 0]
        supp_g = sc.grid.centers()[np.abs(g0) > 0]
        if len(supp_r) and len(supp_g):
            dist = supp_g.min() - supp_r.max()
            if dist < sc.params["L_dist"] - 1.0 - 1e-9:
                raise ConstructionError("supports closer than L - 1")
    if sc.grid.kind == "torus":
        from .fields import torus_compatibility_residual
        res = torus_compatibility_residual(sc.kernel, sc.initial_state())
        scale = kernel_l1(sc.kernel, sc.grid) * sc.mass + 1e-300
        if abs(res) > 1e-9 * scale:
            raise ConstructionError(
                f"torus compatibility residual {res:.3e} after construction")
