"""Threshold-linked oracles: conservation reports, BKM integrals,
comparison-principle bounds, explicit constants, and the outcome classifier.

Everything here post-processes immutable trajectories; nothing feeds back
into the solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import Trajectory, sample_cells
from .kernels import KernelSpec, eval_psi, kernel_l1


class LogisticPoleError(ValueError):
    """Evaluation at or past the comparison solution's pole."""

    def __init__(self, t_pole: float):
        super().__init__(f"comparison solution diverges at t = {t_pole:.6g}")
        self.blowup_time = t_pole


def logistic_bound(g0: float, kappa: float, t):
    """Exact solution of dg/dt = -g**2 + kappa*g with g(0) = g0.

    kappa > 0 gives the logistic form kappa*g0 / (g0 + (kappa-g0)e^{-kappa t});
    kappa = 0 degenerates to the Riccati solution g0 / (1 + g0 t).  Serves as
    a two-sided comparison oracle for G along characteristic paths: kappa
    bounds psi*rho there from above.
    """
    t_arr = np.asarray(t, dtype=float)
    if kappa == 0.0:
        denom = 1.0 + g0 * t_arr
        if np.any(denom <= 0.0):
            raise LogisticPoleError(-1.0 / g0)
        out = g0 / denom
    else:
        if g0 < 0.0 < kappa:
            t_pole = math.log((kappa - g0) / (-g0)) / kappa
            if np.any(t_arr >= t_pole):
                raise LogisticPoleError(t_pole)
        denom = g0 + (kappa - g0) * np.exp(-kappa * t_arr)
        out = kappa * g0 / denom
    return float(out) if np.ndim(t) == 0 else out


def riccati_bound(g0: float, t):
    """Upper comparison bound G(X(t)) <= g0 / (1 + g0 t) when psi*rho = 0."""
    return logistic_bound(g0, 0.0, t)


@dataclass
class TheoremBounds:
    """Explicit constants computed from a scenario's initial data."""

    mass: float
    psi_l1: float
    min_g0: float
    max_g0: float
    max_rho0: float
    c1: float | None = None        # 1 / |q0|_inf
    c2: float | None = None        # nonlinear-maximum-principle constant
    c_rho: float | None = None     # uniform density bound
    g_sup: float | None = None     # uniform G bound
    t_super: float | None = None   # blowup-time bound for negative minima
    t_star: float | None = None    # pair-collapse bound
    counterexample: dict | None = None

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "counterexample"}
        if self.counterexample:
            out["counterexample"] = dict(self.counterexample)
        return out


def pair_collapse_time(s: float, lam: float, floor_c: float, width: float) -> float:
    """T* = 2**s / (c * (b-a)**(1-s) * lam * s)."""
    return 2.0 ** s / (floor_c * width ** (1.0 - s) * lam * s)


def pair_collapse_curve(s: float, lam: float, floor_c: float, width: float, t):
    """Comparison bound r(t) <= [(b-a)**s - 2**-s c (b-a) lam s t]_+ ** (1/s)."""
    t = np.asarray(t, dtype=float)
    core = width ** s - 2.0 ** (-s) * floor_c * width * lam * s * t
    return np.maximum(core, 0.0) ** (1.0 / s)


def theorem_bounds(scenario) -> TheoremBounds:
    """Evaluate every applicable explicit constant from the initial data."""
    rho0 = scenario.rho0
    g0 = scenario.g0
    grid = scenario.grid
    kernel = scenario.kernel
    mass = scenario.mass
    psi_l1 = kernel_l1(kernel, grid)
    tb = TheoremBounds(mass=mass, psi_l1=psi_l1,
                       min_g0=float(np.min(g0)), max_g0=float(np.max(g0)),
                       max_rho0=float(np.max(rho0)))
    s = kernel.s
    if kernel.is_singular:
        tb.c2 = kernel.Lam * (2.0 - s) / (1.0 - s) * 2.0 ** s * mass ** (1.0 - s)
    if tb.min_g0 > 0.0:
        q0 = rho0 / g0
        tb.c1 = 1.0 / float(np.max(np.abs(q0)))
        if tb.c2 is not None:
            tb.c_rho = max(tb.max_rho0, (tb.c2 / tb.c1) ** (1.0 / (1.0 - s)))
            tb.g_sup = max(float(np.max(np.abs(g0))), psi_l1 * tb.c_rho)
    if tb.min_g0 < 0.0:
        tb.t_super = -1.0 / tb.min_g0
    p = scenario.params
    if {"a", "b", "floor_c"} <= p.keys() and kernel.is_singular:
        tb.t_star = pair_collapse_time(s, kernel.lam, p["floor_c"], p["b"] - p["a"])
    if scenario.kind == "separated_supports":
        tb.counterexample = {k: p[k] for k in ("C", "T_star", "L", "epsilon")
                             if k in p}
    return tb


# ---------------------------------------------------------------------------
# Conservation
# ---------------------------------------------------------------------------

def _interval_mass(state, x_lo: float, x_hi: float) -> float:
    """int rho over [x_lo, x_hi] with partial-cell resolution."""
    grid = state.grid
    edges = grid.edges()
    cum = np.concatenate(([0.0], np.cumsum(state.rho * grid.dx)))
    lo = np.clip((x_lo - edges[0]) / grid.dx, 0.0, grid.n)
    hi = np.clip((x_hi - edges[0]) / grid.dx, 0.0, grid.n)

    def cum_at(pos):
        j = int(min(pos, grid.n - 1e-9))
        return cum[j] + (pos - j) * grid.dx * state.rho[min(j, grid.n - 1)]

    return cum_at(hi) - cum_at(lo)


def conservation_report(traj: Trajectory, pairs: list | None = None) -> dict:
    """Drifts of total mass, momentum, int G, and marked interval masses."""
    ser = traj.series
    out = {}
    for name in ("mass", "momentum", "int_g"):
        if name in ser:
            v = ser[name]
            ref = v[0]
            drift = float(np.max(np.abs(v - ref)))
            out[name] = {"initial": float(ref), "max_abs_drift": drift,
                         "max_rel_drift": drift / (abs(ref) + 1e-300)}
    if "momentum" in ser and len(ser["t"]) > 1:
        span = float(ser["t"][-1] - ser["t"][0])
        if span > 0:
            out["momentum"]["per_unit_time"] = \
                float(np.max(np.abs(ser["momentum"] - ser["momentum"][0]))) / span
    pairs = pairs or []
    if pairs and traj.snapshots and "marked_x" in ser:
        labels = traj.marked_labels
        times = ser["t"]
        pair_out = []
        for (la, lb) in pairs:
            ia, ib = labels.index(la), labels.index(lb)
            masses, ok_times = [], []
            for snap in traj.snapshots:
                i = int(np.argmin(np.abs(times - snap.t)))
                xa, xb = ser["marked_x"][i][ia], ser["marked_x"][i][ib]
                if xb - xa <= 2.0 * snap.grid.dx:
                    pair_out.append({"pair": (la, lb), "truncated_at": float(snap.t),
                                     "note": "paths collided; report truncated"})
                    break
                masses.append(_interval_mass(snap, xa, xb))
                ok_times.append(snap.t)
            if masses:
                m0 = masses[0]
                drift = float(np.max(np.abs(np.asarray(masses) - m0)))
                pair_out.append({"pair": (la, lb), "initial": float(m0),
                                 "max_abs_drift": drift,
                                 "max_rel_drift": drift / (abs(m0) + 1e-300),
                                 "times": [float(t) for t in ok_times]})
        out["interval_mass"] = pair_out
    return out


# ---------------------------------------------------------------------------
# BKM integrals
# ---------------------------------------------------------------------------

@dataclass
class BkmReport:
    I_full: float      # int (|rho|_inf + |G|_inf) dt
    I_g: float         # int |G|_inf dt
    I_ux: float        # int |du/dx|_inf dt
    inequality_ok: bool
    diverging: list = field(default_factory=list)
    running: dict = field(default_factory=dict)


def bkm_report(traj: Trajectory, kernel: KernelSpec, grid=None) -> BkmReport:
    """Running regularity integrals and which diverges at termination.

    Verifies |du/dx|_inf <= |G|_inf + |psi|_L1 |rho|_inf integrated in time
    (the convolution is bounded by its L1 norm times the sup of rho).
    """
    ser = traj.series
    ts = ser["t"]
    g_inf = np.maximum(np.abs(ser["min_g"]), np.abs(ser["max_g"]))
    rho_inf = ser["max_rho"]
    ux_inf = ser["max_ux"]

    def running(y):
        out = np.zeros_like(ts)
        if len(ts) > 1:
            out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(ts))
        return out

    R_full = running(rho_inf + g_inf)
    R_g = running(g_inf)
    R_ux = running(ux_inf)
    if grid is None and traj.snapshots:
        grid = traj.snapshots[0].grid
    l1 = kernel_l1(kernel, grid)
    conv_bound = running(g_inf + l1 * rho_inf) \
        + (kernel.c * ser["mass"][0] * (ts - ts[0]) if kernel.c else 0.0)
    ok = bool(np.all(R_ux <= conv_bound * (1.0 + 1e-9) + 1e-12))

    diverging = []
    if traj.termination is not None and traj.termination.status == "blowup":
        # the detected kind names the diverging quantity; growth ratios
        # catch co-divergence of the others
        kind_map = {"density_concentration": "rho", "g_divergence": "g",
                    "shock": "ux", "characteristic_collision": "rho"}
        named = kind_map.get(traj.termination.kind)
        for key, series in (("rho", rho_inf), ("g", g_inf), ("ux", ux_inf)):
            if key == named or series[-1] >= 4.0 * max(series[0], 1e-300):
                diverging.append(key)
    return BkmReport(I_full=float(R_full[-1]), I_g=float(R_g[-1]),
                     I_ux=float(R_ux[-1]), inequality_ok=ok,
                     diverging=diverging,
                     running={"t": ts, "bkm_full": R_full, "bkm_g": R_g,
                              "bkm_ux": R_ux})


# ---------------------------------------------------------------------------
# Pair-distance comparison
# ---------------------------------------------------------------------------

@dataclass
class PairBound:
    t: np.ndarray
    r: np.ndarray
    bound: np.ndarray
    t_star: float
    within: bool
    max_excess: float


def pair_distance_bound(traj: Trajectory, kernel: KernelSpec, a: float,
                        b: float, floor_c: float) -> PairBound:
    """Computed separation of the marked pair against the collapse bound.

    Requires G to vanish along the tracked interval; refuses otherwise, since
    the comparison derivation needs the transport reduction there.
    """
    if not kernel.is_singular:
        raise ValueError("pair collapse bound needs a weakly singular kernel")
    ser = traj.series
    if "pair_r" not in ser:
        raise ValueError("trajectory has no marked pair")
    labels = traj.marked_labels
    ia, ib = labels.index("pair_a"), labels.index("pair_b")
    times = ser["t"]
    g_scale = max(float(np.max(np.abs(traj.snapshots[0].g))), 1e-30)
    for snap in traj.snapshots:
        i = int(np.argmin(np.abs(times - snap.t)))
        xa, xb = ser["marked_x"][i][ia], ser["marked_x"][i][ib]
        x = snap.grid.centers()
        on = (x >= xa) & (x <= xb)
        if np.any(on) and float(np.max(np.abs(snap.g[on]))) > 1e-5 * g_scale:
            raise ValueError(
                f"G does not vanish on the tracked interval at t={snap.t:.4g} "
                f"(max |G| = {np.max(np.abs(snap.g[on])):.3e}); the transport "
                "reduction fails")
    s = kernel.s
    width = b - a
    t_star = pair_collapse_time(s, kernel.lam, floor_c, width)
    bound = pair_collapse_curve(s, kernel.lam, floor_c, width, times)
    r = np.asarray(ser["pair_r"], dtype=float)
    dx = traj.snapshots[0].grid.dx
    excess = float(np.max(r - bound))
    return PairBound(t=times, r=r, bound=bound, t_star=t_star,
                     within=bool(np.all(r <= bound + 2.0 * dx)),
                     max_excess=excess)


# ---------------------------------------------------------------------------
# Outcome classification
# ---------------------------------------------------------------------------

@dataclass
class Classification:
    label: str            # 'global' | 'blowup'
    regime: str
    checks: list          # (name, passed, detail)

    @property
    def all_passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def as_dict(self) -> dict:
        return {"label": self.label, "regime": self.regime,
                "checks": [{"name": n, "passed": bool(ok), "detail": d}
                           for n, ok, d in self.checks]}


def classify_regime(scenario) -> str:
    """Regime from the initial data alone (sign and zero-set structure)."""
    g0 = scenario.g0
    rho0 = scenario.rho0
    grid = scenario.grid
    g_norm = float(np.max(np.abs(g0)))
    eta_thr = 1e-12 * g_norm
    min_g0 = float(np.min(g0))
    if min_g0 < -eta_thr and min_g0 < 0.0:
        return "supercritical"
    if min_g0 > eta_thr:
        return "subcritical"
    if g_norm == 0.0 or np.all(np.abs(g0) <= eta_thr):
        return "aggregation"
    # critical: look for an interval of length >= 4 dx where G0 vanishes
    # while rho0 sits above a floor
    floor = scenario.params.get("floor_c", 1e-3 * float(np.max(rho0)))
    zero_and_dense = (g0 < max(eta_thr, 1e-300)) & (rho0 > 0.5 * floor)
    run, best = 0, 0
    for flag in zero_and_dense:
        run = run + 1 if flag else 0
        best = max(best, run)
    if best >= 4:
        return "critical_blowup"
    # regular-critical: G0 only vanishes where rho0 vanishes (bounded ratio)
    small_g = g0 <= max(eta_thr, 1e-300)
    if np.all(rho0[small_g] <= 1e-10 * max(float(np.max(rho0)), 1e-300)):
        return "critical_regular"
    return "critical_unresolved"


def classify_outcome(traj: Trajectory, bounds: TheoremBounds,
                     scenario) -> Classification:
    """Label the run, identify its regime, and check theorem consistency."""
    term = traj.termination
    if term is None or term.status == "aborted":
        raise ValueError("classification withheld: run did not terminate "
                         f"cleanly ({term.reason if term else 'no termination'})")
    label = "global" if term.status == "completed" else "blowup"
    regime = classify_regime(scenario)
    dx = scenario.grid.dx
    width = scenario.params.get("b", 1.0) - scenario.params.get("a", 0.0)
    tol = max(0.05, 10.0 * dx / max(width, 1e-300))
    checks = []
    ser = traj.series

    if regime == "subcritical":
        checks.append(("global_regularity_expected", label == "global",
                       f"terminated {term.status}"))
        checks.append(("sign_preserved", bool(np.all(ser["min_g"] > 0.0)),
                       f"min G over run = {float(np.min(ser['min_g'])):.4g}"))
        if bounds.c_rho is not None:
            peak = float(np.max(ser["max_rho"]))
            checks.append(("density_bound", peak <= bounds.c_rho * 1.02,
                           f"max rho {peak:.4g} vs C_rho {bounds.c_rho:.4g}"))
        if bounds.g_sup is not None:
            peak = float(np.max(np.abs(ser["max_g"])))
            checks.append(("g_bound", peak <= bounds.g_sup * 1.02,
                           f"max G {peak:.4g} vs bound {bounds.g_sup:.4g}"))
    elif regime == "supercritical":
        checks.append(("finite_time_blowup_expected", label == "blowup",
                       f"terminated {term.status}"))
        if label == "blowup" and bounds.t_super is not None:
            t_blow = term.time_estimate if term.time_estimate else term.last_time
            checks.append(("blowup_time_bound",
                           t_blow <= bounds.t_super * (1.0 + tol),
                           f"t = {t_blow:.4g} vs bound {bounds.t_super:.4g}"))
    elif regime in ("critical_blowup", "aggregation"):
        from .kernels import osgood_check
        if osgood_check(scenario.kernel) == "violated":
            checks.append(("finite_time_blowup_expected", label == "blowup",
                           f"terminated {term.status}"))
            if label == "blowup" and bounds.t_star is not None:
                t_blow = term.time_estimate if term.time_estimate else term.last_time
                checks.append(("collapse_time_bound",
                               t_blow <= bounds.t_star * (1.0 + tol),
                               f"t = {t_blow:.4g} vs T* {bounds.t_star:.4g}"))
        else:
            checks.append(("global_regularity_expected", label == "global",
                           f"bounded kernel, terminated {term.status}"))
    elif regime == "critical_regular":
        checks.append(("global_regularity_expected", label == "global",
                       f"terminated {term.status}"))
    else:
        checks.append(("unresolved_critical_case", True,
                       "single-point critical data: no prediction applies"))

    if scenario.kind == "separated_supports" and "C" in scenario.params:
        C = scenario.params["C"]
        g_min_run = float(np.min(ser["min_g"]))
        checks.append(("g_stays_above_minus_C", g_min_run >= -C - 1e-3,
                       f"min G {g_min_run:.4g} vs -C = {-C:.4g}"))
    return Classification(label=label, regime=regime, checks=checks)
