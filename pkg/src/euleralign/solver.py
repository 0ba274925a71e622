"""Time integration and blowup detection.

Eulerian route: conservative first-order upwind fluxes on the shared
recovered velocity for both continuity equations, advanced with a two-stage
SSP Runge-Kutta step.  State increments accumulate through compensated
(Kahan) summation so conserved totals survive long runs at machine level.

Lagrangian route: classical RK4 on the alignment particle system, with
carried density/G values advanced along each path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fields import (FieldState, Grid1D, ParticleEnsemble, Termination,
                     Trajectory, VelocityField, make_state, recover_velocity,
                     sample_cells)
from .kernels import KernelSpec, get_plan, osgood_check, _psi_fam, _FamilyMoments


class CflViolation(RuntimeError):
    """Step rejected: dt exceeds the CFL bound.  Carries a suggested dt."""

    def __init__(self, dt, limit):
        super().__init__(f"dt={dt:.3e} violates the CFL bound {limit:.3e}")
        self.suggested_dt = 0.9 * limit


class ParticleCollision(RuntimeError):
    """Particle gap hit the collision floor; carries the blowup signal."""

    def __init__(self, signal):
        super().__init__(f"particle collision at t={signal.last_time:.6g}")
        self.signal = signal


@dataclass(frozen=True)
class BlowupSignal:
    kind: str                # g_divergence | shock | density_concentration |
    time_estimate: float     # characteristic_collision
    last_time: float
    location: float

    def as_dict(self):
        return dict(kind=self.kind, time_estimate=self.time_estimate,
                    last_time=self.last_time, location=self.location)


@dataclass
class SolverConfig:
    """Numerical controls for one run."""

    scheme: str = "eulerian_fv"          # eulerian_fv | lagrangian_cs | both
    cfl: float = 0.5
    t_max: float = 1.0
    dt_min: float = 1e-12
    rate_cap: float = 0.1                # dt <= rate_cap / max local rate
    g_floor: float = -1e6                # absolute safety thresholds
    rho_ceiling: float = 1e6
    gap_floor_factor: float = 1e-8       # times the initial minimum gap
    rel_growth: float = 10.0             # relative-growth blowup triggers
    cell_mass_fraction: float = 0.05     # resolution trigger: mass in one cell
    pair_gap_cells: float = 2.5          # marked-pair collapse, in units of dx
    snapshot_count: int = 25
    n_particles: int = 1024
    max_steps: int = 2_000_000

    def __post_init__(self):
        if not 0.0 < self.cfl <= 0.9:
            raise ValueError("cfl must lie in (0, 0.9]")
        if self.scheme not in ("eulerian_fv", "lagrangian_cs", "both"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dt_min <= 0.0:
            raise ValueError("dt_min must be positive")
        for name in ("rho_ceiling", "rel_growth", "cell_mass_fraction",
                     "gap_floor_factor", "rate_cap"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive")
        if not (np.isfinite(self.g_floor) and self.g_floor < 0):
            raise ValueError("g_floor must be finite and negative")


def _kahan_add(y: np.ndarray, comp: np.ndarray, inc: np.ndarray) -> None:
    tmp = inc - comp
    s = y + tmp
    comp[:] = (s - y) - tmp
    y[:] = s


# ---------------------------------------------------------------------------
# Eulerian stepper
# ---------------------------------------------------------------------------

def _upwind_div(u_ifc: np.ndarray, q: np.ndarray, grid: Grid1D,
                ghost_left: float, ghost_right: float) -> np.ndarray:
    """Divergence of the upwind flux of q on interface velocities."""
    n, dx = grid.n, grid.dx
    if grid.kind == "torus":
        q_left = np.roll(q, 1)           # cell to the left of interface i
        F = np.where(u_ifc[:n] > 0.0, q_left, q) * u_ifc[:n]
        F_full = np.concatenate((F, F[:1]))
    else:
        qL = np.concatenate(([ghost_left], q))
        qR = np.concatenate((q, [ghost_right]))
        F_full = np.where(u_ifc > 0.0, qL, qR) * u_ifc
    return (F_full[1:] - F_full[:-1]) / dx


class EulerianStepper:
    """Owns the evolving (rho, g) arrays and their Kahan compensators."""

    def __init__(self, kernel: KernelSpec, state0: FieldState,
                 momentum_target: float, config: SolverConfig):
        self.kernel = kernel
        self.grid = state0.grid
        self.config = config
        self.momentum_target = float(momentum_target)
        self.rho = state0.rho.copy()
        self.g = state0.g.copy()
        self._c_rho = np.zeros_like(self.rho)
        self._c_g = np.zeros_like(self.g)
        self.t = float(state0.t)
        self.g_ambient = kernel.c * state0.mass
        self.n_steps = 0

    def state(self) -> FieldState:
        rho = np.maximum(self.rho, 0.0)  # snapshot copy; internal stays raw
        return FieldState(self.t, rho, self.g.copy(), self.grid)

    def velocity(self) -> VelocityField:
        st = FieldState(self.t, self.rho, self.g, self.grid)
        return recover_velocity(self.kernel, st, self.momentum_target)

    def _rhs(self, rho, g, vel):
        drho = -_upwind_div(vel.interfaces, rho, self.grid, 0.0, 0.0)
        dg = -_upwind_div(vel.interfaces, g, self.grid,
                          self.g_ambient, self.g_ambient)
        return drho, dg

    def cfl_limit(self, vel: VelocityField) -> float:
        return self.config.cfl * self.grid.dx / max(vel.max_speed, 1e-300)

    def advance(self, dt: float, vel1: VelocityField) -> VelocityField:
        """One SSP-RK2 step.  Raises CflViolation if either stage breaks CFL."""
        limit = self.cfl_limit(vel1)
        if dt > limit * (1.0 + 1e-9):
            raise CflViolation(dt, limit)
        d1_rho, d1_g = self._rhs(self.rho, self.g, vel1)
        rho1 = self.rho + dt * d1_rho
        g1 = self.g + dt * d1_g
        st1 = FieldState(self.t + dt, rho1, g1, self.grid)
        vel2 = recover_velocity(self.kernel, st1, self.momentum_target)
        limit2 = self.config.cfl * self.grid.dx / max(vel2.max_speed, 1e-300)
        if dt > limit2 * (1.0 + 1e-9):
            raise CflViolation(dt, limit2)
        d2_rho, d2_g = self._rhs(rho1, g1, vel2)
        _kahan_add(self.rho, self._c_rho, 0.5 * dt * (d1_rho + d2_rho))
        _kahan_add(self.g, self._c_g, 0.5 * dt * (d1_g + d2_g))
        self.t += dt
        self.n_steps += 1
        return vel2


def step_eulerian(kernel: KernelSpec, state: FieldState, dt: float,
                  momentum_target: float = 0.0, cfl: float = 0.5) -> FieldState:
    """Single conservative upwind step of the coupled (rho, G) system.

    Rejects dt above the CFL bound with a CflViolation carrying a suggestion.
    """
    cfg = SolverConfig(cfl=cfl, t_max=state.t + dt)
    stepper = EulerianStepper(kernel, state, momentum_target, cfg)
    vel = stepper.velocity()
    stepper.advance(dt, vel)
    return stepper.state()


# ---------------------------------------------------------------------------
# Lagrangian stepper
# ---------------------------------------------------------------------------

class _StageCrossing(RuntimeError):
    pass


class LagrangianStepper:
    """RK4 integration of the alignment particle system with carried values."""

    def __init__(self, kernel: KernelSpec, ens0: ParticleEnsemble,
                 config: SolverConfig):
        self.kernel = kernel
        self.config = config
        self.grid = ens0.grid
        self.t = float(ens0.t)
        self.x = ens0.x.astype(float).copy()
        self.m = ens0.m.astype(float).copy()
        self.v = ens0.v.astype(float).copy()
        self.rho_c = ens0.rho_c.astype(float).copy()
        self.g_c = ens0.g_c.astype(float).copy()
        gaps = np.diff(self.x)
        if np.any(gaps <= 0.0):
            raise ValueError("particles must be strictly increasing")
        self.initial_min_gap = float(np.min(gaps))
        self.gap_floor = config.gap_floor_factor * self.initial_min_gap
        self.mass = float(np.sum(self.m))
        self._mom = _FamilyMoments(
            kernel, period=self.grid.length if self.grid.kind == "torus" else None)
        self.n_steps = 0

    def ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.t, self.x.copy(), self.m.copy(),
                                self.v.copy(), self.rho_c.copy(),
                                self.g_c.copy(), self.grid)

    def _pair_displacements(self, x):
        D = x[:, None] - x[None, :]
        if self.grid.kind == "torus":
            L = self.grid.length
            D = D - L * np.round(D / L)
        return D

    def conv_at_particles(self, x) -> np.ndarray:
        """psi * rho at particle positions from mass blocks, exact moments.

        Each particle's mass occupies the interval between midpoints to its
        neighbours, so the self-contribution integrates the singularity
        instead of point-evaluating it.
        """
        n = len(x)
        if self.kernel.family == "constant":
            return np.full(n, self.kernel.c * self.mass)
        if self.grid.kind == "torus":
            L = self.grid.length
            inner = 0.5 * (x[:-1] + x[1:])
            e0 = 0.5 * (x[0] + x[-1] - L)
            edges = np.concatenate(([e0], inner, [e0 + L]))
        else:
            inner = 0.5 * (x[:-1] + x[1:])
            e0 = x[0] - 0.5 * (x[1] - x[0])
            eN = x[-1] + 0.5 * (x[-1] - x[-2])
            edges = np.concatenate(([e0], inner, [eN]))
        widths = np.diff(edges)
        rho_blk = self.m / widths
        out = np.empty(n)
        chunk = max(1, int(4e6 // (n + 1)))
        for i0 in range(0, n, chunk):
            P = self._mom.Psi(x[i0:i0 + chunk, None] - edges[None, :])
            out[i0:i0 + chunk] = np.sum(rho_blk[None, :] * (P[:, :-1] - P[:, 1:]), axis=1)
        return out + self.kernel.c * self.mass

    def _rhs(self, x, v, rho_c, g_c):
        if np.any(np.diff(x) <= 0.0):
            raise _StageCrossing
        D = self._pair_displacements(x)
        R = np.abs(D)
        np.fill_diagonal(R, 1.0)
        W = (_psi_fam(self.kernel, R) + self.kernel.c) * self.m[None, :]
        np.fill_diagonal(W, 0.0)
        acc = W @ v - v * np.sum(W, axis=1)
        conv = self.conv_at_particles(x)
        dudx = g_c - conv
        return v, acc, -dudx * rho_c, -dudx * g_c, dudx

    def dudx_at_particles(self) -> np.ndarray:
        return self.g_c - self.conv_at_particles(self.x)

    def advance(self, dt: float) -> None:
        """Classical RK4 update; raises ParticleCollision on path crossing."""
        x0, v0, r0, g0 = self.x, self.v, self.rho_c, self.g_c
        try:
            k1 = self._rhs(x0, v0, r0, g0)
            k2 = self._rhs(x0 + 0.5 * dt * k1[0], v0 + 0.5 * dt * k1[1],
                           r0 + 0.5 * dt * k1[2], g0 + 0.5 * dt * k1[3])
            k3 = self._rhs(x0 + 0.5 * dt * k2[0], v0 + 0.5 * dt * k2[1],
                           r0 + 0.5 * dt * k2[2], g0 + 0.5 * dt * k2[3])
            k4 = self._rhs(x0 + dt * k3[0], v0 + dt * k3[1],
                           r0 + dt * k3[2], g0 + dt * k3[3])
        except _StageCrossing:
            raise ParticleCollision(self._collision_signal()) from None
        w = dt / 6.0
        self.x = x0 + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        self.v = v0 + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        self.rho_c = r0 + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        self.g_c = g0 + w * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        self.t += dt
        self.n_steps += 1
        gaps = np.diff(self.x)
        if np.any(gaps <= self.gap_floor):
            raise ParticleCollision(self._collision_signal())

    def _collision_signal(self) -> BlowupSignal:
        gaps = np.diff(self.x)
        j = int(np.argmin(gaps))
        loc = 0.5 * (self.x[j] + self.x[j + 1])
        return BlowupSignal("characteristic_collision", self.t, self.t, loc)


def step_lagrangian(kernel: KernelSpec, ens: ParticleEnsemble, dt: float,
                    config: SolverConfig | None = None) -> ParticleEnsemble:
    """Single RK4 step of the particle system.

    On a collision (gap at or below the floor) raises ParticleCollision
    carrying the blowup signal instead of returning a state.
    """
    cfg = config or SolverConfig(t_max=ens.t + dt)
    stepper = LagrangianStepper(kernel, ens, cfg)
    stepper.advance(dt)
    return stepper.ensemble()


# ---------------------------------------------------------------------------
# Blowup detection
# ---------------------------------------------------------------------------

@dataclass
class DetectorContext:
    """Reference scales frozen at t=0 plus grid/kernel facts."""

    g_ref: float
    rho_ref: float
    ux_ref: float
    mass: float
    dx: float
    osgood: str
    s: float
    config: SolverConfig
    pair_r0: float | None = None


def _fit_zero(ts: np.ndarray, ys: np.ndarray, min_pts: int = 5) -> float | None:
    """Linear tail fit of a positive decreasing series; its zero crossing."""
    good = ys > 0
    ts, ys = ts[good], ys[good]
    if len(ts) < min_pts:
        return None
    k = max(min_pts, len(ts) // 5)
    tt, yy = ts[-k:], ys[-k:]
    a, b = np.polyfit(tt, yy, 1)
    if a >= 0.0:
        return None
    t0 = -b / a
    return float(max(t0, ts[-1]))


def detect_blowup(series: dict, state_or_ens=None,
                  context: DetectorContext | None = None,
                  config: SolverConfig | None = None) -> BlowupSignal | None:
    """Check the diagnostic series against the blowup triggers.

    Triggers, in priority order:
      * marked characteristic pair collapsing to a few cells / the gap floor,
      * density beyond its growth/resolution/absolute ceilings (only when the
        kernel violates the Osgood condition, i.e. can concentrate in finite
        time),
      * G beyond its growth floor (Riccati divergence),
      * velocity-gradient growth (shock without the other markers).

    Blowup times are extrapolated from the asymptotics of the relevant
    series (1/|min G| is asymptotically linear for the Riccati route; widths
    and gaps behave like (T - t)**(1/s)).
    """
    ts = np.asarray(series.get("t", []), dtype=float)
    if len(ts) == 0:
        return None
    cfg = config or (context.config if context else SolverConfig())
    if context is None:
        min_g0 = series["min_g"][0] if "min_g" in series else 0.0
        context = DetectorContext(
            g_ref=max(abs(min_g0), 1e-30), rho_ref=max(series.get("max_rho", [1.0])[0], 1e-30),
            ux_ref=max(abs(series.get("max_ux", [1.0])[0]), 1e-30),
            mass=1.0, dx=0.0, osgood="violated", s=1.0, config=cfg)
    R = cfg.rel_growth

    # marked-pair collapse
    pr = series.get("pair_r")
    if pr is not None and len(pr) and context.pair_r0:
        r_now = pr[-1]
        floor = max(cfg.pair_gap_cells * context.dx,
                    cfg.gap_floor_factor * context.pair_r0 * 32.0)
        if r_now <= floor:
            rs = np.asarray(pr, dtype=float)
            expo = context.s if context.osgood == "violated" else 1.0
            est = _fit_zero(ts, np.maximum(rs, 0.0) ** expo)
            loc = series.get("pair_mid", [np.nan])[-1]
            return BlowupSignal("characteristic_collision",
                                est if est is not None else float(ts[-1]),
                                float(ts[-1]), float(loc))

    # particle gap floor approach
    mg = series.get("min_gap")
    if mg is not None and len(mg):
        gap_abs = cfg.gap_floor_factor * series["min_gap"][0]
        if mg[-1] <= 32.0 * gap_abs:
            est = _fit_zero(ts, np.asarray(mg, dtype=float) ** context.s)
            loc = series.get("min_gap_x", [np.nan])[-1]
            return BlowupSignal("characteristic_collision",
                                est if est is not None else float(ts[-1]),
                                float(ts[-1]), float(loc))

    # density concentration (finite-time only for Osgood-violating kernels)
    mr = series.get("max_rho")
    if mr is not None and len(mr):
        rho_now = mr[-1]
        fired = rho_now >= cfg.rho_ceiling
        if context.osgood == "violated":
            fired = fired or rho_now >= R * context.rho_ref
            if context.dx > 0:
                fired = fired or rho_now * context.dx >= cfg.cell_mass_fraction * context.mass
        if fired:
            ys = 1.0 / np.maximum(np.asarray(mr, dtype=float), 1e-300)
            expo = context.s if context.osgood == "violated" else 1.0
            est = _fit_zero(ts, ys ** expo)
            loc = series.get("argmax_rho", [np.nan])[-1]
            return BlowupSignal("density_concentration",
                                est if est is not None else float(ts[-1]),
                                float(ts[-1]), float(loc))

    # G divergence (Riccati route)
    mng = series.get("min_g")
    if mng is not None and len(mng):
        g_now = mng[-1]
        if g_now <= cfg.g_floor or g_now <= -R * context.g_ref:
            ys = 1.0 / np.maximum(-np.asarray(mng, dtype=float), 1e-300)
            est = _fit_zero(ts, ys)
            loc = series.get("argmin_g", [np.nan])[-1]
            return BlowupSignal("g_divergence",
                                est if est is not None else float(ts[-1]),
                                float(ts[-1]), float(loc))

    # bare shock (velocity gradient growth without the markers above)
    mu = series.get("max_ux")
    if mu is not None and len(mu):
        if mu[-1] >= R * max(context.ux_ref, context.g_ref):
            ys = 1.0 / np.maximum(np.asarray(mu, dtype=float), 1e-300)
            est = _fit_zero(ts, ys)
            loc = series.get("argmax_ux", [np.nan])[-1]
            return BlowupSignal("shock",
                                est if est is not None else float(ts[-1]),
                                float(ts[-1]), float(loc))
    return None


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------

class _Series:
    def __init__(self):
        self.data = {}

    def append(self, **kw):
        for k, v in kw.items():
            self.data.setdefault(k, []).append(v)

    def finalize(self) -> dict:
        return {k: np.asarray(v) for k, v in self.data.items()}


def _window_margins_ok(kernel, grid, rho, g, g_ambient, rho_scale, g_scale):
    if grid.kind != "window":
        return True
    margin = 2.0 * kernel.tail_length
    lo = grid.x_min + margin
    hi = grid.x_max - margin
    x = grid.centers()
    live = (rho > 1e-13 * rho_scale) | (np.abs(g - g_ambient) > 1e-13 * g_scale)
    if not np.any(live):
        return True
    idx = np.flatnonzero(live)
    return x[idx[0]] >= lo and x[idx[-1]] <= hi


def run_simulation(scenario, config: SolverConfig) -> Trajectory:
    """Run a scenario to completion, blowup, or abort.

    Records per-step diagnostic series, snapshots at the configured cadence
    and marked characteristic paths; classifies termination.
    """
    if config.scheme == "both":
        cfg_e = _replace_scheme(config, "eulerian_fv")
        cfg_l = _replace_scheme(config, "lagrangian_cs")
        tr_e = _run_eulerian(scenario, cfg_e)
        tr_l = _run_lagrangian(scenario, cfg_l)
        merged = Trajectory(
            snapshots=tr_e.snapshots, particle_snapshots=tr_l.particle_snapshots,
            series=tr_e.series, marked_labels=tr_e.marked_labels,
            termination=tr_e.termination,
            meta=dict(tr_e.meta, lagrangian_series=tr_l.series,
                      lagrangian_termination=tr_l.termination.as_dict()))
        return merged
    if config.scheme == "lagrangian_cs":
        return _run_lagrangian(scenario, config)
    return _run_eulerian(scenario, config)


def _replace_scheme(config: SolverConfig, scheme: str) -> SolverConfig:
    return replace(config, scheme=scheme)


def _marked_points(scenario) -> tuple[list, np.ndarray]:
    marked = getattr(scenario, "marked", None) or {}
    labels = list(marked.keys())
    x0 = np.asarray([marked[k] for k in labels], dtype=float)
    return labels, x0


def _run_eulerian(scenario, config: SolverConfig) -> Trajectory:
    kernel = scenario.kernel
    grid = scenario.grid
    state0 = scenario.initial_state()
    stepper = EulerianStepper(kernel, state0, scenario.momentum, config)
    vel = stepper.velocity()

    labels, X = _marked_points(scenario)
    pair = None
    if "pair_a" in labels and "pair_b" in labels:
        pair = (labels.index("pair_a"), labels.index("pair_b"))

    x_c = grid.centers()
    conv0 = vel.conv_avg
    ctx = DetectorContext(
        g_ref=max(abs(float(np.min(state0.g))), float(np.max(conv0)), 1e-30),
        rho_ref=float(np.max(state0.rho)),
        ux_ref=max(float(np.max(np.abs(vel.dudx))), 1e-30),
        mass=state0.mass, dx=grid.dx, osgood=osgood_check(kernel),
        s=kernel.s if kernel.is_singular else 1.0, config=config,
        pair_r0=float(X[pair[1]] - X[pair[0]]) if pair else None)
    rho_scale = float(np.max(state0.rho))
    g_scale = float(np.max(np.abs(state0.g))) + 1e-300

    series = _Series()
    traj = Trajectory(marked_labels=labels, meta={"scheme": "eulerian_fv"})
    snap_times = np.linspace(state0.t, config.t_max, config.snapshot_count)
    next_snap = 0
    termination = None

    while True:
        vel = stepper.velocity()
        rho, g, t = stepper.rho, stepper.g, stepper.t
        int_g = float(np.sum(g) * grid.dx)
        mass = float(np.sum(rho) * grid.dx)
        # velocity extrema over the fluid region: the maximum principle
        # constrains u along mass-carrying paths, not the far field of an
        # unbounded kernel primitive
        live = rho > 1e-12 * rho_scale
        if not np.any(live):
            live = slice(None)
        row = dict(
            t=t,
            min_g=float(np.min(g)), max_g=float(np.max(g)),
            max_rho=float(np.max(rho)),
            max_ux=float(np.max(np.abs(vel.dudx))),
            max_u=float(np.max(vel.centers[live])),
            min_u=float(np.min(vel.centers[live])),
            mass=mass,
            momentum=float(np.sum(rho * vel.centers) * grid.dx),
            int_g=int_g,
            compat=float(np.sum(g - vel.conv_avg) * grid.dx) if grid.kind == "torus" else 0.0,
            max_conv=float(np.max(vel.conv_avg)),
            argmin_g=float(x_c[int(np.argmin(g))]),
            argmax_rho=float(x_c[int(np.argmax(rho))]),
            argmax_ux=float(x_c[int(np.argmax(np.abs(vel.dudx)))]),
        )
        if len(X):
            row["marked_x"] = X.copy()
        if pair:
            row["pair_r"] = float(X[pair[1]] - X[pair[0]])
            row["pair_mid"] = float(0.5 * (X[pair[1]] + X[pair[0]]))
        series.append(**row)

        while next_snap < len(snap_times) and t >= snap_times[next_snap] - 1e-12:
            traj.snapshots.append(stepper.state())
            next_snap += 1

        sig = detect_blowup(series.data, context=ctx)
        if sig is not None:
            termination = Termination("blowup", t, kind=sig.kind,
                                      time_estimate=sig.time_estimate,
                                      location=sig.location)
            break
        if t >= config.t_max * (1.0 - 1e-12):
            termination = Termination("completed", t)
            break
        if stepper.n_steps >= config.max_steps:
            termination = Termination("aborted", t, reason="step budget exhausted")
            break
        if not _window_margins_ok(kernel, grid, rho, g, stepper.g_ambient,
                                  rho_scale, g_scale):
            termination = Termination(
                "aborted", t, reason="support reached the window margin")
            break

        rate = max(float(np.max(np.abs(g))), float(np.max(vel.conv_avg)), 1e-300)
        dt = min(stepper.cfl_limit(vel) / (1.0 + 1e-9),
                 config.rate_cap / rate,
                 config.t_max - t)
        if dt < config.dt_min:
            termination = Termination(
                "aborted", t, reason=f"time step collapsed to {dt:.3e} "
                "without a confirmed blowup")
            break
        rejects = 0
        while True:
            try:
                vel2 = stepper.advance(dt, vel)
                break
            except CflViolation as e:
                rejects += 1
                dt = e.suggested_dt
                if rejects > 8 or dt < config.dt_min:
                    vel2 = None
                    break
        if vel2 is None:
            termination = Termination("aborted", stepper.t,
                                      reason="repeated CFL rejections")
            break
        if len(X):
            # Heun update of the tracked characteristic paths
            u1 = vel.at(grid, X)
            u2 = vel2.at(grid, np.asarray(X) + dt * np.asarray(u1))
            X = X + 0.5 * dt * (np.asarray(u1) + np.asarray(u2))

    if not traj.snapshots or traj.snapshots[-1].t < stepper.t - 1e-12:
        traj.snapshots.append(stepper.state())
    traj.series = series.finalize()
    traj.termination = termination
    traj.meta.update(n_steps=stepper.n_steps, momentum_target=scenario.momentum)
    return traj


def _run_lagrangian(scenario, config: SolverConfig) -> Trajectory:
    kernel = scenario.kernel
    grid = scenario.grid
    state0 = scenario.initial_state()
    from .fields import particles_from_fields
    ens0 = particles_from_fields(kernel, state0, config.n_particles,
                                 scenario.momentum)
    stepper = LagrangianStepper(kernel, ens0, config)

    labels, X0 = _marked_points(scenario)
    marked_idx = [int(np.argmin(np.abs(ens0.x - xx))) for xx in X0]

    ctx = DetectorContext(
        g_ref=max(abs(float(np.min(ens0.g_c))),
                  float(np.max(stepper.conv_at_particles(ens0.x))), 1e-30),
        rho_ref=float(np.max(ens0.rho_c)),
        ux_ref=max(float(np.max(np.abs(stepper.dudx_at_particles()))), 1e-30),
        mass=ens0.mass, dx=0.0, osgood=osgood_check(kernel),
        s=kernel.s if kernel.is_singular else 1.0, config=config)

    series = _Series()
    traj = Trajectory(marked_labels=labels, meta={"scheme": "lagrangian_cs"})
    snap_times = np.linspace(ens0.t, config.t_max, config.snapshot_count)
    next_snap = 0
    termination = None

    while True:
        t = stepper.t
        gaps = np.diff(stepper.x)
        dudx = stepper.dudx_at_particles()
        jmin = int(np.argmin(gaps)) if len(gaps) else 0
        row = dict(
            t=t,
            min_g=float(np.min(stepper.g_c)), max_g=float(np.max(stepper.g_c)),
            max_rho=float(np.max(stepper.rho_c)),
            max_ux=float(np.max(np.abs(dudx))),
            max_u=float(np.max(stepper.v)), min_u=float(np.min(stepper.v)),
            mass=stepper.mass, momentum=float(np.sum(stepper.m * stepper.v)),
            min_gap=float(np.min(gaps)) if len(gaps) else np.inf,
            min_gap_x=float(0.5 * (stepper.x[jmin] + stepper.x[jmin + 1])),
            argmin_g=float(stepper.x[int(np.argmin(stepper.g_c))]),
            argmax_rho=float(stepper.x[int(np.argmax(stepper.rho_c))]),
            argmax_ux=float(stepper.x[int(np.argmax(np.abs(dudx)))]),
        )
        if marked_idx:
            row["marked_x"] = stepper.x[marked_idx].copy()
        series.append(**row)

        while next_snap < len(snap_times) and t >= snap_times[next_snap] - 1e-12:
            traj.particle_snapshots.append(stepper.ensemble())
            next_snap += 1

        sig = detect_blowup(series.data, context=ctx)
        if sig is not None:
            termination = Termination("blowup", t, kind=sig.kind,
                                      time_estimate=sig.time_estimate,
                                      location=sig.location)
            break
        if t >= config.t_max * (1.0 - 1e-12):
            termination = Termination("completed", t)
            break
        if stepper.n_steps >= config.max_steps:
            termination = Termination("aborted", t, reason="step budget exhausted")
            break

        dv = np.diff(stepper.v)
        closing = dv < 0.0
        if np.any(closing):
            dt_gap = config.cfl * float(np.min(gaps[closing] / np.abs(dv[closing])))
        else:
            dt_gap = np.inf
        dt = min(0.1 / max(float(np.max(np.abs(dudx))), 1e-300),
                 dt_gap, config.t_max - t)
        if dt < config.dt_min:
            termination = Termination(
                "aborted", t, reason=f"time step collapsed to {dt:.3e} "
                "without a confirmed blowup")
            break
        try:
            stepper.advance(dt)
        except ParticleCollision as e:
            termination = Termination("blowup", stepper.t,
                                      kind=e.signal.kind,
                                      time_estimate=e.signal.time_estimate,
                                      location=e.signal.location)
            break

    if (not traj.particle_snapshots
            or traj.particle_snapshots[-1].t < stepper.t - 1e-12):
        traj.particle_snapshots.append(stepper.ensemble())
    traj.series = series.finalize()
    traj.termination = termination
    traj.meta.update(n_steps=stepper.n_steps, n_particles=config.n_particles,
                     momentum_target=scenario.momentum)
    return traj
