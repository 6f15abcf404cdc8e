"""Ground-truth plant: dynamic bicycle model with Fiala brush tyres.

Stands in for a one-tenth scale car. All parameter defaults are invented for
a desk-scale setup; none of them are measured values.

Per sub-step: first-order steering lag, slip angles, saturating brush-tyre
lateral forces (cornering stiffness scales with the local friction
coefficient), commanded longitudinal acceleration capped by the remaining
friction budget, bicycle-model body dynamics, a first-order roll response
toward ``k_roll * a_y``, and pose integration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import ControlInput, Pose, VehicleState

G = 9.81

CEMENT, RUBBER, FOAM = "cement", "rubber", "foam"


class SimulationDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mass: float = 3.0
    yaw_inertia: float = 0.06
    a: float = 0.12  # CoM to front axle (m)
    b: float = 0.20  # CoM to rear axle (m)
    stiffness_per_mu: float = 60.0  # axle cornering stiffness per unit friction (N/rad)
    max_steer: float = 0.40  # rad at |u1| = 1
    max_accel: float = 4.0  # m/s^2 at |u2| = 1
    tau_steer: float = 0.05
    k_roll: float = 0.006  # rad per m/s^2 of lateral acceleration
    tau_roll: float = 0.08
    drag: float = 0.15  # linear speed drag (1/s)
    min_slip_speed: float = 0.1  # floor on vx inside slip-angle computation (m/s)
    noise_std: tuple = (0.002, 0.01, 0.01, 0.01, 0.002, 0.002, 0.004)  # phi, vx, vy, r, X, Y, psi
    dt_sim: float = 0.001

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "a", "b", "stiffness_per_mu", "max_steer", "max_accel",
                     "tau_steer", "k_roll", "tau_roll", "dt_sim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.dt_sim > 0.002:
            raise ValueError("dt_sim must be <= 0.002 s")
        if len(self.noise_std) != 7 or any(s < 0 for s in self.noise_std):
            raise ValueError("noise_std needs 7 non-negative entries")


@dataclass(frozen=True)
class Region:
    """Axis-aligned box (inclusive bounds) carrying a surface."""

    surface: str
    mu: float
    xmin: float = -np.inf
    xmax: float = np.inf
    ymin: float = -np.inf
    ymax: float = np.inf
    stiffness_scale: float = 1.0  # extra factor on the mu-proportional cornering stiffness

    def contains(self, x, y):
        return (self.xmin <= x) & (x <= self.xmax) & (self.ymin <= y) & (y <= self.ymax)


@dataclass(frozen=True)
class SurfaceMap:
    """Ordered regions; the first region containing a point wins, default elsewhere."""

    regions: tuple = ()
    default_surface: str = CEMENT
    default_mu: float = 0.9

    def surface_ids(self):
        ids = [self.default_surface]
        for r in self.regions:
            if r.surface not in ids:
                ids.append(r.surface)
        return ids


def surface_at(smap: SurfaceMap, x: float, y: float):
    """Return ``(surface id, mu)`` at a world position."""
    return surface_params(smap, x, y)[:2]


def surface_params(smap: SurfaceMap, x: float, y: float):
    """``(surface id, mu, stiffness scale)``; cement-like stiffness outside the regions."""
    for region in smap.regions:
        if region.contains(x, y):
            return region.surface, region.mu, region.stiffness_scale
    return smap.default_surface, smap.default_mu, 1.0


def cement_map(mu: float = 0.9) -> SurfaceMap:
    return SurfaceMap((), CEMENT, mu)


def two_mat_map(split_x: float = 0.0, half_extent=(4.0, 2.75), mu_rubber=1.2, mu_foam=0.6,
                mu_cement=0.9, stiffness_rubber=1.0, stiffness_foam=1.0) -> SurfaceMap:
    """Rubber mat on x >= split_x, foam on x < split_x, cement outside both.

    The split sits at the middle of the straights; a point exactly on the
    split line is rubber (listed first).
    """
    hx, hy = half_extent
    return SurfaceMap(
        (
            Region(RUBBER, mu_rubber, split_x, hx, -hy, hy, stiffness_rubber),
            Region(FOAM, mu_foam, -hx, split_x, -hy, hy, stiffness_foam),
        ),
        CEMENT,
        mu_cement,
    )


@dataclass
class SimState:
    pose: Pose = field(default_factory=Pose)
    state: VehicleState = field(default_factory=VehicleState)
    steer: float = 0.0
    t: float = 0.0

    def copy(self) -> "SimState":
        return replace(self)


def fiala_force(alpha, stiffness, mu_fz):
    """Lateral force opposing slip angle ``alpha``, saturating at ``mu_fz``."""
    z = math.tan(alpha)
    ratio = stiffness * abs(z) / (3.0 * mu_fz)
    if ratio >= 1.0:
        return -mu_fz * math.copysign(1.0, z)
    return -stiffness * z * (1.0 - ratio + ratio * ratio / 3.0)


def _derivs(x, mu, delta_cmd, accel_cmd, cfg: SimConfig, stiffness_scale: float = 1.0):
    """Time derivative of [X, Y, psi, phi, vx, vy, r, steer]."""
    _, _, psi, phi, vx, vy, r, steer = x
    m, a, b = cfg.mass, cfg.a, cfg.b
    length = a + b
    fz_f = m * G * b / length
    fz_r = m * G * a / length
    c_f = c_r = cfg.stiffness_per_mu * mu * stiffness_scale
    v_slip = max(vx, cfg.min_slip_speed)
    if vx == 0.0 and vy == 0.0 and r == 0.0:
        fy_f = fy_r = 0.0
    else:
        alpha_f = math.atan2(vy + a * r, v_slip) - steer
        alpha_r = math.atan2(vy - b * r, v_slip)
        fy_f = fiala_force(alpha_f, c_f, mu * fz_f)
        fy_r = fiala_force(alpha_r, c_r, mu * fz_r)
    cs, sn = math.cos(steer), math.sin(steer)
    ay_tire = (fy_f * cs + fy_r) / m
    budget = mu * G
    ax_cap = math.sqrt(max(budget * budget - ay_tire * ay_tire, 0.0))
    ax = min(max(accel_cmd, -ax_cap), ax_cap) - cfg.drag * vx
    dvx = ax - fy_f * sn / m + r * vy
    dvy = ay_tire - r * vx
    dr = (a * fy_f * cs - b * fy_r) / cfg.yaw_inertia
    a_lat = dvy + r * vx
    dphi = (cfg.k_roll * a_lat - phi) / cfg.tau_roll
    dsteer = (delta_cmd - steer) / cfg.tau_steer
    c, s = math.cos(psi), math.sin(psi)
    return np.array([vx * c - vy * s, vx * s + vy * c, r, dphi, dvx, dvy, dr, dsteer]), fy_f, fy_r


def sim_step(sim: SimState, cfg: SimConfig, smap: SurfaceMap, command: ControlInput, dt: float = 0.02) -> SimState:
    """Advance the plant by one control period with a zero-order-hold command."""
    n_sub = int(round(dt / cfg.dt_sim))
    if n_sub < 1 or abs(n_sub * cfg.dt_sim - dt) > 1e-9:
        raise ValueError(f"dt_sim={cfg.dt_sim} must divide the control period {dt}")
    u = command.clamped()
    delta_cmd = u.u1 * cfg.max_steer
    accel_cmd = u.u2 * cfg.max_accel
    p, s = sim.pose, sim.state
    x = np.array([p.X, p.Y, p.psi, s.phi, s.vx, s.vy, s.r, sim.steer], dtype=float)
    h = cfg.dt_sim
    for _ in range(n_sub):
        _, mu, scale = surface_params(smap, x[0], x[1])
        dx, _, _ = _derivs(x, mu, delta_cmd, accel_cmd, cfg, scale)
        x = x + h * dx
        if x[4] < 0.0:
            x[4] = 0.0
    if not np.all(np.isfinite(x)):
        raise SimulationDivergence(f"non-finite simulator state at t={sim.t + dt:.3f}")
    return SimState(Pose(x[0], x[1], x[2]), VehicleState(x[3], x[4], x[5], x[6]), float(x[7]), sim.t + dt)


def slip_angles(sim: SimState, cfg: SimConfig):
    """Front and rear slip angles (rad) of the current state."""
    s = sim.state
    v_slip = max(s.vx, cfg.min_slip_speed)
    alpha_f = np.arctan2(s.vy + cfg.a * s.r, v_slip) - sim.steer
    alpha_r = np.arctan2(s.vy - cfg.b * s.r, v_slip)
    return float(alpha_f), float(alpha_r)


def lateral_acceleration(sim: SimState, cfg: SimConfig, smap: SurfaceMap, command: ControlInput) -> float:
    p, s = sim.pose, sim.state
    _, mu, scale = surface_params(smap, p.X, p.Y)
    u = command.clamped()
    x = np.array([p.X, p.Y, p.psi, s.phi, s.vx, s.vy, s.r, sim.steer])
    dx, _, _ = _derivs(x, mu, u.u1 * cfg.max_steer, u.u2 * cfg.max_accel, cfg, scale)
    return float(dx[5] + s.r * s.vx)


def observe(sim: SimState, cfg: SimConfig, rng: np.random.Generator | None):
    """Noisy measurement ``(VehicleState, Pose)``; exact when all stds are zero."""
    s, p = sim.state, sim.pose
    truth = np.array([s.phi, s.vx, s.vy, s.r, p.X, p.Y, p.psi])
    std = np.asarray(cfg.noise_std, dtype=float)
    if rng is not None and np.any(std > 0):
        truth = truth + std * rng.standard_normal(7)
    return VehicleState(*truth[:4]), Pose(*truth[4:])
