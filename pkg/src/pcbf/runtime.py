"""Deployment: the barrier quadratic-program filter and closed-loop runs.

The filter projects a nominal input onto the inputs that keep the
learned barrier's transfer condition satisfied, staying inside the
input box.  With one linear constraint and a box, the tiny QP is solved
exactly by enumerating active-set patterns.  Infeasible instances fall
back to the vertex that maximizes the constraint and raise a flag.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .barrier import Ncbf
from .systems import ControlAffineSystem, NonFiniteStateError, rk4_step

log = logging.getLogger(__name__)

SIM_DT = 1.0 / 300.0


class FilterDecision(NamedTuple):
    u: np.ndarray
    active: bool
    infeasible: bool


def _box_halfspace_qp(u_nom, a, b, lo, hi, tol=1e-10):
    """Exact minimizer of ||u - u_nom||^2 over {u in box : a.u >= b}.

    Returns (u, infeasible).  The box projection is optimal whenever it
    already satisfies the halfspace; otherwise the constraint binds and
    every pattern of coordinates at a bound is tried, keeping the best
    feasible candidate (ties go to the earliest pattern).
    """
    m = u_nom.size
    u_clip = np.clip(u_nom, lo, hi)
    if a @ u_clip >= b - tol:
        return u_clip, False
    best_val = np.where(a > 0.0, hi, lo)
    if a @ best_val < b - tol:
        return best_val, True
    best = None
    best_obj = np.inf
    for pattern in itertools.product((0, 1, 2), repeat=m):
        pat = np.array(pattern)
        u = np.where(pat == 1, lo, np.where(pat == 2, hi, 0.0))
        free = pat == 0
        rhs = b - a[~free] @ u[~free]
        if free.any():
            af = a[free]
            n2 = af @ af
            if n2 <= tol ** 2:
                if rhs > tol:
                    continue
                u[free] = np.clip(u_nom[free], lo[free], hi[free])
            else:
                uf = u_nom[free] + af * ((rhs - af @ u_nom[free]) / n2)
                if np.any(uf < lo[free] - tol) or np.any(uf > hi[free] + tol):
                    continue
                u[free] = np.clip(uf, lo[free], hi[free])
        if a @ u < b - tol:
            continue
        obj = float(np.sum((u - u_nom) ** 2))
        if obj < best_obj - 1e-15:
            best, best_obj = u, obj
    if best is None:
        # mathematically unreachable once max a.u >= b; keep it loud
        log.warning("active-set enumeration found no candidate, returning "
                    "the constraint-maximizing vertex")
        return best_val, True
    return best, False


def cbf_qp_filter(ncbf: Ncbf, x, u_nom) -> FilterDecision:
    """Minimally modify u_nom so the barrier transfer condition holds at x.

    The constraint is <grad hbar, g(x)> u >= -c hbar(x) - <grad hbar, f(x)>
    inside the input box; `active` reports whether the halfspace forced a
    change of the (box-clipped) nominal input.
    """
    x = np.asarray(x, dtype=np.float64)
    u_nom = np.asarray(u_nom, dtype=np.float64)
    system = ncbf.system
    val, grad = ncbf.value_and_gradient(x)
    a = grad @ system.actuation(x)
    b = -ncbf.alpha_slope * float(val) - float(grad @ system.drift(x))
    lo, hi = system.input_box[:, 0], system.input_box[:, 1]
    u_clip = np.clip(u_nom, lo, hi)
    active = bool(a @ u_clip < b - 1e-10)
    if not active:
        return FilterDecision(u=u_clip, active=False, infeasible=False)
    u, infeasible = _box_halfspace_qp(u_nom, a, b, lo, hi)
    if infeasible:
        log.debug("barrier constraint infeasible at state %s", x)
    return FilterDecision(u=u, active=True, infeasible=infeasible)


# nominal policies ------------------------------------------------------

@dataclass
class PendulumPD:
    """u = -kp*theta - kd*omega, clipped to the input box."""

    kp: float = 4.0
    kd: float = 4.0

    def control(self, system: ControlAffineSystem, x, t: float) -> np.ndarray:
        return np.array([-self.kp * x[0] - self.kd * x[1]])


@dataclass
class QuadrotorWaypointPD:
    """Cascaded PD: position error -> desired acceleration -> thrust and a
    small-angle attitude target -> attitude PD torques."""

    waypoint: np.ndarray
    pos_kp: float = 1.2
    pos_kd: float = 1.8
    att_kp: float = 16.0
    att_kd: float = 4.0
    max_tilt: float = 0.5

    def control(self, system: ControlAffineSystem, x, t: float) -> np.ndarray:
        wp = np.asarray(self.waypoint, dtype=np.float64)
        p, v = x[0:3], x[3:6]
        ang, w = x[6:9], x[9:12]
        a_des = self.pos_kp * (wp - p) - self.pos_kd * v
        # hover thrust m*g plus vertical correction; tilt generates the rest
        grav = 9.81
        mass = system.input_box[0, 1] / (2.0 * grav)
        thrust = mass * (grav + a_des[2])
        roll_des = np.clip(-a_des[1] / grav, -self.max_tilt, self.max_tilt)
        pitch_des = np.clip(a_des[0] / grav, -self.max_tilt, self.max_tilt)
        att_des = np.array([roll_des, pitch_des, 0.0])
        # torque scaled by the (diagonal) inertia hidden in the input box is
        # not recoverable here, so use plain PD gains on angle and rate
        tau = self.att_kp * (att_des - ang) - self.att_kd * w
        return np.concatenate([[thrust], tau])


@dataclass
class ConstantVertexPolicy:
    """Always the same input-box vertex (an adversarial nominal)."""

    vertex_index: int = 0

    def control(self, system: ControlAffineSystem, x, t: float) -> np.ndarray:
        from .systems import vertices
        verts = vertices(system.input_box)
        if not 0 <= self.vertex_index < len(verts):
            raise ValueError(f"vertex index {self.vertex_index} out of range")
        return verts[self.vertex_index].copy()


def nominal_eval(policy, system: ControlAffineSystem, x, t: float) -> np.ndarray:
    """Evaluate a policy and clip the result to the input box."""
    u = np.asarray(policy.control(system, np.asarray(x, dtype=np.float64), t),
                   dtype=np.float64)
    if u.shape != (system.m,):
        raise ValueError(f"policy returned shape {u.shape}, expected ({system.m},)")
    return np.clip(u, system.input_box[:, 0], system.input_box[:, 1])


# simulation ------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray            # (K+1,)
    states: np.ndarray           # (K+1, n)
    inputs_nominal: np.ndarray   # (K, m)
    inputs: np.ndarray           # (K, m)
    filter_active: np.ndarray    # (K,) bool
    infeasible: np.ndarray       # (K,) bool
    h_values: np.ndarray         # (K+1,)
    barrier_values: np.ndarray | None = None   # (K+1,) when filtered
    aborted: bool = False

    def __post_init__(self):
        k = len(self.times) - 1
        if not (len(self.states) == k + 1 and len(self.inputs) == k
                and len(self.inputs_nominal) == k and len(self.h_values) == k + 1
                and len(self.filter_active) == k and len(self.infeasible) == k):
            raise ValueError("inconsistent trajectory array lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def min_h(self) -> float:
        """Smallest constraint margin over the run, ignoring the trailing
        non-finite state of an aborted trajectory."""
        vals = self.h_values[np.isfinite(self.h_values)]
        return float(vals.min()) if vals.size else float("nan")

    @property
    def min_barrier(self) -> float:
        if self.barrier_values is None:
            return float("nan")
        vals = self.barrier_values[np.isfinite(self.barrier_values)]
        return float(vals.min()) if vals.size else float("nan")


def simulate(system: ControlAffineSystem, policy, x0, duration: float,
             dt: float = SIM_DT, ncbf: Ncbf | None = None) -> Trajectory:
    """Zero-order-hold closed loop; a non-finite step aborts with partial data."""
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    n_steps = max(1, int(round(duration / dt)))
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (system.n,):
        raise ValueError(f"x0 must have shape ({system.n},), got {x.shape}")

    times = [0.0]
    states = [x.copy()]
    u_noms, us, actives, infeas = [], [], [], []
    aborted = False
    for k in range(n_steps):
        t = k * dt
        u_nom = nominal_eval(policy, system, x, t)
        if ncbf is not None:
            dec = cbf_qp_filter(ncbf, x, u_nom)
            u, act, inf_flag = dec.u, dec.active, dec.infeasible
        else:
            u, act, inf_flag = u_nom, False, False
        u_noms.append(u_nom)
        us.append(u)
        actives.append(act)
        infeas.append(inf_flag)
        try:
            x = rk4_step(system, x, u, dt)
        except NonFiniteStateError:
            log.warning("simulation aborted at t=%.4f: non-finite state", t)
            aborted = True
            times.append(t + dt)
            states.append(np.full(system.n, np.nan))
            break
        times.append((k + 1) * dt)
        states.append(x.copy())

    states_arr = np.array(states)
    n_infeasible = int(np.count_nonzero(infeas))
    if n_infeasible:
        log.warning("barrier constraint was infeasible on %d of %d steps",
                    n_infeasible, len(infeas))
    finite = np.all(np.isfinite(states_arr), axis=1)
    h_vals = np.full(len(states_arr), np.nan)
    if finite.any():
        h_vals[finite] = system.safe_margin(states_arr[finite])[0]
    barrier_vals = None
    if ncbf is not None:
        barrier_vals = np.full(len(states_arr), np.nan)
        if finite.any():
            barrier_vals[finite] = ncbf.value(states_arr[finite])
    return Trajectory(times=np.array(times), states=states_arr,
                      inputs_nominal=np.array(u_noms), inputs=np.array(us),
                      filter_active=np.array(actives, dtype=bool),
                      infeasible=np.array(infeas, dtype=bool),
                      h_values=h_vals, barrier_values=barrier_vals,
                      aborted=aborted)


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """One row per sampled state; input fields are empty on the final row."""
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if len(traj.inputs) else 0
    header = (["t"] + [f"x{i}" for i in range(n)]
              + [f"u_nom{i}" for i in range(m)] + [f"u{i}" for i in range(m)]
              + ["h", "hbar", "filter_active", "infeasible"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k, t in enumerate(traj.times):
            row = [repr(float(t))] + [repr(float(v)) for v in traj.states[k]]
            if k < len(traj.inputs):
                row += [repr(float(v)) for v in traj.inputs_nominal[k]]
                row += [repr(float(v)) for v in traj.inputs[k]]
                flags = [int(traj.filter_active[k]), int(traj.infeasible[k])]
            else:
                row += [""] * (2 * m)
                flags = ["", ""]
            row.append(repr(float(traj.h_values[k])))
            row.append("" if traj.barrier_values is None
                       else repr(float(traj.barrier_values[k])))
            row += flags
            w.writerow(row)
