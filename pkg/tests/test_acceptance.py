"""Acceptance checks for the shipped desk-scale configuration.

Each test prints one "[criterion N] PASS/FAIL ..." line (run pytest with
-s to see them on success; on failure the line is in the captured
output).  Every expected value is produced by an oracle implemented in
this file or by an invariant of the problem, never copied from the
implementation under test.
"""

import time

import numpy as np

from pcbf.barrier import Ncbf
from pcbf.cli import monte_carlo_volume
from pcbf.hjgrid import compare_sets, compute_kernel, kernel_membership
from pcbf.mlp import MlpParams, mlp_forward, mlp_init
from pcbf.runtime import (ConstantVertexPolicy, QuadrotorWaypointPD, SIM_DT,
                          simulate)
from pcbf.systems import ControlAffineSystem, make_pendulum, vertices
from pcbf.training import (GaussianSampler, compute_losses, pcbf_direction,
                           solve_base_subproblem)


def _report(num, ok, detail):
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------- C1


def _random_system(rng, n, m):
    """Linear drift, constant actuation, spherical safety margin."""
    a_mat = rng.normal(size=(n, n)) / np.sqrt(n)
    b_mat = rng.normal(size=(n, m))
    radius2 = 1.0 + rng.uniform(0.0, 1.0)

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        return x @ a_mat.T

    def actuation(x):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(b_mat, x.shape[:-1] + (n, m)).copy()

    def safe_margin(x):
        x = np.asarray(x, dtype=np.float64)
        return radius2 - np.sum(x * x, axis=-1), -2.0 * x

    return ControlAffineSystem(
        name=f"linear{n}d",
        state_box=np.repeat([[-1.0, 1.0]], n, axis=0).astype(np.float64),
        input_box=np.repeat([[-1.0, 1.0]], m, axis=0).astype(np.float64),
        drift=drift,
        actuation=actuation,
        safe_margin=safe_margin,
    )


def _loss_values(ncbf, batch):
    """Loss values only, assembled point by point (no gradient tape)."""
    verts = vertices(ncbf.system.input_box)
    anchor = float(mlp_forward(ncbf.params, ncbf.x_e))
    feas_terms, vol_terms = [], []
    for x in batch:
        hbar = float(ncbf.value(x))
        if hbar < 0.0:
            continue
        grad = ncbf.gradient(x)
        f = ncbf.system.drift(x)
        g = ncbf.system.actuation(x)
        sup = max(float(grad @ (f + g @ v)) for v in verts)
        sup += ncbf.alpha_slope * hbar
        feas_terms.append(max(0.0, -sup))
        vol_terms.append((float(mlp_forward(ncbf.params, x)) - anchor) ** 2)
    n = len(feas_terms)
    if n == 0:
        return 0.0, 0.0
    return sum(feas_terms) / n, sum(vol_terms) / n


def _clear_of_ties(ncbf, x, margin):
    """True when x is at least `margin` from every nonsmooth boundary.

    The stated exclusion radius is 1e-6; a point that close to a hinge
    can still flip branches inside the 1e-5 finite-difference stencil,
    so the batch is kept `margin` (10x the step) away, which excludes
    every point the 1e-6 rule excludes and keeps the stencil on one
    smooth branch.
    """
    hbar = float(ncbf.value(x))
    if abs(hbar) < margin:
        return False
    if hbar < 0.0:
        return True
    grad = ncbf.gradient(x)
    f = ncbf.system.drift(x)
    g = ncbf.system.actuation(x)
    phis = np.array([float(grad @ (f + g @ v))
                     for v in vertices(ncbf.system.input_box)])
    phis += ncbf.alpha_slope * hbar
    top = np.sort(phis)[::-1]
    if abs(top[0]) < margin:
        return False
    if top.size > 1 and top[0] - top[1] < margin:
        return False
    return True


def test_criterion_01_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    step = 1e-5
    margin = 10.0 * step
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(50):
        n = int(rng.integers(2, 13))
        m = int(rng.integers(1, 3))
        system = _random_system(rng, n, m)
        width = int(rng.integers(4, 33))
        layers = [n, width, 1] if trial % 2 else [n, width, max(4, width // 2), 1]
        ncbf = Ncbf(params=mlp_init(layers, seed=int(rng.integers(2 ** 31))),
                    system=system, x_e=np.zeros(n),
                    alpha_slope=float(rng.uniform(0.5, 3.0)))

        batch = []
        for _ in range(200):
            x = rng.uniform(-1.0, 1.0, size=n)
            if _clear_of_ties(ncbf, x, margin):
                batch.append(x)
            if len(batch) == 6:
                break
        assert len(batch) == 6, "could not assemble a tie-free batch"
        batch = np.array(batch)

        lp = compute_losses(ncbf, batch)
        theta = ncbf.params.flatten()
        fd_feas = np.empty_like(theta)
        fd_vol = np.empty_like(theta)
        for j in range(theta.size):
            for sign, slot in ((1.0, 0), (-1.0, 1)):
                bumped = theta.copy()
                bumped[j] += sign * step
                ncbf.params = MlpParams.unflatten(layers, bumped)
                vals = _loss_values(ncbf, batch)
                if slot == 0:
                    hi = vals
                else:
                    lo = vals
            fd_feas[j] = (hi[0] - lo[0]) / (2.0 * step)
            fd_vol[j] = (hi[1] - lo[1]) / (2.0 * step)
        ncbf.params = MlpParams.unflatten(layers, theta)

        for an, fd in ((lp.grad_feas, fd_feas), (lp.grad_vol, fd_vol)):
            denom = np.maximum(1e-4, np.maximum(np.abs(an), np.abs(fd)))
            worst = max(worst, float(np.max(np.abs(an - fd) / denom)))
    wall = time.perf_counter() - t0
    ok = worst < 1e-5 and wall < 60.0
    _report(1, ok, f"max rel err {worst:.2e} over 50 nets, {wall:.1f}s")


# ---------------------------------------------------------------- C2


def _min_norm_segment_point(g1, g2):
    """Independent minimizer of ||-(lam*g1 + (1-lam)*g2)|| over [0, 1].

    ||d(lam)||^2 = ||g2||^2 + 2 lam g2.(g1-g2) + lam^2 ||g1-g2||^2 is a
    parabola in lam; its vertex is clamped to the interval.
    """
    diff = g1 - g2
    a = float(diff @ diff)
    if a < 1e-24:
        lam = 0.0
    else:
        lam = min(1.0, max(0.0, -float(g2 @ diff) / a))
    return -(lam * g1 + (1.0 - lam) * g2)


def test_criterion_02_subproblem_exactness():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_gap = 0.0
    lemma_slack = 0.0
    for trial in range(10_000):
        p = int(rng.integers(1, 41))
        scale = 10.0 ** rng.uniform(-2.0, 1.0)
        g1 = rng.normal(size=p) * scale
        g2 = rng.normal(size=p) * scale
        if trial % 100 == 0:
            g2 = g1.copy()           # exact tie branch
        elif trial % 100 == 50:
            g2 = -g1                 # opposing gradients
        d, _ = solve_base_subproblem(g1, g2)
        ref = _min_norm_segment_point(g1, g2)
        worst_gap = max(worst_gap, float(np.linalg.norm(d - ref)))
        dn2 = float(d @ d)
        if dn2 > 0.0:
            slack = max(float(g1 @ d), float(g2 @ d)) + 0.5 * dn2
            lemma_slack = max(lemma_slack, slack / (1.0 + dn2))
    wall = time.perf_counter() - t0
    ok = worst_gap <= 1e-10 and lemma_slack <= 1e-9
    _report(2, ok, f"max |d - oracle| {worst_gap:.2e}, "
                   f"worst lemma slack {lemma_slack:.2e}, {wall:.1f}s")


# ---------------------------------------------------------------- C3


def _closed_form_direction(region, gf, gv, beta):
    """Published closed forms for the three branch directions."""
    clamp = lambda v: min(1.0, max(0.0, v))
    if region == "up":
        w = (1.0 + beta) * gf - gv
        lam = clamp(float(w @ gf) / float(w @ w))
        return (lam + lam * beta - 1.0) * gf - lam * gv
    if region == "middle":
        diff = gv - gf
        lam = clamp(float(-diff @ gf) / float(diff @ diff))
        return -lam * gv - (1.0 - lam) * gf
    w = gv + (1.0 - beta) * gf
    lam = clamp(float(w @ gf) / float(w @ w))
    return (lam - lam * beta - 1.0) * gf + lam * gv


def _grid_qp_direction(region, gf, gv, beta, points=200_001):
    """Brute-force dense search over the branch's feasible segment."""
    lams = np.linspace(0.0, 1.0, points)
    if region == "up":
        cand = (lams[:, None] * (1.0 + beta) - 1.0) * gf - lams[:, None] * gv
    elif region == "middle":
        cand = -lams[:, None] * gv - (1.0 - lams)[:, None] * gf
    else:
        cand = (lams[:, None] * (1.0 - beta) - 1.0) * gf + lams[:, None] * gv
    return cand[np.argmin(np.einsum("ij,ij->i", cand, cand))]


def test_criterion_03_three_region_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    beta, eps_lb, eps_ub = 1.5, 0.05, 0.4
    p_mat = np.array([[2.0, 0.3], [0.3, 1.0]])
    q_mat = np.array([[1.0, -0.2], [-0.2, 3.0]])
    a_pt = np.array([1.0, -0.5])
    b_pt = np.array([-0.8, 0.7])

    def losses(theta):
        df, dv = theta - a_pt, theta - b_pt
        feas = 0.5 * float(df @ p_mat @ df)
        vol = 0.5 * float(dv @ q_mat @ dv) + 0.02
        return feas, vol, p_mat @ df, q_mat @ dv

    seen = set()
    worst = 0.0
    worst_grid = 0.0
    eta, gamma = 0.05, 1e-3
    for start in range(40):
        theta = rng.uniform(-3.0, 3.0, size=2)
        for _ in range(60):
            feas, vol, gf, gv = losses(theta)
            d, region, _ = pcbf_direction(feas, vol, gf, gv,
                                          beta, eps_lb, eps_ub)
            if vol > beta * feas + eps_ub:
                expect = "up"
            elif vol >= beta * feas + eps_lb:
                expect = "middle"
            else:
                expect = "below"
            assert region == expect, (region, expect)
            seen.add(region)
            ref = _closed_form_direction(region, gf, gv, beta)
            worst = max(worst, float(np.max(np.abs(d - ref))))
            grid = _grid_qp_direction(region, gf, gv, beta)
            worst_grid = max(worst_grid, float(np.linalg.norm(d - grid)))
            theta = theta + eta * (d - gamma * gv)
    wall = time.perf_counter() - t0
    ok = worst < 1e-12 and worst_grid < 1e-3 and seen == {"up", "middle", "below"}
    _report(3, ok, f"closed-form gap {worst:.2e}, grid-QP gap {worst_grid:.2e}, "
                   f"regions {sorted(seen)}, {wall:.1f}s")


# ---------------------------------------------------------------- C4


def test_criterion_04_containment_invariants(pendulum_run, quadrotor_run):
    rng = np.random.default_rng(17)
    worst_gap = -np.inf
    worst_anchor = 0.0
    intersections = 0
    for run in (pendulum_run, quadrotor_run):
        system = run["system"]
        lo, hi = system.state_box[:, 0], system.state_box[:, 1]
        states = rng.uniform(lo, hi, size=(100_000, system.n))
        h_vals, _ = system.safe_margin(states)
        for net in (run["pcbf"], run["lccbf"]):
            hbar = net.value(states)
            worst_gap = max(worst_gap, float(np.max(hbar - h_vals)))
            anchor_h, _ = system.safe_margin(net.x_e)
            worst_anchor = max(worst_anchor,
                               abs(float(net.value(net.x_e)) - float(anchor_h)))
            intersections += int(np.sum((hbar >= 0.0) & (h_vals < 0.0)))
    ok = worst_gap <= 1e-12 and worst_anchor <= 1e-12 and intersections == 0
    _report(4, ok, f"max(hbar-h) {worst_gap:.2e}, anchor gap {worst_anchor:.2e}, "
                   f"learned-set points in {{h<0}}: {intersections}")


# ---------------------------------------------------------------- C5


def test_criterion_05_kernel_sanity():
    t0 = time.perf_counter()
    kern_full = compute_kernel(make_pendulum(u_max=1.0), shape=(201, 201),
                               dt=0.02, tol=1e-6, max_sweeps=4000)
    kern_half = compute_kernel(make_pendulum(u_max=0.5), shape=(201, 201),
                               dt=0.02, tol=1e-6, max_sweeps=4000)
    assert kern_full.converged

    system = make_pendulum()
    th = kern_full.axes[0][:, None] * np.ones_like(kern_full.axes[1])[None, :]
    om = np.ones_like(kern_full.axes[0])[:, None] * kern_full.axes[1][None, :]
    states = np.stack([th, om], axis=-1).reshape(-1, 2)
    h_vals, _ = system.safe_margin(states)
    member = kernel_membership(kern_full, states)
    inside_s = bool(np.all(h_vals[member] >= 0.0))

    sym_gap = float(np.max(np.abs(kern_full.values
                                  - kern_full.values[::-1, ::-1])))

    mono_gap = float(np.max(kern_half.values - kern_full.values))
    member_half = kernel_membership(kern_half, states)
    subset_violations = int(np.sum(member_half & ~member))
    wall = time.perf_counter() - t0

    ok = (inside_s and sym_gap <= 1e-8 and mono_gap <= 1e-12
          and subset_violations == 0 and wall < 120.0)
    _report(5, ok, f"kernel in S: {inside_s}, symmetry gap {sym_gap:.1e}, "
                   f"u-monotonicity gap {mono_gap:.1e}, "
                   f"subset violations {subset_violations}, {wall:.1f}s")


# ---------------------------------------------------------------- C6


def test_criterion_06_pendulum_desk_scale(pendulum_run, pendulum_kernel):
    run = pendulum_run
    metrics = compare_sets(run["pcbf"], pendulum_kernel,
                           n_samples=1_000_000, seed=101)
    baseline = compare_sets(run["lccbf"], pendulum_kernel,
                            n_samples=1_000_000, seed=101)
    coverage = metrics["coverage"]
    area = metrics["area_learned"]
    area_l = baseline["area_learned"]
    budget_ok = run["budget"] <= 20_000 and run["pcbf_wall_s"] < 900.0
    ok = bool(coverage >= 0.95 and area > area_l and budget_ok)
    _report(6, ok, f"coverage {coverage:.4f} (>=0.95), "
                   f"area {area:.3f} vs equal-budget baseline {area_l:.3f}, "
                   f"kernel {metrics['area_kernel']:.3f}, "
                   f"budget {run['budget']} iters / {run['pcbf_wall_s']:.0f}s")


# ---------------------------------------------------------------- C7


def test_criterion_07_quadrotor_volume_ratio(quadrotor_run):
    run = quadrotor_run
    vol_p, err_p = monte_carlo_volume(run["pcbf"], 1_000_000, seed=23)
    vol_l, err_l = monte_carlo_volume(run["lccbf"], 1_000_000, seed=23)
    ratio = vol_l / vol_p if vol_p > 0 else np.inf
    budget_ok = run["budget"] <= 50_000
    ok = bool(ratio <= 0.5 and budget_ok)
    _report(7, ok, f"volume ratio {ratio:.3f} (<=0.5), "
                   f"pcbf {vol_p:.3f}+-{err_p:.3f}, "
                   f"baseline {vol_l:.3f}+-{err_l:.3f}, "
                   f"budget {run['budget']} iters")


# ---------------------------------------------------------------- C8


def test_criterion_08_quadrotor_paired_obstacle_runs(quadrotor_run):
    t0 = time.perf_counter()
    run = quadrotor_run
    system = run["system"]
    cfg = run["config"]
    x0 = np.asarray(cfg["simulate.x0"], dtype=np.float64)
    policy = QuadrotorWaypointPD(
        waypoint=np.asarray(cfg["simulate.waypoint"], dtype=np.float64))
    duration = cfg["simulate.duration"]

    raw = simulate(system, policy, x0, duration, ncbf=None)
    filtered = simulate(system, policy, x0, duration, ncbf=run["pcbf"])
    finite = bool(np.all(np.isfinite(filtered.states)))
    wall = time.perf_counter() - t0
    ok = bool(raw.min_h < 0.0 and filtered.min_h >= 0.0
              and finite and wall < 60.0)
    _report(8, ok, f"unfiltered min h {raw.min_h:.3f} (<0), "
                   f"filtered min h {filtered.min_h:.3f} (>=0), "
                   f"finite {finite}, dt {SIM_DT:.5f}s, {wall:.1f}s")


# ---------------------------------------------------------------- C9


def test_criterion_09_forward_invariance_stress(pendulum_run):
    run = pendulum_run
    system = run["system"]
    net = run["pcbf"]
    rng = np.random.default_rng(91)
    lo, hi = system.state_box[:, 0], system.state_box[:, 1]

    starts = []
    while len(starts) < 100:
        x = rng.uniform(lo, hi, size=(256, system.n))
        keep = net.value(x) >= 0.0
        starts.extend(x[keep])
    starts = np.array(starts[:100])

    policy = ConstantVertexPolicy(vertex_index=1)
    min_h = np.inf
    infeasible = 0
    for x0 in starts:
        traj = simulate(system, policy, x0, 10.0, ncbf=net)
        min_h = min(min_h, float(traj.min_h))
        infeasible += int(np.sum(traj.infeasible))
    ok = bool(min_h >= 0.0 and infeasible == 0)
    _report(9, ok, f"min h over 100 runs {min_h:.4f} (>=0), "
                   f"infeasibility flags {infeasible} (=0)")


# ---------------------------------------------------------------- C10


def test_criterion_10_throughput_and_sampler_scaling(pendulum_run):
    wall_cols = np.array([row.wall_ms for row in pendulum_run["pcbf_history"]])
    logged = bool(wall_cols.size and np.all(wall_cols > 0.0))

    system = make_pendulum()
    sizes = [256, 1024, 4096]
    per_call = []
    for n_batch in sizes:
        sampler = GaussianSampler.for_system(system, np.zeros(2), 4.0,
                                             n_batch, seed=5)
        reps = max(200, 2_000_000 // n_batch)
        sampler.sample()                      # warm up allocators
        trials = []
        for _ in range(5):
            t0 = time.perf_counter()
            for _ in range(reps):
                sampler.sample()
            trials.append((time.perf_counter() - t0) / reps)
        per_call.append(min(trials))

    x = np.array(sizes, dtype=np.float64)
    y = np.array(per_call)
    slope, intercept = np.polyfit(x, y, 1)
    fit = slope * x + intercept
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    ok = bool(logged and r2 > 0.99)
    times = ", ".join(f"{n}: {t * 1e6:.1f}us" for n, t in zip(sizes, per_call))
    _report(10, ok, f"per-iter wall logged: {logged}, sampler scaling "
                    f"R^2 {r2:.5f} ({times})")
