"""Grid viability kernel for 2-D scenarios by discrete dynamic programming.

The value function starts at the safety margin h and is swept with
V <- min(h, max over input vertices of V interpolated at the one-step
successor).  Successors that leave the grid take a large negative
standin for minus infinity, which makes the boundary conservative: a
state forced off the grid counts as non-viable.  The converged
nonnegative region approximates the viability kernel from inside, up to
cell resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .systems import ControlAffineSystem, vertices

OUT_OF_GRID_VALUE = -100.0


@dataclass
class ValueGrid:
    axes: tuple[np.ndarray, np.ndarray]
    values: np.ndarray
    dt: float
    sweeps: int = 0
    converged: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def extents(self) -> np.ndarray:
        return np.array([[ax[0], ax[-1]] for ax in self.axes])


def _interp_coeffs(axes, pts):
    """Bilinear data for query points: corner indices, weights, inside mask."""
    inside = np.ones(pts.shape[0], dtype=bool)
    idx, wgt = [], []
    for d, ax in enumerate(axes):
        c = pts[:, d]
        inside &= (c >= ax[0]) & (c <= ax[-1])
        cell = (ax[-1] - ax[0]) / (len(ax) - 1)
        t = (c - ax[0]) / cell
        i0 = np.clip(np.floor(t).astype(np.intp), 0, len(ax) - 2)
        idx.append(i0)
        wgt.append(np.clip(t - i0, 0.0, 1.0))
    return idx, wgt, inside


def _interp_apply(values, idx, wgt, inside, fill):
    i0, j0 = idx
    wx, wy = wgt
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    out = ((1 - wx) * ((1 - wy) * v00 + wy * v01)
           + wx * ((1 - wy) * v10 + wy * v11))
    return np.where(inside, out, fill)


def grid_interpolate(grid: ValueGrid, x, out_of_grid=None):
    """Bilinear value at query states; out-of-extent raises unless a fill
    value is supplied."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    pts = X[None, :] if single else X
    if pts.shape[1] != 2:
        raise ValueError("this grid is 2-D")
    idx, wgt, inside = _interp_coeffs(grid.axes, pts)
    if out_of_grid is None and not inside.all():
        raise ValueError("query outside the grid extents")
    fill = 0.0 if out_of_grid is None else float(out_of_grid)
    out = _interp_apply(grid.values, idx, wgt, inside, fill)
    return float(out[0]) if single else out


def kernel_membership(grid: ValueGrid, x):
    v = grid_interpolate(grid, x)
    return (v >= 0.0) if np.ndim(v) else bool(v >= 0.0)


def _successor_data(system, axes, dt):
    K1, K2 = len(axes[0]), len(axes[1])
    T, W = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([T.ravel(), W.ravel()], axis=-1)
    h, _ = system.safe_margin(pts)
    f = system.drift(pts)
    g = system.actuation(pts)
    preps = []
    for u in vertices(system.input_box):
        nxt = pts + dt * (f + np.einsum("nij,j->ni", g, u))
        preps.append(_interp_coeffs(axes, nxt))
    return h.reshape(K1, K2), preps


def _sweep_values(values, h, preps):
    best = None
    for idx, wgt, inside in preps:
        cand = _interp_apply(values, idx, wgt, inside, OUT_OF_GRID_VALUE)
        best = cand if best is None else np.maximum(best, cand)
    return np.minimum(h, best.reshape(values.shape))


def viability_sweep(grid: ValueGrid, system: ControlAffineSystem) -> float:
    """One Jacobi sweep in place; returns the sup-norm change."""
    h, preps = _successor_data(system, grid.axes, grid.dt)
    new = _sweep_values(grid.values, h, preps)
    change = float(np.max(np.abs(new - grid.values)))
    grid.values = new
    grid.sweeps += 1
    return change


def compute_kernel(system: ControlAffineSystem, shape=(201, 201),
                   dt: float = 0.02, tol: float = 1e-6,
                   max_sweeps: int = 10_000) -> ValueGrid:
    """Sweep to a fixed point (change < tol) or the sweep budget.

    Values never increase between sweeps and stay at or below h, so the
    zero-superlevel set of the result underapproximates the safe states
    that can be kept safe forever with box-bounded inputs.
    """
    if system.n != 2:
        raise ValueError("the kernel grid supports 2-D scenarios only")
    if dt <= 0 or tol < 0 or max_sweeps < 1:
        raise ValueError("need dt > 0, tol >= 0 and max_sweeps >= 1")
    axes = tuple(np.linspace(lo, hi, int(k))
                 for (lo, hi), k in zip(system.state_box, shape))
    if any(len(ax) < 2 for ax in axes):
        raise ValueError("grid needs at least two nodes per axis")
    h, preps = _successor_data(system, axes, dt)
    values = h.copy()
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        new = _sweep_values(values, h, preps)
        change = float(np.max(np.abs(new - values)))
        values = new
        if change < tol:
            converged = True
            break
    return ValueGrid(axes=axes, values=values, dt=dt, sweeps=sweeps,
                     converged=converged)


def compare_sets(ncbf, grid: ValueGrid, n_samples: int = 200_000,
                 seed: int = 0) -> dict:
    """Monte-Carlo containment metrics of the learned set vs the kernel.

    coverage = P(x in kernel | x in learned set); conservatism =
    P(x in learned set | x in kernel).  A zero-hit learned set leaves
    coverage undefined (NaN) and raises a flag.
    """
    box = ncbf.system.state_box
    if not np.allclose(box, grid.extents):
        raise ValueError("barrier and kernel cover different state boxes")
    rng = np.random.default_rng(seed)
    n_learn = n_kern = n_both = 0
    remaining = int(n_samples)
    while remaining > 0:
        k = min(remaining, 65536)
        X = rng.uniform(box[:, 0], box[:, 1], size=(k, box.shape[0]))
        learned = ncbf.value(X) >= 0.0
        kern = grid_interpolate(grid, X) >= 0.0
        n_learn += int(learned.sum())
        n_kern += int(kern.sum())
        n_both += int((learned & kern).sum())
        remaining -= k
    volume = float(np.prod(box[:, 1] - box[:, 0]))
    out = {
        "n_samples": int(n_samples),
        "coverage": n_both / n_learn if n_learn else float("nan"),
        "conservatism": n_both / n_kern if n_kern else float("nan"),
        "area_learned": volume * n_learn / n_samples,
        "area_kernel": volume * n_kern / n_samples,
        "area_intersection": volume * n_both / n_samples,
        "undefined_coverage": n_learn == 0,
    }
    return out


# exports ---------------------------------------------------------------

def save_kernel_csv(grid: ValueGrid, path) -> None:
    meta = {"dt": grid.dt, "sweeps": grid.sweeps, "converged": grid.converged}
    with open(path, "w") as f:
        f.write(f"# meta {json.dumps(meta)}\n")
        f.write("x0,x1,value\n")
        for i, a in enumerate(grid.axes[0]):
            for j, b in enumerate(grid.axes[1]):
                f.write(f"{float(a)!r},{float(b)!r},{float(grid.values[i, j])!r}\n")


def load_kernel_csv(path) -> ValueGrid:
    meta = {"dt": 0.0, "sweeps": 0, "converged": False}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# meta"):
                meta.update(json.loads(line[len("# meta"):]))
                continue
            if line.startswith("x0"):
                continue
            a, b, v = line.split(",")
            rows.append((float(a), float(b), float(v)))
    arr = np.array(rows)
    ax0 = np.unique(arr[:, 0])
    ax1 = np.unique(arr[:, 1])
    if len(ax0) * len(ax1) != len(rows):
        raise ValueError("kernel csv does not describe a complete grid")
    values = np.full((len(ax0), len(ax1)), np.nan)
    i = np.searchsorted(ax0, arr[:, 0])
    j = np.searchsorted(ax1, arr[:, 1])
    values[i, j] = arr[:, 2]
    return ValueGrid(axes=(ax0, ax1), values=values, dt=float(meta["dt"]),
                     sweeps=int(meta["sweeps"]), converged=bool(meta["converged"]))


def zero_contours(grid: ValueGrid) -> list[np.ndarray]:
    """Ordered polylines of the kernel boundary, in state coordinates."""
    lines = measure.find_contours(grid.values, 0.0)
    out = []
    for ln in lines:
        pts = np.empty_like(ln)
        for d, ax in enumerate(grid.axes):
            cell = (ax[-1] - ax[0]) / (len(ax) - 1)
            pts[:, d] = ax[0] + ln[:, d] * cell
        out.append(pts)
    return out


def save_contour_csv(grid: ValueGrid, path) -> None:
    with open(path, "w") as f:
        f.write("contour,x0,x1\n")
        for c, pts in enumerate(zero_contours(grid)):
            for p in pts:
                f.write(f"{c},{float(p[0])!r},{float(p[1])!r}\n")
