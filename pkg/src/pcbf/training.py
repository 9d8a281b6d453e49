"""Barrier training: two losses, a two-gradient Pareto step, and the loop.

The feasibility loss penalizes states inside the current learned set
where no admissible input satisfies the transfer condition; the volume
loss penalizes the squared network deviation that shrinks the set.  The
Pareto update picks the minimum-norm convex combination of two gradients
(which region's pair depends on where the volume loss sits relative to a
band around the feasibility loss) and adds a small volume-descent
regularizer so Pareto-critical points with a zero feasibility gradient
still make progress.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff
from .autodiff import Var
from .barrier import Ncbf
from .mlp import MlpGraph, MlpParams, mlp_init
from .systems import ControlAffineSystem, vertices

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training hit non-finite numbers or an impossible descent direction."""


@dataclass
class GaussianSampler:
    """Gaussian batches around the anchor, clipped to the state box.

    The per-axis standard deviation defaults to (box width) / k, so the
    mass concentrates near x_e while clipping piles the tails onto the
    box faces.  The stream is owned by the sampler and deterministic for
    a fixed seed.
    """

    x_e: np.ndarray
    sigma: np.ndarray
    state_box: np.ndarray
    batch_size: int
    rng: np.random.Generator

    @classmethod
    def for_system(cls, system: ControlAffineSystem, x_e, k: float,
                   batch_size: int, seed) -> "GaussianSampler":
        if k <= 0:
            raise ValueError("sampler divisor k must be positive")
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        box = system.state_box
        sigma = (box[:, 1] - box[:, 0]) / k
        return cls(x_e=np.asarray(x_e, dtype=np.float64), sigma=sigma,
                   state_box=box, batch_size=int(batch_size),
                   rng=np.random.default_rng(seed))

    def sample(self) -> np.ndarray:
        z = self.rng.standard_normal((self.batch_size, self.x_e.size))
        raw = self.x_e + self.sigma * z
        return np.clip(raw, self.state_box[:, 0], self.state_box[:, 1])


@dataclass
class LossPair:
    feas: float
    vol: float
    grad_feas: np.ndarray
    grad_vol: np.ndarray
    n_inside: int


def _flatten_grads(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def compute_losses(ncbf: Ncbf, batch: np.ndarray) -> LossPair:
    """Both losses and their exact parameter gradients on one batch.

    Membership (hbar >= 0) and the inside count act as constants within
    the step; the feasibility gradient flows only through active hinges
    and, at each state, the vertex achieving the input supremum (lowest
    index on ties).  An empty inside set gives zero losses and gradients.
    """
    system = ncbf.system
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != system.n:
        raise ValueError(f"batch must have shape (N, {system.n}), got {X.shape}")

    h_vals, h_grads = system.safe_margin(X)
    f = system.drift(X)
    g = system.actuation(X)
    verts = vertices(system.input_box)
    # successor fields f + g u_v for every vertex, shape (V, N, n)
    flow = f[None, :, :] + np.einsum("nij,vj->vni", g, verts)

    net = MlpGraph(ncbf.params)
    y, gx = net.value_and_input_grad(X)                  # (N,), (N, n)
    y_e = net.value(ncbf.x_e[None, :])                   # (1,)
    delta = y - y_e
    hbar = Var(h_vals) - delta ** 2                      # (N,)

    inside = hbar.value >= 0.0
    n_inside = int(inside.sum())
    mask = Var(inside.astype(np.float64))
    denom = float(max(n_inside, 1))

    N = X.shape[0]
    ghbar = Var(h_grads) - 2.0 * delta.reshape((N, 1)) * gx      # (N, n)
    phi_all = (ghbar * Var(flow)).sum(axis=2) \
        + ncbf.alpha_slope * hbar                                # (V, N)
    sup = autodiff.amax(phi_all, axis=0)                         # (N,)
    l_feas = (autodiff.relu(-sup) * mask).sum() * (1.0 / denom)
    l_vol = ((delta ** 2) * mask).sum() * (1.0 / denom)

    leaves = net.leaves()
    grad_feas = _flatten_grads(autodiff.grad(l_feas, leaves))
    grad_vol = _flatten_grads(autodiff.grad(l_vol, leaves))
    return LossPair(feas=float(l_feas.value), vol=float(l_vol.value),
                    grad_feas=grad_feas, grad_vol=grad_vol, n_inside=n_inside)


def feasibility_loss(ncbf: Ncbf, batch) -> tuple[float, np.ndarray, int]:
    lp = compute_losses(ncbf, batch)
    return lp.feas, lp.grad_feas, lp.n_inside


def volume_loss(ncbf: Ncbf, batch) -> tuple[float, np.ndarray]:
    lp = compute_losses(ncbf, batch)
    return lp.vol, lp.grad_vol


# Pareto machinery -----------------------------------------------------

def solve_base_subproblem(g1: np.ndarray, g2: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm point of the segment {-(lam g1 + (1-lam) g2)}.

    Solves min over (d, alpha) of alpha + 0.5 ||d||^2 subject to
    g1.d <= alpha and g2.d <= alpha; the closed form clamps
    lam = ((g2 - g1).g2) / ||g1 - g2||^2 to [0, 1].  Nearly equal
    gradients take lam = 0.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    diff = g1 - g2
    nrm2 = float(diff @ diff)
    if np.sqrt(nrm2) < 1e-12:
        lam = 0.0
    else:
        lam = float(np.clip(((g2 - g1) @ g2) / nrm2, 0.0, 1.0))
    d = -(lam * g1 + (1.0 - lam) * g2)
    return d, lam


def _check_descent(g1, g2, d) -> None:
    # both constraint values must sit at or below -||d||^2 / 2 when d != 0
    d2 = float(d @ d)
    if d2 == 0.0:
        return
    bound = -0.5 * d2 + 1e-9 * (1.0 + d2)
    worst = max(float(g1 @ d), float(g2 @ d))
    if worst > bound:
        raise NumericalError(
            f"descent bound violated: max(g.d) = {worst:.3e} > {bound:.3e}")


def pcbf_direction(feas: float, vol: float, grad_feas: np.ndarray,
                   grad_vol: np.ndarray, beta: float, eps_lb: float,
                   eps_ub: float) -> tuple[np.ndarray, str, float]:
    """Region pick plus the base subproblem for the Pareto update.

    Above the band (vol > beta*feas + eps_ub) the pair is
    (grad(vol - beta*feas), grad feas); inside the band it is
    (grad feas, grad vol); below (vol < beta*feas + eps_lb) it is
    (grad(beta*feas - vol), grad feas).
    """
    if vol > beta * feas + eps_ub:
        region = "up"
        g1, g2 = grad_vol - beta * grad_feas, grad_feas
    elif vol >= beta * feas + eps_lb:
        region = "middle"
        g1, g2 = grad_feas, grad_vol
    else:
        region = "below"
        g1, g2 = beta * grad_feas - grad_vol, grad_feas
    d, lam = solve_base_subproblem(g1, g2)
    _check_descent(g1, g2, d)
    return d, region, lam


@dataclass
class TrainerConfig:
    hidden_sizes: tuple[int, ...] = (256, 256, 256)
    iters: int = 1000
    eta: float = 1e-3
    beta: float = 1.0
    gamma: float = 1e-2
    eps_lb: float | None = None
    eps_ub: float | None = None
    alpha_slope: float = 1.0
    sampler_k: float = 4.0
    batch_size: int = 1024
    seed: int = 0
    mode: str = "pcbf"
    lccbf_feas_weight: float = 1.0
    lccbf_vol_weight: float = 0.05
    pretrain_iters: int = 1000
    pretrain_threshold: float = 1e-4
    checkpoint_every: int = 500
    resample: bool = True

    def validate(self) -> None:
        if self.mode not in ("pcbf", "lccbf"):
            raise ValueError(f"mode must be 'pcbf' or 'lccbf', got {self.mode!r}")
        if self.eta <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("eta, beta and gamma must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        if self.alpha_slope <= 0 or self.sampler_k <= 0:
            raise ValueError("alpha_slope and sampler_k must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if (self.eps_lb is None) != (self.eps_ub is None):
            raise ValueError("set both loss-band bounds or neither")
        if self.eps_lb is not None:
            if not 0.0 <= self.eps_lb <= self.eps_ub:
                raise ValueError("need 0 <= eps_lb <= eps_ub")
        if self.lccbf_feas_weight < 0 or self.lccbf_vol_weight < 0:
            raise ValueError("linear-combination weights must be nonnegative")
        if self.pretrain_iters < 0 or self.pretrain_threshold <= 0:
            raise ValueError("pretrain settings must be positive")
        if not all(int(w) > 0 for w in self.hidden_sizes):
            raise ValueError("hidden layer widths must be positive")


@dataclass
class TrainerState:
    ncbf: Ncbf
    config: TrainerConfig
    sampler: GaussianSampler
    iteration: int = 0
    last_losses: LossPair | None = None


@dataclass
class StepInfo:
    losses: LossPair
    region: str
    lam: float
    d_norm: float


@dataclass
class HistoryRow:
    iteration: int
    l_feas: float
    l_vol: float
    region: str
    d_norm: float
    wall_ms: float


def _apply_update(state: TrainerState, direction: np.ndarray) -> None:
    if not np.all(np.isfinite(direction)):
        raise NumericalError(
            f"non-finite update direction at iteration {state.iteration}")
    theta = state.ncbf.params.flatten() + state.config.eta * direction
    state.ncbf.params = MlpParams.unflatten(state.ncbf.params.layer_sizes, theta)


def pcbf_step(state: TrainerState, batch) -> StepInfo:
    cfg = state.config
    if cfg.eps_lb is None or cfg.eps_ub is None:
        raise ValueError("pcbf_step needs resolved loss-band bounds")
    lp = compute_losses(state.ncbf, batch)
    if not (np.isfinite(lp.feas) and np.isfinite(lp.vol)
            and np.all(np.isfinite(lp.grad_feas))
            and np.all(np.isfinite(lp.grad_vol))):
        raise NumericalError(f"non-finite losses at iteration {state.iteration}")
    d, region, lam = pcbf_direction(lp.feas, lp.vol, lp.grad_feas, lp.grad_vol,
                                    cfg.beta, cfg.eps_lb, cfg.eps_ub)
    _apply_update(state, d - cfg.gamma * lp.grad_vol)
    state.iteration += 1
    state.last_losses = lp
    return StepInfo(losses=lp, region=region, lam=lam,
                    d_norm=float(np.linalg.norm(d)))


def lccbf_step(state: TrainerState, batch) -> StepInfo:
    """Plain gradient descent on the weighted loss sum (the baseline)."""
    cfg = state.config
    lp = compute_losses(state.ncbf, batch)
    combo = cfg.lccbf_feas_weight * lp.grad_feas + cfg.lccbf_vol_weight * lp.grad_vol
    if not np.all(np.isfinite(combo)):
        raise NumericalError(f"non-finite gradient at iteration {state.iteration}")
    _apply_update(state, -combo)
    state.iteration += 1
    state.last_losses = lp
    return StepInfo(losses=lp, region="lccbf", lam=float("nan"),
                    d_norm=float(np.linalg.norm(combo)))


# pretraining and the loop ---------------------------------------------

@dataclass
class PretrainResult:
    eps_lb: float
    eps_ub: float
    v_star: float
    iterations: int
    reached_threshold: bool
    params: MlpParams
    history: list[HistoryRow] = field(default_factory=list)


def _run_pretrain(state: TrainerState) -> PretrainResult:
    """Linear-combination descent until the feasibility loss first drops
    below the threshold; the volume loss there anchors the band
    [0.5 v*, 2 v*].  If the threshold is never reached, the iterate with
    the smallest feasibility loss is used instead and a warning logged."""
    cfg = state.config
    if cfg.pretrain_iters < 1:
        raise ValueError("pretraining needs at least one iteration")
    history: list[HistoryRow] = []
    best_feas = np.inf
    best_vol = np.inf
    best_params = state.ncbf.params.copy()
    best_iter = 0
    reached = False
    for i in range(cfg.pretrain_iters):
        batch = state.sampler.sample()
        t0 = time.perf_counter()
        lp = compute_losses(state.ncbf, batch)
        if lp.feas < best_feas:
            best_feas, best_vol = lp.feas, lp.vol
            best_params = state.ncbf.params.copy()
            best_iter = i
        if lp.feas < cfg.pretrain_threshold:
            history.append(HistoryRow(state.iteration, lp.feas, lp.vol,
                                      "pretrain", 0.0,
                                      (time.perf_counter() - t0) * 1e3))
            state.iteration += 1
            reached = True
            break
        combo = (cfg.lccbf_feas_weight * lp.grad_feas
                 + cfg.lccbf_vol_weight * lp.grad_vol)
        if not np.all(np.isfinite(combo)):
            raise NumericalError(f"non-finite gradient in pretraining step {i}")
        _apply_update(state, -combo)
        history.append(HistoryRow(state.iteration, lp.feas, lp.vol, "pretrain",
                                  float(np.linalg.norm(combo)),
                                  (time.perf_counter() - t0) * 1e3))
        state.iteration += 1
    if reached:
        v_star = best_vol
        params = state.ncbf.params
    else:
        log.warning("pretraining never reached feasibility %.1e (best %.3e at "
                    "iteration %d); using that iterate for the band",
                    cfg.pretrain_threshold, best_feas, best_iter)
        v_star = best_vol
        params = best_params
        state.ncbf.params = best_params
    if v_star == 0.0:
        log.warning("pretraining volume loss is exactly zero, band collapses to 0")
    return PretrainResult(eps_lb=0.5 * v_star, eps_ub=2.0 * v_star,
                          v_star=v_star, iterations=len(history),
                          reached_threshold=reached, params=params,
                          history=history)


def _build_state(config: TrainerConfig, system: ControlAffineSystem,
                 x_e) -> TrainerState:
    config.validate()
    x_e = np.zeros(system.n) if x_e is None else np.asarray(x_e, dtype=np.float64)
    ss = np.random.SeedSequence(config.seed)
    init_ss, sampler_ss = ss.spawn(2)
    sizes = [system.n, *[int(w) for w in config.hidden_sizes], 1]
    params = mlp_init(sizes, int(init_ss.generate_state(1)[0]))
    ncbf = Ncbf(params=params, system=system, x_e=x_e,
                alpha_slope=config.alpha_slope)
    sampler = GaussianSampler.for_system(system, x_e, config.sampler_k,
                                         config.batch_size, sampler_ss)
    return TrainerState(ncbf=ncbf, config=config, sampler=sampler)


def pretrain_estimate_bounds(config: TrainerConfig, system: ControlAffineSystem,
                             x_e=None) -> tuple[float, float]:
    """Loss-band bounds (0.5 v*, 2 v*) from a linear-combination pretraining
    run, where v* is the volume loss when feasibility first crosses the
    threshold."""
    state = _build_state(config, system, x_e)
    result = _run_pretrain(state)
    return result.eps_lb, result.eps_ub


def train(config: TrainerConfig, system: ControlAffineSystem, x_e=None,
          out_dir=None) -> tuple[Ncbf, list[HistoryRow]]:
    """Run the configured trainer and return the barrier plus history.

    Mode "pcbf" resolves missing band bounds by pretraining first and
    then continues from the pretrained iterate; mode "lccbf" runs the
    weighted-sum baseline for the full budget.  iters = 0 returns the
    freshly initialized network untouched.  Fixed seeds give
    bit-identical parameter trajectories.
    """
    state = _build_state(config, system, x_e)
    history: list[HistoryRow] = []
    if config.iters == 0:
        return state.ncbf, history

    if config.mode == "pcbf" and config.eps_lb is None:
        if config.pretrain_iters < 1:
            raise ValueError("pcbf mode needs band bounds or pretrain_iters >= 1")
        result = _run_pretrain(state)
        history.extend(result.history)
        state.config = replace(config, eps_lb=result.eps_lb,
                               eps_ub=result.eps_ub)
        log.info("pretraining done after %d iterations: v*=%.4e, band=[%.4e, %.4e]",
                 result.iterations, result.v_star, result.eps_lb, result.eps_ub)

    step = pcbf_step if config.mode == "pcbf" else lccbf_step
    fixed_batch = None if config.resample else state.sampler.sample()
    from .barrier import save_ncbf  # local import, cycle-free convenience
    for i in range(config.iters):
        batch = state.sampler.sample() if config.resample else fixed_batch
        t0 = time.perf_counter()
        info = step(state, batch)
        wall = (time.perf_counter() - t0) * 1e3
        history.append(HistoryRow(state.iteration - 1, info.losses.feas,
                                  info.losses.vol, info.region, info.d_norm,
                                  wall))
        if out_dir is not None and config.checkpoint_every > 0 \
                and (i + 1) % config.checkpoint_every == 0:
            save_ncbf(f"{out_dir}/ckpt_{i + 1:06d}.ckpt", state.ncbf)
        if (i + 1) % max(1, config.checkpoint_every) == 0:
            log.info("iter %d: feas=%.4e vol=%.4e region=%s",
                     i + 1, info.losses.feas, info.losses.vol, info.region)
    return state.ncbf, history


def history_to_csv(history: list[HistoryRow], path) -> None:
    with open(path, "w") as f:
        f.write("iteration,l_feas,l_vol,region,d_norm,wall_ms\n")
        for row in history:
            f.write(f"{row.iteration},{row.l_feas!r},{row.l_vol!r},"
                    f"{row.region},{row.d_norm!r},{row.wall_ms:.3f}\n")
