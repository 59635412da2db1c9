"""Discrete-time forward/backward transition kernels and trajectory rollout.

Overdamped kernels (Euler-Maruyama):
    F_k = N(y_{k+1} | y_k + (sigma^2 s_k + f_k) dt,      2 sigma^2 dt I)
    B_k = N(y_k | y_{k+1} + (sigma^2 s_{k+1} - f_{k+1}) dt, 2 sigma^2 dt I)
with s the annealed score and f the control drift; the score inside the
forward kernel is evaluated at t_k and inside the backward kernel at t_{k+1}.

Underdamped kernels: momentum resample (variance 2 gamma dt) followed by a
deterministic, volume-preserving leapfrog whose half-kicks both use the
time-t_k score; the backward kernel inverts the leapfrog and scores the old
momentum under the reversed resample mean.

The rollout runs identically on raw arrays (evaluation) and on tape Nodes
(training losses), and each trajectory draws from its own counter-based
stream keyed by (seed, trajectory index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .annealing import GeometricPath, softplus_inv
from .diffcore import Array, DriftNetwork, ParamSet

CONTROL_MODES = ("cmcd", "ula", "mcd")
STEP_MODES = ("od", "ud")


class DivergedTrajectoryError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"trajectory diverged (non-finite state) at step {step}")
        self.step = step


@dataclass
class KernelConfig:
    mode: str = "od"
    control: str = "cmcd"
    gamma: float = 1.0  # initial underdamped damping; trainable via dyn.gamma_raw

    def __post_init__(self):
        if self.mode not in STEP_MODES:
            raise ValueError(f"mode must be one of {STEP_MODES}")
        if self.control not in CONTROL_MODES:
            raise ValueError(f"control must be one of {CONTROL_MODES}")


def init_dynamics_params(cfg: KernelConfig) -> ParamSet:
    if cfg.mode != "ud":
        return {}
    return {"dyn.gamma_raw": np.asarray(softplus_inv(cfg.gamma))}


def gamma_of(p):
    return dc.softplus(p["dyn.gamma_raw"])


# ---------------------------------------------------------------------------
# Controls. A control provides the drift f inserted into the kernels:
# f_fwd(p, k, ...) enters the forward mean of step k, f_bwd(p, k, ...) the
# backward mean of step k. Overdamped controls take (x), underdamped (y, z).
# ---------------------------------------------------------------------------

class ZeroControl:
    underdamped = False
    reuse_fb_as_ff = False
    needs_net = False

    def f_fwd(self, p, k, x, z=None):
        return 0.0

    f_bwd = f_fwd


class NetControl:
    """Learned drift in both kernels; forward at t_k, backward at t_{k+1}."""

    underdamped = False
    reuse_fb_as_ff = True
    needs_net = True

    def __init__(self, net: DriftNetwork, path: GeometricPath):
        self.net = net
        self.times = np.linspace(0.0, path.horizon, path.n_steps + 1)

    def f_fwd(self, p, k, x, z=None):
        return self.net.apply(p, x, self.times[k])

    def f_bwd(self, p, k, x, z=None):
        return self.net.apply(p, x, self.times[k + 1])


class McdControl(NetControl):
    """Score-only forward process; the learned drift enters the backward
    kernel alone."""

    reuse_fb_as_ff = False

    def f_fwd(self, p, k, x, z=None):
        return 0.0


class UDZeroControl(ZeroControl):
    underdamped = True


class UDNetControl:
    """Underdamped learned drift; both kernels of step k use time t_k and the
    network sees (position, momentum, time features)."""

    underdamped = True
    reuse_fb_as_ff = False
    needs_net = True

    def __init__(self, net: DriftNetwork, path: GeometricPath):
        self.net = net
        self.times = np.linspace(0.0, path.horizon, path.n_steps + 1)

    def f_fwd(self, p, k, y, z):
        return self.net.apply(p, z, self.times[k], extra=y)

    f_bwd = f_fwd


class UDMcdControl(UDNetControl):
    def f_fwd(self, p, k, y, z):
        return 0.0

    def f_bwd(self, p, k, y, z):
        return self.net.apply(p, z, self.times[k], extra=y)


def make_drift_network(path: GeometricPath, cfg: KernelConfig,
                       hidden=(20, 20), time_features: str = "fourier") -> DriftNetwork:
    extra = path.dim if cfg.mode == "ud" else 0
    return DriftNetwork(path.dim, hidden=hidden, time_features=time_features,
                        extra_inputs=extra, horizon=path.horizon)


def make_control(path: GeometricPath, cfg: KernelConfig, net: DriftNetwork | None = None):
    key = (cfg.mode, cfg.control)
    if cfg.control == "ula":
        return UDZeroControl() if cfg.mode == "ud" else ZeroControl()
    if net is None:
        raise ValueError(f"control {key} needs a drift network")
    table = {("od", "cmcd"): NetControl, ("od", "mcd"): McdControl,
             ("ud", "cmcd"): UDNetControl, ("ud", "mcd"): UDMcdControl}
    return table[key](net, path)


# ---------------------------------------------------------------------------
# Per-trajectory RNG streams (counter-based, reproducible per (seed, index)).
# ---------------------------------------------------------------------------

def trajectory_stream(seed: int, index: int, block: int = 0) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    counter = np.array([0, block & 0xFFFFFFFFFFFFFFFF, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def batch_noise(seed: int, n: int, blocks: int, d: int,
                index_offset: int = 0, block: int = 0) -> Array:
    """Stack per-trajectory standard-normal blocks: shape (blocks, n, d)."""
    out = np.empty((blocks, n, d))
    for j in range(n):
        rng = trajectory_stream(seed, index_offset + j, block)
        out[:, j, :] = rng.standard_normal((blocks, d))
    return out


# ---------------------------------------------------------------------------
# Overdamped kernels.
# ---------------------------------------------------------------------------

def _noise_scale(path: GeometricPath, p):
    """(sigma node, sqrt(2 sigma^2 dt) node, log-variance term helpers)."""
    sig = path.sigma(p)
    var = dc.mul(dc.square(sig), 2.0 * path.dt)   # 2 sigma^2 dt
    return sig, var


def od_step(path: GeometricPath, control, p, y, k: int, xi):
    """One forward Euler-Maruyama step; returns (y_{k+1}, log_f).

    xi is either a frozen standard-normal array (test hook / batch rollout)
    or a Generator to draw from. log_f is the exact Gaussian log-density of
    the draw: because y_{k+1} - mean = sqrt(2 sigma^2 dt) xi identically in
    the parameters, log_f = -(d/2) ln(2 pi v) - |xi|^2/2 with v = 2 sigma^2 dt.
    """
    if isinstance(xi, np.random.Generator):
        xi = xi.standard_normal(dc.value(y).shape)
    grid = path.beta_grid(p)
    beta_k = dc.gather(grid, k)
    s = path.grad_log_pi(p, beta_k, y)
    f = control.f_fwd(p, k, y)
    _, var = _noise_scale(path, p)
    drift = dc.add(dc.mul(s, dc.square(path.sigma(p))), f)
    mean = dc.add(y, dc.mul(drift, path.dt))
    root = dc.exp(dc.mul(dc.log(var), 0.5))
    y_next = dc.add(mean, dc.mul(root, xi))
    d = dc.value(y).shape[-1]
    log_f = dc.add(dc.mul(dc.log(var), -0.5 * d),
                   -0.5 * d * math.log(2.0 * math.pi) - 0.5 * (xi * xi).sum(axis=-1))
    return y_next, log_f


def od_log_b(path: GeometricPath, control, p, y, y_next, k: int,
             s_next=None, f_b=None):
    """Backward-kernel Gaussian log-density of y given y_{k+1}."""
    grid = path.beta_grid(p)
    if s_next is None:
        s_next = path.grad_log_pi(p, dc.gather(grid, k + 1), y_next)
    if f_b is None:
        f_b = control.f_bwd(p, k, y_next)
    sig, var = _noise_scale(path, p)
    drift = dc.add(dc.mul(s_next, dc.square(sig)), dc.mul(f_b, -1.0))
    mean = dc.add(y_next, dc.mul(drift, path.dt))
    resid = dc.add(y, dc.mul(mean, -1.0))
    d = dc.value(y).shape[-1]
    quad = dc.mul(dc.ssum(dc.square(resid), axis=-1), dc.mul(dc.reciprocal(var), -0.5))
    return dc.add(quad, dc.add(dc.mul(dc.log(var), -0.5 * d),
                               -0.5 * d * math.log(2.0 * math.pi)))


# ---------------------------------------------------------------------------
# Underdamped kernels: momentum resample + leapfrog.
# ---------------------------------------------------------------------------

def leapfrog_forward(path: GeometricPath, p, z, y, k: int):
    """Half-kick / drift / half-kick, both kicks with the time-t_k score."""
    grid = path.beta_grid(p)
    beta_k = dc.gather(grid, k)
    half = 0.5 * path.dt
    y_mid = dc.add(y, dc.mul(path.grad_log_pi(p, beta_k, z), half))
    z_next = dc.add(z, dc.mul(y_mid, path.dt))
    y_next = dc.add(y_mid, dc.mul(path.grad_log_pi(p, beta_k, z_next), half))
    return z_next, y_next


def leapfrog_inverse(path: GeometricPath, p, z_next, y_next, k: int):
    """Exact inverse of leapfrog_forward (scores at the recovered positions)."""
    grid = path.beta_grid(p)
    beta_k = dc.gather(grid, k)
    half = 0.5 * path.dt
    y_mid = dc.add(y_next, dc.mul(dc.mul(path.grad_log_pi(p, beta_k, z_next), half), -1.0))
    z = dc.add(z_next, dc.mul(y_mid, -path.dt))
    y = dc.add(y_mid, dc.mul(dc.mul(path.grad_log_pi(p, beta_k, z), half), -1.0))
    return z, y


def _ud_resample_scale(path: GeometricPath, p):
    gam = gamma_of(p)
    var = dc.mul(gam, 2.0 * path.dt)              # 2 gamma dt (verbatim kernel)
    return gam, var


def ud_forward(path: GeometricPath, control, p, z, y, k: int, xi):
    """Momentum resample then leapfrog; returns (z_{k+1}, y_{k+1}, log_f)."""
    z1, y1, log_f, _ = _ud_forward_full(path, control, p, z, y, k, xi)
    return z1, y1, log_f


def _ud_forward_full(path: GeometricPath, control, p, z, y, k: int, xi):
    if isinstance(xi, np.random.Generator):
        xi = xi.standard_normal(dc.value(y).shape)
    gam, var = _ud_resample_scale(path, p)
    f = control.f_fwd(p, k, y, z)
    shrink = dc.add(dc.mul(gam, -path.dt), 1.0)   # 1 - gamma dt
    mean = dc.add(dc.mul(y, shrink), dc.mul(f, path.dt))
    root = dc.exp(dc.mul(dc.log(var), 0.5))
    y_prime = dc.add(mean, dc.mul(root, xi))
    d = dc.value(y).shape[-1]
    log_f = dc.add(dc.mul(dc.log(var), -0.5 * d),
                   -0.5 * d * math.log(2.0 * math.pi) - 0.5 * (xi * xi).sum(axis=-1))
    z1, y1 = leapfrog_forward(path, p, z, y_prime, k)
    return z1, y1, log_f, y_prime


def ud_log_b(path: GeometricPath, control, p, zy, zy_next, k: int):
    """Backward log-density: invert the leapfrog, then score the old momentum
    under N(y' (1 - gamma dt) - f(y', z_k) dt, 2 gamma dt I)."""
    z, y = zy
    z_next, y_next = zy_next
    z_rec, y_prime = leapfrog_inverse(path, p, z_next, y_next, k)
    return _ud_log_b_from_prime(path, control, p, y, y_prime, z_rec, k)


def _ud_log_b_from_prime(path: GeometricPath, control, p, y, y_prime, z, k: int):
    gam, var = _ud_resample_scale(path, p)
    f = control.f_bwd(p, k, y_prime, z)
    shrink = dc.add(dc.mul(gam, -path.dt), 1.0)
    mean = dc.add(dc.mul(y_prime, shrink), dc.mul(dc.mul(f, path.dt), -1.0))
    resid = dc.add(y, dc.mul(mean, -1.0))
    d = dc.value(y).shape[-1]
    quad = dc.mul(dc.ssum(dc.square(resid), axis=-1), dc.mul(dc.reciprocal(var), -0.5))
    return dc.add(quad, dc.add(dc.mul(dc.log(var), -0.5 * d),
                               -0.5 * d * math.log(2.0 * math.pi)))


# ---------------------------------------------------------------------------
# Rollout.
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    states: Array                      # (K+1, d)
    per_step_log_ratio: Array          # (K,) of ln B_k - ln F_k
    rng_seed: int
    momenta: Array | None = None       # (K+1, d) underdamped only
    noise: Array | None = None         # realized standard-normal blocks


@dataclass
class BatchRollout:
    """Vectorized rollout over n trajectories (axis 1 of every array)."""
    states: Array                      # (K+1, n, d) values
    per_step: Array                    # (K, n) values of ln B - ln F
    ln_w: object                       # (n,) Node when traced, else Array
    ln_p0: object                      # (n,) boundary terms (same typing)
    ln_pt: object
    noise: Array                       # (blocks, n, d) standard normals
    alive: Array                       # (n,) bool, False once diverged
    first_bad_step: Array              # (n,) int, -1 if never diverged
    seed: int
    index_offset: int = 0
    momenta: Array | None = None
    per_step_nodes: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def n_diverged(self) -> int:
        return int((~self.alive).sum())

    def ln_w_values(self) -> Array:
        return dc.value(self.ln_w)


def _mask_update(x, alive: Array, any_dead: bool):
    return dc.mask_rows(x, alive) if any_dead else x


def rollout_batch(path: GeometricPath, control, p, *, seed: int, n: int,
                  index_offset: int = 0, block: int = 0,
                  noise: Array | None = None) -> BatchRollout:
    """Roll n trajectories and accumulate the log importance weight.

    When p contains tape Nodes the whole rollout is traced; noise is always a
    frozen constant (reparameterization), drawn per trajectory from
    trajectory_stream(seed, index_offset + j, block) unless supplied.
    """
    return (_rollout_ud if control.underdamped else _rollout_od)(
        path, control, p, seed, n, index_offset, block, noise)


def _term_and_mask(log_b, log_f, alive, any_dead):
    term = dc.add(log_b, dc.mul(log_f, -1.0))
    return _mask_update(term, alive, any_dead)


def _finite_rows(x_val: Array) -> Array:
    return np.isfinite(x_val).all(axis=-1)


def _rollout_od(path, control, p, seed, n, index_offset, block, noise):
    K, d = path.n_steps, path.dim
    if noise is None:
        noise = batch_noise(seed, n, K + 1, d, index_offset, block)
    source = path.source
    y = source.sample_reparam(p, noise[0])
    ln_p0 = source.logp_reparam(p, noise[0])
    alive = _finite_rows(dc.value(y))
    first_bad = np.where(alive, -1, 0)
    any_dead = not alive.all()
    y = _mask_update(y, alive, any_dead)

    states = np.empty((K + 1, n, d))
    states[0] = dc.value(y)
    terms = []
    grid = path.beta_grid(p)
    sig2 = dc.square(path.sigma(p))
    s = path.grad_log_pi(p, dc.gather(grid, 0), y)
    f = control.f_fwd(p, 0, y)
    for k in range(K):
        drift = dc.add(dc.mul(s, sig2), f)
        mean = dc.add(y, dc.mul(drift, path.dt))
        _, var = _noise_scale(path, p)
        root = dc.exp(dc.mul(dc.log(var), 0.5))
        y_next = dc.add(mean, dc.mul(root, noise[k + 1]))
        newly = alive & ~_finite_rows(dc.value(y_next))
        if newly.any():
            alive = alive & ~newly
            first_bad[newly] = k
            any_dead = True
        y_next = _mask_update(y_next, alive, any_dead)
        log_f = dc.add(dc.mul(dc.log(var), -0.5 * d),
                       -0.5 * d * math.log(2.0 * math.pi)
                       - 0.5 * (noise[k + 1] ** 2).sum(axis=-1))
        s_next = path.grad_log_pi(p, dc.gather(grid, k + 1), y_next)
        f_b = control.f_bwd(p, k, y_next)
        log_b = od_log_b(path, control, p, y, y_next, k, s_next=s_next, f_b=f_b)
        terms.append(_term_and_mask(log_b, log_f, alive, any_dead))
        y = y_next
        s = s_next
        states[k + 1] = dc.value(y)
        if k + 1 < K:
            f = f_b if control.reuse_fb_as_ff else control.f_fwd(p, k + 1, y)

    ln_pt = tg_logp(path, p, y)
    ln_w = dc.add(dc.mul(ln_p0, -1.0), ln_pt)
    for t in terms:
        ln_w = dc.add(ln_w, t)
    ln_w = _mask_update(ln_w, alive, any_dead)
    per_step = np.stack([dc.value(t) for t in terms]) if terms else np.zeros((0, n))
    return BatchRollout(states=states, per_step=per_step, ln_w=ln_w,
                        ln_p0=ln_p0, ln_pt=ln_pt, noise=noise, alive=alive,
                        first_bad_step=first_bad, seed=seed,
                        index_offset=index_offset, per_step_nodes=terms)


def tg_logp(path: GeometricPath, p, x):
    from .targets import logp_of
    return logp_of(path.target, x)


def _rollout_ud(path, control, p, seed, n, index_offset, block, noise):
    K, d = path.n_steps, path.dim
    if noise is None:
        noise = batch_noise(seed, n, K + 2, d, index_offset, block)
    source = path.source
    z = source.sample_reparam(p, noise[0])
    ln_p0_z = source.logp_reparam(p, noise[0])
    y0 = noise[1]                                    # momentum ~ N(0, I)
    ln_p0_y = -0.5 * d * math.log(2.0 * math.pi) - 0.5 * (y0 * y0).sum(axis=-1)
    ln_p0 = dc.add(ln_p0_z, ln_p0_y)
    y = y0
    alive = _finite_rows(dc.value(z))
    first_bad = np.where(alive, -1, 0)
    any_dead = not alive.all()
    z = _mask_update(z, alive, any_dead)

    states = np.empty((K + 1, n, d))
    momenta = np.empty((K + 1, n, d))
    states[0], momenta[0] = dc.value(z), dc.value(y)
    terms = []
    for k in range(K):
        z1, y1, log_f, y_prime = _ud_forward_full(path, control, p, z, y, k,
                                                  noise[k + 2])
        newly = alive & ~(_finite_rows(dc.value(z1)) & _finite_rows(dc.value(y1)))
        if newly.any():
            alive = alive & ~newly
            first_bad[newly] = k
            any_dead = True
        z1 = _mask_update(z1, alive, any_dead)
        y1 = _mask_update(y1, alive, any_dead)
        log_b = _ud_log_b_from_prime(path, control, p, y, y_prime, z, k)
        terms.append(_term_and_mask(log_b, log_f, alive, any_dead))
        z, y = z1, y1
        states[k + 1], momenta[k + 1] = dc.value(z), dc.value(y)

    ln_pt_z = tg_logp(path, p, z)
    ln_pt_y = dc.add(dc.mul(dc.ssum(dc.square(y), axis=-1), -0.5),
                     -0.5 * d * math.log(2.0 * math.pi))
    ln_pt = dc.add(ln_pt_z, ln_pt_y)
    ln_w = dc.add(dc.mul(ln_p0, -1.0), ln_pt)
    for t in terms:
        ln_w = dc.add(ln_w, t)
    ln_w = _mask_update(ln_w, alive, any_dead)
    per_step = np.stack([dc.value(t) for t in terms]) if terms else np.zeros((0, n))
    return BatchRollout(states=states, per_step=per_step, ln_w=ln_w,
                        ln_p0=ln_p0, ln_pt=ln_pt, noise=noise, alive=alive,
                        first_bad_step=first_bad, seed=seed,
                        index_offset=index_offset, momenta=momenta,
                        per_step_nodes=terms)


def rollout(path: GeometricPath, control, p, *, seed: int,
            traj_index: int = 0) -> Trajectory:
    """Single-trajectory rollout; raises DivergedTrajectoryError on overflow."""
    batch = rollout_batch(path, control, p, seed=seed, n=1,
                          index_offset=traj_index)
    if not batch.alive[0]:
        raise DivergedTrajectoryError(int(batch.first_bad_step[0]))
    return Trajectory(states=batch.states[:, 0, :],
                      per_step_log_ratio=batch.per_step[:, 0],
                      rng_seed=seed,
                      momenta=None if batch.momenta is None else batch.momenta[:, 0, :],
                      noise=batch.noise[:, 0, :])
