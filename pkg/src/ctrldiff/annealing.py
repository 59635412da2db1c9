"""Geometric bridging path pi_t ~ pi_0^(1-beta_t) * pihat_T^(beta_t).

The schedule beta is a trainable monotone grid (softplus-cumsum
reparameterization), the noise scale sigma is trainable through
softplus(step_raw), and the time grid is uniform with dt = T/K, T = 1.
``grad_log_pi``/``log_pi_hat`` run on raw arrays or tape Nodes alike.

``GaussianPairControl`` is the closed-form solution of the continuity
equation for a path between two isotropic Gaussians; it drives the
zero-variance oracle.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import targets as tg
from .diffcore import Array, ParamSet
from .targets import LogDensity, MeanFieldGaussian


def softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus inverse needs y > 0")
    return y + math.log(-math.expm1(-y))


class GeometricPath:
    """Bridge between a trainable mean-field Gaussian source and a target."""

    def __init__(self, source: MeanFieldGaussian, target: LogDensity, n_steps: int,
                 sigma: float = 1.0, name: str = "path", horizon: float = 1.0):
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if source.dim != target.dim:
            raise ValueError("source and target dimensions differ")
        self.source = source
        self.target = target
        self.n_steps = int(n_steps)
        self.sigma0 = float(sigma)
        self.name = name
        self.horizon = float(horizon)
        self.dt = self.horizon / max(self.n_steps, 1)
        # Constant lower-triangular ones matrix implements cumsum as a matmul.
        self._tril = np.tril(np.ones((self.n_steps, self.n_steps)))

    @property
    def dim(self) -> int:
        return self.target.dim

    def param_names(self) -> list[str]:
        return [f"{self.name}.beta_raw", f"{self.name}.step_raw"]

    def init_params(self, beta_raw=None, sigma: float | None = None) -> ParamSet:
        """All-equal beta_raw gives the uniform grid k/K."""
        if beta_raw is None:
            beta_raw = np.zeros(self.n_steps)
        beta_raw = np.asarray(beta_raw, dtype=np.float64).copy()
        if beta_raw.shape != (self.n_steps,):
            raise ValueError(f"beta_raw must have shape ({self.n_steps},)")
        s = self.sigma0 if sigma is None else float(sigma)
        return {f"{self.name}.beta_raw": beta_raw,
                f"{self.name}.step_raw": np.asarray(softplus_inv(s))}

    def sigma(self, p):
        return dc.softplus(p[f"{self.name}.step_raw"])

    def beta_grid(self, p):
        """(K+1,) monotone grid with beta_0 = 0 and beta_K = 1."""
        raw = p[f"{self.name}.beta_raw"]
        if self.n_steps == 0:
            return np.zeros(1) if not dc.is_node(raw) else dc.tape_of(raw).constant(np.zeros(1))
        sp = dc.softplus(raw)
        cs = dc.matmul(self._tril, sp)
        total_inv = dc.reciprocal(dc.gather(cs, self.n_steps - 1))
        body = dc.mul(cs, total_inv)
        zero = np.zeros(1)
        if dc.is_node(body):
            return dc.concat([zero, body], axis=0)
        return np.concatenate([zero, body])

    def log_pi_hat(self, p, beta_k, x):
        """(1-beta) ln pi_0 + beta ln pihat_T at a grid value beta_k."""
        lp0 = self.source.logp(p, x)
        lpt = tg.logp_of(self.target, x)
        one_minus = dc.add(dc.mul(beta_k, -1.0), 1.0)
        return dc.add(dc.mul(lp0, one_minus), dc.mul(lpt, beta_k))

    def grad_log_pi(self, p, beta_k, x):
        s0 = self.source.score(p, x)
        st = tg.score_of(self.target, x)
        one_minus = dc.add(dc.mul(beta_k, -1.0), 1.0)
        return dc.add(dc.mul(s0, one_minus), dc.mul(st, beta_k))

    def dt_log_pi_hat(self, p, k: int, x) -> Array:
        """Discrete d/dt of ln pihat at step k in [1, K]:
        (beta_k - beta_{k-1})/dt * (ln pihat_T(x) - ln pi_0(x))."""
        if not 1 <= k <= self.n_steps:
            raise ValueError(f"k must be in [1, {self.n_steps}]")
        grid = dc.value(self.beta_grid(p))
        rate = (grid[k] - grid[k - 1]) / self.dt
        x = np.asarray(x, dtype=np.float64)
        return rate * (self.target.logp(x) - dc.value(self.source.logp(p, x)))


# ---------------------------------------------------------------------------
# Closed-form optimal control for a Gaussian-pair path.
# ---------------------------------------------------------------------------

class GaussianPairControl:
    """Unique gradient solution of the continuity equation for the geometric
    path between N(m0, s0^2 I) and N(m1, s1^2 I):

        grad phi*_t(x) = m'(t) + (s'(t)/s(t)) (x - m(t)),

    with m, s the closed-form geometric-mixture moments and beta interpolated
    piecewise-linearly on the grid. The forward kernel of step k evaluates the
    field at (beta_k, segment-k rate); the backward kernel at
    (beta_{k+1}, segment-k rate).
    """

    def __init__(self, path: GeometricPath, m0: float, s0: float, m1: float, s1: float):
        self.path = path
        self.m0, self.s0, self.m1, self.s1 = map(float, (m0, s0, m1, s1))
        if self.s0 <= 0 or self.s1 <= 0:
            raise ValueError("control requires Gaussian endpoints with positive scales")
        self.reuse_fb_as_ff = False

    # Geometric-mixture marginal N(m(beta), s(beta)^2 I) and beta-derivatives.
    def _moments(self, beta: float):
        a = (1.0 - beta) / self.s0**2 + beta / self.s1**2
        b = (1.0 - beta) * self.m0 / self.s0**2 + beta * self.m1 / self.s1**2
        da = -1.0 / self.s0**2 + 1.0 / self.s1**2
        db = -self.m0 / self.s0**2 + self.m1 / self.s1**2
        m = b / a
        dm = (db * a - b * da) / a**2
        dlog_s = -0.5 * da / a          # d/dbeta log s(beta)
        return m, math.sqrt(1.0 / a), dm, dlog_s

    def marginal(self, p, k: int):
        """(mean, std) of the continuity-equation marginal at grid point k."""
        beta = float(dc.value(self.path.beta_grid(p))[k])
        m, s, _, _ = self._moments(beta)
        return m, s

    def field(self, beta: float, rate: float, x: Array) -> Array:
        m, _, dm, dlog_s = self._moments(beta)
        return rate * dm + rate * dlog_s * (np.asarray(x, dtype=np.float64) - m)

    def _segment_rate(self, p, k: int) -> float:
        grid = dc.value(self.path.beta_grid(p))
        return (grid[k + 1] - grid[k]) / self.path.dt

    def f_fwd(self, p, k: int, x):
        grid = dc.value(self.path.beta_grid(p))
        return self.field(float(grid[k]), self._segment_rate(p, k), dc.value(x))

    def f_bwd(self, p, k: int, x):
        grid = dc.value(self.path.beta_grid(p))
        return self.field(float(grid[k + 1]), self._segment_rate(p, k), dc.value(x))


def analytic_control(path: GeometricPath, p: ParamSet) -> GaussianPairControl:
    """Build the closed-form control for a path whose endpoints are isotropic
    Gaussians; raises for any other target family."""
    tgt = path.target
    if not isinstance(tgt, tg.IsotropicGaussian):
        raise TypeError("analytic control supports isotropic-Gaussian targets only")
    if not np.allclose(tgt.mean, tgt.mean[0]):
        raise TypeError("analytic control needs a common target mean per coordinate")
    mean = dc.value(p[f"{path.source.name}.mean"])
    log_std = dc.value(p[f"{path.source.name}.log_std"])
    if not (np.allclose(mean, mean[0]) and np.allclose(log_std, log_std[0])):
        raise TypeError("analytic control needs an isotropic mean-field source")
    return GaussianPairControl(path, float(mean[0]), float(np.exp(log_std[0])),
                               float(tgt.mean[0]), tgt.scale)


def make_pair_path(m0: float, s0: float, m1: float, s1: float, d: int, n_steps: int,
                   sigma: float = 1.0) -> tuple[GeometricPath, ParamSet, GaussianPairControl]:
    """Convenience assembly of the Gaussian-pair oracle path and its control."""
    _, target = tg.make_gaussian_path_pair(m0, s0, m1, s1, d)
    source = MeanFieldGaussian(d)
    path = GeometricPath(source, target, n_steps, sigma=sigma)
    params = path.init_params()
    params.update(source.init_params(mean=m0, log_std=math.log(s0)))
    control = GaussianPairControl(path, m0, s0, m1, s1)
    return path, params, control


def continuity_residual(control: GaussianPairControl, beta: float, rate: float,
                        xs: Array, h: float = 1e-5) -> Array:
    """|d/dt pi + d/dx (pi * field)| on a 1-D grid by central differences in t
    and x, with the closed-form marginal. Small residual certifies the control
    solves the continuity equation."""
    xs = np.asarray(xs, dtype=np.float64)

    def density(b, x):
        m, s, _, _ = control._moments(b)
        return np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))

    # time derivative at fixed x (beta moves at the given rate)
    dpi_dt = (density(beta + rate * h, xs) - density(beta - rate * h, xs)) / (2 * h)

    def flux(x):
        return density(beta, x) * control.field(beta, rate, x)

    dflux_dx = (flux(xs + h) - flux(xs - h)) / (2 * h)
    return np.abs(dpi_dt + dflux_dx)
