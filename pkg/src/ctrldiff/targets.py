"""Unnormalized log-densities with analytic gradients and exact samplers.

Every target implements batched ``logp`` (unnormalized log-density), ``score``
(its gradient) and ``hvp`` (Hessian-vector product). The score and HVP are
hand-coded, which is what lets the training losses differentiate through score
evaluations without any higher-order autodiff: ``logp_of``/``score_of`` box a
target evaluation as a tape primitive whose local VJP is the score/HVP.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from . import diffcore as dc
from .diffcore import Array, ParamSet

LOG_2PI = math.log(2.0 * math.pi)


class LogDensity:
    """Interface: dim, true_ln_z (None if unknown), logp/score/hvp, sample."""

    dim: int
    true_ln_z: float | None = None

    def logp(self, x: Array) -> Array:
        raise NotImplementedError

    def score(self, x: Array) -> Array:
        raise NotImplementedError

    def hvp(self, x: Array, v: Array) -> Array:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    def _check(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected batch of shape (n, {self.dim}), got {x.shape}")
        return x


def logp_of(target: LogDensity, x):
    """Target log-density as a tape primitive (VJP: the analytic score)."""
    if not dc.is_node(x):
        return target.logp(x)

    def vjp(xv, g):
        return g[:, None] * target.score(xv)

    return dc.extern(x, target.logp(x.val), vjp, tag=f"logp[{type(target).__name__}]")


def score_of(target: LogDensity, x):
    """Target score as a tape primitive (VJP: the analytic Hessian-vector product)."""
    if not dc.is_node(x):
        return target.score(x)

    def vjp(xv, g):
        return target.hvp(xv, g)

    return dc.extern(x, target.score(x.val), vjp, tag=f"score[{type(target).__name__}]")


# ---------------------------------------------------------------------------
# Concrete targets.
# ---------------------------------------------------------------------------

@dataclass
class IsotropicGaussian(LogDensity):
    mean: Array
    scale: float
    dim: int = field(init=False)
    true_ln_z: float = 0.0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.dim = self.mean.size
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def logp(self, x: Array) -> Array:
        x = self._check(x)
        diff = x - self.mean
        return (-0.5 * self.dim * (LOG_2PI + 2.0 * math.log(self.scale))
                - 0.5 * (diff * diff).sum(axis=1) / self.scale**2)

    def score(self, x: Array) -> Array:
        return (self.mean - self._check(x)) / self.scale**2

    def hvp(self, x: Array, v: Array) -> Array:
        return -np.asarray(v, dtype=np.float64) / self.scale**2

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return self.mean + self.scale * rng.standard_normal((n, self.dim))


class GaussianMixture(LogDensity):
    """Finite mixture with full covariances given by Cholesky factors.

    Normalized (true_ln_z = 0) when the weights sum to one, which the
    constructor enforces.
    """

    def __init__(self, weights, means, chols):
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        self.weights = w / w.sum()
        self.means = np.asarray(means, dtype=np.float64)
        self.chols = np.asarray(chols, dtype=np.float64)
        self.n_comp, self.dim = self.means.shape
        if self.chols.shape != (self.n_comp, self.dim, self.dim):
            raise ValueError("chols must have shape (n_comp, d, d)")
        self.true_ln_z = 0.0
        # Precompute precisions and per-component log normalizers.
        self._precisions = np.empty_like(self.chols)
        self._log_norm = np.empty(self.n_comp)
        for j, L in enumerate(self.chols):
            if np.any(np.diag(L) <= 0) or np.any(np.triu(L, 1) != 0):
                raise ValueError("each chol must be lower-triangular with positive diagonal")
            inv_l = solve_triangular(L, np.eye(self.dim), lower=True)
            self._precisions[j] = inv_l.T @ inv_l
            self._log_norm[j] = -0.5 * self.dim * LOG_2PI - np.log(np.diag(L)).sum()

    def _component_terms(self, x: Array):
        x = self._check(x)
        diffs = x[None, :, :] - self.means[:, None, :]               # (J, n, d)
        grads = -np.einsum("jnd,jde->jne", diffs, self._precisions)  # (J, n, d)
        quad = -0.5 * np.einsum("jnd,jnd->jn", diffs, grads)         # positive maha/2
        comp_lp = (np.log(self.weights)[:, None] + self._log_norm[:, None] - quad)
        return comp_lp, grads

    def logp(self, x: Array) -> Array:
        comp_lp, _ = self._component_terms(x)
        return logsumexp(comp_lp, axis=0)

    def score(self, x: Array) -> Array:
        comp_lp, grads = self._component_terms(x)
        resp = np.exp(comp_lp - logsumexp(comp_lp, axis=0, keepdims=True))  # (J, n)
        return np.einsum("jn,jnd->nd", resp, grads)

    def hvp(self, x: Array, v: Array) -> Array:
        # H = sum_j r_j (P_j-less form: -P_j + g_j g_j^T) - s s^T with s the score.
        comp_lp, grads = self._component_terms(x)
        resp = np.exp(comp_lp - logsumexp(comp_lp, axis=0, keepdims=True))
        v = np.asarray(v, dtype=np.float64)
        s = np.einsum("jn,jnd->nd", resp, grads)
        pv = np.einsum("jde,ne->jnd", self._precisions, v)            # P_j v
        gv = np.einsum("jnd,nd->jn", grads, v)                        # g_j . v
        term = np.einsum("jn,jnd->nd", resp, -pv + gv[:, :, None] * grads)
        return term - s * (s * v).sum(axis=1)[:, None]

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        comps = rng.choice(self.n_comp, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for j in range(self.n_comp):
            mask = comps == j
            out[mask] = self.means[j] + eps[mask] @ self.chols[j].T
        return out


class Funnel(LogDensity):
    """Neck-and-flare density: x1 ~ N(0, sf2), x_i | x1 ~ N(0, exp(x1))."""

    def __init__(self, dim: int = 10, sf2: float = 9.0):
        if dim < 2:
            raise ValueError("funnel needs dim >= 2")
        self.dim = int(dim)
        self.sf2 = float(sf2)
        self.true_ln_z = 0.0

    def logp(self, x: Array) -> Array:
        x = self._check(x)
        x1 = x[:, 0]
        rest = x[:, 1:]
        r2 = (rest * rest).sum(axis=1)
        m = self.dim - 1
        return (-0.5 * (LOG_2PI + math.log(self.sf2)) - 0.5 * x1**2 / self.sf2
                - 0.5 * m * LOG_2PI - 0.5 * m * x1 - 0.5 * np.exp(-x1) * r2)

    def score(self, x: Array) -> Array:
        x = self._check(x)
        x1 = x[:, 0]
        rest = x[:, 1:]
        e = np.exp(-x1)
        r2 = (rest * rest).sum(axis=1)
        g = np.empty_like(x)
        g[:, 0] = -x1 / self.sf2 - 0.5 * (self.dim - 1) + 0.5 * e * r2
        g[:, 1:] = -rest * e[:, None]
        return g

    def hvp(self, x: Array, v: Array) -> Array:
        x = self._check(x)
        v = np.asarray(v, dtype=np.float64)
        x1 = x[:, 0]
        rest = x[:, 1:]
        e = np.exp(-x1)
        r2 = (rest * rest).sum(axis=1)
        out = np.empty_like(v)
        # H11 = -1/sf2 - e*r2/2 ; H1i = x_i e ; Hii = -e
        out[:, 0] = (-1.0 / self.sf2 - 0.5 * e * r2) * v[:, 0] \
            + e * (rest * v[:, 1:]).sum(axis=1)
        out[:, 1:] = (rest * v[:, 0][:, None] - v[:, 1:]) * e[:, None]
        return out

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        x1 = math.sqrt(self.sf2) * rng.standard_normal(n)
        rest = np.exp(0.5 * x1)[:, None] * rng.standard_normal((n, self.dim - 1))
        return np.column_stack([x1, rest])


class ScaledDensity(LogDensity):
    """base density times exp(ln_c): shifts logp, leaves score/hvp untouched."""

    def __init__(self, base: LogDensity, ln_c: float):
        self.base = base
        self.ln_c = float(ln_c)
        self.dim = base.dim
        self.true_ln_z = None if base.true_ln_z is None else base.true_ln_z + self.ln_c

    def logp(self, x):
        return self.base.logp(x) + self.ln_c

    def score(self, x):
        return self.base.score(x)

    def hvp(self, x, v):
        return self.base.hvp(x, v)

    def sample(self, rng, n):
        return self.base.sample(rng, n)


# ---------------------------------------------------------------------------
# Factory functions.
# ---------------------------------------------------------------------------

def make_gmm3() -> GaussianMixture:
    """Equal-weight 2-D three-mode benchmark mixture."""
    means = [(3.0, 0.0), (-2.5, 0.0), (2.0, 3.0)]
    covs = [np.diag([0.7, 0.05]), np.diag([0.7, 0.05]),
            np.array([[1.0, 0.95], [0.95, 1.0]])]
    chols = [cholesky(c, lower=True) for c in covs]
    return GaussianMixture([1 / 3, 1 / 3, 1 / 3], means, chols)


def make_funnel(dim: int = 10) -> Funnel:
    return Funnel(dim=dim, sf2=9.0)


def make_gaussian_path_pair(m0: float, s0: float, m1: float, s1: float,
                            d: int) -> tuple[IsotropicGaussian, IsotropicGaussian]:
    """Isotropic Gaussian endpoints for the closed-form oracle family."""
    if s0 <= 0 or s1 <= 0:
        raise ValueError("scales must be positive")
    return (IsotropicGaussian(np.full(d, float(m0)), float(s0)),
            IsotropicGaussian(np.full(d, float(m1)), float(s1)))


def geometric_pair_ln_z(m0: float, s0: float, m1: float, s1: float, d: int,
                        beta) -> Array:
    """ln Z_beta of the geometric mixture N(m0,s0^2 I)^(1-b) N(m1,s1^2 I)^b.

    Complete-the-square closed form, per dimension:
    a = (1-b)/s0^2 + b/s1^2, lin = (1-b)m0/s0^2 + b m1/s1^2,
    c = (1-b)m0^2/s0^2 + b m1^2/s1^2,
    ln Z = d * [ 0.5 ln(2 pi / a) + (lin^2/a - c)/2
                 - (1-b)/2 ln(2 pi s0^2) - b/2 ln(2 pi s1^2) ].
    """
    b = np.asarray(beta, dtype=np.float64)
    a = (1.0 - b) / s0**2 + b / s1**2
    lin = (1.0 - b) * m0 / s0**2 + b * m1 / s1**2
    c = (1.0 - b) * m0**2 / s0**2 + b * m1**2 / s1**2
    per_dim = (0.5 * np.log(2.0 * np.pi / a) + 0.5 * (lin**2 / a - c)
               - 0.5 * (1.0 - b) * math.log(2.0 * math.pi * s0**2)
               - 0.5 * b * math.log(2.0 * math.pi * s1**2))
    return d * per_dim


def mixture_from_csv(path) -> GaussianMixture:
    """Load a mixture from CSV: weight, mean_1..mean_d, chol_11..chol_dd.

    The chol block is the full d x d lower-triangular factor in row-major
    order; entries above the diagonal must be zero.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"empty mixture file {path}")
    header = [h.strip() for h in rows[0]]
    if header[0] != "weight" or len(header) < 2:
        raise ValueError("mixture CSV must start with a 'weight' column")
    n_mean = sum(1 for h in header if h.startswith("mean_"))
    d = n_mean
    expected = ["weight"] + [f"mean_{i}" for i in range(1, d + 1)] + \
        [f"chol_{i}{j}" for i in range(1, d + 1) for j in range(1, d + 1)]
    if header != expected:
        raise ValueError(f"mixture CSV columns must be {expected}, got {header}")
    weights, means, chols = [], [], []
    for row in rows[1:]:
        if not row:
            continue
        vals = [float(v) for v in row]
        weights.append(vals[0])
        means.append(vals[1:1 + d])
        chols.append(np.array(vals[1 + d:]).reshape(d, d))
    return GaussianMixture(weights, means, chols)


def eval_many(ld: LogDensity, xs: Array) -> tuple[Array, Array]:
    """Batched (log-probs, gradients) for an arbitrary target."""
    xs = np.asarray(xs, dtype=np.float64)
    return ld.logp(xs), ld.score(xs)


# ---------------------------------------------------------------------------
# Trainable mean-field Gaussian source (parameters live in a ParamSet).
# ---------------------------------------------------------------------------

class MeanFieldGaussian:
    """Diagonal Gaussian whose mean/log-std are named trainable parameters.

    All methods accept a ParamSet of raw arrays or lifted Nodes and run in
    either mode, which is how the source participates in traced rollouts.
    """

    def __init__(self, dim: int, name: str = "source"):
        self.dim = int(dim)
        self.name = name
        self.true_ln_z = 0.0

    def param_names(self) -> list[str]:
        return [f"{self.name}.mean", f"{self.name}.log_std"]

    def init_params(self, mean=0.0, log_std=0.0) -> ParamSet:
        return {
            f"{self.name}.mean": np.full(self.dim, float(mean)) if np.isscalar(mean)
            else np.asarray(mean, dtype=np.float64).copy(),
            f"{self.name}.log_std": np.full(self.dim, float(log_std)) if np.isscalar(log_std)
            else np.asarray(log_std, dtype=np.float64).copy(),
        }

    def _fields(self, p):
        return p[f"{self.name}.mean"], p[f"{self.name}.log_std"]

    def logp(self, p, x):
        mean, log_std = self._fields(p)
        z = dc.mul(dc.add(x, dc.mul(mean, -1.0)), dc.exp(dc.mul(log_std, -1.0)))
        quad = dc.ssum(dc.square(z), axis=1)
        return dc.add(dc.mul(quad, -0.5),
                      dc.add(dc.mul(dc.ssum(log_std), -1.0), -0.5 * self.dim * LOG_2PI))

    def score(self, p, x):
        mean, log_std = self._fields(p)
        inv_var = dc.exp(dc.mul(log_std, -2.0))
        return dc.mul(dc.add(mean, dc.mul(x, -1.0)), inv_var)

    def sample_reparam(self, p, xi: Array):
        """mean + exp(log_std) * xi for a frozen standard-normal block xi."""
        mean, log_std = self._fields(p)
        return dc.add(mean, dc.mul(dc.exp(log_std), xi))

    def logp_reparam(self, p, xi: Array):
        """logp at the reparameterized sample, as an identity in the parameters:
        -sum(log_std) - d/2 ln(2 pi) - |xi|^2 / 2."""
        _, log_std = self._fields(p)
        xi = np.asarray(xi, dtype=np.float64)
        const = -0.5 * self.dim * LOG_2PI - 0.5 * (xi * xi).sum(axis=1)
        return dc.add(dc.mul(dc.ssum(log_std), -1.0), const)

    def sample(self, p, rng: np.random.Generator, n: int) -> Array:
        mean, log_std = dc.value(self._fields(p)[0]), dc.value(self._fields(p)[1])
        return mean + np.exp(log_std) * rng.standard_normal((n, self.dim))

    def frozen(self, p) -> IsotropicGaussian | None:
        """Snapshot as a plain LogDensity when the scale is isotropic."""
        mean, log_std = (dc.value(v) for v in self._fields(p))
        if not np.allclose(log_std, log_std[0]):
            return None
        return IsotropicGaussian(mean.copy(), float(np.exp(log_std[0])))
