"""Probability paths, velocity targets and samplers for the generative head.

The interpolation path runs from pure noise at t=0 to clean data at t=1:
``y_hat = (1-alpha(t)) eps + alpha(t) y`` with a linear (default) or cosine
coefficient.  The trained estimator predicts an interval-conditioned velocity
u(y_hat, t, r); its regression target is the base velocity corrected by a
finite-difference time derivative of the current model (held constant under
the loss, i.e. a bootstrapped target).

Two corrections are available:

* ``meanflow_target``: v - (r-t) * du/dt with the plain time partial.  This is
  the default.
* ``meanflow_target_total``: v + (r-t) * du/dt with the derivative taken along
  the moving interpolant (directional step (dz, dt) = (h*v, h)).  With t the
  lower end of the interval this is the variant whose fixed point is the true
  average velocity; it is exposed through TrainConfig.total_derivative.

Alternative heads (vanilla flow matching, epsilon-prediction diffusion) share
the same estimator network and are selected by ModelConfig.head_kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mul, square, sub, tsum
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class Schedule:
    """Interpolation coefficient alpha(t) and its derivative."""

    kind: str

    def alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return t
        return 0.5 * (1.0 - np.cos(math.pi * t))

    def alpha_prime(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return np.ones_like(t)
        return 0.5 * math.pi * np.sin(math.pi * t)


def get_schedule(kind: str) -> Schedule:
    if kind not in ("linear", "cosine"):
        raise ConfigError(f"unknown scheduler {kind!r}")
    return Schedule(kind)


@dataclass
class FlowSample:
    """One training draw: clean patches, noise, times and derived quantities."""

    y: np.ndarray        # (B, N, P) clean target patches
    eps: np.ndarray      # (B, N, P) standard Gaussian draw
    t: np.ndarray        # (B,)
    r: np.ndarray        # (B,) with t <= r <= 1
    y_hat: np.ndarray    # interpolant
    v: np.ndarray        # base velocity


def sample_times(rng: np.random.Generator, n: int = 1, p_eq: float = 0.0):
    """Draw t ~ U[0,1] and r ~ U[t,1]; with probability p_eq force r == t."""
    t = rng.uniform(0.0, 1.0, n)
    r = t + (1.0 - t) * rng.uniform(0.0, 1.0, n)
    if p_eq > 0.0:
        r = np.where(rng.uniform(0.0, 1.0, n) < p_eq, t, r)
    return t, r


def _coef(c: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape a per-instance coefficient vector to broadcast over (B, N, P)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (like.ndim - 1))


def interpolate(y: np.ndarray, eps: np.ndarray, t, schedule: Schedule) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y.shape != eps.shape:
        raise ShapeError(f"interpolate: shapes differ, {y.shape} vs {eps.shape}")
    a = _coef(schedule.alpha(t), y)
    return (1.0 - a) * eps + a * y


def base_velocity(y: np.ndarray, eps: np.ndarray, t, schedule: Schedule) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y.shape != eps.shape:
        raise ShapeError(f"base_velocity: shapes differ, {y.shape} vs {eps.shape}")
    return _coef(schedule.alpha_prime(t), y) * (y - eps)


def draw_flow_sample(y: np.ndarray, rng: np.random.Generator, schedule: Schedule,
                     p_eq: float = 0.0) -> FlowSample:
    """One (t, r, eps) draw per instance of a (B, N, P) batch."""
    y = np.asarray(y, dtype=np.float64)
    eps = rng.standard_normal(y.shape)
    t, r = sample_times(rng, y.shape[0], p_eq)
    return FlowSample(y=y, eps=eps, t=t, r=r,
                      y_hat=interpolate(y, eps, t, schedule),
                      v=base_velocity(y, eps, t, schedule))


def _fd_steps(t: np.ndarray, r: np.ndarray, h_t: float) -> np.ndarray:
    """Signed per-instance finite-difference step: forward when it fits in
    [t, r], else backward when t-h >= 0, else half the interval (zero when
    r == t)."""
    fwd_ok = t + h_t <= r
    bwd_ok = t - h_t >= 0.0
    return np.where(fwd_ok, h_t, np.where(bwd_ok, -h_t, (r - t) / 2.0))


def time_partial(u_fn, noisy: np.ndarray, t, r, h_t: float = 1e-3,
                 u0: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference d u / d t with the noised inputs held fixed.

    ``u_fn(noisy, t, r)`` evaluates the velocity estimator and must not record
    gradients; the result is a constant with respect to training.  ``u0`` is
    the already-computed value at (t, r) when available.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if np.any(t > r):
        raise ConfigError("time_partial: need t <= r")
    if u0 is None:
        u0 = u_fn(noisy, t, r)
    d = _fd_steps(t, r, h_t)
    if np.all(d == 0.0):
        return np.zeros_like(u0)
    safe = np.where(d == 0.0, 1.0, d)
    u1 = u_fn(noisy, t + safe * (d != 0.0), r)
    du = (u1 - u0) / _coef(safe, u0)
    return np.where(_coef(d, u0) == 0.0, 0.0, du)


def time_total_derivative(u_fn, noisy: np.ndarray, v: np.ndarray, t, r,
                          h_t: float = 1e-3,
                          u0: np.ndarray | None = None) -> np.ndarray:
    """Directional derivative along the moving interpolant: step (h*v, h) in
    (noisy, t).  Same step-selection rules as time_partial."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if np.any(t > r):
        raise ConfigError("time_total_derivative: need t <= r")
    if u0 is None:
        u0 = u_fn(noisy, t, r)
    d = _fd_steps(t, r, h_t)
    if np.all(d == 0.0):
        return np.zeros_like(u0)
    safe = np.where(d == 0.0, 1.0, d)
    dc = _coef(safe, u0)
    u1 = u_fn(noisy + dc * np.asarray(v) * (_coef(d, u0) != 0.0),
              t + safe * (d != 0.0), r)
    du = (u1 - u0) / dc
    return np.where(_coef(d, u0) == 0.0, 0.0, du)


def meanflow_target(v: np.ndarray, du_dt: np.ndarray, t, r) -> np.ndarray:
    """Bootstrapped average-velocity target v - (r-t) * du/dt (a constant
    with respect to gradients; only the prediction side carries them)."""
    v = np.asarray(v, dtype=np.float64)
    du = np.asarray(du_dt, dtype=np.float64)
    if v.shape != du.shape:
        raise ShapeError(f"meanflow_target: shapes differ, {v.shape} vs {du.shape}")
    span = _coef(np.asarray(r, float) - np.asarray(t, float), v)
    return v - span * du


def meanflow_target_total(v: np.ndarray, du_total: np.ndarray, t, r) -> np.ndarray:
    """Average-velocity target with the trajectory-total derivative; with t
    the lower end of [t, r] the identity carries a plus sign."""
    v = np.asarray(v, dtype=np.float64)
    du = np.asarray(du_total, dtype=np.float64)
    if v.shape != du.shape:
        raise ShapeError(f"meanflow_target_total: shapes differ, {v.shape} vs {du.shape}")
    span = _coef(np.asarray(r, float) - np.asarray(t, float), v)
    return v + span * du


def flow_loss(u: Tensor, target: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
    """Masked mean squared error, averaged per patch then over patches.

    ``pad_mask`` is 1 for real positions, 0 for padded ones, broadcastable to
    u's shape; padded positions contribute nothing.
    """
    shape = u.data.shape
    target = np.asarray(target, dtype=np.float64)
    if target.shape != shape:
        raise ShapeError(f"flow_loss: target {target.shape} != prediction {shape}")
    if pad_mask is None:
        mask = np.ones(shape)
    else:
        mask = np.broadcast_to(np.asarray(pad_mask, dtype=np.float64), shape)
    counts = mask.sum(axis=-1, keepdims=True)  # per-patch unmasked elements
    if counts.sum() == 0:
        raise ShapeError("flow_loss: fully masked input")
    n_patches = int(np.prod(shape[:-1]))
    weights = np.where(counts > 0, mask / np.maximum(counts, 1.0), 0.0) / n_patches
    return tsum(mul(square(sub(u, Tensor(target))), Tensor(weights)))


# ---------------------------------------------------------------------------
# alternative generative heads
# ---------------------------------------------------------------------------

class DiffusionSchedule:
    """Cosine alpha-bar schedule (s=0.008) over a fixed number of steps."""

    def __init__(self, n_steps: int = 50, s: float = 0.008):
        self.n_steps = n_steps
        k = np.arange(n_steps + 1, dtype=np.float64)
        f = np.cos(((k / n_steps) + s) / (1.0 + s) * math.pi / 2.0) ** 2
        self.alpha_bar = f / f[0]          # alpha_bar[0] == 1 exactly
        ratio = self.alpha_bar[1:] / self.alpha_bar[:-1]
        self.betas = np.clip(1.0 - ratio, 0.0, 0.999)   # beta_k for k=1..K
        self.alphas = 1.0 - self.betas

    def noising(self, y: np.ndarray, eps: np.ndarray, k) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(k)]
        ab = _coef(ab, np.asarray(y))
        return np.sqrt(ab) * y + np.sqrt(1.0 - ab) * eps

    def model_time(self, k) -> np.ndarray:
        """Continuous conditioning time for discrete step k (1 at the clean end)."""
        return self.alpha_bar[np.asarray(k)]


@dataclass
class AltTarget:
    target: np.ndarray
    noisy: np.ndarray
    t: np.ndarray   # conditioning time fed to the estimator
    r: np.ndarray   # equals t: these heads are single-time conditioned


def alt_head_target(head_kind: str, y: np.ndarray, eps: np.ndarray,
                    y_hat: np.ndarray, t, schedule: Schedule | None = None,
                    diffusion: DiffusionSchedule | None = None,
                    k=None) -> AltTarget:
    """Training target and parameterization for the comparison heads."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if head_kind == "vanilla_fm":
        if schedule is None:
            raise ConfigError("vanilla_fm target needs a schedule")
        return AltTarget(target=base_velocity(y, eps, t, schedule),
                         noisy=np.asarray(y_hat, dtype=np.float64), t=t, r=t)
    if head_kind == "diffusion":
        if diffusion is None or k is None:
            raise ConfigError("diffusion target needs a DiffusionSchedule and step k")
        tk = diffusion.model_time(k)
        return AltTarget(target=np.asarray(eps, dtype=np.float64),
                         noisy=diffusion.noising(y, eps, k), t=tk, r=tk)
    raise ConfigError(f"alt_head_target: unknown head {head_kind!r}")


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def one_step_sample(u_fn, head_kind: str, shape: tuple[int, ...],
                    rng: np.random.Generator) -> np.ndarray:
    """Single-evaluation transport: eps + (1-0) * u(eps, t=0, r=1)."""
    if head_kind != "mean_velocity":
        raise ConfigError(f"one_step_sample requires the mean_velocity head, got {head_kind!r}")
    eps = rng.standard_normal(shape)
    return eps + u_fn(eps, 0.0, 1.0)


def multi_step_sample(u_fn, head_kind: str, shape: tuple[int, ...],
                      rng: np.random.Generator, k: int,
                      diffusion: DiffusionSchedule | None = None) -> np.ndarray:
    """k Euler steps on a uniform grid (flow heads) or k ancestral DDPM steps
    on a uniformly strided sub-schedule (diffusion head)."""
    if k < 1:
        raise ConfigError(f"multi_step_sample: k must be >= 1, got {k}")
    if head_kind in ("mean_velocity", "vanilla_fm"):
        y = rng.standard_normal(shape)
        grid = np.linspace(0.0, 1.0, k + 1)
        for i in range(k):
            t_i, t_n = grid[i], grid[i + 1]
            r_i = t_n if head_kind == "mean_velocity" else t_i
            y = y + (t_n - t_i) * u_fn(y, t_i, r_i)
        return y
    if head_kind == "diffusion":
        if diffusion is None:
            raise ConfigError("multi_step_sample: diffusion head needs its schedule")
        K = diffusion.n_steps
        if k > K:
            raise ConfigError(f"multi_step_sample: k={k} exceeds trained steps {K}")
        steps = np.unique(np.round(np.linspace(1, K, k)).astype(int))[::-1]
        x = rng.standard_normal(shape)
        for idx, kk in enumerate(steps):
            k_prev = steps[idx + 1] if idx + 1 < len(steps) else 0
            ab_t = diffusion.alpha_bar[kk]
            ab_p = diffusion.alpha_bar[k_prev]
            tk = diffusion.model_time(np.array([kk]))[0]
            eps_hat = u_fn(x, tk, tk)
            x0 = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            alpha_step = ab_t / ab_p
            beta_step = 1.0 - alpha_step
            mean = (math.sqrt(ab_p) * beta_step / (1.0 - ab_t)) * x0 \
                + (math.sqrt(alpha_step) * (1.0 - ab_p) / (1.0 - ab_t)) * x
            if k_prev > 0:
                var = beta_step * (1.0 - ab_p) / (1.0 - ab_t)
                x = mean + math.sqrt(max(var, 0.0)) * rng.standard_normal(shape)
            else:
                x = mean
        return x
    raise ConfigError(f"multi_step_sample: unknown head {head_kind!r}")
