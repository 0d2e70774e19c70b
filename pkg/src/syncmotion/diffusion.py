"""Noise schedule, forward process, posterior statistics, and training losses.

The model predicts the clean signal directly, so the reverse-step mean is

    mu_hat_t = sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
             + sqrt(abar_{t-1}) beta_t / (1 - abar_t)        * x0_hat

with abar_0 = 1, and the posterior std is sigma_t^2 = beta_t (1 - abar_{t-1})
/ (1 - abar_t).

Losses (plain sums, weights absorb scale):
- reconstruction on the low and mid bands separately (squared L2);
- a quaternion-norm penalty sum_j sum_u (1 - |q_j,u|)^2 on rigid rotations;
- an alignment penalty: for every stored relative block, the squared L2
  distance to the relative motion recomputed from the predicted individuals.
  Rotation channels are normalized on read inside the recomputation (see
  kinematics), evaluated on the recomposed (dc + ac) prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .kinematics import (
    StateLayout,
    quat_conj,
    quat_mul,
    quat_mul_vjp,
    quat_normalize_smooth,
    quat_normalize_smooth_vjp,
    quat_rotate,
    quat_rotate_vjp,
)

_EPS = 1e-8


# ---------------------------------------------------------------------------
# Schedule and forward process
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Per-step noise constants, arrays indexed t-1 for t in [1, T]."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.beta.shape[0]

    def abar(self, t: int) -> float:
        """Cumulative alpha with the abar(0) = 1 convention."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.n_steps:
            raise ValueError(f"step t must be in [1, {self.n_steps}], got {t}")


def make_schedule(n_steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly spaced beta in [beta_min, beta_max] and its derived arrays."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    beta = np.linspace(beta_min, beta_max, n_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - alpha_bar))
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    sched.check_step(t)
    abar = sched.abar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_mean(x_t: np.ndarray, x0_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean for a clean-signal prediction (abar_0 = 1)."""
    sched.check_step(t)
    abar, abar_prev = sched.abar(t), sched.abar(t - 1)
    alpha, beta = sched.alpha[t - 1], sched.beta[t - 1]
    c_xt = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    c_x0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    return c_xt * x_t + c_x0 * x0_hat


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    dc: float = 1.0
    ac: float = 2.5
    norm: float = 0.1
    align: float = 0.3

    def __post_init__(self):
        for name in ("dc", "ac", "norm", "align"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {v}")


@dataclass
class LossBreakdown:
    total: float
    dc: float
    ac: float
    norm: float
    align: float

    def as_dict(self) -> Dict[str, float]:
        return {"total": self.total, "dc": self.dc, "ac": self.ac, "norm": self.norm, "align": self.align}


def sum_squared_error(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.sum((pred - gt) ** 2))


# The per-band reconstruction losses share one definition.
loss_dc = sum_squared_error
loss_ac = sum_squared_error


def quat_norm_penalty(q: np.ndarray) -> float:
    """sum (1 - |q|)^2 over all quaternions in q (..., 4)."""
    norms = np.sqrt(np.sum(q * q, axis=-1) + _EPS * _EPS)
    return float(np.sum((1.0 - norms) ** 2))


def loss_norm(data: np.ndarray, layout: StateLayout) -> float:
    """Quaternion-norm penalty over the individual rigid rotation channels."""
    return sum(
        quat_norm_penalty(data[:, layout.rigid_quat_slice(j)]) for j in range(1, layout.m + 1)
    )


def _loss_norm_with_grad(data: np.ndarray, layout: StateLayout) -> Tuple[float, np.ndarray]:
    total = 0.0
    grad = np.zeros_like(data)
    for j in range(1, layout.m + 1):
        sl = layout.rigid_quat_slice(j)
        q = data[:, sl]
        norms = np.sqrt(np.sum(q * q, axis=-1) + _EPS * _EPS)
        total += float(np.sum((1.0 - norms) ** 2))
        grad[:, sl] = -2.0 * ((1.0 - norms) / norms)[:, None] * q
    return total, grad


def _rel_rigid_with_grad(
    ref: np.ndarray, mov: np.ndarray, block: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Alignment term of one rigid pair plus grads w.r.t. (ref, mov, block)."""
    t_r, q_r = ref[:, :3], ref[:, 3:7]
    t_m, q_m = mov[:, :3], mov[:, 3:7]
    qbar_r, s_r = quat_normalize_smooth(q_r)
    qbar_m, s_m = quat_normalize_smooth(q_m)
    c = quat_conj(qbar_r)
    dt = t_m - t_r
    rel_t = quat_rotate(c, dt)
    rel_q = quat_mul(c, qbar_m)
    res_t = block[:, :3] - rel_t
    res_q = block[:, 3:7] - rel_q
    value = float(np.sum(res_t**2) + np.sum(res_q**2))

    g_block = np.concatenate([2.0 * res_t, 2.0 * res_q], axis=1)
    g_rel_t, g_rel_q = -2.0 * res_t, -2.0 * res_q
    g_c, g_qbar_m = quat_mul_vjp(g_rel_q, c, qbar_m)
    g_c2, g_dt = quat_rotate_vjp(g_rel_t, c, dt)
    g_qbar_r = quat_conj(g_c + g_c2)
    g_ref = np.concatenate([-g_dt, quat_normalize_smooth_vjp(g_qbar_r, q_r, s_r)], axis=1)
    g_mov = np.concatenate([g_dt, quat_normalize_smooth_vjp(g_qbar_m, q_m, s_m)], axis=1)
    return value, g_ref, g_mov, g_block


def _rel_skeleton_with_grad(
    ref: np.ndarray, joints: np.ndarray, block: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Alignment term of one skeleton-rigid pair plus grads."""
    n, w = joints.shape
    d = w // 3
    t_r, q_r = ref[:, :3], ref[:, 3:7]
    qbar_r, s_r = quat_normalize_smooth(q_r)
    c = np.repeat(quat_conj(qbar_r)[:, None, :], d, axis=1)
    p = joints.reshape(n, d, 3)
    dp = p - t_r[:, None, :]
    rel_p = quat_rotate(c, dp)
    res = block.reshape(n, d, 3) - rel_p
    value = float(np.sum(res**2))

    g_block = (2.0 * res).reshape(n, w)
    g_rel = -2.0 * res
    g_c, g_dp = quat_rotate_vjp(g_rel, c, dp)
    g_qbar_r = quat_conj(np.sum(g_c, axis=1))
    g_ref = np.concatenate(
        [-np.sum(g_dp, axis=1), quat_normalize_smooth_vjp(g_qbar_r, q_r, s_r)], axis=1
    )
    return value, g_ref, g_dp.reshape(n, w), g_block


def loss_align(data: np.ndarray, layout: StateLayout) -> float:
    """Squared distance of every relative block to rel() of its individuals."""
    return _loss_align_with_grad(data, layout, want_grad=False)[0]


def _loss_align_with_grad(
    data: np.ndarray, layout: StateLayout, want_grad: bool = True
) -> Tuple[float, Optional[np.ndarray]]:
    total = 0.0
    grad = np.zeros_like(data) if want_grad else None
    for mov, ref in layout.rigid_pairs():
        sl_ref, sl_mov = layout.rigid_slice(ref), layout.rigid_slice(mov)
        sl_blk = layout.rel_rigid_slice(mov, ref)
        v, g_ref, g_mov, g_blk = _rel_rigid_with_grad(
            data[:, sl_ref], data[:, sl_mov], data[:, sl_blk]
        )
        total += v
        if want_grad:
            grad[:, sl_ref] += g_ref
            grad[:, sl_mov] += g_mov
            grad[:, sl_blk] += g_blk
    for i, j in layout.skeleton_rigid_pairs():
        sl_ref, sl_skel = layout.rigid_slice(j), layout.skeleton_slice(i)
        sl_blk = layout.rel_skeleton_slice(i, j)
        v, g_ref, g_skel, g_blk = _rel_skeleton_with_grad(
            data[:, sl_ref], data[:, sl_skel], data[:, sl_blk]
        )
        total += v
        if want_grad:
            grad[:, sl_ref] += g_ref
            grad[:, sl_skel] += g_skel
            grad[:, sl_blk] += g_blk
    return total, grad


def total_loss(
    pred_dc: np.ndarray,
    pred_ac: np.ndarray,
    gt_dc: np.ndarray,
    gt_ac: np.ndarray,
    layout: StateLayout,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted four-term loss on band predictions; see total_loss_and_grads."""
    return total_loss_and_grads(pred_dc, pred_ac, gt_dc, gt_ac, layout, weights)[0]


def total_loss_and_grads(
    pred_dc: np.ndarray,
    pred_ac: np.ndarray,
    gt_dc: np.ndarray,
    gt_ac: np.ndarray,
    layout: StateLayout,
    weights: LossWeights,
    want_grads: bool = True,
) -> Tuple[LossBreakdown, Optional[np.ndarray], Optional[np.ndarray]]:
    """Loss breakdown plus gradients w.r.t. the band predictions.

    The norm and alignment terms act on the recomposed prediction dc + ac, so
    their gradient flows into both band outputs.
    """
    l_dc = sum_squared_error(pred_dc, gt_dc)
    l_ac = sum_squared_error(pred_ac, gt_ac)
    recomposed = pred_dc + pred_ac
    if want_grads:
        l_norm, g_norm = _loss_norm_with_grad(recomposed, layout)
        l_align, g_align = _loss_align_with_grad(recomposed, layout)
        g_rec = weights.norm * g_norm + weights.align * g_align
        g_dc = 2.0 * weights.dc * (pred_dc - gt_dc) + g_rec
        g_ac = 2.0 * weights.ac * (pred_ac - gt_ac) + g_rec
    else:
        l_norm = loss_norm(recomposed, layout)
        l_align = loss_align(recomposed, layout)
        g_dc = g_ac = None
    total = (
        weights.dc * l_dc + weights.ac * l_ac + weights.norm * l_norm + weights.align * l_align
    )
    return LossBreakdown(total=total, dc=l_dc, ac=l_ac, norm=l_norm, align=l_align), g_dc, g_ac
