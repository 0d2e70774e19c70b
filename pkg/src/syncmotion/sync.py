"""Inference-time samplers: plain ancestral steps and explicit synchronization.

At every step the model predicts the clean signal, giving the reverse-step
mean.  On synchronization steps (those with ``t mod s == floor(s/2)``) each
block of the wide state is redrawn from the Gaussian that fuses the data term
with the alignment terms tying it to the other blocks:

- individual rigid j (m >= 2):
    x' = [1 / (1+2 s2 lb)] mu_j
       + [2 s2 lb / ((m-1)(1+2 s2 lb))] sum_{j' != j} comb(x_{j'}, x_{j->j'})
- individual skeleton i: same with weight 2 s2 lb / (m (1+2 s2 lb)) over all
  comb(x_j, x_{i->j});
- relative blocks: [1/(1+2 s2 lb)] mu_rel + [2 s2 lb/(1+2 s2 lb)] rel(...);

each plus sigma' eps with sigma' = sqrt(s2 / (1 + 2 s2 lb)), where s2 is the
squared step noise scale and lb is the run-constant alignment precision

    lb = (strength / R) * sum_r 1 / (2 sigma_{t_r}^2)

averaged over the R qualifying steps.  All comb/rel inputs are read from the
pre-update state snapshot (Jacobi style), with rotation channels normalized
on read.  When m == 1 the rigid-body case degenerates to the plain step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .diffusion import NoiseSchedule, posterior_mean
from .kinematics import (
    HighOrderState,
    StateLayout,
    comb_rigid_arrays,
    comb_skeleton_arrays,
    rel_rigid_arrays,
    rel_skeleton_arrays,
)
from .seeding import rng_for


@dataclass(frozen=True)
class SyncConfig:
    """Explicit-synchronization settings for one sampling run."""

    interval: int = 50  # steps between synchronizations (s)
    strength: float = 0.3  # alignment strength multiplier (lambda_exp)
    enabled: bool = True
    normalize_rotations: bool = True

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("sync interval must be >= 1")
        if self.strength < 0.0:
            raise ValueError("sync strength must be nonnegative")


def sync_timesteps(n_steps: int, interval: int) -> List[int]:
    """Steps t in [1, T] satisfying t mod s == floor(s/2), descending."""
    residue = interval // 2
    return [t for t in range(n_steps, 0, -1) if t % interval == residue]


def mean_alignment_precision(sigmas: np.ndarray, cfg: SyncConfig, n_steps: int) -> float:
    """Average alignment precision (strength / R) sum_r 1/(2 sigma_{t_r}^2)."""
    steps = sync_timesteps(n_steps, cfg.interval)
    if not steps:
        raise ValueError(
            f"no timestep in [1, {n_steps}] satisfies t mod {cfg.interval} == {cfg.interval // 2}"
        )
    s = np.asarray([sigmas[t - 1] for t in steps], dtype=np.float64)
    if np.any(s == 0.0):
        raise ValueError("a synchronization step has zero noise scale; increase the interval")
    return float(cfg.strength / len(steps) * np.sum(1.0 / (2.0 * s**2)))


def ancestral_step(mu_hat: np.ndarray, sigma_t: float, noise: np.ndarray) -> np.ndarray:
    """Plain reverse step: mu_hat + sigma_t * noise."""
    if mu_hat.shape != noise.shape:
        raise ValueError("mean and noise must share a shape")
    return mu_hat + sigma_t * noise


def sync_noise_scale(sigma: float, lam_bar: float) -> float:
    """Reduced noise scale sqrt(sigma^2 / (1 + 2 sigma^2 lam_bar))."""
    return float(np.sqrt(sigma**2 / (1.0 + 2.0 * sigma**2 * lam_bar)))


def fuse_gaussians(values: List[np.ndarray], weights: List[float]) -> Tuple[np.ndarray, float]:
    """Precision-weighted fusion: the argmin of sum_k w_k ||x - f_k||^2.

    Returns (mean, std) of the fused Gaussian: mean = sum w f / sum w and
    std = sqrt(1 / (2 sum w)).
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0) or w.sum() <= 0.0:
        raise ValueError("fusion weights must be nonnegative with positive sum")
    mean = sum(wk * np.asarray(fk, dtype=np.float64) for wk, fk in zip(w, values)) / w.sum()
    return mean, float(np.sqrt(1.0 / (2.0 * w.sum())))


def _coeffs(sigma: float, lam_bar: float) -> Tuple[float, float]:
    denom = 1.0 + 2.0 * sigma**2 * lam_bar
    return 1.0 / denom, 2.0 * sigma**2 * lam_bar / denom


def sync_rigid_block(
    j: int,
    snapshot: np.ndarray,
    mu_hat: np.ndarray,
    layout: StateLayout,
    sigma: float,
    lam_bar: float,
    normalize: bool = True,
) -> np.ndarray:
    """Deterministic synchronized update of individual rigid j (noise excluded)."""
    mu_j = mu_hat[:, layout.rigid_slice(j)]
    if layout.m == 1:
        # Degenerate single-rigid case: both fusion terms read the data mean.
        c0, c1 = _coeffs(sigma, lam_bar)
        return (c0 + c1) * mu_j
    c0, c1 = _coeffs(sigma, lam_bar)
    acc = np.zeros_like(mu_j)
    for jp in range(1, layout.m + 1):
        if jp == j:
            continue
        acc += comb_rigid_arrays(
            snapshot[:, layout.rigid_slice(jp)],
            snapshot[:, layout.rel_rigid_slice(j, jp)],
            normalize,
        )
    return c0 * mu_j + (c1 / (layout.m - 1)) * acc


def sync_skeleton_block(
    i: int,
    snapshot: np.ndarray,
    mu_hat: np.ndarray,
    layout: StateLayout,
    sigma: float,
    lam_bar: float,
    normalize: bool = True,
) -> np.ndarray:
    """Deterministic synchronized update of individual skeleton i."""
    mu_i = mu_hat[:, layout.skeleton_slice(i)]
    c0, c1 = _coeffs(sigma, lam_bar)
    acc = np.zeros_like(mu_i)
    for j in range(1, layout.m + 1):
        acc += comb_skeleton_arrays(
            snapshot[:, layout.rigid_slice(j)],
            snapshot[:, layout.rel_skeleton_slice(i, j)],
            normalize,
        )
    return c0 * mu_i + (c1 / layout.m) * acc


def sync_relative_rigid_block(
    mov: int,
    ref: int,
    snapshot: np.ndarray,
    mu_hat: np.ndarray,
    layout: StateLayout,
    sigma: float,
    lam_bar: float,
    normalize: bool = True,
) -> np.ndarray:
    """Deterministic synchronized update of the oMOV->oREF relative block."""
    mu_blk = mu_hat[:, layout.rel_rigid_slice(mov, ref)]
    c0, c1 = _coeffs(sigma, lam_bar)
    rel = rel_rigid_arrays(
        snapshot[:, layout.rigid_slice(ref)], snapshot[:, layout.rigid_slice(mov)], normalize
    )
    return c0 * mu_blk + c1 * rel


def sync_relative_skeleton_block(
    i: int,
    j: int,
    snapshot: np.ndarray,
    mu_hat: np.ndarray,
    layout: StateLayout,
    sigma: float,
    lam_bar: float,
    normalize: bool = True,
) -> np.ndarray:
    """Deterministic synchronized update of the hI->oJ relative block."""
    mu_blk = mu_hat[:, layout.rel_skeleton_slice(i, j)]
    c0, c1 = _coeffs(sigma, lam_bar)
    rel = rel_skeleton_arrays(
        snapshot[:, layout.rigid_slice(j)], snapshot[:, layout.skeleton_slice(i)], normalize
    )
    return c0 * mu_blk + c1 * rel


def synchronized_mean(
    snapshot: np.ndarray,
    mu_hat: np.ndarray,
    layout: StateLayout,
    sigma: float,
    lam_bar: float,
    normalize: bool = True,
) -> np.ndarray:
    """Apply the per-block synchronized update to every block (one snapshot)."""
    out = np.empty_like(mu_hat)
    for j in range(1, layout.m + 1):
        out[:, layout.rigid_slice(j)] = sync_rigid_block(
            j, snapshot, mu_hat, layout, sigma, lam_bar, normalize
        )
    for i in range(1, layout.n + 1):
        out[:, layout.skeleton_slice(i)] = sync_skeleton_block(
            i, snapshot, mu_hat, layout, sigma, lam_bar, normalize
        )
    for mov, ref in layout.rigid_pairs():
        out[:, layout.rel_rigid_slice(mov, ref)] = sync_relative_rigid_block(
            mov, ref, snapshot, mu_hat, layout, sigma, lam_bar, normalize
        )
    for i, j in layout.skeleton_rigid_pairs():
        out[:, layout.rel_skeleton_slice(i, j)] = sync_relative_skeleton_block(
            i, j, snapshot, mu_hat, layout, sigma, lam_bar, normalize
        )
    return out


@dataclass
class SampleInfo:
    """Bookkeeping from one sampling run."""

    n_sync_steps: int = 0
    sync_steps: List[int] = field(default_factory=list)
    sigma_ratios: List[float] = field(default_factory=list)  # sigma' / sigma per sync step
    lam_bar: float = 0.0


def sample_array(
    predict_x0: Callable[[np.ndarray, int], np.ndarray],
    shape: Tuple[int, int],
    sched: NoiseSchedule,
    cfg: SyncConfig,
    seed: int,
    layout: Optional[StateLayout] = None,
) -> Tuple[np.ndarray, SampleInfo]:
    """Reverse-diffuse an (N, C) array from pure noise.

    ``layout`` is required only when synchronization is active.  The final
    step emits the predicted mean without added noise (its posterior noise
    scale is zero).  Deterministic given the seed.
    """
    rng = rng_for(seed, "sample")
    info = SampleInfo()
    do_sync = cfg.enabled and cfg.strength > 0.0
    if do_sync:
        if layout is None:
            raise ValueError("synchronization needs the state layout")
        info.lam_bar = mean_alignment_precision(sched.sigma, cfg, sched.n_steps)
        if info.lam_bar == 0.0:
            do_sync = False

    x = rng.standard_normal(shape)
    for t in range(sched.n_steps, 0, -1):
        x0_hat = predict_x0(x, t)
        mu = posterior_mean(x, x0_hat, t, sched)
        sigma = float(sched.sigma[t - 1])
        noise = rng.standard_normal(shape)
        if do_sync and t % cfg.interval == cfg.interval // 2:
            det = synchronized_mean(x, mu, layout, sigma, info.lam_bar, cfg.normalize_rotations)
            sigma_prime = sync_noise_scale(sigma, info.lam_bar)
            info.n_sync_steps += 1
            info.sync_steps.append(t)
            info.sigma_ratios.append(sigma_prime / sigma if sigma > 0.0 else 1.0)
            x = det + sigma_prime * noise
        else:
            x = ancestral_step(mu, sigma, noise)
    return x, info


def sample_with_info(
    predict_x0: Callable[[np.ndarray, int], np.ndarray],
    layout: StateLayout,
    n_frames: int,
    sched: NoiseSchedule,
    cfg: SyncConfig,
    seed: int,
) -> Tuple[HighOrderState, SampleInfo]:
    data, info = sample_array(
        predict_x0, (n_frames, layout.d_sum), sched, cfg, seed, layout=layout
    )
    return HighOrderState(data, layout), info


def sample(
    predict_x0: Callable[[np.ndarray, int], np.ndarray],
    layout: StateLayout,
    n_frames: int,
    sched: NoiseSchedule,
    cfg: SyncConfig,
    seed: int,
) -> HighOrderState:
    """Sample one wide state; see sample_with_info for run statistics."""
    return sample_with_info(predict_x0, layout, n_frames, sched, cfg, seed)[0]
