"""Denoising backbone contract, a desk-scale trainable network, and training.

The trainable network is a per-frame fully connected net with weights shared
across frames, one input branch per band (low band in the time domain, mid
band as packed frequency rows), a masked mean-pooled context feature appended
per frame for temporal mixing, and one output head per band.  Gradients are
hand-rolled and checked against central finite differences in the tests.

Conditioning: learned 128-wide embedding tables keyed by action/object label
ids, a learned linear projection of the basis-point geometry encoding, raw
shape parameters, the 0/1 padding mask, and a fixed sinusoidal timestep
embedding passed through a seeded (non-trained) two-layer projection.

An analytic closed-form denoiser for Gaussian data serves as the oracle
counterpart of the trained network: for x0 ~ N(mu0, v0 I),

    E[x0 | x_t] = (v0 sqrt(abar_t) x_t + (1 - abar_t) mu0)
                  / (v0 abar_t + 1 - abar_t).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import freq
from .diffusion import LossBreakdown, LossWeights, NoiseSchedule, forward_noise, total_loss_and_grads
from .kinematics import StateLayout
from .seeding import rng_for

CHECKPOINT_MAGIC = b"MOSYNCKP"
CHECKPOINT_VERSION = 1

LABEL_WIDTH = 128
SHAPE_WIDTH = 10
TIME_DIM = 1024
_TIME_BASE_DIM = 64
_POS_OCTAVES = (1, 2, 4, 8)


# ---------------------------------------------------------------------------
# Timestep embedding
# ---------------------------------------------------------------------------

def sinusoidal_embed(t: int, dim: int = _TIME_BASE_DIM) -> np.ndarray:
    """Base sinusoidal embedding: first half sin(t w_i), second half cos."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


@lru_cache(maxsize=8)
def _time_projection(dim: int, seed: int):
    rng = rng_for(seed, "time-embed")
    w1 = rng.standard_normal((256, _TIME_BASE_DIM)) / np.sqrt(_TIME_BASE_DIM)
    w2 = rng.standard_normal((dim, 256)) / np.sqrt(256.0)
    w1.setflags(write=False)
    w2.setflags(write=False)
    return w1, w2


def timestep_embed(t: int, dim: int = TIME_DIM, seed: int = 0) -> np.ndarray:
    """Sinusoidal base followed by a fixed seeded two-layer projection."""
    w1, w2 = _time_projection(dim, seed)
    return w2 @ _gelu(w1 @ sinusoidal_embed(t))


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class SceneConditioning:
    """Raw per-scene conditioning inputs (ids and features, not embeddings)."""

    action_id: int
    object_label_ids: np.ndarray  # (m,)
    bps_features: np.ndarray  # (m, 1024, 3)
    shape_params: np.ndarray  # (n, 10)


@dataclass
class ConditionVector:
    action_embed: np.ndarray  # (128,)
    label_embed: np.ndarray  # (m, 128)
    geom_embed: np.ndarray  # (m, 128)
    mask: np.ndarray  # (N,)
    time_embed: np.ndarray  # (1024,)
    shape_params: np.ndarray  # (n, 10)

    def static_vector(self) -> np.ndarray:
        """Static width 128(2m+1) + 10n: action, labels, geometry, shapes."""
        return np.concatenate(
            [
                self.action_embed,
                self.label_embed.ravel(),
                self.geom_embed.ravel(),
                self.shape_params.ravel(),
            ]
        )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    m: int
    n: int
    d_joints: int
    hidden: int = 256
    dual_branch: bool = True
    action_vocab: int = 8
    object_vocab: int = 16
    time_seed: int = 0

    @property
    def layout(self) -> StateLayout:
        return StateLayout(m=self.m, n=self.n, d_joints=self.d_joints)

    @property
    def d_sum(self) -> int:
        return self.layout.d_sum

    @property
    def cond_width(self) -> int:
        return LABEL_WIDTH * (2 * self.m + 1) + SHAPE_WIDTH * self.n

    @property
    def pos_width(self) -> int:
        return 1 + 2 * len(_POS_OCTAVES)

    @property
    def in_width(self) -> int:
        return self.d_sum + self.cond_width + 1 + self.pos_width

    @property
    def latent_width(self) -> int:
        return 2 * self.hidden if self.dual_branch else self.hidden

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        h, z, i, c = self.hidden, self.latent_width, self.in_width, self.d_sum
        shapes = {
            "action_table": (self.action_vocab, LABEL_WIDTH),
            "object_table": (self.object_vocab, LABEL_WIDTH),
            "w_geo": (LABEL_WIDTH, 3 * 1024),
            "w_in_dc": (h, i),
            "b_in_dc": (h,),
            "w_time": (z, TIME_DIM),
            "w_mix": (h, 2 * z),
            "b_mix": (h,),
            "w_out_dc": (c, h),
            "b_out_dc": (c,),
        }
        if self.dual_branch:
            shapes.update(
                {
                    "w_in_f": (h, i),
                    "b_in_f": (h,),
                    "w_out_f": (c, h),
                    "b_out_f": (c,),
                }
            )
        return shapes


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: Dict[str, np.ndarray]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def with_flat(self, vec: np.ndarray) -> "DenoiserParams":
        out, off = {}, 0
        for k in sorted(self.arrays):
            size = self.arrays[k].size
            out[k] = vec[off : off + size].reshape(self.arrays[k].shape).copy()
            off += size
        if off != vec.size:
            raise ValueError("flat vector size mismatch")
        return DenoiserParams(self.config, out)


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Seeded scaled-normal initialization (1/sqrt(fan_in)); output heads are
    scaled down so the first predictions stay near zero."""
    rng = rng_for(seed, "denoiser-init")
    arrays = {}
    for name, shape in config.param_shapes().items():
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(fan_in)
        if name.startswith(("w_out", "b_out")):
            scale *= 0.01
        arrays[name] = rng.standard_normal(shape) * scale
    return DenoiserParams(config, arrays)


def zero_params(config: DenoiserConfig) -> DenoiserParams:
    return DenoiserParams(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


def zero_grads(params: DenoiserParams) -> Dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def build_condition(
    params: DenoiserParams,
    cond: SceneConditioning,
    mask: np.ndarray,
    t: int,
) -> ConditionVector:
    """Embed the raw conditioning inputs; pure given params."""
    cfg = params.config
    if not 0 <= cond.action_id < cfg.action_vocab:
        raise ValueError(f"action id {cond.action_id} outside vocabulary [0, {cfg.action_vocab})")
    label_ids = np.asarray(cond.object_label_ids, dtype=int)
    if label_ids.shape != (cfg.m,):
        raise ValueError(f"expected {cfg.m} object label ids, got {label_ids.shape}")
    if np.any((label_ids < 0) | (label_ids >= cfg.object_vocab)):
        raise ValueError("object label id outside vocabulary")
    bps = np.asarray(cond.bps_features, dtype=np.float64).reshape(cfg.m, -1)
    shapes = np.asarray(cond.shape_params, dtype=np.float64).reshape(cfg.n, SHAPE_WIDTH)
    return ConditionVector(
        action_embed=params.arrays["action_table"][cond.action_id],
        label_embed=params.arrays["object_table"][label_ids],
        geom_embed=bps @ params.arrays["w_geo"].T,
        mask=np.asarray(mask, dtype=np.float64),
        time_embed=timestep_embed(t, TIME_DIM, cfg.time_seed),
        shape_params=shapes,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _pos_features(n: int) -> np.ndarray:
    u = np.arange(n, dtype=np.float64)
    cols = [u / max(n - 1, 1)]
    for k in _POS_OCTAVES:
        phase = 2.0 * np.pi * k * u / n
        cols += [np.sin(phase), np.cos(phase)]
    return np.stack(cols, axis=1)


def denoise(
    params: DenoiserParams,
    x_dc: np.ndarray,
    x_f: Optional[np.ndarray],
    cond: ConditionVector,
    want_cache: bool = False,
):
    """Dual-band forward pass: (x_dc, x_F, condition) -> (out_dc, out_F).

    In single-branch mode x_f must be None and out_F is None.
    """
    cfg = params.config
    p = params.arrays
    x_dc = np.asarray(x_dc, dtype=np.float64)
    if not np.all(np.isfinite(x_dc)):
        raise ValueError("non-finite values in the low-band input")
    if cfg.dual_branch:
        if x_f is None:
            raise ValueError("dual-branch denoiser needs the packed frequency input")
        x_f = np.asarray(x_f, dtype=np.float64)
        if not np.all(np.isfinite(x_f)):
            raise ValueError("non-finite values in the frequency input")
    elif x_f is not None:
        raise ValueError("single-branch denoiser takes no frequency input")

    n = x_dc.shape[0]
    static = cond.static_vector()
    extra = np.concatenate(
        [np.broadcast_to(static, (n, static.size)), cond.mask[:, None], _pos_features(n)], axis=1
    )
    u_dc = np.concatenate([x_dc, extra], axis=1)
    h_dc = np.tanh(u_dc @ p["w_in_dc"].T + p["b_in_dc"])
    if cfg.dual_branch:
        u_f = np.concatenate([x_f, extra], axis=1)
        h_f = np.tanh(u_f @ p["w_in_f"].T + p["b_in_f"])
        z = np.concatenate([h_dc, h_f], axis=1)
    else:
        u_f = h_f = None
        z = h_dc
    z = z + (p["w_time"] @ cond.time_embed)[None, :]
    total = float(np.sum(cond.mask))
    if total <= 0:
        raise ValueError("padding mask selects no frames")
    ctx = (cond.mask[:, None] * z).sum(axis=0) / total
    mix_in = np.concatenate([z, np.broadcast_to(ctx, z.shape)], axis=1)
    y = np.tanh(mix_in @ p["w_mix"].T + p["b_mix"])
    out_dc = y @ p["w_out_dc"].T + p["b_out_dc"]
    out_f = y @ p["w_out_f"].T + p["b_out_f"] if cfg.dual_branch else None
    if not want_cache:
        return out_dc, out_f
    cache = {
        "u_dc": u_dc, "u_f": u_f, "h_dc": h_dc, "h_f": h_f, "y": y,
        "mix_in": mix_in, "mask": cond.mask, "total": total,
        "time_embed": cond.time_embed, "cond": cond,
    }
    return out_dc, out_f, cache


def denoise_backward(
    params: DenoiserParams,
    cache: dict,
    g_out_dc: np.ndarray,
    g_out_f: Optional[np.ndarray],
    cond_inputs: Optional[SceneConditioning] = None,
) -> Dict[str, np.ndarray]:
    """Backprop through denoise(); returns gradients for every parameter."""
    cfg = params.config
    p = params.arrays
    g = zero_grads(params)
    y, mix_in = cache["y"], cache["mix_in"]

    g["w_out_dc"] = g_out_dc.T @ y
    g["b_out_dc"] = g_out_dc.sum(axis=0)
    gy = g_out_dc @ p["w_out_dc"]
    if cfg.dual_branch:
        g["w_out_f"] = g_out_f.T @ y
        g["b_out_f"] = g_out_f.sum(axis=0)
        gy = gy + g_out_f @ p["w_out_f"]

    ga_y = gy * (1.0 - y**2)
    g["w_mix"] = ga_y.T @ mix_in
    g["b_mix"] = ga_y.sum(axis=0)
    g_mix_in = ga_y @ p["w_mix"]

    z_width = cfg.latent_width
    gz = g_mix_in[:, :z_width].copy()
    gctx = g_mix_in[:, z_width:].sum(axis=0)
    gz += cache["mask"][:, None] / cache["total"] * gctx[None, :]

    g["w_time"] = np.outer(gz.sum(axis=0), cache["time_embed"])

    h = cfg.hidden
    gh_dc = gz[:, :h]
    ga_dc = gh_dc * (1.0 - cache["h_dc"] ** 2)
    g["w_in_dc"] = ga_dc.T @ cache["u_dc"]
    g["b_in_dc"] = ga_dc.sum(axis=0)
    gu = ga_dc @ p["w_in_dc"]
    if cfg.dual_branch:
        gh_f = gz[:, h:]
        ga_f = gh_f * (1.0 - cache["h_f"] ** 2)
        g["w_in_f"] = ga_f.T @ cache["u_f"]
        g["b_in_f"] = ga_f.sum(axis=0)
        gu = gu + ga_f @ p["w_in_f"]

    if cond_inputs is not None:
        # Gradient into the learned conditioning: columns d_sum .. d_sum+cond_width.
        c0 = cfg.d_sum
        g_cond = gu[:, c0 : c0 + cfg.cond_width].sum(axis=0)
        off = 0
        g["action_table"][cond_inputs.action_id] += g_cond[off : off + LABEL_WIDTH]
        off += LABEL_WIDTH
        for j, lid in enumerate(np.asarray(cond_inputs.object_label_ids, dtype=int)):
            g["object_table"][lid] += g_cond[off : off + LABEL_WIDTH]
            off += LABEL_WIDTH
        bps_flat = np.asarray(cond_inputs.bps_features, dtype=np.float64).reshape(cfg.m, -1)
        for j in range(cfg.m):
            g["w_geo"] += np.outer(g_cond[off : off + LABEL_WIDTH], bps_flat[j])
            off += LABEL_WIDTH
    return g


def analytic_gaussian_denoise(
    mu0: np.ndarray, var0: float, x_t: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Closed-form clean-signal posterior mean for Gaussian data."""
    if var0 < 0.0:
        raise ValueError("prior variance must be nonnegative")
    sched.check_step(t)
    abar = sched.abar(t)
    return (var0 * np.sqrt(abar) * x_t + (1.0 - abar) * mu0) / (var0 * abar + 1.0 - abar)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One padded training sample plus its conditioning inputs."""

    data: np.ndarray  # (N_max, d_sum) clean state, zero rows beyond the mask
    mask: np.ndarray  # (N_max,) 1.0 exactly on real frames (prefix)
    cond: SceneConditioning


@dataclass
class TrainSettings:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    cutoff: int = 16
    band_mode: str = "symmetric"
    decomposition: bool = True
    align_loss: bool = True


def _real_frames(item: TrainItem) -> int:
    nr = int(round(float(item.mask.sum())))
    if not np.array_equal(item.mask, np.concatenate([np.ones(nr), np.zeros(len(item.mask) - nr)])):
        raise ValueError("padding mask must be a prefix of ones")
    return nr


def sample_loss_and_grads(
    params: DenoiserParams,
    item: TrainItem,
    sched: NoiseSchedule,
    weights: LossWeights,
    settings: TrainSettings,
    t: int,
    eps: np.ndarray,
    gt_bands: Optional[freq.SpectralBands] = None,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Loss of one (sample, t, eps) draw and its parameter gradients.

    Deterministic given its arguments; the finite-difference gradient check
    drives this function directly.
    """
    cfg = params.config
    layout = cfg.layout
    n_max = item.data.shape[0]
    nr = _real_frames(item)
    real = item.data[:nr]
    weights_eff = weights if settings.align_loss else replace(weights, align=0.0)

    x_t = forward_noise(real, t, eps, sched)
    if settings.decomposition:
        bands_t = freq.decompose(x_t, settings.cutoff, settings.band_mode)
        if gt_bands is None:
            gt_bands = freq.decompose(real, settings.cutoff, settings.band_mode)
        in_dc = np.zeros((n_max, cfg.d_sum))
        in_dc[:nr] = bands_t.dc
        in_f = np.zeros((n_max, cfg.d_sum))
        in_f[:nr] = bands_t.F
        gt_dc, gt_ac = gt_bands.dc, gt_bands.ac
    else:
        in_dc = np.zeros((n_max, cfg.d_sum))
        in_dc[:nr] = x_t
        in_f = None
        gt_dc, gt_ac = real, np.zeros_like(real)

    cond_vec = build_condition(params, item.cond, item.mask, t)
    out_dc, out_f, cache = denoise(params, in_dc, in_f, cond_vec, want_cache=True)

    if settings.decomposition:
        k = freq.n_coeff_rows(settings.cutoff)
        basis = freq.ac_synthesis_basis(nr, settings.cutoff)
        pred_dc = out_dc[:nr]
        pred_ac = basis @ out_f[:k]
        breakdown, g_dc, g_ac = total_loss_and_grads(
            pred_dc, pred_ac, gt_dc, gt_ac, layout, weights_eff
        )
        g_out_dc = np.zeros_like(out_dc)
        g_out_dc[:nr] = g_dc
        g_out_f = np.zeros_like(out_f)
        g_out_f[:k] = basis.T @ g_ac
    else:
        pred = out_dc[:nr]
        zeros = np.zeros_like(pred)
        breakdown, g_dc, _ = total_loss_and_grads(
            pred, zeros, gt_dc, gt_ac, layout, replace(weights_eff, ac=0.0)
        )
        g_out_dc = np.zeros_like(out_dc)
        g_out_dc[:nr] = g_dc
        g_out_f = None

    grads = denoise_backward(params, cache, g_out_dc, g_out_f, cond_inputs=item.cond)
    return breakdown, grads


def train(
    params: DenoiserParams,
    items: Sequence[TrainItem],
    sched: NoiseSchedule,
    weights: LossWeights,
    settings: TrainSettings,
    seed: int,
) -> Tuple[DenoiserParams, List[Tuple[int, LossBreakdown]]]:
    """Gradient descent with momentum over uniformly drawn (sample, t) pairs.

    Deterministic given the seed.  Gradients are scaled by 1 / (frames *
    state width) so the configured step size is independent of desk scale.
    Raises on a non-finite loss.
    """
    if not items:
        raise ValueError("training needs a non-empty dataset")
    params = params.copy()
    rng = rng_for(seed, "train")
    vel = zero_grads(params)
    log: List[Tuple[int, LossBreakdown]] = []

    gt_cache: List[Optional[freq.SpectralBands]] = [None] * len(items)
    if settings.decomposition:
        for idx, item in enumerate(items):
            nr = _real_frames(item)
            gt_cache[idx] = freq.decompose(item.data[:nr], settings.cutoff, settings.band_mode)

    for step in range(settings.steps):
        idx = int(rng.integers(0, len(items)))
        item = items[idx]
        nr = _real_frames(item)
        t = int(rng.integers(1, sched.n_steps + 1))
        eps = rng.standard_normal((nr, params.config.d_sum))
        breakdown, grads = sample_loss_and_grads(
            params, item, sched, weights, settings, t, eps, gt_bands=gt_cache[idx]
        )
        if not np.isfinite(breakdown.total):
            raise FloatingPointError(
                f"non-finite loss at step {step} (sample {idx}, t={t}): {breakdown.as_dict()}"
            )
        scale = settings.lr / (nr * params.config.d_sum)
        for k in params.arrays:
            vel[k] = settings.momentum * vel[k] - scale * grads[k]
            params.arrays[k] += vel[k]
        log.append((step, breakdown))
    return params, log


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, version, JSON header, little-endian float64
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: DenoiserParams, extra: Optional[dict] = None) -> None:
    names = sorted(params.arrays)
    header = {
        "config": {
            "m": params.config.m,
            "n": params.config.n,
            "d_joints": params.config.d_joints,
            "hidden": params.config.hidden,
            "dual_branch": params.config.dual_branch,
            "action_vocab": params.config.action_vocab,
            "object_vocab": params.config.object_vocab,
            "time_seed": params.config.time_seed,
        },
        "names": names,
        "shapes": {k: list(params.arrays[k].shape) for k in names},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[DenoiserParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = DenoiserConfig(**header["config"])
        arrays = {}
        for k in header["names"]:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError("truncated checkpoint file")
            arrays[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    params = DenoiserParams(config, arrays)
    expected = config.param_shapes()
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise ValueError("checkpoint arrays do not match the stored config")
    return params, header["extra"]


# ---------------------------------------------------------------------------
# Predictor closures for the sampler
# ---------------------------------------------------------------------------

def make_network_predictor(
    params: DenoiserParams,
    cond: SceneConditioning,
    n_frames: int,
    cutoff: int = 16,
    band_mode: str = "symmetric",
    decomposition: bool = True,
) -> Callable[[np.ndarray, int], np.ndarray]:
    """Clean-signal predictor x_t -> x0_hat wrapping decomposition + network."""
    mask = np.ones(n_frames)
    if decomposition:
        freq.check_cutoff(cutoff, n_frames)
        k = freq.n_coeff_rows(cutoff)
        basis = freq.ac_synthesis_basis(n_frames, cutoff)

    def predict(x_t: np.ndarray, t: int) -> np.ndarray:
        cond_vec = build_condition(params, cond, mask, t)
        if decomposition:
            bands = freq.decompose(x_t, cutoff, band_mode)
            out_dc, out_f = denoise(params, bands.dc, bands.F, cond_vec)
            return out_dc + basis @ out_f[:k]
        out_dc, _ = denoise(params, x_t, None, cond_vec)
        return out_dc

    return predict


def make_gaussian_predictor(
    mu0: np.ndarray, var0: float, sched: NoiseSchedule
) -> Callable[[np.ndarray, int], np.ndarray]:
    def predict(x_t: np.ndarray, t: int) -> np.ndarray:
        return analytic_gaussian_denoise(mu0, var0, x_t, t, sched)

    return predict
