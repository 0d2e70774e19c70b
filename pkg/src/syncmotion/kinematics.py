"""Quaternion algebra, per-body trajectories, and the wide multi-body state.

Conventions
-----------
- Quaternions are scalar-first ``[w, x, y, z]`` arrays (last axis length 4),
  composed with the Hamilton product and applied as active rotations.
- ``rel(ref, mov)`` expresses the moving body's motion in the reference rigid
  body's local frame; ``comb(ref, rel)`` is its inverse.  Only rigid bodies
  define reference frames; skeleton-skeleton relative motion is not stored.
- Double cover policy: composition (rel/comb) returns raw Hamilton products
  and never flips signs, so derived relative blocks are smooth functions of
  the individuals and match the alignment-loss recomputation bitwise.  The
  fixed ``w >= 0`` representative (quat_canonical) is applied where rotations
  enter the system: scene-generation source curves and final sampled exports.

Wide-state column layout (``D_sum = 7m + 3Dn + 7m(m-1) + 3Dmn``), in order:

1. individual rigids ``o1..om``, 7 columns each (tx ty tz qw qx qy qz);
2. individual skeletons ``h1..hn``, 3D columns each (joint-major xyz);
3. rigid-rigid relative blocks ``oJ->oR`` for every ordered pair J != R,
   enumerated moving-body-major: o1->o2, o1->o3, ..., om->o(m-1);
4. skeleton-rigid relative blocks ``hI->oJ``, enumerated h1->o1, h1->o2, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

_UNIT_TOL = 1e-6
_EPS_NORM = 1e-8  # smoothing for normalize-on-read of noisy quaternion blocks


# ---------------------------------------------------------------------------
# Quaternion primitives (arrays of shape (..., 4), scalar-first)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b (no normalization, no sign canonicalization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_inv(q: np.ndarray) -> np.ndarray:
    """Inverse conj(q)/|q|^2; equals the conjugate for unit q."""
    q = np.asarray(q, dtype=np.float64)
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(n2 == 0.0):
        raise ValueError("cannot invert a zero-norm quaternion")
    return quat_conj(q) / n2


def quat_norm(q: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(q, dtype=np.float64) ** 2, axis=-1))


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign where w < 0 so q and -q map to one representative."""
    q = np.asarray(q, dtype=np.float64)
    flip = q[..., 0] < 0.0
    out = q.copy()
    out[flip] = -out[flip]
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion(s) q (active rotation q v q*)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vq = np.zeros(v.shape[:-1] + (4,), dtype=np.float64)
    vq[..., 1:] = v
    return quat_mul(quat_mul(q, vq), quat_conj(q))[..., 1:]


def quat_from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    """Unit quaternion for rotation ``angle`` (rad) about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("rotation axis must be nonzero")
    u = axis / n
    half = angle / 2.0
    s = np.sin(half)
    return np.stack(
        [np.cos(half), u[..., 0] * s, u[..., 1] * s, u[..., 2] * s], axis=-1
    )


def quat_normalize_smooth(q: np.ndarray, eps: float = _EPS_NORM) -> Tuple[np.ndarray, np.ndarray]:
    """Scale q to (nearly) unit norm via the smooth factor sqrt(|q|^2+eps^2).

    Used when reading rotation channels out of noisy states: far from zero it
    is an exact normalization, and it stays differentiable at q = 0.
    Returns (normalized, scale).
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.sqrt(np.sum(q * q, axis=-1, keepdims=True) + eps * eps)
    return q / s, s


# ---------------------------------------------------------------------------
# Reverse-mode helpers for the quaternion primitives.  These back the analytic
# gradients of the alignment loss; each is checked against finite differences
# in the test suite.
# ---------------------------------------------------------------------------

def quat_mul_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Adjoint of c = a*b: returns (dL/da, dL/db) given dL/dc."""
    return quat_mul(g, quat_conj(b)), quat_mul(quat_conj(a), g)


def quat_rotate_vjp(g_vec: np.ndarray, q: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Adjoint of r = quat_rotate(q, v): returns (dL/dq, dL/dv)."""
    vq = np.zeros(v.shape[:-1] + (4,), dtype=np.float64)
    vq[..., 1:] = v
    w = quat_mul(q, vq)
    gr = np.zeros(g_vec.shape[:-1] + (4,), dtype=np.float64)
    gr[..., 1:] = g_vec
    # r = w * conj(q)
    gw, gcq = quat_mul_vjp(gr, w, quat_conj(q))
    gq = quat_conj(gcq)
    # w = q * vq
    gq2, gvq = quat_mul_vjp(gw, q, vq)
    return gq + gq2, gvq[..., 1:]


def quat_normalize_smooth_vjp(g: np.ndarray, q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Adjoint of (qbar, s) = quat_normalize_smooth(q) w.r.t. qbar only."""
    qbar = q / s
    return (g - qbar * np.sum(qbar * g, axis=-1, keepdims=True)) / s


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _check_unit(q: np.ndarray, what: str) -> np.ndarray:
    norms = quat_norm(q)
    err = np.max(np.abs(norms - 1.0)) if q.size else 0.0
    if err > _UNIT_TOL:
        raise ValueError(f"{what}: orientations deviate from unit norm by {err:.3e}")
    # Renormalize only when measurably off so already-exact data round-trips
    # bitwise through construction.
    if err > 1e-12:
        q = q / norms[..., None]
    return q


@dataclass
class RigidTrajectory:
    """Per-frame rigid pose: translation (N,3) meters + unit quaternion (N,4)."""

    translation: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if self.translation.ndim != 2 or self.translation.shape[1] != 3:
            raise ValueError("translation must have shape (N, 3)")
        if self.orientation.shape != (self.translation.shape[0], 4):
            raise ValueError("orientation must have shape (N, 4)")
        self.orientation = _check_unit(self.orientation, type(self).__name__)

    @property
    def n_frames(self) -> int:
        return self.translation.shape[0]

    def as_block(self) -> np.ndarray:
        """(N, 7) block: [t, q]."""
        return np.concatenate([self.translation, self.orientation], axis=1)

    @classmethod
    def from_block(cls, block: np.ndarray) -> "RigidTrajectory":
        block = np.asarray(block, dtype=np.float64)
        return cls(block[:, :3], block[:, 3:7])


@dataclass
class RelativeRigidTrajectory(RigidTrajectory):
    """Rigid pose expressed in a reference rigid body's frame."""


@dataclass
class SkeletonTrajectory:
    """Per-frame joint positions, shape (N, D, 3) meters."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ValueError("positions must have shape (N, D, 3)")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    def as_block(self) -> np.ndarray:
        """(N, 3D) block, joint-major."""
        n, d, _ = self.positions.shape
        return self.positions.reshape(n, 3 * d)

    @classmethod
    def from_block(cls, block: np.ndarray) -> "SkeletonTrajectory":
        block = np.asarray(block, dtype=np.float64)
        n, w = block.shape
        if w % 3:
            raise ValueError("skeleton block width must be a multiple of 3")
        return cls(block.reshape(n, w // 3, 3))


@dataclass
class RelativeSkeletonTrajectory(SkeletonTrajectory):
    """Joint positions expressed in a reference rigid body's frame."""


def _require_equal_frames(a, b) -> None:
    if a.n_frames != b.n_frames:
        raise ValueError(f"frame-count mismatch: {a.n_frames} vs {b.n_frames}")


def rel_rigid(xa: RigidTrajectory, xb: RigidTrajectory) -> RelativeRigidTrajectory:
    """xb's motion in xa's frame: t = qa^-1 (tb - ta), q = qa^-1 qb."""
    _require_equal_frames(xa, xb)
    qa_inv = quat_conj(xa.orientation)
    t = quat_rotate(qa_inv, xb.translation - xa.translation)
    q = quat_mul(qa_inv, xb.orientation)
    return RelativeRigidTrajectory(t, q)


def comb_rigid(xa: RigidTrajectory, xrel: RelativeRigidTrajectory) -> RigidTrajectory:
    """Inverse of rel_rigid: t = qa trel + ta, q = qa qrel."""
    _require_equal_frames(xa, xrel)
    t = quat_rotate(xa.orientation, xrel.translation) + xa.translation
    q = quat_mul(xa.orientation, xrel.orientation)
    return RigidTrajectory(t, q)


def rel_skeleton(xo: RigidTrajectory, xh: SkeletonTrajectory) -> RelativeSkeletonTrajectory:
    """Joint positions in xo's frame: p' = qo^-1 (p - to)."""
    _require_equal_frames(xo, xh)
    q_inv = quat_conj(xo.orientation)[:, None, :]
    p = quat_rotate(q_inv, xh.positions - xo.translation[:, None, :])
    return RelativeSkeletonTrajectory(p)


def comb_skeleton(xo: RigidTrajectory, xrel: RelativeSkeletonTrajectory) -> SkeletonTrajectory:
    """Inverse of rel_skeleton: p = qo p' + to."""
    _require_equal_frames(xo, xrel)
    q = xo.orientation[:, None, :]
    p = quat_rotate(q, xrel.positions) + xo.translation[:, None, :]
    return SkeletonTrajectory(p)


# ---------------------------------------------------------------------------
# Wide-state layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateLayout:
    """Column map of the concatenated multi-body state."""

    m: int
    n: int
    d_joints: int
    _blocks: Dict[str, slice] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("at least one rigid body is required (m >= 1)")
        if self.n < 0 or self.d_joints < 1:
            raise ValueError("invalid body counts")
        blocks: Dict[str, slice] = {}
        col = 0
        for j in range(1, self.m + 1):
            blocks[f"o{j}"] = slice(col, col + 7)
            col += 7
        w = 3 * self.d_joints
        for i in range(1, self.n + 1):
            blocks[f"h{i}"] = slice(col, col + w)
            col += w
        for mov in range(1, self.m + 1):
            for ref in range(1, self.m + 1):
                if ref == mov:
                    continue
                blocks[f"o{mov}->o{ref}"] = slice(col, col + 7)
                col += 7
        for i in range(1, self.n + 1):
            for j in range(1, self.m + 1):
                blocks[f"h{i}->o{j}"] = slice(col, col + w)
                col += w
        object.__setattr__(self, "_blocks", blocks)

    @property
    def d_sum(self) -> int:
        m, n, d = self.m, self.n, self.d_joints
        return 7 * m + 3 * d * n + 7 * m * (m - 1) + 3 * d * m * n

    @property
    def blocks(self) -> Dict[str, slice]:
        return dict(self._blocks)

    def block_slice(self, name: str) -> slice:
        try:
            return self._blocks[name]
        except KeyError:
            raise KeyError(f"unknown block {name!r}") from None

    def rigid_slice(self, j: int) -> slice:
        return self.block_slice(f"o{j}")

    def rigid_quat_slice(self, j: int) -> slice:
        s = self.rigid_slice(j)
        return slice(s.start + 3, s.stop)

    def skeleton_slice(self, i: int) -> slice:
        return self.block_slice(f"h{i}")

    def rel_rigid_slice(self, mov: int, ref: int) -> slice:
        return self.block_slice(f"o{mov}->o{ref}")

    def rel_skeleton_slice(self, i: int, j: int) -> slice:
        return self.block_slice(f"h{i}->o{j}")

    def rigid_pairs(self) -> List[Tuple[int, int]]:
        """Ordered (moving, reference) rigid index pairs."""
        return [(a, b) for a in range(1, self.m + 1) for b in range(1, self.m + 1) if a != b]

    def skeleton_rigid_pairs(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(1, self.n + 1) for j in range(1, self.m + 1)]


@dataclass
class HighOrderState:
    """Concatenated individual + relative motions, shape (N, D_sum)."""

    data: np.ndarray
    layout: StateLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.layout.d_sum:
            raise ValueError(
                f"state data must have shape (N, {self.layout.d_sum}), got {self.data.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def block(self, name: str) -> np.ndarray:
        return self.data[:, self.layout.block_slice(name)]

    def rigid_trajectory(self, j: int) -> RigidTrajectory:
        return RigidTrajectory.from_block(self.block(f"o{j}"))

    def skeleton_trajectory(self, i: int) -> SkeletonTrajectory:
        return SkeletonTrajectory.from_block(self.block(f"h{i}"))

    def relative_rigid(self, mov: int, ref: int) -> RelativeRigidTrajectory:
        return RelativeRigidTrajectory.from_block(self.block(f"o{mov}->o{ref}"))

    def relative_skeleton(self, i: int, j: int) -> RelativeSkeletonTrajectory:
        return RelativeSkeletonTrajectory.from_block(self.block(f"h{i}->o{j}"))


def assemble_state(
    rigids: Sequence[RigidTrajectory], skeletons: Sequence[SkeletonTrajectory] = ()
) -> HighOrderState:
    """Concatenate individual motions and derive every relative block."""
    if not rigids:
        raise ValueError("assemble_state needs at least one rigid body")
    n = rigids[0].n_frames
    for b in list(rigids) + list(skeletons):
        if b.n_frames != n:
            raise ValueError("all bodies must share the frame count")
    d = skeletons[0].n_joints if skeletons else 1
    for h in skeletons:
        if h.n_joints != d:
            raise ValueError("all skeletons must share the joint count")
    layout = StateLayout(m=len(rigids), n=len(skeletons), d_joints=d)

    rigid_blocks = [r.as_block() for r in rigids]
    skel_blocks = [h.as_block() for h in skeletons]
    parts = rigid_blocks + skel_blocks
    # Relative blocks go through the same array path the alignment penalty
    # recomputes, so stored blocks match that recomputation bitwise.
    for mov, ref in layout.rigid_pairs():
        parts.append(rel_rigid_arrays(rigid_blocks[ref - 1], rigid_blocks[mov - 1]))
    for i, j in layout.skeleton_rigid_pairs():
        parts.append(rel_skeleton_arrays(rigid_blocks[j - 1], skel_blocks[i - 1]))
    return HighOrderState(np.concatenate(parts, axis=1), layout)


@dataclass
class DisassembledState:
    """Blocks of a wide state, raw and (when valid) typed."""

    blocks: Dict[str, np.ndarray]
    rigids: Optional[List[RigidTrajectory]]
    skeletons: Optional[List[SkeletonTrajectory]]
    relative_rigids: Dict[Tuple[int, int], np.ndarray]
    relative_skeletons: Dict[Tuple[int, int], np.ndarray]


def disassemble_state(state: HighOrderState, typed: bool = True) -> DisassembledState:
    """Split a state into blocks; inverse of concatenation (bitwise on data)."""
    lay = state.layout
    blocks = {name: state.data[:, sl].copy() for name, sl in lay.blocks.items()}
    rigids = skeletons = None
    if typed:
        rigids = [state.rigid_trajectory(j) for j in range(1, lay.m + 1)]
        skeletons = [state.skeleton_trajectory(i) for i in range(1, lay.n + 1)]
    rel_r = {(a, b): blocks[f"o{a}->o{b}"] for a, b in lay.rigid_pairs()}
    rel_s = {(i, j): blocks[f"h{i}->o{j}"] for i, j in lay.skeleton_rigid_pairs()}
    return DisassembledState(blocks, rigids, skeletons, rel_r, rel_s)


def state_from_blocks(blocks: Dict[str, np.ndarray], layout: StateLayout) -> HighOrderState:
    """Reassemble a state from its named blocks without recomputing anything."""
    missing = set(layout.blocks) - set(blocks)
    if missing:
        raise ValueError(f"missing blocks: {sorted(missing)}")
    data = np.concatenate([np.asarray(blocks[name], dtype=np.float64) for name in layout.blocks], axis=1)
    return HighOrderState(data, layout)


# ---------------------------------------------------------------------------
# rel/comb on raw blocks of noisy states.  Rotation channels are normalized on
# read (smooth at zero) because intermediate denoising states are far from
# unit norm while the frame-change formulas need valid rotations.
# ---------------------------------------------------------------------------

def _read_rigid(block: np.ndarray, normalize: bool) -> Tuple[np.ndarray, np.ndarray]:
    t, q = block[:, :3], block[:, 3:7]
    if normalize:
        q, _ = quat_normalize_smooth(q)
    return t, q


def rel_rigid_arrays(ref: np.ndarray, mov: np.ndarray, normalize: bool = True) -> np.ndarray:
    """rel() on raw (N, 7) blocks: the moving rigid in the reference frame."""
    t_r, q_r = _read_rigid(ref, normalize)
    t_m, q_m = _read_rigid(mov, normalize)
    c = quat_conj(q_r)
    t = quat_rotate(c, t_m - t_r)
    q = quat_mul(c, q_m)
    return np.concatenate([t, q], axis=1)


def comb_rigid_arrays(ref: np.ndarray, rel: np.ndarray, normalize: bool = True) -> np.ndarray:
    """comb() on raw (N, 7) blocks: world pose from reference + relative."""
    t_r, q_r = _read_rigid(ref, normalize)
    t_rel, q_rel = _read_rigid(rel, normalize)
    t = quat_rotate(q_r, t_rel) + t_r
    q = quat_mul(q_r, q_rel)
    return np.concatenate([t, q], axis=1)


def rel_skeleton_arrays(ref: np.ndarray, joints: np.ndarray, normalize: bool = True) -> np.ndarray:
    """rel() for an (N, 3D) joint block against an (N, 7) reference block."""
    t_r, q_r = _read_rigid(ref, normalize)
    n, w = joints.shape
    p = joints.reshape(n, w // 3, 3)
    c = quat_conj(q_r)[:, None, :]
    out = quat_rotate(c, p - t_r[:, None, :])
    return out.reshape(n, w)


def comb_skeleton_arrays(ref: np.ndarray, rel_joints: np.ndarray, normalize: bool = True) -> np.ndarray:
    """comb() for an (N, 3D) relative joint block."""
    t_r, q_r = _read_rigid(ref, normalize)
    n, w = rel_joints.shape
    p = rel_joints.reshape(n, w // 3, 3)
    out = quat_rotate(q_r[:, None, :], p) + t_r[:, None, :]
    return out.reshape(n, w)


def relative_from_individuals(
    data: np.ndarray, layout: StateLayout, normalize: bool = True
) -> Dict[str, np.ndarray]:
    """What each relative block should be given the individual blocks."""
    out: Dict[str, np.ndarray] = {}
    for mov, ref in layout.rigid_pairs():
        out[f"o{mov}->o{ref}"] = rel_rigid_arrays(
            data[:, layout.rigid_slice(ref)], data[:, layout.rigid_slice(mov)], normalize
        )
    for i, j in layout.skeleton_rigid_pairs():
        out[f"h{i}->o{j}"] = rel_skeleton_arrays(
            data[:, layout.rigid_slice(j)], data[:, layout.skeleton_slice(i)], normalize
        )
    return out
