"""Shape primitives, basis-point geometry encoding, and motion-quality metrics.

Contact follows the two-threshold scheme: a hand "mesh" (dense capsule
surface samples along the skeleton bones) is in surface contact with an
object when its minimum distance to the object surface is within 5 mm; a
human is in root contact when both root joints are within 3 cm.  Per-hand
contact masks are OR-ed over objects, averaged over frames and hands (CSR /
CRR), and compared to ground truth by IoU (CSIoU, with IoU(empty, empty)
defined as 1).  Interpenetration is measured on a voxel grid as overlap
volume (IV, cm^3) and maximum penetration depth (ID, mm).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kinematics import (
    HighOrderState,
    RigidTrajectory,
    quat_conj,
    quat_rotate,
    relative_from_individuals,
)
from .seeding import rng_for

SURFACE_CONTACT_DIST = 0.005  # 5 mm
ROOT_CONTACT_DIST = 0.03  # 3 cm
BPS_POINTS = 1024
BPS_RADIUS = 1.0


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapePrimitive:
    """Sphere or box, centered at the body origin."""

    kind: str  # "sphere" | "box"
    params: Tuple[float, ...]  # (radius,) or (hx, hy, hz)

    def __post_init__(self):
        if self.kind == "sphere":
            if len(self.params) != 1 or self.params[0] <= 0.0:
                raise ValueError("sphere takes a single positive radius")
        elif self.kind == "box":
            if len(self.params) != 3 or min(self.params) <= 0.0:
                raise ValueError("box takes three positive half-extents")
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    @property
    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.params[0]
        return float(np.linalg.norm(self.params))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance in the shape's local frame (negative inside)."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(points, axis=-1) - self.params[0]
        half = np.asarray(self.params)
        q = np.abs(points) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def nearest_surface_point(self, points: np.ndarray) -> np.ndarray:
        """Closest point on the surface for each local-frame query point."""
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "sphere":
            r = self.params[0]
            norm = np.linalg.norm(points, axis=-1, keepdims=True)
            safe = np.where(norm > 0.0, points / np.maximum(norm, 1e-300), 0.0)
            # Query exactly at the center: pick +x deterministically.
            fallback = np.zeros_like(points)
            fallback[..., 0] = 1.0
            direction = np.where(norm > 0.0, safe, fallback)
            return r * direction
        half = np.asarray(self.params)
        clamped = np.clip(points, -half, half)
        inside = np.all(np.abs(points) < half, axis=-1)
        if np.any(inside):
            clamped = clamped.copy()
            idx = np.nonzero(inside)[0] if clamped.ndim == 2 else None
            pts_in = points[inside]
            gap = half - np.abs(pts_in)  # distance to each face pair
            axis = np.argmin(gap, axis=-1)
            proj = pts_in.copy()
            rows = np.arange(proj.shape[0])
            proj[rows, axis] = np.sign(proj[rows, axis] + 1e-300) * half[axis]
            clamped[inside] = proj
        return clamped

    def surface_points(self, count: int = 512, seed: int = 0) -> np.ndarray:
        """Deterministic sample of points lying exactly on the surface."""
        if count < 1:
            raise ValueError("need at least one surface point")
        if self.kind == "sphere":
            # Fibonacci lattice on the sphere.
            r = self.params[0]
            k = np.arange(count, dtype=np.float64)
            phi = np.pi * (3.0 - np.sqrt(5.0)) * k
            z = 1.0 - 2.0 * (k + 0.5) / count
            rho = np.sqrt(1.0 - z * z)
            return r * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        half = np.asarray(self.params)
        areas = np.array(
            [half[1] * half[2], half[0] * half[2], half[0] * half[1]], dtype=np.float64
        )
        rng = rng_for(seed, "box-surface")
        faces = rng.choice(6, size=count, p=np.repeat(areas, 2) / (2.0 * areas.sum()))
        uv = rng.uniform(-1.0, 1.0, size=(count, 2))
        pts = np.zeros((count, 3))
        for face in range(6):
            sel = faces == face
            axis, sign = face // 2, 1.0 if face % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[sel, axis] = sign * half[axis]
            pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
            pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
        return pts


@dataclass(frozen=True)
class BasisPointSet:
    """Fixed random points inside a radius-1 m sphere."""

    points: np.ndarray
    seed: int

    @classmethod
    def create(cls, seed: int = 0, count: int = BPS_POINTS, radius: float = BPS_RADIUS):
        rng = rng_for(seed, "bps")
        direction = rng.standard_normal((count, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / 3.0)
        return cls(points=direction * r, seed=seed)


def bps_encode(shape: ShapePrimitive, bps: BasisPointSet) -> np.ndarray:
    """Delta from each basis point to its nearest point on the surface."""
    nearest = shape.nearest_surface_point(bps.points)
    return nearest - bps.points


# ---------------------------------------------------------------------------
# Hand surface sampling (desk-scale stand-in for a hand mesh)
# ---------------------------------------------------------------------------

def skeleton_surface_points(
    joints: np.ndarray,
    parents: Sequence[int],
    radius: float = 0.008,
    per_bone: int = 4,
    angles: int = 6,
) -> np.ndarray:
    """Capsule-surface samples along every bone, shape (N, P, 3).

    Deterministic: sample rings around each bone axis at evenly spaced
    stations, using a fixed perpendicular frame per bone and frame.
    """
    joints = np.asarray(joints, dtype=np.float64)
    n, d, _ = joints.shape
    bones = [(j, parents[j]) for j in range(1, d)]
    if not bones:
        return joints.copy()
    stations = np.linspace(0.0, 1.0, per_bone)
    thetas = np.linspace(0.0, 2.0 * np.pi, angles, endpoint=False)
    out = []
    for child, parent in bones:
        a, b = joints[:, parent], joints[:, child]
        axis = b - a
        norm = np.linalg.norm(axis, axis=1, keepdims=True)
        axis_hat = np.where(norm > 1e-12, axis / np.maximum(norm, 1e-300), [[1.0, 0.0, 0.0]])
        ref = np.where(np.abs(axis_hat[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        e1 = np.cross(axis_hat, ref)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(axis_hat, e1)
        for s in stations:
            center = a + s * axis
            for th in thetas:
                out.append(center + radius * (np.cos(th) * e1 + np.sin(th) * e2))
    return np.stack(out, axis=1)


# ---------------------------------------------------------------------------
# Contact masks and ratios
# ---------------------------------------------------------------------------

def _points_to_local(traj: RigidTrajectory, points: np.ndarray) -> np.ndarray:
    """World points (N, P, 3) into the moving shape's local frame."""
    q_inv = quat_conj(traj.orientation)[:, None, :]
    return quat_rotate(q_inv, points - traj.translation[:, None, :])


def surface_distances(traj: RigidTrajectory, shape: ShapePrimitive, points: np.ndarray) -> np.ndarray:
    """Per-frame min unsigned distance from the points to the object surface."""
    local = _points_to_local(traj, points)
    return np.abs(shape.signed_distance(local)).min(axis=1)


def contact_surface(
    traj: RigidTrajectory, shape: ShapePrimitive, hand_points: np.ndarray
) -> np.ndarray:
    """Per-frame surface-contact bits (min distance within 5 mm)."""
    hand_points = np.asarray(hand_points, dtype=np.float64)
    if hand_points.shape[0] != traj.n_frames:
        raise ValueError("frame-count mismatch between object and hand points")
    return (surface_distances(traj, shape, hand_points) <= SURFACE_CONTACT_DIST).astype(np.uint8)


def contact_root(traj: RigidTrajectory, shape: ShapePrimitive, roots: np.ndarray) -> np.ndarray:
    """Per-frame root-contact bits: both roots within 3 cm (max rule)."""
    roots = np.asarray(roots, dtype=np.float64)
    if roots.shape[0] != traj.n_frames or roots.shape[1] != 2:
        raise ValueError("roots must have shape (N, 2, 3) matching the object frames")
    local = _points_to_local(traj, roots)
    d = np.abs(shape.signed_distance(local))
    return (d.max(axis=1) <= ROOT_CONTACT_DIST).astype(np.uint8)


def _or_over_objects(masks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros_like(np.asarray(masks[0]))
    for m in masks:
        out |= np.asarray(m, dtype=np.uint8)
    return out


def contact_ratio(per_hand_masks: Sequence[np.ndarray]) -> float:
    """Mean contact-frame fraction over hands (each mask already OR-ed)."""
    if not len(per_hand_masks):
        raise ValueError("need at least one hand mask")
    return float(np.mean([np.mean(m) for m in per_hand_masks]))


def csr(
    objects: Sequence[Tuple[RigidTrajectory, ShapePrimitive]],
    hands_points: Sequence[np.ndarray],
) -> float:
    """Contact surface ratio: per hand OR over objects, mean frames, mean hands."""
    masks = [
        _or_over_objects([contact_surface(traj, shape, pts) for traj, shape in objects])
        for pts in hands_points
    ]
    return contact_ratio(masks)


def crr(
    objects: Sequence[Tuple[RigidTrajectory, ShapePrimitive]],
    humans_roots: Sequence[np.ndarray],
) -> float:
    """Contact root ratio, same aggregation as csr with the 3 cm both-root rule."""
    masks = [
        _or_over_objects([contact_root(traj, shape, roots) for traj, shape in objects])
        for roots in humans_roots
    ]
    return contact_ratio(masks)


def mask_iou(c1: np.ndarray, c2: np.ndarray) -> float:
    """IoU of two contact masks; two all-zero masks agree, so IoU is 1."""
    c1 = np.asarray(c1, dtype=bool)
    c2 = np.asarray(c2, dtype=bool)
    if c1.shape != c2.shape:
        raise ValueError("contact masks must share a shape")
    union = np.sum(c1 | c2)
    if union == 0:
        return 1.0
    return float(np.sum(c1 & c2) / union)


def csiou(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """Mean per-hand IoU between predicted and ground-truth contact masks."""
    if len(pred_masks) != len(gt_masks) or not len(pred_masks):
        raise ValueError("need matching, non-empty mask lists")
    return float(np.mean([mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


# ---------------------------------------------------------------------------
# Interpenetration
# ---------------------------------------------------------------------------

def _world_aabb(traj: RigidTrajectory, shape: ShapePrimitive, frame: int) -> Tuple[np.ndarray, np.ndarray]:
    c = traj.translation[frame]
    r = shape.bounding_radius
    return c - r, c + r

def _frame_interpenetration(
    a: Tuple[RigidTrajectory, ShapePrimitive],
    b: Tuple[RigidTrajectory, ShapePrimitive],
    frame: int,
    voxel: float,
    chunk: int = 262144,
) -> Tuple[float, float]:
    lo_a, hi_a = _world_aabb(a[0], a[1], frame)
    lo_b, hi_b = _world_aabb(b[0], b[1], frame)
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        return 0.0, 0.0
    counts = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
    axes = [lo[k] + voxel * (np.arange(counts[k]) + 0.5) for k in range(3)]
    ta, qa_inv = a[0].translation[frame], quat_conj(a[0].orientation[frame])
    tb, qb_inv = b[0].translation[frame], quat_conj(b[0].orientation[frame])

    volume = 0.0
    depth = 0.0
    # Slab over z to bound memory on fine grids.
    xy = np.stack(np.meshgrid(axes[0], axes[1], indexing="ij"), axis=-1).reshape(-1, 2)
    slab = max(1, chunk // max(xy.shape[0], 1))
    for z0 in range(0, counts[2], slab):
        zs = axes[2][z0 : z0 + slab]
        pts = np.concatenate(
            [
                np.repeat(xy, len(zs), axis=0),
                np.tile(zs, xy.shape[0])[:, None],
            ],
            axis=1,
        )
        sd_a = a[1].signed_distance(quat_rotate(qa_inv, pts - ta))
        sd_b = b[1].signed_distance(quat_rotate(qb_inv, pts - tb))
        overlap = (sd_a < 0.0) & (sd_b < 0.0)
        volume += float(np.count_nonzero(overlap)) * voxel**3
        if np.any(overlap):
            depth = max(depth, float(np.minimum(-sd_a[overlap], -sd_b[overlap]).max()))
    return volume, depth


def interpenetration(
    a: Tuple[RigidTrajectory, ShapePrimitive],
    b: Tuple[RigidTrajectory, ShapePrimitive],
    voxel: float = 0.005,
) -> Tuple[float, float]:
    """(IV, ID) over a trajectory pair: mean overlap volume in cm^3 across
    frames and maximum penetration depth in mm."""
    if voxel <= 0.0:
        raise ValueError("voxel size must be positive")
    if a[0].n_frames != b[0].n_frames:
        raise ValueError("trajectories must share the frame count")
    vols, depths = [], []
    for frame in range(a[0].n_frames):
        v, d = _frame_interpenetration(a, b, frame, voxel)
        vols.append(v)
        depths.append(d)
    return float(np.mean(vols) * 1e6), float(np.max(depths) * 1e3)


# ---------------------------------------------------------------------------
# Diversity and alignment residual
# ---------------------------------------------------------------------------

def _traj_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-frame Euclidean distance between two point trajectories."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("trajectories must share a shape")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def _mean_pairwise(trajs: Sequence[np.ndarray]) -> float:
    k = len(trajs)
    if k < 2:
        raise ValueError("diversity needs at least two trajectories")
    dists = [
        _traj_distance(trajs[i], trajs[j]) for i in range(k) for j in range(i + 1, k)
    ]
    return float(np.mean(dists))


def diversity(groups: Sequence[Sequence[np.ndarray]]) -> Tuple[float, float]:
    """(SD, OD): mean within-group pairwise distance, and pooled pairwise
    distance over every trajectory; a flat list is treated as one group."""
    if len(groups) and isinstance(groups[0], np.ndarray):
        groups = [list(groups)]
    if not groups:
        raise ValueError("diversity needs at least one group")
    sd = float(np.mean([_mean_pairwise(g) for g in groups]))
    pooled = [t for g in groups for t in g]
    od = _mean_pairwise(pooled)
    return sd, od


def alignment_residual(state: HighOrderState, normalize: bool = True) -> float:
    """Mean per-frame L2 gap between stored relative blocks and rel() of the
    generated individuals; 0 for internally consistent states."""
    lay = state.layout
    expected = relative_from_individuals(state.data, lay, normalize)
    if not expected:
        return 0.0
    total = 0.0
    for name, want in expected.items():
        diff = state.block(name) - want
        total += float(np.mean(np.linalg.norm(diff, axis=1)))
    return total / len(expected)
