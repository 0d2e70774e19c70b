"""Generic forward-kinematics chains and fitting them to target joints.

A chain is a topologically sorted joint tree (parent index < child index,
joint 0 is the root).  Every non-root joint carries a fixed offset in its
parent's frame and three rotational degrees of freedom applied intrinsically
in X, Y, Z order.  The root pose is a free per-frame rigid transform.

Fitting minimizes

    lambda_pos * sum ||K - target||^2
  + lambda_angle * sum [max(theta - upper, 0) + max(lower - theta, 0)]
  + lambda_vel * sum ||root_t - root_{t+1}||^2

by gradient descent with a backtracking line search (accepted steps never
increase the loss).  Joint-angle gradients use the geometric jacobian; the
root orientation is updated multiplicatively on the rotation group from a
world-frame gradient, which keeps it exactly unit-norm throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .kinematics import quat_from_axis_angle, quat_mul, quat_rotate
from .seeding import rng_for

_AXES = np.eye(3)


@dataclass(frozen=True)
class FKChain:
    """Joint tree with per-joint offsets and per-DoF angle limits."""

    parents: np.ndarray  # (D,) parent index per joint; parents[0] == -1
    offsets: np.ndarray  # (D, 3) offset in the parent frame, meters
    lower: np.ndarray  # (3(D-1),) per-DoF lower angle limits, radians
    upper: np.ndarray  # (3(D-1),) per-DoF upper angle limits, radians

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=np.float64))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=np.float64))
        d = parents.shape[0]
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.any(parents[1:] >= np.arange(1, d)) or np.any(parents[1:] < 0):
            raise ValueError("parents must form a topologically sorted tree")
        if self.offsets.shape != (d, 3):
            raise ValueError("offsets must have shape (D, 3)")
        if self.lower.shape != (3 * (d - 1),) or self.upper.shape != (3 * (d - 1),):
            raise ValueError("limits must have one entry per degree of freedom")
        if np.any(self.lower > self.upper):
            raise ValueError("lower limits must not exceed upper limits")

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_dof(self) -> int:
        return 3 * (self.n_joints - 1)


def make_hand_chain(finger_joints: int = 4, fingers: int = 5) -> FKChain:
    """A wrist root plus ``fingers`` serial digits; 21 joints by default."""
    parents = [-1]
    offsets = [np.zeros(3)]
    for f in range(fingers):
        base_dir = np.array(
            [0.25 * (f - (fingers - 1) / 2.0), 1.0, 0.0]
        )
        base_dir /= np.linalg.norm(base_dir)
        prev = 0
        for k in range(finger_joints):
            parents.append(prev)
            length = 0.04 if k == 0 else 0.025
            offsets.append(base_dir * length)
            prev = len(parents) - 1
    d = len(parents)
    lower = np.full(3 * (d - 1), -1.2)
    upper = np.full(3 * (d - 1), 1.2)
    return FKChain(np.array(parents), np.array(offsets), lower, upper)


def make_serial_chain(n_joints: int, segment: float = 0.06) -> FKChain:
    """A straight serial chain of ``n_joints`` joints along +y."""
    parents = np.concatenate([[-1], np.arange(n_joints - 1)])
    offsets = np.tile(np.array([0.0, segment, 0.0]), (n_joints, 1))
    offsets[0] = 0.0
    lower = np.full(3 * (n_joints - 1), -1.2)
    upper = np.full(3 * (n_joints - 1), 1.2)
    return FKChain(parents, offsets, lower, upper)


def make_random_chain(n_joints: int, seed: int) -> FKChain:
    """A seeded random tree with 3-8 cm segments and +-1.2 rad limits."""
    rng = rng_for(seed, "fk-chain")
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, n_joints)]
    offsets = np.zeros((n_joints, 3))
    for j in range(1, n_joints):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        offsets[j] = direction * rng.uniform(0.03, 0.08)
    lower = np.full(3 * (n_joints - 1), -1.2)
    upper = np.full(3 * (n_joints - 1), 1.2)
    return FKChain(np.array(parents), offsets, lower, upper)


def chain_for_joint_count(d: int, seed: int = 0) -> FKChain:
    """Hand topology for 21 joints, otherwise a seeded random tree."""
    if d == 21:
        return make_hand_chain()
    if d == 1:
        return FKChain(np.array([-1]), np.zeros((1, 3)), np.zeros(0), np.zeros(0))
    return make_random_chain(d, seed)


def _local_rotations(angles_frame: np.ndarray) -> np.ndarray:
    """Per-joint local quaternion from intrinsic XYZ angles, shape (D-1, 4)."""
    qx = quat_from_axis_angle(_AXES[0], angles_frame[:, 0])
    qy = quat_from_axis_angle(_AXES[1], angles_frame[:, 1])
    qz = quat_from_axis_angle(_AXES[2], angles_frame[:, 2])
    return quat_mul(quat_mul(qx, qy), qz)


def forward_kinematics(
    chain: FKChain,
    angles: np.ndarray,
    root_rot: np.ndarray,
    root_t: np.ndarray,
) -> np.ndarray:
    """Joint positions (N, D, 3) from angles (N, dof), root quats and offsets."""
    d = chain.n_joints
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, d - 1, 3)
    root_rot = np.asarray(root_rot, dtype=np.float64)
    root_t = np.asarray(root_t, dtype=np.float64)
    n = angles.shape[0] if d > 1 else root_t.shape[0]
    pos = np.zeros((n, d, 3))
    rot = np.zeros((n, d, 4))
    pos[:, 0] = root_t
    rot[:, 0] = root_rot
    for j in range(1, d):
        p = chain.parents[j]
        local = _local_rotations(angles[:, j - 1 : j].reshape(n, 1, 3)).reshape(n, 4)
        pos[:, j] = pos[:, p] + quat_rotate(rot[:, p], np.broadcast_to(chain.offsets[j], (n, 3)))
        rot[:, j] = quat_mul(rot[:, p], local)
    return pos


def _fk_with_grads(
    chain: FKChain, angles: np.ndarray, root_rot: np.ndarray, root_t: np.ndarray, residual: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(residual * K) w.r.t. angles, root rotation (world
    increment), and root translation, where K = forward_kinematics(...).

    Uses the geometric jacobian: a DoF's world axis crosses the lever arm to
    every descendant joint.
    """
    n = angles.shape[0]
    d = chain.n_joints
    pos = np.zeros((n, d, 3))
    rot = np.zeros((n, d, 4))
    pos[:, 0] = root_t
    rot[:, 0] = root_rot

    # World axes of each joint's three DoF, gathered during the forward pass.
    axes = np.zeros((n, d - 1, 3, 3))
    for j in range(1, d):
        p = chain.parents[j]
        a = angles[:, j - 1]
        qx = quat_from_axis_angle(_AXES[0], a[:, 0])
        qy = quat_from_axis_angle(_AXES[1], a[:, 1])
        qz = quat_from_axis_angle(_AXES[2], a[:, 2])
        local = quat_mul(quat_mul(qx, qy), qz)
        parent_rot = rot[:, p]
        axes[:, j - 1, 0] = quat_rotate(parent_rot, np.broadcast_to(_AXES[0], (n, 3)))
        axes[:, j - 1, 1] = quat_rotate(quat_mul(parent_rot, qx), np.broadcast_to(_AXES[1], (n, 3)))
        axes[:, j - 1, 2] = quat_rotate(
            quat_mul(parent_rot, quat_mul(qx, qy)), np.broadcast_to(_AXES[2], (n, 3))
        )
        pos[:, j] = pos[:, p] + quat_rotate(parent_rot, np.broadcast_to(chain.offsets[j], (n, 3)))
        rot[:, j] = quat_mul(parent_rot, local)

    g_angles = np.zeros_like(angles)
    g_root_t = residual.sum(axis=1)
    # Root orientation: world-frame rotational increment gradient.
    lever_root = pos - root_t[:, None, :]
    g_omega = np.cross(lever_root, residual).sum(axis=1)

    # Descendant masks: DoF of joint j moves exactly the subtree rooted at j.
    subtree = np.zeros((d, d), dtype=bool)
    for j in range(d - 1, 0, -1):
        subtree[j, j] = True
        children = np.nonzero(chain.parents == j)[0]
        for c in children:
            subtree[j] |= subtree[c]
    for j in range(1, d):
        members = np.nonzero(subtree[j])[0]
        lever = pos[:, members] - pos[:, j : j + 1]
        moment = np.cross(
            axes[:, j - 1, :, None, :], lever[:, None, :, :]
        )  # (n, 3 dof, |sub|, 3)
        g_angles[:, j - 1] = np.einsum("nkms,nms->nk", moment, residual[:, members])
    return g_angles, g_omega, g_root_t


@dataclass(frozen=True)
class FitConfig:
    lambda_pos: float = 1.0
    lambda_angle: float = 0.2
    lambda_vel: float = 0.03
    iterations: int = 5000
    step_size: float = 0.1

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_angle, self.lambda_vel) < 0.0:
            raise ValueError("fit weights must be nonnegative")


@dataclass
class FitResult:
    angles: np.ndarray  # (N, D-1, 3)
    root_rot: np.ndarray  # (N, 4)
    root_t: np.ndarray  # (N, 3)
    loss: float
    loss_pos: float
    loss_angle: float
    loss_vel: float
    joints: np.ndarray  # (N, D, 3) fitted joint positions
    iterations_run: int


def angle_limit_penalty(angles_flat: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    """Linear hinge sum: max(theta - upper, 0) + max(lower - theta, 0)."""
    over = np.maximum(angles_flat - upper, 0.0)
    under = np.maximum(lower - angles_flat, 0.0)
    return float(np.sum(over + under))


def _fit_losses(chain, cfg, angles, root_rot, root_t, target):
    joints = forward_kinematics(chain, angles, root_rot, root_t)
    l_pos = float(np.sum((joints - target) ** 2))
    flat = angles.reshape(angles.shape[0], -1)
    l_angle = sum(angle_limit_penalty(flat[f], chain.lower, chain.upper) for f in range(flat.shape[0]))
    l_vel = float(np.sum((root_t[:-1] - root_t[1:]) ** 2))
    total = cfg.lambda_pos * l_pos + cfg.lambda_angle * l_angle + cfg.lambda_vel * l_vel
    return total, l_pos, l_angle, l_vel, joints


def fit_chain(
    target: np.ndarray,
    chain: FKChain,
    cfg: FitConfig = FitConfig(),
    frozen_angles: Optional[np.ndarray] = None,
) -> FitResult:
    """Fit chain parameters to target joint positions (N, D, 3).

    Parameters start at zero (rest pose at the origin).  When
    ``frozen_angles`` is given the joint angles stay fixed at it and only the
    root trajectory is optimized.
    """
    target = np.asarray(target, dtype=np.float64)
    n, d, _ = target.shape
    if d != chain.n_joints:
        raise ValueError(f"target has {d} joints, chain has {chain.n_joints}")
    if frozen_angles is not None:
        angles = np.asarray(frozen_angles, dtype=np.float64).reshape(n, d - 1, 3).copy()
    else:
        angles = np.zeros((n, max(d - 1, 0), 3))
    root_rot = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    root_t = np.zeros((n, 3))

    loss, l_pos, l_angle, l_vel, joints = _fit_losses(chain, cfg, angles, root_rot, root_t, target)
    step = cfg.step_size
    iters = 0
    for iters in range(1, cfg.iterations + 1):
        residual = 2.0 * cfg.lambda_pos * (joints - target)
        g_angles, g_omega, g_root_t = _fk_with_grads(chain, angles, root_rot, root_t, residual)
        if frozen_angles is None and d > 1:
            flat = angles.reshape(n, -1)
            hinge = cfg.lambda_angle * (
                (flat > chain.upper).astype(np.float64) - (flat < chain.lower).astype(np.float64)
            )
            g_angles = g_angles + hinge.reshape(n, d - 1, 3)
        else:
            g_angles = np.zeros_like(angles)
        dvel = np.zeros_like(root_t)
        diff = root_t[:-1] - root_t[1:]
        dvel[:-1] += 2.0 * cfg.lambda_vel * diff
        dvel[1:] -= 2.0 * cfg.lambda_vel * diff
        g_root_t = g_root_t + dvel

        # Backtracking on the total loss; accepted steps never increase it.
        accepted = False
        while step > 1e-12:
            new_angles = angles - step * g_angles
            new_root_t = root_t - step * g_root_t
            delta = -step * g_omega
            dq = quat_from_axis_angle(
                np.where(
                    np.linalg.norm(delta, axis=1, keepdims=True) > 0.0,
                    delta,
                    np.array([1.0, 0.0, 0.0]),
                ),
                np.linalg.norm(delta, axis=1),
            )
            new_root_rot = quat_mul(dq, root_rot)
            new = _fit_losses(chain, cfg, new_angles, new_root_rot, new_root_t, target)
            if new[0] <= loss:
                angles, root_rot, root_t = new_angles, new_root_rot, new_root_t
                loss, l_pos, l_angle, l_vel, joints = new
                step *= 1.2
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if not np.isfinite(loss):
            raise FloatingPointError("fit diverged to a non-finite loss")
    return FitResult(
        angles=angles,
        root_rot=root_rot,
        root_t=root_t,
        loss=loss,
        loss_pos=l_pos,
        loss_angle=l_angle,
        loss_vel=l_vel,
        joints=joints,
        iterations_run=iters,
    )
