"""Synthetic multi-body scenes with exactly consistent relative blocks.

Families
--------
- ``carry``: the lead rigid follows a smooth low-frequency path; every other
  body (rigids and skeletons) is rigidly attached to it, so all relative
  blocks are constant over time.
- ``rub``: two rigids with a zero-mean sinusoidal relative translation at an
  integer frequency index in [5, 10], putting the relative translation
  entirely in the mid (ac) band; skeletons ride on the lead rigid.
- ``handoff``: a rigid smoothly switches attachment from one skeleton's end
  joint to another's around mid-sequence.

Every state is built with assemble_state, so relative blocks equal rel() of
the individuals exactly and the alignment penalty of generated data is zero.

Datasets are serialized to a small container: 8-byte magic, a version word,
a JSON manifest (specs, layout, real frame counts), then raw little-endian
float64 state blocks.  A JSONL export (one frame per line) is provided for
external plotting.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .denoiser import SceneConditioning
from .geometry_metrics import BasisPointSet, ShapePrimitive, bps_encode
from .kinematics import (
    HighOrderState,
    RigidTrajectory,
    SkeletonTrajectory,
    StateLayout,
    assemble_state,
    quat_canonical,
    quat_from_axis_angle,
    quat_mul,
    quat_rotate,
)
from .seeding import rng_for
from .skeleton_fit import chain_for_joint_count, forward_kinematics

DATASET_MAGIC = b"MOSYNCDS"
DATASET_VERSION = 1

FAMILIES = ("carry", "rub", "handoff")
ACTION_IDS = {"carry": 0, "rub": 1, "handoff": 2}


class DatasetFormatError(ValueError):
    """Raised for unreadable or version-mismatched dataset files."""


@dataclass
class SceneSpec:
    """Everything needed to regenerate one scene deterministically."""

    family: str
    seed: int
    m: int = 2
    n: int = 1
    d_joints: int = 21
    n_frames: int = 64
    action_id: int = -1
    object_label_ids: Optional[List[int]] = None
    geometry: Optional[List[ShapePrimitive]] = None
    shape_params: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown scene family {self.family!r}")
        if self.m < 1:
            raise ValueError("scenes need at least one rigid body")
        if self.family == "rub" and self.m < 2:
            raise ValueError("rub scenes need two rigid bodies")
        if self.family == "handoff" and self.n < 2:
            raise ValueError("handoff scenes need two skeletons")
        if self.action_id < 0:
            self.action_id = ACTION_IDS[self.family]
        rng = rng_for(self.seed, "scene-spec", self.family)
        if self.object_label_ids is None:
            self.object_label_ids = [int(v) for v in rng.integers(0, 16, size=self.m)]
        if self.geometry is None:
            self.geometry = []
            for _ in range(self.m):
                if rng.uniform() < 0.5:
                    self.geometry.append(ShapePrimitive("sphere", (float(rng.uniform(0.04, 0.1)),)))
                else:
                    self.geometry.append(
                        ShapePrimitive("box", tuple(rng.uniform(0.03, 0.08, size=3)))
                    )
        if self.shape_params is None:
            self.shape_params = rng.standard_normal((self.n, 10))
        self.shape_params = np.asarray(self.shape_params, dtype=np.float64)

    @property
    def layout(self) -> StateLayout:
        return StateLayout(m=self.m, n=self.n, d_joints=self.d_joints)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "seed": self.seed,
            "m": self.m,
            "n": self.n,
            "d_joints": self.d_joints,
            "n_frames": self.n_frames,
            "action_id": self.action_id,
            "object_label_ids": list(self.object_label_ids),
            "geometry": [[s.kind, list(s.params)] for s in self.geometry],
            "shape_params": self.shape_params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            family=d["family"],
            seed=d["seed"],
            m=d["m"],
            n=d["n"],
            d_joints=d["d_joints"],
            n_frames=d["n_frames"],
            action_id=d["action_id"],
            object_label_ids=list(d["object_label_ids"]),
            geometry=[ShapePrimitive(kind, tuple(params)) for kind, params in d["geometry"]],
            shape_params=np.asarray(d["shape_params"], dtype=np.float64),
        )


@dataclass
class Scene:
    state: HighOrderState
    spec: SceneSpec
    shapes: List[ShapePrimitive]


def _smooth_series(rng: np.random.Generator, n: int, scale: float, channels: int = 1) -> np.ndarray:
    """Low-frequency series (indices 0..2 only), shape (n, channels)."""
    u = np.arange(n)[:, None]
    out = rng.uniform(-scale, scale, size=(1, channels)).repeat(n, axis=0)
    for k in (1, 2):
        amp_c = rng.uniform(-scale, scale, size=channels)
        amp_s = rng.uniform(-scale, scale, size=channels)
        phase = 2.0 * np.pi * k * u / n
        out = out + amp_c * np.cos(phase) + amp_s * np.sin(phase)
    return out


def _spline_pose(rng: np.random.Generator, n: int) -> RigidTrajectory:
    """Smooth random rigid trajectory: dc-band translation, slow rotation.

    Rotation angles stay below pi so the source curve keeps w > 0 throughout.
    """
    t = _smooth_series(rng, n, 0.3, 3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = _smooth_series(rng, n, 0.5, 1)[:, 0]
    q = quat_from_axis_angle(np.broadcast_to(axis, (n, 3)), angle)
    return RigidTrajectory(t, q)


def _random_unit_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    return quat_canonical(q / np.linalg.norm(q))


def _attach_rigid(base: RigidTrajectory, t_off: np.ndarray, q_off: np.ndarray) -> RigidTrajectory:
    n = base.n_frames
    t = quat_rotate(base.orientation, np.broadcast_to(t_off, (n, 3))) + base.translation
    q = quat_canonical(quat_mul(base.orientation, np.broadcast_to(q_off, (n, 4))))
    return RigidTrajectory(t, q)


def _attached_skeleton(
    base: RigidTrajectory, local_joints: np.ndarray
) -> SkeletonTrajectory:
    """Skeleton with a constant pose in the base rigid's frame."""
    n = base.n_frames
    p = quat_rotate(base.orientation[:, None, :], np.broadcast_to(local_joints, (n,) + local_joints.shape))
    return SkeletonTrajectory(p + base.translation[:, None, :])


def _rest_pose(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """One within-limit FK pose of the scene's chain, shape (D, 3)."""
    chain = chain_for_joint_count(spec.d_joints, spec.seed)
    angles = rng.uniform(-0.5, 0.5, size=(1, max(spec.d_joints - 1, 0), 3))
    root_rot = _random_unit_quat(rng)[None, :]
    joints = forward_kinematics(chain, angles, root_rot, np.zeros((1, 3)))
    return joints[0]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def gen_scene(spec: SceneSpec, family: Optional[str] = None) -> Scene:
    """Generate one scene; pure function of (spec, family)."""
    family = family or spec.family
    if family not in FAMILIES:
        raise ValueError(f"unknown scene family {family!r}")
    n = spec.n_frames
    rng = rng_for(spec.seed, "scene", family)

    if family in ("carry", "rub"):
        lead = _spline_pose(rng, n)
        rigids = [lead]
        if family == "rub":
            freq_index = int(rng.integers(5, 11))
            amplitude = rng.uniform(0.05, 0.15)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            u = np.arange(n)
            t_rel = amplitude * np.sin(2.0 * np.pi * freq_index * u / n + phase)[:, None] * direction
            q_off = _random_unit_quat(rng)
            t = quat_rotate(lead.orientation, t_rel) + lead.translation
            q = quat_canonical(quat_mul(lead.orientation, np.broadcast_to(q_off, (n, 4))))
            rigids.append(RigidTrajectory(t, q))
        for _ in range(len(rigids), spec.m):
            rigids.append(
                _attach_rigid(lead, rng.uniform(-0.2, 0.2, size=3), _random_unit_quat(rng))
            )
        skeletons = []
        for _ in range(spec.n):
            local = _rest_pose(spec, rng) + rng.uniform(-0.25, 0.25, size=3)
            skeletons.append(_attached_skeleton(lead, local))
    else:  # handoff
        chain = chain_for_joint_count(spec.d_joints, spec.seed)
        skeletons = []
        end_joints = []
        for _ in range(spec.n):
            root = _spline_pose(rng, n)
            angles = np.broadcast_to(
                rng.uniform(-0.5, 0.5, size=(1, max(spec.d_joints - 1, 0), 3)),
                (n, max(spec.d_joints - 1, 0), 3),
            )
            joints = forward_kinematics(chain, angles, root.orientation, root.translation)
            skeletons.append(SkeletonTrajectory(joints))
            end_joints.append(joints[:, -1])
        blend_half = max(n // 8, 1)
        u = np.arange(n)
        w = _smoothstep((u - (n / 2 - blend_half)) / (2.0 * blend_half))[:, None]
        off1 = rng.uniform(-0.1, 0.1, size=3)
        off2 = rng.uniform(-0.1, 0.1, size=3)
        t_lead = (1.0 - w) * (end_joints[0] + off1) + w * (end_joints[1] + off2)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = _smooth_series(rng, n, 0.5, 1)[:, 0]
        lead = RigidTrajectory(
            t_lead, quat_from_axis_angle(np.broadcast_to(axis, (n, 3)), angle)
        )
        rigids = [lead]
        for _ in range(1, spec.m):
            rigids.append(
                _attach_rigid(lead, rng.uniform(-0.2, 0.2, size=3), _random_unit_quat(rng))
            )

    state = assemble_state(rigids, skeletons)
    return Scene(state=state, spec=spec, shapes=list(spec.geometry))


# ---------------------------------------------------------------------------
# Dataset: padding, masks, serialization
# ---------------------------------------------------------------------------

@dataclass
class DatasetItem:
    state: HighOrderState  # padded to n_max
    spec: SceneSpec
    mask: np.ndarray  # (n_max,) 1.0 exactly on real frames


@dataclass
class Dataset:
    items: List[DatasetItem]
    n_max: int


def pad_and_mask(
    states: Sequence[HighOrderState],
    n_max: int,
    specs: Optional[Sequence[SceneSpec]] = None,
) -> Dataset:
    """Zero-pad states to n_max frames; mask bit 1 exactly on real frames."""
    items = []
    for idx, st in enumerate(states):
        if st.n_frames > n_max:
            raise ValueError(f"state {idx} has {st.n_frames} frames > n_max = {n_max}")
        data = np.zeros((n_max, st.layout.d_sum))
        data[: st.n_frames] = st.data
        mask = np.zeros(n_max)
        mask[: st.n_frames] = 1.0
        spec = specs[idx] if specs is not None else None
        items.append(DatasetItem(HighOrderState(data, st.layout), spec, mask))
    return Dataset(items=items, n_max=n_max)


def unpad(item: DatasetItem) -> HighOrderState:
    nr = int(round(float(item.mask.sum())))
    return HighOrderState(item.state.data[:nr].copy(), item.state.layout)


def gen_dataset(specs: Sequence[SceneSpec], n_max: Optional[int] = None) -> Tuple[Dataset, List[Scene]]:
    scenes = [gen_scene(spec) for spec in specs]
    n_max = n_max or max(s.state.n_frames for s in scenes)
    ds = pad_and_mask([s.state for s in scenes], n_max, [s.spec for s in scenes])
    return ds, scenes


def save_dataset(ds: Dataset, path) -> None:
    manifest = {
        "n_max": ds.n_max,
        "items": [
            {
                "spec": item.spec.to_dict() if item.spec is not None else None,
                "layout": {
                    "m": item.state.layout.m,
                    "n": item.state.layout.n,
                    "d_joints": item.state.layout.d_joints,
                },
                "n_real": int(round(float(item.mask.sum()))),
            }
            for item in ds.items
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for item in ds.items:
            f.write(np.ascontiguousarray(item.state.data, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise DatasetFormatError("not a dataset file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen).decode("utf-8"))
        items = []
        n_max = manifest["n_max"]
        for meta in manifest["items"]:
            layout = StateLayout(**meta["layout"])
            count = n_max * layout.d_sum
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise DatasetFormatError("truncated dataset file")
            data = np.frombuffer(buf, dtype="<f8").reshape(n_max, layout.d_sum).astype(np.float64)
            mask = np.zeros(n_max)
            mask[: meta["n_real"]] = 1.0
            spec = SceneSpec.from_dict(meta["spec"]) if meta["spec"] is not None else None
            items.append(DatasetItem(HighOrderState(data, layout), spec, mask))
    return Dataset(items=items, n_max=n_max)


def export_jsonl(state: HighOrderState, path) -> None:
    """One JSON object per frame keyed by block name, for external plotting."""
    lay = state.layout
    with open(path, "w") as f:
        for u in range(state.n_frames):
            row = {"frame": u}
            for name, sl in lay.blocks.items():
                row[name] = state.data[u, sl].tolist()
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Conditioning glue for training/sampling
# ---------------------------------------------------------------------------

def conditioning_for_spec(spec: SceneSpec, bps: BasisPointSet) -> SceneConditioning:
    feats = np.stack([bps_encode(shape, bps) for shape in spec.geometry])
    return SceneConditioning(
        action_id=spec.action_id,
        object_label_ids=np.asarray(spec.object_label_ids, dtype=int),
        bps_features=feats,
        shape_params=spec.shape_params,
    )
