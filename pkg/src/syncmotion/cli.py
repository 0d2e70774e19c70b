"""Batch command-line front door.

Commands: gen-data, train, sample, eval, decompose, sync-bench, rerun.  Every
command reads a flat key=value config file plus --set overrides, writes its
outputs under --out, and drops a manifest.json (command, full config, config
hash, input digests) from which `rerun` reproduces the outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .denoiser import (
    DenoiserConfig,
    TrainItem,
    TrainSettings,
    init_params,
    load_checkpoint,
    make_network_predictor,
    save_checkpoint,
    train,
)
from .diffusion import LossWeights, make_schedule
from .freq import band_signal, analyze
from .geometry_metrics import (
    BasisPointSet,
    alignment_residual,
    contact_ratio,
    contact_root,
    contact_surface,
    csiou,
    diversity,
    interpenetration,
    mask_iou,
    skeleton_surface_points,
    _or_over_objects,
)
from .kinematics import HighOrderState, quat_canonical
from .scenes import (
    Dataset,
    DatasetItem,
    SceneSpec,
    conditioning_for_spec,
    export_jsonl,
    gen_dataset,
    load_dataset,
    pad_and_mask,
    save_dataset,
    unpad,
)
from .seeding import rng_for
from .skeleton_fit import chain_for_joint_count
from .sync import SyncConfig, sample_with_info

# Frozen digest of the default configuration; the acceptance suite checks it.
DEFAULT_CONFIG_HASH = "__DEFAULT_CONFIG_HASH__"


@dataclass
class RunConfig:
    """Flat run configuration; every field is overridable via key=value."""

    seed: int = 0
    # frequency decomposition
    cutoff: int = 16
    band_mode: str = "symmetric"
    # diffusion schedule
    n_steps: int = 1000
    beta_min: float = 0.0001
    beta_max: float = 0.01
    # explicit synchronization
    sync_interval: int = 50
    lambda_exp: float = 0.3
    normalize_rotations: bool = True
    # loss weights
    lambda_dc: float = 1.0
    lambda_ac: float = 2.5
    lambda_norm: float = 0.1
    lambda_align: float = 0.3
    # ablation toggles
    disable_decomposition: bool = False
    disable_align_loss: bool = False
    disable_sync: bool = False
    # scenes / dataset
    m: int = 2
    n: int = 1
    d_joints: int = 21
    n_frames: int = 64
    n_scenes: int = 256
    families: str = "carry,rub"
    # denoiser / training
    hidden: int = 256
    action_vocab: int = 8
    object_vocab: int = 16
    train_steps: int = 4000
    lr: float = 0.05
    momentum: float = 0.9
    bps_seed: int = 0
    # sampling / eval / bench
    n_samples: int = 8
    voxel: float = 0.005
    bench_intervals: str = "5,10,25,50,100"
    bench_lambdas: str = "0.0,0.3"
    bench_samples: int = 8

    def as_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def weights(self) -> LossWeights:
        return LossWeights(
            dc=self.lambda_dc, ac=self.lambda_ac, norm=self.lambda_norm, align=self.lambda_align
        )

    def sync_config(self) -> SyncConfig:
        return SyncConfig(
            interval=self.sync_interval,
            strength=self.lambda_exp,
            enabled=not self.disable_sync,
            normalize_rotations=self.normalize_rotations,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            m=self.m,
            n=self.n,
            d_joints=self.d_joints,
            hidden=self.hidden,
            dual_branch=not self.disable_decomposition,
            action_vocab=self.action_vocab,
            object_vocab=self.object_vocab,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.train_steps,
            lr=self.lr,
            momentum=self.momentum,
            cutoff=self.cutoff,
            band_mode=self.band_mode,
            decomposition=not self.disable_decomposition,
            align_loss=not self.disable_align_loss,
        )


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.as_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _parse_value(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def load_config(path: Optional[str], overrides: Sequence[str]) -> RunConfig:
    values: Dict = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = _parse_value(raw)
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    config = RunConfig(**values)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    problems = []
    if config.cutoff < 4:
        problems.append("cutoff must be >= 4")
    if config.n_frames < 4 * config.cutoff and not config.disable_decomposition:
        problems.append(f"n_frames must be >= 4 * cutoff = {4 * config.cutoff}")
    if config.band_mode not in ("symmetric", "literal"):
        problems.append("band_mode must be 'symmetric' or 'literal'")
    if not (0.0 < config.beta_min <= config.beta_max < 1.0):
        problems.append("need 0 < beta_min <= beta_max < 1")
    if config.sync_interval < 1:
        problems.append("sync_interval must be >= 1")
    if min(config.lambda_dc, config.lambda_ac, config.lambda_norm, config.lambda_align) < 0:
        problems.append("loss weights must be nonnegative")
    if config.lambda_exp < 0:
        problems.append("lambda_exp must be nonnegative")
    if config.m < 1:
        problems.append("m must be >= 1")
    if problems:
        raise SystemExit("invalid config: " + "; ".join(problems))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: RunConfig, inputs: Dict[str, str], outputs: List[str]) -> None:
    manifest = {
        "command": command,
        "config": config.as_dict(),
        "config_hash": config_hash(config),
        "package_version": __version__,
        "inputs": {name: {"path": p, "sha256": _sha256(Path(p))} for name, p in inputs.items()},
        "outputs": {name: _sha256(out_dir / name) for name in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v!r}" if isinstance(v, float) else v for v in row])


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, out_dir: Path) -> List[str]:
    families = [f.strip() for f in config.families.split(",") if f.strip()]
    specs = []
    for k in range(config.n_scenes):
        family = families[k % len(families)]
        specs.append(
            SceneSpec(
                family=family,
                seed=int(rng_for(config.seed, "scene-seed", k).integers(0, 2**31 - 1)),
                m=config.m,
                n=config.n,
                d_joints=config.d_joints,
                n_frames=config.n_frames,
            )
        )
    ds, _ = gen_dataset(specs, n_max=config.n_frames)
    save_dataset(ds, out_dir / "dataset.bin")
    return ["dataset.bin"]


def _train_items(ds: Dataset, config: RunConfig) -> List[TrainItem]:
    bps = BasisPointSet.create(config.bps_seed)
    return [
        TrainItem(
            data=item.state.data,
            mask=item.mask,
            cond=conditioning_for_spec(item.spec, bps),
        )
        for item in ds.items
    ]


def cmd_train(config: RunConfig, data_path: str, out_dir: Path) -> List[str]:
    ds = load_dataset(data_path)
    items = _train_items(ds, config)
    sched = make_schedule(config.n_steps, config.beta_min, config.beta_max)
    params = init_params(config.denoiser_config(), config.seed)
    params, log = train(
        params, items, sched, config.weights(), config.train_settings(), config.seed
    )
    save_checkpoint(out_dir / "checkpoint.bin", params, extra={"config_hash": config_hash(config)})
    _write_csv(
        out_dir / "loss.csv",
        ["step", "total", "dc", "ac", "norm", "align"],
        [[s, b.total, b.dc, b.ac, b.norm, b.align] for s, b in log],
    )
    return ["checkpoint.bin", "loss.csv"]


def _canonicalize_rotations(state: HighOrderState) -> HighOrderState:
    """Final-export cleanup: unit-normalize + sign-fix every quaternion block."""
    data = state.data.copy()
    lay = state.layout
    quat_slices = [lay.rigid_quat_slice(j) for j in range(1, lay.m + 1)]
    for mov, ref in lay.rigid_pairs():
        sl = lay.rel_rigid_slice(mov, ref)
        quat_slices.append(slice(sl.start + 3, sl.stop))
    for sl in quat_slices:
        q = data[:, sl]
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        q = np.where(norms > 1e-12, q / np.maximum(norms, 1e-300), [[1.0, 0.0, 0.0, 0.0]])
        data[:, sl] = quat_canonical(q)
    return HighOrderState(data, lay)


def _sample_states(
    config: RunConfig,
    params,
    ds: Dataset,
    count: int,
    sync_cfg: SyncConfig,
    seed_tag: str = "sample-seq",
):
    bps = BasisPointSet.create(config.bps_seed)
    sched = make_schedule(config.n_steps, config.beta_min, config.beta_max)
    states, infos, specs = [], [], []
    for k in range(count):
        spec = ds.items[k % len(ds.items)].spec
        cond = conditioning_for_spec(spec, bps)
        predictor = make_network_predictor(
            params,
            cond,
            spec.n_frames,
            cutoff=config.cutoff,
            band_mode=config.band_mode,
            decomposition=params.config.dual_branch,
        )
        seed = int(rng_for(config.seed, seed_tag, k).integers(0, 2**31 - 1))
        state, info = sample_with_info(
            predictor, spec.layout, spec.n_frames, sched, sync_cfg, seed
        )
        states.append(state)
        infos.append(info)
        specs.append(spec)
    return states, infos, specs


def cmd_sample(config: RunConfig, checkpoint_path: str, data_path: str, out_dir: Path) -> List[str]:
    params, _ = load_checkpoint(checkpoint_path)
    ds = load_dataset(data_path)
    states, infos, specs = _sample_states(
        config, params, ds, config.n_samples, config.sync_config()
    )
    exported = [_canonicalize_rotations(s) for s in states]
    out_ds = pad_and_mask(exported, max(s.n_frames for s in exported), specs)
    save_dataset(out_ds, out_dir / "samples.bin")
    export_jsonl(exported[0], out_dir / "samples.jsonl")
    _write_csv(
        out_dir / "sample_info.csv",
        ["sample", "n_sync_steps", "lambda_bar", "mean_sigma_ratio"],
        [
            [
                k,
                info.n_sync_steps,
                float(info.lam_bar),
                float(np.mean(info.sigma_ratios)) if info.sigma_ratios else 1.0,
            ]
            for k, info in enumerate(infos)
        ],
    )
    return ["samples.bin", "samples.jsonl", "sample_info.csv"]


def _contact_masks(item: DatasetItem, state: HighOrderState):
    """Per-skeleton surface-contact masks OR-ed over every object."""
    spec = item.spec
    chain = chain_for_joint_count(spec.d_joints, spec.seed)
    objects = [
        (state.rigid_trajectory(j), spec.geometry[j - 1]) for j in range(1, spec.m + 1)
    ]
    masks = []
    roots_masks = []
    for i in range(1, spec.n + 1):
        joints = state.skeleton_trajectory(i).positions
        pts = skeleton_surface_points(joints, chain.parents)
        masks.append(
            _or_over_objects([contact_surface(traj, shape, pts) for traj, shape in objects])
        )
        if spec.d_joints >= 2:
            roots = joints[:, :2]
            roots_masks.append(
                _or_over_objects([contact_root(traj, shape, roots) for traj, shape in objects])
            )
    return masks, roots_masks


def cmd_eval(config: RunConfig, pred_path: str, gt_path: str, out_dir: Path) -> List[str]:
    pred_ds = load_dataset(pred_path)
    gt_ds = load_dataset(gt_path)
    if len(pred_ds.items) > len(gt_ds.items):
        raise SystemExit("more predicted sequences than ground-truth sequences")
    rows = []
    end_joint_groups: Dict[str, List[np.ndarray]] = {}
    for idx, item in enumerate(pred_ds.items):
        gt_item = gt_ds.items[idx % len(gt_ds.items)]
        pred = unpad(item)
        gt = unpad(gt_item)
        pred_masks, pred_roots = _contact_masks(item, pred)
        gt_masks, _ = _contact_masks(gt_item, gt)
        row = {
            "index": idx,
            "family": item.spec.family,
            "csr_pred": contact_ratio(pred_masks) if pred_masks else float("nan"),
            "csr_gt": contact_ratio(gt_masks) if gt_masks else float("nan"),
            "csiou": csiou(pred_masks, gt_masks) if pred_masks else float("nan"),
            "crr_pred": contact_ratio(pred_roots) if pred_roots else float("nan"),
            "align_residual": alignment_residual(pred),
        }
        ivs, ids_ = [], []
        for j1 in range(1, item.spec.m + 1):
            for j2 in range(j1 + 1, item.spec.m + 1):
                iv, id_mm = interpenetration(
                    (pred.rigid_trajectory(j1), item.spec.geometry[j1 - 1]),
                    (pred.rigid_trajectory(j2), item.spec.geometry[j2 - 1]),
                    voxel=config.voxel,
                )
                ivs.append(iv)
                ids_.append(id_mm)
        row["iv_cm3"] = float(np.mean(ivs)) if ivs else 0.0
        row["id_mm"] = float(np.max(ids_)) if ids_ else 0.0
        rows.append(row)
        if item.spec.n >= 1:
            end_joint_groups.setdefault(item.spec.family, []).append(
                pred.skeleton_trajectory(1).positions[:, -1]
            )
    header = ["index", "family", "csr_pred", "csr_gt", "csiou", "crr_pred", "iv_cm3", "id_mm", "align_residual"]
    _write_csv(out_dir / "metrics.csv", header, [[r[h] for h in header] for r in rows])

    summary = {
        k: float(np.nanmean([r[k] for r in rows]))
        for k in ("csr_pred", "csr_gt", "csiou", "crr_pred", "iv_cm3", "id_mm", "align_residual")
    }
    groups = [g for g in end_joint_groups.values() if len(g) >= 2]
    if groups:
        sd, od = diversity(groups)
        summary["sd_m"] = sd
        summary["od_m"] = od
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return ["metrics.csv", "summary.json"]


def cmd_decompose(config: RunConfig, data_path: str, out_dir: Path) -> List[str]:
    ds = load_dataset(data_path)
    rows = []
    for idx, item in enumerate(ds.items):
        state = unpad(item)
        coeffs = analyze(state.data)
        per_band = {
            band: band_signal(coeffs, config.cutoff, band, config.band_mode)
            for band in ("dc", "ac", "discarded")
        }
        for name, sl in state.layout.blocks.items():
            rows.append(
                [
                    idx,
                    name,
                    float(np.sum(per_band["dc"][:, sl] ** 2)),
                    float(np.sum(per_band["ac"][:, sl] ** 2)),
                    float(np.sum(per_band["discarded"][:, sl] ** 2)),
                ]
            )
    _write_csv(
        out_dir / "bands.csv",
        ["sequence", "block", "dc_energy", "ac_energy", "discarded_energy"],
        rows,
    )
    return ["bands.csv"]


def cmd_sync_bench(config: RunConfig, checkpoint_path: str, data_path: str, out_dir: Path) -> List[str]:
    params, _ = load_checkpoint(checkpoint_path)
    ds = load_dataset(data_path)
    intervals = [int(v) for v in config.bench_intervals.split(",") if v.strip()]
    lambdas = [float(v) for v in config.bench_lambdas.split(",") if v.strip()]
    rows = []

    def bench_row(sync_cfg: SyncConfig, label_interval, label_lambda):
        states, infos, _ = _sample_states(
            config, params, ds, config.bench_samples, sync_cfg, seed_tag="bench-seq"
        )
        residual = float(np.mean([alignment_residual(s) for s in states]))
        ratios = [r for info in infos for r in info.sigma_ratios]
        rows.append(
            [
                label_interval,
                label_lambda,
                residual,
                float(np.mean(ratios)) if ratios else 1.0,
                infos[0].n_sync_steps,
            ]
        )

    bench_row(SyncConfig(interval=config.sync_interval, strength=0.0, enabled=False), "off", 0.0)
    for interval in intervals:
        for lam in lambdas:
            bench_row(
                SyncConfig(
                    interval=interval,
                    strength=lam,
                    enabled=True,
                    normalize_rotations=config.normalize_rotations,
                ),
                interval,
                lam,
            )
    _write_csv(
        out_dir / "bench.csv",
        ["interval", "lambda_exp", "mean_align_residual", "mean_sigma_ratio", "n_sync_steps"],
        rows,
    )
    return ["bench.csv"]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncmotion", description="multi-body motion synchronization toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("sample", help="sample sequences from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset supplying conditioning specs")

    p = sub.add_parser("eval", help="contact/penetration/diversity metrics")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("decompose", help="per-band energy report of a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("sync-bench", help="alignment residual vs interval/strength sweep")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("rerun", help="re-execute a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _dispatch(command: str, config: RunConfig, args_map: Dict[str, str], out_dir: Path) -> None:
    inputs = {k: v for k, v in args_map.items() if v is not None}
    if command == "gen-data":
        outputs = cmd_gen_data(config, out_dir)
    elif command == "train":
        outputs = cmd_train(config, args_map["data"], out_dir)
    elif command == "sample":
        outputs = cmd_sample(config, args_map["checkpoint"], args_map["data"], out_dir)
    elif command == "eval":
        outputs = cmd_eval(config, args_map["pred"], args_map["gt"], out_dir)
    elif command == "decompose":
        outputs = cmd_decompose(config, args_map["data"], out_dir)
    elif command == "sync-bench":
        outputs = cmd_sync_bench(config, args_map["checkpoint"], args_map["data"], out_dir)
    else:
        raise SystemExit(f"unknown command {command!r}")
    for name in outputs:
        if not (out_dir / name).exists():
            raise SystemExit(f"output {name} was not written")
    _write_manifest(out_dir, command, config, inputs, outputs)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        manifest = json.loads(Path(args.manifest).read_text())
        config = RunConfig(**manifest["config"])
        _validate(config)
        args_map = {name: spec["path"] for name, spec in manifest["inputs"].items()}
        _dispatch(manifest["command"], config, args_map, _fresh_dir(args.out))
        return 0
    config = load_config(args.config, args.set)
    args_map = {
        key: getattr(args, key, None) for key in ("data", "checkpoint", "pred", "gt")
    }
    _dispatch(args.command, config, args_map, _fresh_dir(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
