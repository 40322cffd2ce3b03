"""Dataset records, the on-disk dataset container, a synthetic skeleton
generator for desk-scale runs, and invertible normalization.

Datasets live in the shared `.ptc` container: per-sequence tensors under
``seq/<id>/...`` plus a JSON manifest carrying the sequence index, the unit
declaration (millimeters) and the coordinate convention (camera frame,
x right, y down, z forward). 3D poses are camera-space mm; 2D keypoints are
pixels produced by pinhole reprojection.

The generator builds kinematically plausible skeletons by forward kinematics
over rigid bone offsets, so bone lengths are constant per sequence by
construction and the stored 2D keypoints are exact reprojections of the 3D
ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .container import read_container, write_container
from .exceptions import ConfigError, ShapeError
from .rng import rng_for
from .sampler import CameraIntrinsics, reproject

__all__ = [
    "SequenceRecord",
    "NormalizationParams",
    "save_dataset",
    "load_dataset",
    "synth_generate",
    "synth_generate_multi",
    "normalize_record",
    "denormalize_poses",
    "normalize_keypoints",
    "joint_part_map",
]

MM_PER_UNIT = 1000.0
DEFAULT_ROOT_DEPTH_MM = 3500.0
ROOT_JOINT = 0
MOTION_KINDS = ("walk_cycle", "arm_wave", "sit")

# 17-joint skeleton tree (pelvis root): parents precede children, so any
# prefix of the joint list is itself a consistent tree.
PARENTS_17 = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# bone offsets from parent, body frame (x lateral, y up, z forward), mm
OFFSETS_17 = np.array(
    [
        [0, 0, 0],        # 0 pelvis
        [-130, 0, 0],     # 1 right hip
        [0, -450, 0],     # 2 right knee
        [0, -450, 0],     # 3 right ankle
        [130, 0, 0],      # 4 left hip
        [0, -450, 0],     # 5 left knee
        [0, -450, 0],     # 6 left ankle
        [0, 230, 0],      # 7 spine
        [0, 230, 0],      # 8 thorax
        [0, 110, 0],      # 9 neck
        [0, 110, 0],      # 10 head
        [170, 0, 0],      # 11 left shoulder
        [0, -280, 0],     # 12 left elbow
        [0, -250, 0],     # 13 left wrist
        [-170, 0, 0],     # 14 right shoulder
        [0, -280, 0],     # 15 right elbow
        [0, -250, 0],     # 16 right wrist
    ],
    dtype=np.float64,
)

PART_GROUPS_17 = {
    "head": (9, 10),
    "body": (0, 7, 8),
    "arms": (11, 12, 13, 14, 15, 16),
    "legs": (1, 2, 3, 4, 5, 6),
}


def joint_part_map(n_joints: int) -> dict:
    """Body-part partition declared in the manifest, clipped to J joints."""
    return {
        part: [j for j in joints if j < n_joints]
        for part, joints in PART_GROUPS_17.items()
    }


@dataclass
class SequenceRecord:
    seq_id: str
    keypoints_2d: np.ndarray  # (N, J, 2) pixels
    gt_3d: np.ndarray | None  # (N, J, 3) mm camera space; None for inference-only
    action: str
    camera: CameraIntrinsics | None
    presence: np.ndarray | None = None  # (N,) bool; None means always present
    scene: str | None = None
    character: int | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints_2d, dtype=np.float64)
        if kp.ndim != 3 or kp.shape[-1] != 2:
            raise ShapeError(f"{self.seq_id}: keypoints_2d must be (N, J, 2), got {kp.shape}")
        if kp.shape[0] < 1 or kp.shape[1] < 1:
            raise ShapeError(f"{self.seq_id}: N and J must be positive")
        self.keypoints_2d = kp
        if self.gt_3d is not None:
            gt = np.asarray(self.gt_3d, dtype=np.float64)
            if gt.shape != kp.shape[:2] + (3,):
                raise ShapeError(
                    f"{self.seq_id}: gt_3d {gt.shape} disagrees with keypoints {kp.shape}"
                )
            self.gt_3d = gt
        if self.presence is not None:
            pres = np.asarray(self.presence, dtype=bool)
            if pres.shape != (kp.shape[0],):
                raise ShapeError(f"{self.seq_id}: presence must be (N,), got {pres.shape}")
            if np.abs(kp[~pres]).max(initial=0.0) > 0:
                raise ShapeError(f"{self.seq_id}: absent frames must hold exact zeros")
            self.presence = pres

    @property
    def n_frames(self):
        return self.keypoints_2d.shape[0]

    @property
    def n_joints(self):
        return self.keypoints_2d.shape[1]


# -- dataset container ---------------------------------------------------------


def save_dataset(path, records: list, extra_meta: dict | None = None) -> None:
    tensors = {}
    index = []
    for rec in records:
        base = f"seq/{rec.seq_id}"
        tensors[f"{base}/keypoints_2d"] = rec.keypoints_2d
        if rec.gt_3d is not None:
            tensors[f"{base}/gt_3d"] = rec.gt_3d
        if rec.presence is not None:
            tensors[f"{base}/presence"] = rec.presence.astype(np.float64)
        index.append(
            {
                "id": rec.seq_id,
                "n_frames": rec.n_frames,
                "n_joints": rec.n_joints,
                "action": rec.action,
                "camera": rec.camera.to_dict() if rec.camera else None,
                "scene": rec.scene,
                "character": rec.character,
                "has_gt": rec.gt_3d is not None,
                "has_presence": rec.presence is not None,
            }
        )
    meta = {
        "kind": "dataset",
        "unit": "mm",
        "coords": "camera frame: x right, y down, z forward (depth), millimeters",
        "joint_parts": joint_part_map(records[0].n_joints) if records else {},
        "sequences": sorted(index, key=lambda e: e["id"]),
    }
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, tensors, meta)


def load_dataset(path) -> list:
    tensors, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise ConfigError(f"{path}: not a dataset container (kind={meta.get('kind')!r})")
    records = []
    for entry in meta.get("sequences", []):
        sid = entry["id"]
        base = f"seq/{sid}"
        kp = tensors.get(f"{base}/keypoints_2d")
        if kp is None:
            raise ConfigError(f"{path}: record {sid!r} is indexed but has no keypoints")
        n, j = int(entry["n_frames"]), int(entry["n_joints"])
        if n < 1 or j < 1:
            raise ConfigError(f"{path}: record {sid!r} declares non-positive N or J")
        if kp.shape != (n, j, 2):
            raise ConfigError(
                f"{path}: record {sid!r} manifest says {n}x{j} frames/joints "
                f"but blob holds {kp.shape}"
            )
        gt = tensors.get(f"{base}/gt_3d")
        if entry.get("has_gt") and gt is None:
            raise ConfigError(f"{path}: record {sid!r} is missing its gt_3d tensor")
        if gt is not None and gt.shape != (n, j, 3):
            raise ConfigError(f"{path}: record {sid!r} gt_3d has shape {gt.shape}")
        presence = tensors.get(f"{base}/presence")
        cam = entry.get("camera")
        records.append(
            SequenceRecord(
                seq_id=sid,
                keypoints_2d=kp,
                gt_3d=gt,
                action=entry.get("action", ""),
                camera=CameraIntrinsics.from_dict(cam) if cam else None,
                presence=None if presence is None else presence > 0.5,
                scene=entry.get("scene"),
                character=entry.get("character"),
            )
        )
    return records


# -- synthetic generator ---------------------------------------------------------


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _joint_rotations(kind: str, phase: float, progress: float) -> dict:
    """Local rotation per joint for one frame of the motion pattern."""
    if kind == "walk_cycle":
        swing = 0.6 * math.sin(phase)
        return {
            1: _rot_x(swing),
            4: _rot_x(-swing),
            2: _rot_x(0.35 * (1 + math.cos(phase))),
            5: _rot_x(0.35 * (1 - math.cos(phase))),
            11: _rot_x(0.4 * math.sin(phase)),
            14: _rot_x(-0.4 * math.sin(phase)),
        }
    if kind == "arm_wave":
        lift = 2.2 + 0.5 * math.sin(phase)
        return {
            11: _rot_z(lift),
            14: _rot_z(-lift),
            12: _rot_z(0.4 * math.sin(phase * 2)),
            15: _rot_z(-0.4 * math.sin(phase * 2)),
        }
    if kind == "sit":
        bend = (0.5 * math.pi) * min(1.0, progress * 1.5)
        return {
            1: _rot_x(-bend),
            4: _rot_x(-bend),
            2: _rot_x(bend),
            5: _rot_x(bend),
            7: _rot_x(0.15 * bend),
        }
    raise ConfigError(f"unknown motion kind {kind!r}; choose from {MOTION_KINDS}")


def _forward_kinematics(offsets: np.ndarray, parents, rotations: dict) -> np.ndarray:
    j = offsets.shape[0]
    pos = np.zeros((j, 3))
    acc = [np.eye(3)] * j
    for i in range(1, j):
        p = parents[i]
        acc[i] = acc[p] @ rotations.get(i, np.eye(3))
        pos[i] = pos[p] + acc[i] @ offsets[i]
    return pos


def _synth_one(
    seq_id: str,
    n_frames: int,
    n_joints: int,
    kind: str,
    cam: CameraIntrinsics,
    rng: np.random.Generator,
    lateral_mm: float = 0.0,
) -> SequenceRecord:
    if not (5 <= n_joints <= 17):
        raise ConfigError(f"synthetic skeleton supports 5..17 joints, got {n_joints}")
    scale = 0.9 + 0.2 * rng.random()  # per-sequence stature
    offsets = OFFSETS_17[:n_joints] * scale
    cycles = 1.5 + rng.random()
    phase0 = 2 * math.pi * rng.random()
    depth = DEFAULT_ROOT_DEPTH_MM + 400.0 * (rng.random() - 0.5)
    sway = 30.0 * rng.random()

    gt = np.zeros((n_frames, n_joints, 3))
    for n in range(n_frames):
        phase = phase0 + 2 * math.pi * cycles * n / n_frames
        body = _forward_kinematics(offsets, PARENTS_17, _joint_rotations(kind, phase, n / max(1, n_frames - 1)))
        root = np.array(
            [lateral_mm + sway * math.sin(phase), 0.0, depth + 50.0 * math.cos(phase)]
        )
        # body frame y is up, camera y is down
        gt[n, :, 0] = body[:, 0] + root[0]
        gt[n, :, 1] = -body[:, 1] + root[1]
        gt[n, :, 2] = body[:, 2] + root[2]
    return SequenceRecord(
        seq_id=seq_id,
        keypoints_2d=reproject(gt, cam),
        gt_3d=gt,
        action=kind,
        camera=cam,
    )


def synth_generate(
    n_sequences: int,
    n_frames: int,
    n_joints: int,
    seed: int,
    motion_kind: str = "mixed",
) -> list:
    """Seeded synthetic dataset; ``mixed`` cycles through the motion kinds."""
    cam = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)
    records = []
    for i in range(n_sequences):
        kind = MOTION_KINDS[i % 3] if motion_kind == "mixed" else motion_kind
        rng = rng_for(seed, "synth", i)
        records.append(_synth_one(f"seq{i:03d}", n_frames, n_joints, kind, cam, rng))
    return records


def synth_generate_multi(
    n_characters: int,
    n_frames: int,
    n_joints: int,
    seed: int,
    motion_kind: str = "mixed",
    scene: str = "scene000",
) -> list:
    """One multi-human scene: C laterally offset characters sharing N frames.

    Characters beyond the first leave the view for a stretch of frames; those
    frames hold exact zeros in their 2D keypoints.
    """
    cam = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)
    records = []
    for c in range(n_characters):
        kind = MOTION_KINDS[c % 3] if motion_kind == "mixed" else motion_kind
        rng = rng_for(seed, "synth-multi", c)
        lateral = (c - (n_characters - 1) / 2) * 900.0
        rec = _synth_one(
            f"{scene}/ch{c}", n_frames, n_joints, kind, cam, rng, lateral_mm=lateral
        )
        presence = np.ones(n_frames, dtype=bool)
        if c > 0 and n_frames >= 4:
            gap = slice(n_frames // 2, n_frames // 2 + max(1, n_frames // 4))
            presence[gap] = False
        kp = rec.keypoints_2d.copy()
        kp[~presence] = 0.0
        records.append(
            replace(rec, keypoints_2d=kp, presence=presence, scene=scene, character=c)
        )
    return records


# -- normalization ---------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationParams:
    mode: str
    scale_mm: float
    camera: CameraIntrinsics
    roots_mm: np.ndarray  # (N, 3) root trajectory used to re-anchor poses
    presence: np.ndarray | None = None


def root_trajectory(record: SequenceRecord) -> np.ndarray:
    """Root joint track used for de-normalization; default depth when no gt."""
    if record.gt_3d is not None:
        return record.gt_3d[:, ROOT_JOINT, :].copy()
    roots = np.zeros((record.n_frames, 3))
    roots[:, 2] = DEFAULT_ROOT_DEPTH_MM
    return roots


def normalize_keypoints(kp: np.ndarray, cam: CameraIntrinsics, presence=None) -> np.ndarray:
    """Pixels -> camera-normalized rays; absent frames stay exactly zero."""
    out = np.empty_like(np.asarray(kp, dtype=np.float64))
    out[..., 0] = (kp[..., 0] - cam.cx) / cam.fx
    out[..., 1] = (kp[..., 1] - cam.cy) / cam.fy
    if presence is not None:
        out[~np.asarray(presence, dtype=bool)] = 0.0
    return out


def denormalize_keypoints(kpn: np.ndarray, cam: CameraIntrinsics, presence=None) -> np.ndarray:
    out = np.empty_like(np.asarray(kpn, dtype=np.float64))
    out[..., 0] = kpn[..., 0] * cam.fx + cam.cx
    out[..., 1] = kpn[..., 1] * cam.fy + cam.cy
    if presence is not None:
        out[~np.asarray(presence, dtype=bool)] = 0.0
    return out


def normalize_record(
    record: SequenceRecord, mode: str = "root_centered"
) -> tuple[SequenceRecord, NormalizationParams]:
    """Invertible transform to model units.

    ``root_centered``: 3D poses are root-relative and scaled mm -> m; 2D
    keypoints become intrinsics-normalized rays. ``image_normalized`` keeps
    3D absolute (scaled only). Millimeter parameters are retained so metrics
    always run in mm.
    """
    if mode not in ("root_centered", "image_normalized"):
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if mode == "root_centered" and record.gt_3d is None:
        raise ConfigError(f"{record.seq_id}: root_centered normalization needs gt_3d")
    cam = record.camera or CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0)
    params = NormalizationParams(
        mode=mode,
        scale_mm=MM_PER_UNIT,
        camera=cam,
        roots_mm=root_trajectory(record),
        presence=record.presence,
    )
    kp = normalize_keypoints(record.keypoints_2d, cam, record.presence)
    gt = None
    if record.gt_3d is not None:
        # the zero-fill contract covers the 2D inputs only; 3D poses keep
        # their values so reprojection stays valid on every frame
        if mode == "root_centered":
            gt = (record.gt_3d - params.roots_mm[:, None, :]) / params.scale_mm
        else:
            gt = record.gt_3d / params.scale_mm
    return replace(record, keypoints_2d=kp, gt_3d=gt), params


def denormalize_poses(poses: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Model units back to camera-space millimeters."""
    out = np.asarray(poses, dtype=np.float64) * params.scale_mm
    if params.mode == "root_centered":
        out = out + params.roots_mm[:, None, :]
    return out
