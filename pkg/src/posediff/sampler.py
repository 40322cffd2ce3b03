"""Multi-hypothesis DDIM inference and joint-wise reprojection aggregation.

Inference draws H independent Gaussian pose hypotheses, refines each with M
denoising iterations, reprojects the results to the image plane, and for
every joint keeps the trajectory of the hypothesis whose reprojection lies
closest to the observed 2D keypoints. Hypotheses never exchange information,
so they (and characters in the multi-human path) can run concurrently; all
merging is by index and deterministic.

The denoiser enters as a plain callable ``denoise_fn(yt, x, t) -> y0_hat``
with weights and prompt already bound, which keeps the loop testable against
oracle models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSample, NoiseSchedule, ddim_step, timestamp_for_iteration
from .exceptions import ConfigError, NumericsError, ShapeError
from .rng import gaussian, rng_for

__all__ = [
    "CameraIntrinsics",
    "HypothesisSet",
    "MultiHumanInput",
    "EstimateResult",
    "sample_initial_hypotheses",
    "ddim_loop",
    "reproject",
    "jpma_aggregate",
    "estimate_single",
    "estimate_multi",
]

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


def default_camera() -> CameraIntrinsics:
    """Fallback intrinsics when a dataset carries none (recorded in outputs)."""
    return CameraIntrinsics(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)


@dataclass(frozen=True)
class HypothesisSet:
    """H candidate pose sequences sharing one (N, J) layout."""

    hypotheses: np.ndarray  # (H, N, J, 3)
    seed_base: int = 0

    def __post_init__(self):
        arr = np.asarray(self.hypotheses)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"hypotheses must be (H, N, J, 3), got {arr.shape}")

    @property
    def count(self):
        return self.hypotheses.shape[0]


@dataclass(frozen=True)
class MultiHumanInput:
    """Per-character 2D tracks with presence flags; absent frames are zeros."""

    keypoints: np.ndarray  # (C, N, J, 2)
    presence: np.ndarray  # (C, N) booleans

    def __post_init__(self):
        kp = np.asarray(self.keypoints)
        pres = np.asarray(self.presence, dtype=bool)
        if kp.ndim != 4 or kp.shape[-1] != 2:
            raise ShapeError(f"multi-human keypoints must be (C, N, J, 2), got {kp.shape}")
        if pres.shape != kp.shape[:2]:
            raise ShapeError(
                f"presence shape {pres.shape} does not match characters/frames {kp.shape[:2]}"
            )
        absent = ~pres
        if absent.any() and np.abs(kp[absent]).max() > 0:
            raise ShapeError("absent frames must hold exact zeros in keypoints")

    @property
    def characters(self):
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class EstimateResult:
    poses: np.ndarray  # (N, J, 3) camera-space
    hypothesis_index: np.ndarray  # (J,) or (N, J) per-frame mode
    hypotheses: np.ndarray  # (H, N, J, 3) camera-space, post-loop


def sample_initial_hypotheses(H: int, n_frames: int, n_joints: int, seed: int) -> HypothesisSet:
    """H unit-Gaussian pose tensors, stream-split per hypothesis index."""
    if H < 1:
        raise ConfigError(f"hypothesis count must be >= 1, got {H}")
    hyps = np.stack(
        [gaussian((n_frames, n_joints, 3), seed, "hypothesis", h) for h in range(H)]
    )
    return HypothesisSet(hypotheses=hyps, seed_base=int(seed))


def ddim_loop(
    x: np.ndarray,
    hyp: HypothesisSet,
    M: int,
    denoise_fn,
    sched: NoiseSchedule,
    *,
    deterministic: bool = True,
    seed: int | None = None,
) -> HypothesisSet:
    """Refine every hypothesis with M denoise/step iterations.

    Iteration m denoises at the current timestamp (starting at T) and steps
    to round(T*(1-m/M)); after the final denoise the predicted clean pose is
    returned directly (stepping to timestamp 0 would reproduce it exactly).
    """
    if M < 1:
        raise ConfigError(f"iteration count must be >= 1, got {M}")
    if seed is None:
        seed = hyp.seed_base
    outs = []
    for h in range(hyp.count):
        y = hyp.hypotheses[h]
        t_cur = sched.T
        y0_hat = None
        for m in range(1, M + 1):
            y0_hat = np.asarray(denoise_fn(y, x, t_cur))
            if y0_hat.shape != y.shape:
                raise ShapeError(
                    f"denoiser returned {y0_hat.shape}, expected {y.shape}"
                )
            if m == M:
                break
            t_next = timestamp_for_iteration(m, M, sched.T)
            if t_next >= t_cur:  # rounding collision on very short schedules
                continue
            noise = (
                None
                if deterministic
                else NoiseSample.draw(y.shape, seed, "ddim", h, m)
            )
            y = ddim_step(y, y0_hat, t_cur, t_next, sched, noise, deterministic)
            t_cur = t_next
        outs.append(y0_hat)
    return HypothesisSet(hypotheses=np.stack(outs), seed_base=hyp.seed_base)


def reproject(
    poses: np.ndarray, cam: CameraIntrinsics, depth_epsilon: float = DEPTH_EPSILON
) -> np.ndarray:
    """Pinhole projection u = fx*X/Z + cx, v = fy*Y/Z + cy over (..., J, 3)."""
    poses = np.asarray(poses)
    if poses.shape[-1] != 3:
        raise ShapeError(f"poses must end in xyz, got {poses.shape}")
    z = poses[..., 2]
    if np.any(z <= depth_epsilon):
        idx = tuple(int(i) for i in np.argwhere(z <= depth_epsilon)[0])
        where = (
            f"frame {idx[-2]}, joint {idx[-1]}" if len(idx) >= 2 else f"joint {idx[-1]}"
        )
        raise NumericsError(f"degenerate depth {z.min():.3g} at {where}")
    u = cam.fx * poses[..., 0] / z + cam.cx
    v = cam.fy * poses[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def jpma_aggregate(
    hyps: HypothesisSet,
    x: np.ndarray,
    cam: CameraIntrinsics,
    *,
    per_frame: bool = False,
    depth_epsilon: float = DEPTH_EPSILON,
    frame_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per joint, keep the hypothesis with minimal 2D reprojection error.

    Default mode sums the error over all frames and selects one hypothesis
    per joint trajectory (preserves temporal coherence); ``per_frame``
    selects independently per (frame, joint). Ties go to the lowest
    hypothesis index. ``frame_mask`` excludes frames (absent characters)
    from the error. Returns (aggregated poses, selected indices).
    """
    x = np.asarray(x)
    arr = hyps.hypotheses
    if x.shape != arr.shape[1:3] + (2,):
        raise ShapeError(f"keypoints {x.shape} do not match hypotheses {arr.shape}")
    proj = reproject(arr, cam, depth_epsilon)  # (H, N, J, 2)
    err = np.linalg.norm(proj - x[None], axis=-1)  # (H, N, J)
    if frame_mask is not None:
        mask = np.asarray(frame_mask, dtype=bool)
        if mask.shape != (arr.shape[1],):
            raise ShapeError(f"frame_mask must be (N,), got {mask.shape}")
        err = err * mask[None, :, None]
    if per_frame:
        sel = np.argmin(err, axis=0)  # (N, J)
        out = np.take_along_axis(arr, sel[None, ..., None], axis=0)[0]
    else:
        sel = np.argmin(err.sum(axis=1), axis=0)  # (J,)
        out = np.take_along_axis(arr, sel[None, None, :, None], axis=0)[0]
    return out, sel


def estimate_single(
    x: np.ndarray,
    cam: CameraIntrinsics,
    denoise_fn,
    sched: NoiseSchedule,
    H: int,
    M: int,
    seed: int,
    *,
    deterministic: bool = True,
    per_frame: bool = False,
    to_camera=None,
    x_pixels: np.ndarray | None = None,
    depth_epsilon: float = DEPTH_EPSILON,
    frame_mask: np.ndarray | None = None,
) -> EstimateResult:
    """Full single-human inference: sample, iterate, aggregate.

    ``to_camera`` maps model-space hypotheses to camera-space poses before
    reprojection (identity when the model already works in camera space);
    ``x_pixels`` supplies the raw pixel keypoints when ``x`` is normalized.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[-1] != 2:
        raise ShapeError(f"keypoints must be (N, J, 2), got {x.shape}")
    n, j = x.shape[:2]
    hyp = sample_initial_hypotheses(H, n, j, seed)
    refined = ddim_loop(x, hyp, M, denoise_fn, sched, deterministic=deterministic, seed=seed)
    cam_hyps = refined.hypotheses
    if to_camera is not None:
        cam_hyps = np.stack([to_camera(y) for y in cam_hyps])
    cam_set = HypothesisSet(cam_hyps, seed_base=refined.seed_base)
    ref_x = x if x_pixels is None else np.asarray(x_pixels)
    poses, sel = jpma_aggregate(
        cam_set, ref_x, cam, per_frame=per_frame, depth_epsilon=depth_epsilon,
        frame_mask=frame_mask,
    )
    return EstimateResult(poses=poses, hypothesis_index=sel, hypotheses=cam_hyps)


def character_seed(seed: int, c: int) -> int:
    """Documented per-character seed derivation for the multi-human path."""
    return int(rng_for(seed, "character", c).integers(0, 2**63 - 1))


def estimate_multi(
    xmul: MultiHumanInput,
    cams,
    denoise_fns,
    sched: NoiseSchedule,
    H: int,
    M: int,
    seed: int,
    **kwargs,
) -> tuple[np.ndarray, list, np.ndarray]:
    """Run estimate_single independently per character and stack the results.

    ``cams``/``denoise_fns``/optional kwarg ``to_cameras`` are per-character
    sequences. Returns (poses (C,N,J,3), per-character hypothesis indices,
    presence flags carried through unchanged).
    """
    C = xmul.characters
    if len(cams) != C or len(denoise_fns) != C:
        raise ShapeError(f"need {C} cameras and denoisers, got {len(cams)}/{len(denoise_fns)}")
    to_cameras = kwargs.pop("to_cameras", [None] * C)
    x_pixels = kwargs.pop("x_pixels", [None] * C)
    results = []
    for c in range(C):
        results.append(
            estimate_single(
                xmul.keypoints[c],
                cams[c],
                denoise_fns[c],
                sched,
                H,
                M,
                character_seed(seed, c),
                to_camera=to_cameras[c],
                x_pixels=x_pixels[c],
                frame_mask=xmul.presence[c],
                **kwargs,
            )
        )
    poses = np.stack([r.poses for r in results])
    indices = [r.hypothesis_index for r in results]
    return poses, indices, np.array(xmul.presence, dtype=bool)
