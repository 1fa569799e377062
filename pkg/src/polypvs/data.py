"""Dataset ingestion, preprocessing, and synthetic clip generation.

Real data follows the colonoscopy-video convention of per-clip folders:

    <root>/<subset>/Frame/<clip_id>/<frame>.png
    <root>/<subset>/GT/<clip_id>/<frame>.png

Masks are single-channel 8-bit, values above 127 are foreground. The
synthetic generator writes the same layout so every downstream path is
format-identical to real data. Synthetic shapes are analytic (deformed
ellipses), so masks can be re-derived from recorded parameters by an
independent point-in-shape test.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter


IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image io


def load_frame(path) -> np.ndarray:
    """RGB frame as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_binary_mask(path) -> np.ndarray:
    """Boolean mask (H, W); 8-bit values above 127 count as foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def load_probability_map(path) -> np.ndarray:
    """Grayscale prediction as float64 (H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    """Write a boolean or [0, 1] float mask as 8-bit grayscale."""
    arr = np.asarray(mask)
    if arr.dtype == bool:
        out = arr.astype(np.uint8) * 255
    else:
        out = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="L").save(path)


def save_frame(path, frame: np.ndarray) -> None:
    """Write a float (H, W, 3) image in [0, 1] as 8-bit RGB."""
    out = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class ClipIndex:
    clip_id: str
    frame_paths: list
    mask_paths: list
    subset: str = ""

    def __post_init__(self):
        if len(self.frame_paths) != len(self.mask_paths):
            raise DataError(
                f"clip {self.clip_id}: {len(self.frame_paths)} frames vs "
                f"{len(self.mask_paths)} masks")

    def __len__(self) -> int:
        return len(self.frame_paths)


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())


def index_dataset(root, subset: str) -> list:
    """Deterministic sorted index of every clip under ``root/subset``."""
    base = Path(root) / subset
    frame_root = base / "Frame"
    mask_root = base / "GT"
    if not frame_root.is_dir() or not mask_root.is_dir():
        raise DataError(f"{base} does not contain Frame/ and GT/ folders")
    clips = []
    for clip_dir in sorted(p for p in frame_root.iterdir() if p.is_dir()):
        gt_dir = mask_root / clip_dir.name
        if not gt_dir.is_dir():
            raise DataError(f"no GT folder for clip {clip_dir}")
        frames = _image_files(clip_dir)
        masks_by_stem = {p.stem: p for p in _image_files(gt_dir)}
        masks = []
        for f in frames:
            if f.stem not in masks_by_stem:
                raise DataError(f"frame {f} has no matching mask in {gt_dir}")
            masks.append(masks_by_stem[f.stem])
        clips.append(ClipIndex(clip_dir.name, frames, masks, subset=subset))
    if not clips:
        raise DataError(f"no clips found under {frame_root}")
    return clips


def index_summary(clips: list) -> str:
    n_frames = sum(len(c) for c in clips)
    return f"{len(clips)} clips / {n_frames} frames"


def index_frames(root) -> list:
    """Index frames without masks, for inference.

    ``root`` may be a single folder of images (one clip named after the
    folder) or a folder of per-clip subfolders, e.g. a Frame/ tree.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    direct = _image_files(root)
    if direct:
        return [ClipIndex(root.name, direct, [None] * len(direct))]
    clips = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = _image_files(clip_dir)
        if frames:
            clips.append(ClipIndex(clip_dir.name, frames, [None] * len(frames)))
    if not clips:
        raise DataError(f"no images found under {root}")
    return clips


# ---------------------------------------------------------------------------
# preprocessing


def resize_frame(frame: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a float (H, W, 3) image to (H', W')."""
    t = torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbor resize; keeps masks binary."""
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    t = t.unsqueeze(0).unsqueeze(0)
    t = F.interpolate(t, size=tuple(size), mode="nearest")
    return t.squeeze(0).squeeze(0).numpy()


def preprocess_frame(frame: np.ndarray, size, mean=None, std=None,
                     normalize: bool = True) -> torch.Tensor:
    """Frame-only preprocessing for inference; returns (3, H', W') float32."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) frame, got {frame.shape}")
    if frame.shape[:2] != tuple(size):
        frame = resize_frame(frame, size)
    frame_t = torch.from_numpy(frame).permute(2, 0, 1).contiguous()
    if normalize:
        if mean is None or std is None:
            raise DataError("normalize=True requires mean and std")
        m = torch.tensor(mean, dtype=torch.float32).reshape(3, 1, 1)
        s = torch.tensor(std, dtype=torch.float32).reshape(3, 1, 1)
        frame_t = (frame_t - m) / s
    return frame_t


def preprocess_pair(frame: np.ndarray, mask: np.ndarray, size,
                    mean=None, std=None, normalize: bool = True):
    """(frame (H,W,3) in [0,1], mask (H,W)) -> model tensors.

    Returns (3, H', W') float32 and (1, H', W') float32 in {0, 1}. The
    geometric part is idempotent; channel normalization is optional so an
    already-normalized tensor is not normalized twice.
    """
    frame_t = preprocess_frame(frame, size, mean, std, normalize)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != tuple(size):
        mask = resize_mask(mask, size)
    mask_t = torch.from_numpy((mask > 0.5).astype(np.float32)).unsqueeze(0)
    return frame_t, mask_t


# ---------------------------------------------------------------------------
# training windows


def clip_sampler(clips: list, clip_length: int, stride: int = 1):
    """Contiguous training windows of ``clip_length`` frames per clip.

    Yields (clip, start) pairs in deterministic order; shuffling is the
    caller's job and must act on whole windows. Short clips are skipped
    with a warning.
    """
    if clip_length < 2:
        raise DataError(f"clip_length must be >= 2, got {clip_length}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    for clip in clips:
        if len(clip) < clip_length:
            warnings.warn(
                f"clip {clip.clip_id} has {len(clip)} frames, "
                f"shorter than window {clip_length}; skipped")
            continue
        for start in range(0, len(clip) - clip_length + 1, stride):
            yield clip, start


# ---------------------------------------------------------------------------
# synthetic video


@dataclass
class SynthConfig:
    n_frames: int = 20
    size: tuple = (64, 64)
    n_blobs: int = 1
    radius_range: tuple = (0.16, 0.26)
    deform_amplitude: float = 0.22
    motion_amplitude: float = 1.5
    jitter_amplitude: float = 0.8
    low_quality_start: int = -1
    low_quality_length: int = 0
    low_quality_severity: float = 0.0
    min_nonempty_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise DataError("n_frames must be >= 1")
        if self.low_quality_length:
            if self.low_quality_start < 0:
                raise DataError("low-quality segment needs a start frame")
            if self.low_quality_start + self.low_quality_length > self.n_frames:
                raise DataError("low-quality segment exceeds clip bounds")
        if not 0.0 <= self.low_quality_severity <= 1.0:
            raise DataError("severity must lie in [0, 1]")

    def degraded_frames(self) -> set:
        if self.low_quality_length <= 0:
            return set()
        return set(range(self.low_quality_start,
                         self.low_quality_start + self.low_quality_length))


@dataclass
class BlobState:
    """Analytic shape of one blob in one frame.

    The boundary in blob-local polar coordinates is
    rho(phi) = 1 + a1*sin(3*phi + p1) + a2*sin(5*phi + p2), where rho is the
    elliptic normalized radius sqrt((u/ax)^2 + (v/ay)^2) after rotating the
    pixel offset by -angle.
    """
    center: tuple
    axes: tuple
    angle: float
    amp1: float
    phase1: float
    amp2: float
    phase2: float

    def contains(self, y, x):
        dy = np.asarray(y, dtype=np.float64) - self.center[0]
        dx = np.asarray(x, dtype=np.float64) - self.center[1]
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = ca * dx + sa * dy
        v = -sa * dx + ca * dy
        rho = np.sqrt((u / self.axes[1]) ** 2 + (v / self.axes[0]) ** 2)
        phi = np.arctan2(v, u)
        boundary = (1.0 + self.amp1 * np.sin(3.0 * phi + self.phase1)
                    + self.amp2 * np.sin(5.0 * phi + self.phase2))
        return rho <= boundary


@dataclass
class SyntheticClip:
    frames: np.ndarray          # (T, H, W, 3) uint8
    masks: np.ndarray           # (T, H, W) bool
    blob_states: list           # per frame: list of BlobState
    config: SynthConfig = None


def _render_mask(states: list, size) -> np.ndarray:
    h, w = size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mask = np.zeros((h, w), dtype=bool)
    for st in states:
        mask |= st.contains(yy, xx)
    return mask


def generate_clip(cfg: SynthConfig) -> SyntheticClip:
    """Render one clip; the seed fully determines the output."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    scale = min(h, w)
    degraded = cfg.degraded_frames()

    blobs = []
    for _ in range(cfg.n_blobs):
        r = rng.uniform(*cfg.radius_range) * scale
        aspect = rng.uniform(0.75, 1.3)
        blobs.append({
            "center": np.array([rng.uniform(0.3 * h, 0.7 * h),
                                rng.uniform(0.3 * w, 0.7 * w)]),
            "axes": (r / aspect, r * aspect),
            "angle": rng.uniform(0.0, math.pi),
            "spin": rng.uniform(-0.05, 0.05),
            "amp1": rng.uniform(0.3, 1.0) * cfg.deform_amplitude,
            "phase1": rng.uniform(0.0, 2 * math.pi),
            "amp2": rng.uniform(0.2, 0.7) * cfg.deform_amplitude,
            "phase2": rng.uniform(0.0, 2 * math.pi),
            "drift1": rng.uniform(0.0, 0.08),
            "drift2": rng.uniform(0.0, 0.12),
            "color": np.array([rng.uniform(0.55, 0.75),
                               rng.uniform(0.25, 0.40),
                               rng.uniform(0.20, 0.35)]),
        })
    velocity = rng.uniform(-1.0, 1.0, size=2) * cfg.motion_amplitude
    bg_phase = rng.uniform(0.0, 2 * math.pi, size=2)
    margin = 0.12 * scale

    frames = np.empty((cfg.n_frames, h, w, 3), dtype=np.uint8)
    masks = np.empty((cfg.n_frames, h, w), dtype=bool)
    all_states = []
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for t in range(cfg.n_frames):
        cam = velocity * t
        states = []
        for blob in blobs:
            jitter = rng.uniform(-1.0, 1.0, size=2) * cfg.jitter_amplitude
            cy = np.clip(blob["center"][0] + cam[0] + jitter[0], margin, h - 1 - margin)
            cx = np.clip(blob["center"][1] + cam[1] + jitter[1], margin, w - 1 - margin)
            states.append(BlobState(
                center=(float(cy), float(cx)),
                axes=blob["axes"],
                angle=blob["angle"] + blob["spin"] * t,
                amp1=blob["amp1"], phase1=blob["phase1"] + blob["drift1"] * t,
                amp2=blob["amp2"], phase2=blob["phase2"] + blob["drift2"] * t,
            ))
        mask = _render_mask(states, (h, w))

        # mucosa-like background: smooth waves plus grain, drifting with the camera
        gx = (xx + cam[1]) / w
        gy = (yy + cam[0]) / h
        bg = (0.52 + 0.10 * np.sin(2 * math.pi * gx * 1.3 + bg_phase[0])
              + 0.08 * np.cos(2 * math.pi * gy * 1.7 + bg_phase[1]))
        img = np.stack([bg * 0.95, bg * 0.62, bg * 0.55], axis=-1)
        img += rng.normal(0.0, 0.02, size=img.shape)
        for st, blob in zip(states, blobs):
            inside = st.contains(yy, xx)
            shade = 1.0 - 0.25 * np.clip(
                np.hypot(yy - st.center[0], xx - st.center[1]) / (max(st.axes) + 1e-6), 0, 1)
            tint = blob["color"].reshape(1, 1, 3) * shade[..., None]
            img = np.where(inside[..., None], 0.25 * img + 0.75 * tint, img)

        if t in degraded and cfg.low_quality_severity > 0.0:
            sev = cfg.low_quality_severity
            img = img * (1.0 - 0.75 * sev)
            img = gaussian_filter(img, sigma=(2.5 * sev, 2.5 * sev, 0.0))

        frames[t] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        masks[t] = mask
        all_states.append(states)
    return SyntheticClip(frames=frames, masks=masks, blob_states=all_states, config=cfg)


def write_clip(clip: SyntheticClip, root, subset: str, clip_id: str) -> ClipIndex:
    """Materialize a synthetic clip in the standard directory layout."""
    base = Path(root) / subset
    frame_paths, mask_paths = [], []
    for t in range(clip.frames.shape[0]):
        name = f"{t:05d}.png"
        fp = base / "Frame" / clip_id / name
        mp = base / "GT" / clip_id / name
        save_frame(fp, clip.frames[t] / 255.0)
        save_mask(mp, clip.masks[t])
        frame_paths.append(fp)
        mask_paths.append(mp)
    return ClipIndex(clip_id, frame_paths, mask_paths, subset=subset)


def synthesize_dataset(root, subset: str, n_clips: int, base_cfg: SynthConfig) -> list:
    """Write ``n_clips`` clips with per-clip seeds derived from the base seed."""
    clips = []
    for i in range(n_clips):
        cfg = replace(base_cfg, seed=base_cfg.seed + 1000 * i)
        clip = generate_clip(cfg)
        clips.append(write_clip(clip, root, subset, f"clip_{i:03d}"))
    return clips
