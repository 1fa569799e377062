"""Training loop: windows of consecutive frames, Adam, resumable checkpoints.

Each optimizer step consumes a batch of windows; every window streams its
frames through a fresh state so the memory path is exercised exactly as at
inference time. Shuffling permutes whole windows with a generator derived
from (seed, epoch), which makes a resumed run bit-compatible with an
uninterrupted one in a single-threaded, fixed-seed setting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig, structural_fingerprint, validate_config
from .data import (DataError, clip_sampler, load_binary_mask, load_frame,
                   preprocess_frame, preprocess_pair)
from .layers import resize_to
from .losses import segmentation_loss
from .metrics import MetricReport, evaluate_frame
from .model import VideoSegModel

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


# ---------------------------------------------------------------------------
# batch assembly


def load_window(clip, start: int, length: int, size, mean, std):
    """One training window: ((T, 3, H, W) frames, (T, 1, H, W) masks)."""
    frames, masks = [], []
    for i in range(start, start + length):
        f = load_frame(clip.frame_paths[i])
        m = load_binary_mask(clip.mask_paths[i])
        ft, mt = preprocess_pair(f, m, size, mean, std)
        frames.append(ft)
        masks.append(mt)
    return torch.stack(frames), torch.stack(masks)


def load_batch(windows, size, mean, std):
    """Stack (clip, start) windows into (B, T, 3, H, W) / (B, T, 1, H, W)."""
    fs, ms = [], []
    for clip, start, length in windows:
        f, m = load_window(clip, start, length, size, mean, std)
        fs.append(f)
        ms.append(m)
    return torch.stack(fs), torch.stack(ms)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: VideoSegModel, optimizer, cfg: ModelConfig, *,
                    epoch: int, batch_in_epoch: int, step: int, loss_history) -> Path:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "structure": structural_fingerprint(cfg),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "batch_in_epoch": batch_in_epoch,
        "step": step,
        "loss_history": [float(v) for v in loss_history],
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"checkpoint {path} has format {version}, expected {CHECKPOINT_FORMAT}")
    return payload


def model_from_checkpoint(path):
    """Rebuild (model, config, payload) from a checkpoint file."""
    payload = load_checkpoint(path)
    cfg = validate_config(ModelConfig.from_dict(payload["config"]))
    model = VideoSegModel(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload


def check_structure(payload: dict, cfg: ModelConfig) -> None:
    stored = payload.get("structure")
    current = structural_fingerprint(cfg)
    if stored != current:
        raise ConfigError(
            f"checkpoint structure {stored} does not match config {current}")


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    loss_history: list
    steps: int
    epochs_completed: int


def train(cfg: ModelConfig, clips, out_dir, resume=None, quiet: bool = False,
          log_every: int = 10) -> TrainResult:
    validate_config(cfg)
    tcfg = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(tcfg.seed)
    model = VideoSegModel(cfg)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr,
                                 weight_decay=tcfg.weight_decay)

    start_epoch, start_batch, step = 0, 0, 0
    loss_history: list[float] = []
    if resume is not None:
        payload = load_checkpoint(resume)
        check_structure(payload, cfg)
        model.load_state_dict(payload["model"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"]
        start_batch = payload["batch_in_epoch"]
        step = payload["step"]
        loss_history = list(payload["loss_history"])
        torch.set_rng_state(payload["torch_rng"])

    windows = [(clip, start, tcfg.clip_length)
               for clip, start in clip_sampler(clips, tcfg.clip_length, tcfg.window_stride)]
    if not windows:
        raise DataError("no training windows: every clip is shorter than clip_length")

    log_path = out / "training_log.csv"
    fresh_log = resume is None or not log_path.exists()
    log_file = open(log_path, "w" if fresh_log else "a", newline="")
    log = csv.writer(log_file)
    if fresh_log:
        log.writerow(["step", "epoch", "loss", "cross_entropy", "iou"])

    n_batches = math.ceil(len(windows) / tcfg.batch_windows)
    epoch = start_epoch
    done = False
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            order = np.random.default_rng((tcfg.seed, epoch)).permutation(len(windows))
            first = start_batch if epoch == start_epoch else 0
            for bi in range(first, n_batches):
                chunk = order[bi * tcfg.batch_windows:(bi + 1) * tcfg.batch_windows]
                frames, masks = load_batch([windows[i] for i in chunk],
                                           cfg.input_size, cfg.norm_mean, cfg.norm_std)
                outputs = model(frames)
                total = None
                ce_sum = iou_sum = 0.0
                for t in range(frames.shape[1]):
                    rep = segmentation_loss(outputs[t], masks[:, t],
                                            deep_supervision=tcfg.deep_supervision)
                    total = rep.total if total is None else total + rep.total
                    ce_sum += rep.cross_entropy
                    iou_sum += rep.iou
                loss = total / frames.shape[1]
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                loss = float(loss.detach())
                loss_history.append(loss)
                log.writerow([step, epoch, f"{loss:.6f}",
                              f"{ce_sum / frames.shape[1]:.6f}",
                              f"{iou_sum / frames.shape[1]:.6f}"])
                step += 1
                if not quiet and (step % log_every == 0 or step == 1):
                    print(f"epoch {epoch} step {step} loss {loss:.4f}")
                if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint-{step:06d}.pt", model,
                                    optimizer, cfg, epoch=epoch, batch_in_epoch=bi + 1,
                                    step=step, loss_history=loss_history)
                if tcfg.max_steps is not None and step >= tcfg.max_steps:
                    done = True
                    break
            if done:
                break
    finally:
        log_file.close()

    completed = min(epoch if done else epoch + 1, tcfg.epochs)
    final = save_checkpoint(out / "checkpoint-final.pt", model, optimizer, cfg,
                            epoch=epoch if done else tcfg.epochs,
                            batch_in_epoch=0, step=step, loss_history=loss_history)
    return TrainResult(final, log_path, loss_history, step, completed)


# ---------------------------------------------------------------------------
# evaluation of a model over indexed clips


def evaluate_on_clips(model: VideoSegModel, cfg: ModelConfig, clips) -> MetricReport:
    """Stream every clip causally and score each frame at mask resolution."""
    was_training = model.training
    model.eval()
    report = MetricReport()
    try:
        with torch.no_grad():
            for clip in clips:
                state = model.new_stream()
                for i in range(len(clip)):
                    frame = load_frame(clip.frame_paths[i])
                    gt = load_binary_mask(clip.mask_paths[i])
                    ft = preprocess_frame(frame, cfg.input_size,
                                          cfg.norm_mean, cfg.norm_std).unsqueeze(0)
                    pred, state = model.step(ft, state)
                    prob = resize_to(pred.probability, gt.shape)
                    scores = evaluate_frame(prob.squeeze().numpy().astype(np.float64), gt)
                    report.append(f"{clip.clip_id}/{clip.frame_paths[i].stem}", scores)
    finally:
        if was_training:
            model.train()
    return report
