"""End-to-end behaviour of the assembled model: streaming causality, memory
bookkeeping across frames, checkpoint/resume fidelity, and ablation wiring.

Training-loop tests run a reduced model (narrow stages, 64x64 input) so the
whole file stays in CI budget.
"""

from dataclasses import replace

import numpy as np
import pytest
import torch

from polypvs.config import ConfigError, EncoderConfig, ModelConfig, TrainConfig
from polypvs.data import DataError, SynthConfig, generate_clip, write_clip
from polypvs.metrics import METRIC_ORDER
from polypvs.model import (ABLATION_VARIANTS, StreamState, VideoSegModel,
                           apply_variant, infer_stream)
from polypvs.training import (TrainingDiverged, check_structure, evaluate_on_clips,
                              load_batch, load_checkpoint, load_window,
                              model_from_checkpoint, save_checkpoint, train)


def small_cfg(**kw):
    train_kw = dict(lr=1e-3, epochs=100, batch_windows=2, clip_length=4,
                    window_stride=3, seed=0)
    train_kw.update(kw.pop("train_kw", {}))
    return ModelConfig(
        input_size=(64, 64), feature_channels=8, key_channels=4, value_channels=4,
        encoder=EncoderConfig(tiny_channels=(4, 6, 8, 8, 8)),
        train=TrainConfig(**train_kw), **kw)


def make_model(cfg=None, seed=0):
    torch.manual_seed(seed)
    return VideoSegModel(cfg if cfg is not None else small_cfg())


def frame_batch(seed, n=1, size=64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g)


def synth_clip(tmp_path, seed, n_frames=10, subset="train", clip_id=None):
    cfg = SynthConfig(n_frames=n_frames, size=(64, 64), seed=seed)
    return write_clip(generate_clip(cfg), tmp_path, subset,
                      clip_id if clip_id else f"clip_{seed}")


# ---------------------------------------------------------------------------
# variants and input validation


def test_variant_table():
    assert set(ABLATION_VARIANTS) == {"full", "no_short_term", "no_long_term",
                                      "frame_only", "no_alignment", "no_masking"}
    cfg = small_cfg()
    assert apply_variant(cfg, "full") == cfg
    assert apply_variant(cfg, "no_short_term").use_short_term is False
    assert apply_variant(cfg, "no_long_term").use_long_term is False
    fo = apply_variant(cfg, "frame_only")
    assert fo.use_short_term is False and fo.use_long_term is False
    assert apply_variant(cfg, "no_alignment").use_alignment is False
    assert apply_variant(cfg, "no_masking").use_mask_attention is False
    with pytest.raises(ValueError):
        apply_variant(cfg, "no_decoder")


def test_step_rejects_malformed_frames():
    model = make_model().eval()
    state = model.new_stream()
    with pytest.raises(ValueError):
        model.step(torch.rand(3, 64, 64), state)          # missing batch dim
    with pytest.raises(ValueError):
        model.step(torch.rand(1, 1, 64, 64), state)       # wrong channel count
    with pytest.raises(ValueError):
        model.step(torch.rand(1, 3, 96, 96), state)       # wrong spatial size


# ---------------------------------------------------------------------------
# single-step semantics


def test_first_frame_pairs_with_itself():
    # with no history the previous pyramid defaults to the current one and all
    # banks are empty; the whole step must reduce to that explicit computation
    model = make_model(seed=1).eval()
    frame = frame_batch(10)
    with torch.no_grad():
        pred, _ = model.step(frame, model.new_stream(), update_state=False)
        feats = model.encoder(frame)
        fused = [model.short_term[lvl](feats[lvl], feats[lvl]) for lvl in range(3)]
        empty = model.new_stream()
        long_feats = [model.long_term[lvl](fused[lvl], empty.banks[lvl])[0]
                      for lvl in range(3)]
        sides = model.decoder(long_feats, (64, 64))
    assert len(pred.side_logits) == len(sides)
    for got, want in zip(pred.side_logits, sides):
        assert torch.equal(got, want)


def test_insertion_happens_after_prediction():
    # frame 0 matches the stride so it is stored, but its own prediction must
    # be computed against the still-empty banks
    model = make_model().eval()
    frame = frame_batch(11)
    with torch.no_grad():
        frozen, _ = model.step(frame, model.new_stream(), update_state=False)
        state = model.new_stream()
        pred, state = model.step(frame, state)
    assert torch.equal(pred.logits, frozen.logits)
    assert all(len(bank) == 1 for bank in state.banks)
    assert state.frame_index == 1


def test_update_state_false_is_pure():
    model = make_model().eval()
    state = model.new_stream()
    with torch.no_grad():
        a, _ = model.step(frame_batch(12), state, update_state=False)
        b, _ = model.step(frame_batch(12), state, update_state=False)
    assert torch.equal(a.logits, b.logits)
    assert state.frame_index == 0
    assert state.prev_pyramid is None
    assert all(len(bank) == 0 for bank in state.banks)


def test_prediction_shapes_track_input():
    model = make_model().eval()
    with torch.no_grad():
        pred, _ = model.step(frame_batch(13, n=2), model.new_stream())
    assert pred.logits.shape == (2, 1, 64, 64)
    assert pred.probability.shape == (2, 1, 64, 64)
    assert pred.probability.min() >= 0.0 and pred.probability.max() <= 1.0
    assert len(pred.side_logits) == 4


# ---------------------------------------------------------------------------
# memory growth over a stream


def test_bank_growth_and_frame_counter():
    model = make_model().eval()
    state = model.new_stream()
    with torch.no_grad():
        for t in range(12):
            _, state = model.step(frame_batch(100 + t), state)
    assert state.frame_index == 12
    for bank in state.banks:   # insertions at 0, 5, 10
        assert len(bank) == 3
        assert bank.frame_indices == [0, 5, 10]
        assert bank.n_evictions == 0


def test_bank_clamps_at_capacity():
    cfg = small_cfg(memory_capacity=4)
    model = make_model(cfg).eval()
    state = model.new_stream()
    with torch.no_grad():
        for t in range(32):    # insertions at 0,5,...,30: seven of them
            _, state = model.step(frame_batch(200 + t), state)
    for bank in state.banks:
        assert len(bank) == 4
        assert bank.n_evictions == 3
        assert len(bank.frame_indices) == 4


# ---------------------------------------------------------------------------
# causality and state serialization


def test_streaming_is_causal():
    model = make_model(seed=3).eval()
    for case in range(3):
        frames = [frame_batch(1000 * case + t) for t in range(8)]
        cut = 3 + case
        tampered = list(frames)
        for i in range(cut, len(frames)):
            tampered[i] = frames[i] + 0.5 * torch.ones_like(frames[i])
        base = [p.logits for p in infer_stream(model, frames)]
        pert = [p.logits for p in infer_stream(model, tampered)]
        for i in range(cut):
            assert torch.equal(base[i], pert[i]), f"prefix diverged at {i}"
        assert not torch.equal(base[cut], pert[cut])


def test_stream_state_round_trip():
    model = make_model(seed=4).eval()
    state = model.new_stream()
    with torch.no_grad():
        for t in range(7):
            _, state = model.step(frame_batch(300 + t), state)
        snapshot = state.state_dict()
        tail = [frame_batch(400 + t) for t in range(3)]
        direct = []
        for f in tail:
            pred, state = model.step(f, state)
            direct.append(pred.logits)
        restored = StreamState.from_state_dict(snapshot)
        assert restored.frame_index == 7
        replay = []
        for f in tail:
            pred, restored = model.step(f, restored)
            replay.append(pred.logits)
    for a, b in zip(direct, replay):
        assert torch.equal(a, b)


def test_state_dict_snapshot_is_isolated():
    model = make_model().eval()
    state = model.new_stream()
    with torch.no_grad():
        for t in range(6):
            _, state = model.step(frame_batch(500 + t), state)
    snapshot = state.state_dict()
    before = snapshot["banks"][0]["keys"][0].clone()
    state.banks[0].keys[0].add_(1.0)
    assert torch.equal(snapshot["banks"][0]["keys"][0], before)


# ---------------------------------------------------------------------------
# ablation wiring at the model level


def test_frame_only_uses_encoder_decoder_alone():
    full = make_model(seed=5).eval()
    fo = VideoSegModel(apply_variant(full.cfg, "frame_only")).eval()
    fo.load_state_dict(full.state_dict())
    frame = frame_batch(20)
    state = fo.new_stream()
    with torch.no_grad():
        pred, state = fo.step(frame, state)
        feats = list(fo.encoder(frame))
        sides = fo.decoder(feats, (64, 64))
    assert torch.equal(pred.logits, sides[-1])
    assert all(len(bank) == 0 for bank in state.banks)


def test_masking_flag_changes_predictions_once_memory_exists():
    full = make_model(seed=6).eval()
    raw = VideoSegModel(apply_variant(full.cfg, "no_masking")).eval()
    raw.load_state_dict(full.state_dict())
    frames = [frame_batch(600 + t) for t in range(3)]
    full_preds = [p.logits for p in infer_stream(full, frames)]
    raw_preds = [p.logits for p in infer_stream(raw, frames)]
    # frame 0 reads an empty bank, so masking cannot matter yet
    assert torch.equal(full_preds[0], raw_preds[0])
    assert not torch.equal(full_preds[1], raw_preds[1])


# ---------------------------------------------------------------------------
# window loading


def test_load_window_and_batch_shapes(tmp_path):
    clip = synth_clip(tmp_path, seed=21, n_frames=8)
    mean, std = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
    frames, masks = load_window(clip, 2, 4, (64, 64), mean, std)
    assert frames.shape == (4, 3, 64, 64)
    assert masks.shape == (4, 1, 64, 64)
    assert set(torch.unique(masks).tolist()) <= {0.0, 1.0}
    bf, bm = load_batch([(clip, 0, 4), (clip, 3, 4)], (64, 64), mean, std)
    assert bf.shape == (2, 4, 3, 64, 64)
    assert bm.shape == (2, 4, 1, 64, 64)
    assert torch.equal(bf[0], frames) is False  # different start offsets


# ---------------------------------------------------------------------------
# training loop


def test_train_runs_and_logs(tmp_path):
    clip = synth_clip(tmp_path, seed=22)
    cfg = small_cfg(train_kw={"max_steps": 3})
    res = train(cfg, [clip], tmp_path / "run", quiet=True)
    assert res.steps == 3
    assert len(res.loss_history) == 3
    assert all(np.isfinite(v) for v in res.loss_history)
    assert res.checkpoint_path.name == "checkpoint-final.pt"
    lines = res.log_path.read_text().strip().splitlines()
    assert lines[0] == "step,epoch,loss,cross_entropy,iou"
    assert len(lines) == 4


def test_train_is_deterministic(tmp_path):
    clip = synth_clip(tmp_path, seed=23)
    cfg = small_cfg(train_kw={"max_steps": 3})
    res_a = train(cfg, [clip], tmp_path / "a", quiet=True)
    res_b = train(cfg, [clip], tmp_path / "b", quiet=True)
    assert res_a.loss_history == res_b.loss_history
    sd_a = load_checkpoint(res_a.checkpoint_path)["model"]
    sd_b = load_checkpoint(res_b.checkpoint_path)["model"]
    for name in sd_a:
        assert torch.equal(sd_a[name], sd_b[name]), name


def test_resume_matches_uninterrupted(tmp_path):
    clip = synth_clip(tmp_path, seed=24)
    cfg = small_cfg(train_kw={"max_steps": 4, "checkpoint_every": 2})
    res_full = train(cfg, [clip], tmp_path / "full", quiet=True)
    mid = tmp_path / "full" / "checkpoint-000002.pt"
    assert mid.exists()
    res_resumed = train(cfg, [clip], tmp_path / "resumed", resume=mid, quiet=True)
    assert res_resumed.loss_history == res_full.loss_history
    sd_f = load_checkpoint(res_full.checkpoint_path)["model"]
    sd_r = load_checkpoint(res_resumed.checkpoint_path)["model"]
    for name in sd_f:
        assert torch.equal(sd_f[name], sd_r[name]), name


def test_divergence_guard_raises(tmp_path):
    clip = synth_clip(tmp_path, seed=25)
    cfg = small_cfg(train_kw={"lr": 1e8, "max_steps": 30})
    with pytest.raises(TrainingDiverged):
        train(cfg, [clip], tmp_path / "run", quiet=True)


def test_train_rejects_short_clips(tmp_path):
    clip = synth_clip(tmp_path, seed=26, n_frames=3)
    cfg = small_cfg(train_kw={"max_steps": 1})  # clip_length 4 > 3 frames
    with pytest.raises(DataError), pytest.warns(UserWarning, match="shorter"):
        train(cfg, [clip], tmp_path / "run", quiet=True)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bitwise(tmp_path):
    clip = synth_clip(tmp_path, seed=27)
    cfg = small_cfg(train_kw={"max_steps": 2})
    res = train(cfg, [clip], tmp_path / "run", quiet=True)
    model, loaded_cfg, payload = model_from_checkpoint(res.checkpoint_path)
    assert loaded_cfg == cfg
    assert payload["step"] == 2
    direct = VideoSegModel(cfg).eval()
    direct.load_state_dict(payload["model"])
    frame = frame_batch(30)
    with torch.no_grad():
        a, _ = model.step(frame, model.new_stream(), update_state=False)
        b, _ = direct.step(frame, direct.new_stream(), update_state=False)
    assert torch.equal(a.logits, b.logits)


def test_checkpoint_version_gate(tmp_path):
    model = make_model()
    cfg = model.cfg
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    path = save_checkpoint(tmp_path / "ck.pt", model, opt, cfg,
                           epoch=0, batch_in_epoch=0, step=0, loss_history=[])
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 999
    torch.save(payload, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_structure_guard_rejects_mismatched_config(tmp_path):
    model = make_model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    path = save_checkpoint(tmp_path / "ck.pt", model, opt, model.cfg,
                           epoch=0, batch_in_epoch=0, step=0, loss_history=[])
    payload = load_checkpoint(path)
    check_structure(payload, model.cfg)  # identical structure passes
    wider = replace(model.cfg, feature_channels=16, value_channels=8)
    with pytest.raises(ConfigError):
        check_structure(payload, wider)
    with pytest.raises(ConfigError):
        train(wider, [], tmp_path / "run", resume=path, quiet=True)


# ---------------------------------------------------------------------------
# inference helpers


def test_infer_stream_yields_per_frame(tmp_path):
    model = make_model(seed=7)
    model.train()  # must be restored afterwards
    frames = [frame_batch(700 + t) for t in range(4)]
    preds = list(infer_stream(model, frames))
    assert [p.frame_index for p in preds] == [0, 1, 2, 3]
    assert all(not p.logits.requires_grad for p in preds)
    assert model.training  # mode restored
    # an explicit state continues the count across calls
    state = model.new_stream()
    list(infer_stream(model, frames[:2], state))
    more = list(infer_stream(model, frames[2:], state))
    assert [p.frame_index for p in more] == [2, 3]


def test_evaluate_on_clips_report(tmp_path):
    clip = synth_clip(tmp_path, seed=28, n_frames=5, clip_id="case")
    model = make_model().eval()
    report = evaluate_on_clips(model, model.cfg, [clip])
    assert report.frame_ids == [f"case/{t:05d}" for t in range(5)]
    agg = report.aggregate()
    assert tuple(agg) == METRIC_ORDER
    for value in agg.values():
        assert 0.0 <= value <= 1.0
