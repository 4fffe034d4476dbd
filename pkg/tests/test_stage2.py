import numpy as np
import pytest

from psc.checkpoint import Checkpoint, meta_from_model_config
from psc.model import DiTConfig, init_params
from psc.pairs import generate_pair
from psc.sampling import SampleConfig
from psc.stage1 import TrainConfig
from psc.stage2 import build_maskfree_condition, infer_lipsync, train_stage2
from psc.tensor import Tensor
from psc.world import (DatasetConfig, SceneRecord, build_scene_spec,
                       render_scene, synth_audio)

MODEL8 = DiTConfig(depth=1, dim=8, heads=2, patch=2, h=8, w=8, audio_dim=6, audio_kv=2,
                   audio_hidden=10, samples_per_frame=8, t_max=16,
                   time_embed_dim=8)


def records8(n=2, seed=0, t_frames=6):
    cfg = DatasetConfig(t_frames=t_frames, h=8, w=8, r=8, face_radius=2,
                        mouth_w=2, mouth_max_open=1)
    out = []
    for i in range(n):
        spec = build_scene_spec(cfg, seed + 3 * i)
        audio = synth_audio(t_frames, cfg.r, seed=40 + i)
        out.append(SceneRecord(scene_id=i, seed=seed + 3 * i,
                               audio_seed=40 + i, spec=spec,
                               clip=render_scene(spec, audio), audio=audio))
    return out


def ckpt8(stage="1", seed=5):
    params = init_params(MODEL8, seed)
    rng = np.random.default_rng(seed)
    for v in params.values():
        v.data[...] = rng.normal(0, 0.05, size=v.data.shape).astype(np.float32)
    meta = meta_from_model_config(MODEL8)
    meta["stage"] = stage
    if stage == "student":
        meta["student.k"] = "2"
    return Checkpoint(tensors={k: Tensor(v.data.copy())
                               for k, v in params.items()}, meta=meta)


def some_pairs(n=3):
    recs = records8(n=n)
    student = ckpt8(stage="student")
    rng = np.random.default_rng(7)
    return [generate_pair(r, student, rng) for r in recs]


def test_maskfree_condition_assembly():
    pair = some_pairs(1)[0]
    template, x_1 = build_maskfree_condition(pair)
    t = pair.x_gt.frames.shape[0]
    assert template.t_total == t  # clip length exactly, no reference frames
    assert template.n_ref == 0
    assert template.m.sum() == t * 8 * 8  # all ones
    assert np.array_equal(template.y, pair.x_gen.frames)
    assert np.array_equal(x_1, pair.x_gt.frames)


def test_maskfree_window_and_offset():
    pair = some_pairs(1)[0]
    template, x_1 = build_maskfree_condition(pair, start=2, length=3,
                                             frame_offset=5)
    assert template.t_total == 3
    assert np.array_equal(template.frame_indices, [5, 6, 7])
    assert np.array_equal(x_1, pair.x_gt.frames[2:5])
    with pytest.raises(ValueError):
        build_maskfree_condition(pair, start=4, length=4)


def test_stage2_token_count_is_half_of_stage1():
    # stage-1 trains on ref_len + tgt_len frames; stage-2 on tgt_len alone
    ref_len = tgt_len = 4
    pair = some_pairs(1)[0]
    template, _ = build_maskfree_condition(pair, 0, tgt_len)
    stage1_frames = ref_len + tgt_len
    assert template.t_total * 2 == stage1_frames


def test_train_zero_steps_keeps_stage1_weights():
    init = ckpt8(stage="1")
    pairs = some_pairs(2)
    out = train_stage2(init, pairs, TrainConfig(steps=0, warmup=0, seed=1,
                                                tgt_len=4))
    assert out.meta["stage"] == "2"
    for name in init.tensors:
        assert np.array_equal(out.tensors[name].data, init.tensors[name].data)


def test_train_deterministic_offline():
    init = ckpt8(stage="1")
    pairs = some_pairs(2)
    cfg = TrainConfig(steps=4, warmup=1, seed=3, tgt_len=4)
    c1 = train_stage2(init, pairs, cfg)
    c2 = train_stage2(init, pairs, cfg)
    for name in c1.tensors:
        assert np.array_equal(c1.tensors[name].data, c2.tensors[name].data)


def test_train_online_source():
    init = ckpt8(stage="1")
    recs = records8(2)
    student = ckpt8(stage="student")
    from psc.pairs import online_pair_source
    source = online_pair_source(recs, student)
    out = train_stage2(init, source, TrainConfig(steps=2, warmup=1, seed=4,
                                                 tgt_len=4))
    assert out.meta["stage"] == "2"


def test_empty_source_rejected():
    with pytest.raises(ValueError):
        train_stage2(ckpt8(), [], TrainConfig(steps=1, warmup=0, seed=0))


def test_infer_lipsync_shapes_and_validation():
    recs = records8(1, t_frames=6)
    ck = ckpt8(stage="2")
    new_audio = synth_audio(6, 8, seed=77)
    out = infer_lipsync(ck, recs[0].clip, new_audio,
                        SampleConfig(steps=2, seed=1))
    assert out.frames.shape == recs[0].clip.frames.shape
    assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0
    short = synth_audio(4, 8, seed=78)
    with pytest.raises(ValueError):
        infer_lipsync(ck, recs[0].clip, short, SampleConfig(steps=2))
