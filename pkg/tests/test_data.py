import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmalane import annotation as ag
from mmalane.data import (SyntheticSceneConfig, VideoClip, generate_synthetic_clip, hflip_clip,
                          load_scene_configs, load_vil100_clip, save_clip,
                          select_memory_frames, shuffle_video_index)
from mmalane.errors import ConfigError, IntegrityError


@pytest.fixture(scope="module")
def clip():
    return generate_synthetic_clip(SyntheticSceneConfig(seed=7, n_lanes=2, length=20,
                                                        frame_size=(128, 64)))


def test_synthetic_label_set(clip):
    assert len(clip) == 20
    assert clip.frames.shape == (20, 64, 128, 3)
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    for m in clip.masks:
        assert set(np.unique(m)) == {0, 1, 2}


def test_synthetic_deterministic(clip):
    again = generate_synthetic_clip(SyntheticSceneConfig(seed=7, n_lanes=2, length=20))
    assert np.array_equal(clip.frames, again.frames)
    assert np.array_equal(clip.masks, again.masks)


def test_synthetic_seed_changes_clip(clip):
    other = generate_synthetic_clip(SyntheticSceneConfig(seed=8, n_lanes=2, length=20))
    assert not np.array_equal(clip.masks, other.masks)


@pytest.mark.parametrize("n", range(1, 7))
def test_synthetic_lane_counts(n):
    c = generate_synthetic_clip(SyntheticSceneConfig(seed=n, n_lanes=n, length=5))
    for m in c.masks:
        assert set(np.unique(m)) == set(range(n + 1))


def test_synthetic_too_many_lanes():
    with pytest.raises(ConfigError):
        generate_synthetic_clip(SyntheticSceneConfig(n_lanes=7))


def test_masks_regenerate_from_control_points(clip):
    again = ag.frames_to_instance_masks(clip.annotations, clip.frame_size, len(clip))
    assert np.array_equal(np.stack(again), clip.masks)


@pytest.mark.parametrize("seed", range(5))
def test_occluders_hide_paint(seed):
    base = dict(seed=seed, n_lanes=3, length=20, frame_size=(256, 128))
    clean = generate_synthetic_clip(SyntheticSceneConfig(**base))
    occl = generate_synthetic_clip(SyntheticSceneConfig(**base, occluders=2))
    assert np.array_equal(clean.masks, occl.masks)
    ref = clean.meta["visible_paint"]
    vis = occl.meta["visible_paint"]
    drop = 1 - vis / np.maximum(ref, 1)
    assert (drop >= 0.3).any()


def test_hflip_swaps_sides(clip):
    flipped = hflip_clip(clip)
    assert np.array_equal(flipped.frames[:, :, ::-1], clip.frames)
    left = clip.masks == 1
    assert np.array_equal(flipped.masks[:, :, ::-1] == 2, left)
    again = ag.frames_to_instance_masks(flipped.annotations, flipped.frame_size, len(flipped))
    assert np.array_equal(np.stack(again), flipped.masks)


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "scene.yaml"
    path.write_text("clips:\n  - {seed: 1, n_lanes: 3}\n  - {seed: 2, frame_size: [64, 32]}\n")
    cfgs = load_scene_configs(path)
    assert [c.seed for c in cfgs] == [1, 2]
    assert cfgs[1].frame_size == (64, 32)
    path.write_text("seed: 1\nn_lanes: 9\n")
    with pytest.raises(ConfigError):
        load_scene_configs(path)
    path.write_text("seed: 1\nbogus: 2\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_scene_configs(path)


# -- shuffling and memory selection -----------------------------------------

def test_shuffle_single():
    assert shuffle_video_index(1, 3).tolist() == [0]


def test_shuffle_deterministic():
    a = shuffle_video_index(5, 11)
    assert sorted(a.tolist()) == list(range(5))
    assert np.array_equal(a, shuffle_video_index(5, 11))


def test_shuffle_uniform():
    counts = Counter(tuple(shuffle_video_index(3, s)) for s in range(10_000))
    assert set(counts) == set(itertools.permutations(range(3)))
    for c in counts.values():
        assert abs(c / 10_000 - 1 / 6) < 0.02


def test_identity_selection_collapses():
    sel = select_memory_frames(100, 50, np.arange(100))
    assert sel.local_indices == sel.global_indices == [45, 46, 47, 48, 49]


def test_selection_padding():
    assert select_memory_frames(6, 2).local_indices == [0, 0, 0, 0, 1]


def test_selection_first_frame():
    sel = select_memory_frames(10, 0, np.arange(10))
    assert sel.local_indices == sel.global_indices == [0] * 5


def test_selection_global_follows_shuffle():
    perm = np.array([3, 0, 4, 1, 2])
    sel = select_memory_frames(5, 1, perm, N=3)
    # t=1 sits at position 3 of the shuffled order
    assert sel.global_indices == [3, 0, 4]
    sel = select_memory_frames(5, 0, perm, N=3)
    assert sel.global_indices == [3, 3, 3]


def test_selection_rejects_bad_input():
    with pytest.raises(ValueError):
        select_memory_frames(5, 5)
    with pytest.raises(ValueError):
        select_memory_frames(3, 0, [0, 0, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.data(), st.sampled_from([3, 5, 7]), st.integers(0, 2**31 - 1))
def test_selection_properties(T, data, N, seed):
    t = data.draw(st.integers(0, T - 1))
    perm = shuffle_video_index(T, seed)
    sel = select_memory_frames(T, t, perm, N)
    assert len(sel.local_indices) == len(sel.global_indices) == N
    assert all(0 <= i < T for i in sel.local_indices + sel.global_indices)
    if t > 0:
        assert all(i < t for i in sel.local_indices)
    ident = select_memory_frames(T, t, np.arange(T), N)
    if t >= N:
        assert ident.global_indices == ident.local_indices
    pos = int(np.flatnonzero(perm == t)[0])
    if pos >= N:
        assert sel.global_indices == perm[pos - N:pos].tolist()


# -- disk layout -------------------------------------------------------------

def test_save_and_load(tmp_path, clip):
    save_clip(clip, tmp_path, "v0")
    loaded = load_vil100_clip(tmp_path, "v0")
    assert len(loaded) == 20
    assert np.array_equal(loaded.masks, clip.masks)
    assert np.abs(loaded.frames - clip.frames).max() <= 0.5 / 255 + 1e-6


def test_cached_masks_match_rasterization(tmp_path, clip):
    save_clip(clip, tmp_path, "v0")
    cached = load_vil100_clip(tmp_path, "v0", use_cache=True)
    fresh = load_vil100_clip(tmp_path, "v0", use_cache=False)
    assert np.array_equal(cached.masks, fresh.masks)


def test_missing_annotation_named(tmp_path, clip):
    video = save_clip(clip, tmp_path, "v0")
    (video / "anno" / "00003.json").unlink()
    with pytest.raises(IntegrityError, match="frame 3"):
        load_vil100_clip(tmp_path, "v0")


def test_hundred_frame_clip(tmp_path):
    c = generate_synthetic_clip(SyntheticSceneConfig(seed=1, length=100, frame_size=(32, 16)))
    save_clip(c, tmp_path, "long", write_masks=False)
    assert len(load_vil100_clip(tmp_path, "long")) == 100


def test_clip_shape_checks():
    with pytest.raises(IntegrityError):
        VideoClip(np.zeros((2, 4, 4, 3)), np.zeros((3, 4, 4), np.uint8))
