"""Data pipeline: prompts, masking, recording, persistence."""

import json

import numpy as np
import pytest

from civil import pipeline, world


# -- prompt resolution -------------------------------------------------------


def test_token_cosine_oracle():
    # |{red, block} & {red, block, lift}| / sqrt(2 * 3)
    assert pipeline.token_cosine("red block", "lift the red block") == pytest.approx(
        2 / (2**0.5 * 4**0.5)
    )
    assert pipeline.token_cosine("", "anything") == 0.0


def test_resolve_prompt_matches_and_sorts():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 1)
    target = next(o for o in scene.objects if o.relevant)
    ids = pipeline.resolve_prompt(f"pick up the {target.class_label}", scene)
    assert target.id in ids
    assert ids == sorted(ids)


def test_resolve_prompt_unresolved_raises():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 1)
    with pytest.raises(pipeline.UnresolvedPrompt):
        pipeline.resolve_prompt("trombone quartet", scene)


# -- masking -----------------------------------------------------------------


def test_mask_observation_zeroes_outside_and_preserves_inside():
    rng = np.random.default_rng(0)
    img = rng.integers(1, 255, size=(16, 16, 3), dtype=np.uint8)
    boxes = [(2, 3, 5, 9), (10, 0, 14, 4)]
    masked = pipeline.mask_observation(img, boxes)
    keep = np.zeros((16, 16), dtype=bool)
    keep[2:5, 3:9] = True
    keep[10:14, 0:4] = True
    np.testing.assert_array_equal(masked[keep], img[keep])
    assert (masked[~keep] == 0).all()


def test_mask_observation_idempotent_and_empty():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
    once = pipeline.mask_observation(img, [(1, 1, 4, 4)])
    twice = pipeline.mask_observation(once, [(1, 1, 4, 4)])
    np.testing.assert_array_equal(once, twice)
    assert (pipeline.mask_observation(img, []) == 0).all()


# -- recording ---------------------------------------------------------------


def test_record_episode_stores_clean_actions_under_noisy_execution():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 6)
    rng = np.random.default_rng(2)
    record = pipeline.record_episode(scene.copy(), rng=rng, action_noise=0.3)

    # stored action at t=0 is the clean expert command for the initial state
    fresh = world.SceneSpec.from_dict(record.scene)
    agent0 = world.initial_agent_state(fresh)
    clean0 = world.expert_action(fresh, agent0).as_vector()
    np.testing.assert_allclose(record.actions[0], clean0, atol=1e-6)

    # but execution was jittered: realized displacement disagrees with the
    # stored velocity on most steps
    disp = np.diff(record.states[:, :2], axis=0) / world.DT
    mismatch = np.linalg.norm(disp - record.actions[:-1, :2], axis=1)
    assert (mismatch > 1e-6).mean() > 0.8


def test_record_episode_noise_free_execution_matches_stored_actions():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 6)
    record = pipeline.record_episode(scene.copy())
    disp = np.diff(record.states[:, :2], axis=0) / world.DT
    stored = record.actions[:-1, :2]
    # displacement equals the stored velocity wherever no clamp engaged
    speeds = np.linalg.norm(stored, axis=1)
    free = speeds <= world.MAX_SPEED + 1e-9
    np.testing.assert_allclose(disp[free], stored[free], atol=1e-5)


def test_record_episode_discards_on_short_horizon():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 7)
    with pytest.raises(pipeline.EpisodeDiscarded):
        pipeline.record_episode(scene.copy(), horizon=3)


def test_episode_masking_invariants():
    scene = world.sample_scene("picking", "train_correlated", "seen_left", 8)
    record = pipeline.record_episode(scene.copy(), noise_std=0.01, dropout_prob=0.2,
                                     rng=np.random.default_rng(3))
    assert record.success
    T = record.length
    assert record.static.shape == (T, 64, 64, 3)
    assert record.masked_static.shape == record.static.shape
    assert record.actions.shape == (T, 3)
    assert set(record.resolved_ids) <= {o.id for o in scene.objects}

    # recompute the mask of frame 0 from the stored boxes
    key_index = {int(k): i for i, k in enumerate(record.box_keys)}
    boxes0 = [tuple(record.boxes_static[0, key_index[i]]) for i in record.resolved_ids]
    np.testing.assert_array_equal(
        record.masked_static[0], pipeline.mask_observation(record.static[0], boxes0)
    )
    # dropped frames store zero readings and a False flag
    absent = ~record.marker_present
    assert absent.any()
    assert (record.marker_values[absent] == 0).all()


def test_play_record_has_observations_but_no_actions():
    scene = world.sample_scene("picking", "test_decorrelated", "unseen_center", 9)
    play = pipeline.record_play_scene(scene, observations=4, rng=np.random.default_rng(4))
    assert play.static.shape[0] == 4
    assert not hasattr(play, "actions")
    assert play.resolved_ids


# -- dataset construction ----------------------------------------------------


def test_build_dataset_counts_and_determinism(tiny_dataset):
    assert len(tiny_dataset.episodes) == 3
    assert len(tiny_dataset.play) == 2
    again = pipeline.build_dataset("picking", n_demos=3, n_play=2, seed=11,
                                   play_observations=2)
    for a, b in zip(tiny_dataset.episodes, again.episodes):
        np.testing.assert_array_equal(a.static, b.static)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.scene == b.scene
    for a, b in zip(tiny_dataset.play, again.play):
        np.testing.assert_array_equal(a.static, b.static)


def test_build_dataset_region_layout(tiny_dataset):
    demo_regions = [ep.region for ep in tiny_dataset.episodes]
    assert set(demo_regions) <= set(world.SEEN_REGIONS)
    assert all(ep.mode == "train_correlated" for ep in tiny_dataset.episodes)
    assert all(p.mode == "test_decorrelated" for p in tiny_dataset.play)


def test_validation_split_deterministic(tiny_dataset):
    t1, v1 = pipeline.validation_split(tiny_dataset, 0.34)
    t2, v2 = pipeline.validation_split(tiny_dataset, 0.34)
    assert (t1, v1) == (t2, v2)
    assert sorted(t1 + v1) == list(range(len(tiny_dataset.episodes)))
    assert v1


# -- persistence -------------------------------------------------------------


def test_save_load_roundtrip_bitwise(tiny_dataset, tmp_path):
    root = tmp_path / "ds"
    pipeline.save_dataset(tiny_dataset, root)
    loaded = pipeline.load_dataset(root)
    assert loaded.task == tiny_dataset.task
    assert len(loaded.episodes) == len(tiny_dataset.episodes)
    for a, b in zip(tiny_dataset.episodes, loaded.episodes):
        for name in ("static", "ego", "masked_static", "masked_ego", "states",
                     "actions", "marker_present", "marker_values"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert a.prompts == b.prompts
        assert [m.marker_id for m in a.markers] == [m.marker_id for m in b.markers]
        assert a.scene == b.scene
    for a, b in zip(tiny_dataset.play, loaded.play):
        np.testing.assert_array_equal(a.masked_static, b.masked_static)


def test_load_detects_tampering(tiny_dataset, tmp_path):
    root = tmp_path / "ds"
    pipeline.save_dataset(tiny_dataset, root)
    victim = next(root.glob("episodes/*/arrays.npz"))
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(pipeline.DatasetChecksumError):
        pipeline.load_dataset(root)


def test_load_rejects_other_versions(tiny_dataset, tmp_path):
    root = tmp_path / "ds"
    pipeline.save_dataset(tiny_dataset, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["format_version"] = 999
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(pipeline.DatasetVersionError):
        pipeline.load_dataset(root)


def test_load_missing_file(tiny_dataset, tmp_path):
    root = tmp_path / "ds"
    pipeline.save_dataset(tiny_dataset, root)
    next(root.glob("episodes/*/arrays.npz")).unlink()
    with pytest.raises(pipeline.DatasetMissingFiles):
        pipeline.load_dataset(root)


def test_append_episode_grows_dataset(tiny_dataset, tmp_path):
    root = tmp_path / "grow"
    first = tiny_dataset.episodes[0]
    assert pipeline.append_episode(root, first) == 0
    assert pipeline.append_episode(root, tiny_dataset.episodes[1]) == 1
    loaded = pipeline.load_dataset(root)
    assert len(loaded.episodes) == 2
    np.testing.assert_array_equal(loaded.episodes[0].static, first.static)

    # a record claiming another task is refused
    import dataclasses

    other = dataclasses.replace(tiny_dataset.episodes[2], task="signal")
    with pytest.raises(pipeline.DatasetError):
        pipeline.append_episode(root, other)
