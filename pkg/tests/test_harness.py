"""Command line workflows and the teleoperation service.

CLI tests run the command functions in-process with tiny configs; the
service is exercised through FastAPI's TestClient, including one full
drive-record-save-train loop.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from civil import learn, model, pipeline, world
from civil.harness import cli, config as cfg, service


TINY = dict(n_demos=3, n_play=2, play_observations=2, epochs=2,
            causal_epochs=2, batch_size=64, n_seen=2, n_unseen=2, horizon=10)


def tiny_run_config(**overrides) -> cfg.RunConfig:
    merged = dict(TINY, seed=11)
    merged.update(overrides)
    return cfg.RunConfig(**merged)


# --------------------------------------------------------------------------
# RunConfig


def test_unknown_config_keys_rejected():
    with pytest.raises(ValueError, match="epocs"):
        cfg.RunConfig.from_sources({"epocs": 3})


def test_none_values_do_not_override():
    merged = cfg.RunConfig.from_sources({"task": "signal"}, {"task": None})
    assert merged.task == "signal"


def test_later_sources_win():
    merged = cfg.RunConfig.from_sources({"seed": 1}, {"seed": 5})
    assert merged.seed == 5


def test_feature_dims_coerced_to_int_tuple():
    merged = cfg.RunConfig.from_sources({"feature_dims": [2.0, 4]})
    assert merged.feature_dims == (2, 4)
    assert all(isinstance(d, int) for d in merged.feature_dims)


@pytest.mark.parametrize(
    "bad",
    [
        {"task": "flying"},
        {"method": "magic"},
        {"dropout_prob": 1.5},
        {"port": 0},
        {"mc_trials": 10},
        {"feature_dims": ()},
        {"teleop_region": "mars"},
        {"teleop_mode": "dreaming"},
        {"epochs": 0},
        {"validation_fraction": 1.0},
        {"budget_seconds": 0.0},
        {"n_demos": -1},
    ],
)
def test_config_validation_rejects(bad):
    with pytest.raises(ValueError):
        cfg.RunConfig(**bad)


def test_config_file_roundtrip(tmp_path):
    original = tiny_run_config(task="signal", feature_dims=(1, 3))
    path = tmp_path / "run.json"
    original.save(path)
    loaded = cfg.RunConfig.from_file(path)
    assert loaded == original


def test_config_file_flag_precedence(tmp_path):
    tiny_run_config(seed=3).save(tmp_path / "run.json")
    loaded = cfg.RunConfig.from_file(tmp_path / "run.json", {"seed": 9})
    assert loaded.seed == 9


def test_config_file_must_be_object(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("[1, 2]\n")
    with pytest.raises(ValueError):
        cfg.RunConfig.from_file(path)


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cfg.DATA_ROOT_ENV, str(tmp_path / "elsewhere"))
    assert cfg.data_root() == tmp_path / "elsewhere"
    monkeypatch.delenv(cfg.DATA_ROOT_ENV)
    assert cfg.data_root() == Path("civil_data")


def test_train_config_carries_fields_through():
    run = tiny_run_config(method="civil", learning_rate=5e-4, play_weight=3.0)
    train = run.train_config()
    assert train.method == "civil"
    assert train.learning_rate == 5e-4
    assert train.play_weight == 3.0
    assert train.causal_epochs == run.causal_epochs


# --------------------------------------------------------------------------
# CLI commands


@pytest.fixture()
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cfg.DATA_ROOT_ENV, str(tmp_path / "root"))
    return tmp_path / "root"


@pytest.fixture(scope="module")
def trained_bc_dir(tmp_path_factory):
    """One tiny bc training run shared by the eval tests."""
    out = tmp_path_factory.mktemp("bc_run")
    cli.cli_train(tiny_run_config(method="bc", out=str(out)))
    return out


def test_gen_data_writes_loadable_dataset(run_root):
    out = cli.cli_gen_data(tiny_run_config())
    assert out == run_root / "datasets" / "picking_seed11"
    dataset = pipeline.load_dataset(out)
    assert len(dataset.episodes) == 3
    assert len(dataset.play) == 2
    assert (out / "run_config.json").exists()


def test_gen_data_same_config_same_manifest(run_root, tmp_path):
    a = cli.cli_gen_data(tiny_run_config(out=str(tmp_path / "a")))
    b = cli.cli_gen_data(tiny_run_config(out=str(tmp_path / "b")))
    manifest_a = json.loads((a / "manifest.json").read_text())
    manifest_b = json.loads((b / "manifest.json").read_text())
    assert manifest_a["checksums"] == manifest_b["checksums"]


def test_train_bc_outputs(trained_bc_dir):
    for name in ("model.pt", "train_report.json", "loss_curves.png", "run_config.json"):
        assert (trained_bc_dir / name).exists(), name
    assert not (trained_bc_dir / "phase1.pt").exists()
    bundle, extra = model.load_checkpoint(trained_bc_dir / "model.pt")
    assert extra["task"] == "picking"
    assert extra["method"] == "bc"
    assert extra["n_demos"] == 3
    assert len(extra["reports"]) == 1
    reports = json.loads((trained_bc_dir / "train_report.json").read_text())
    assert reports[0]["epochs_run"] == 2


def test_train_civil_resume_reproduces_model(run_root, tmp_path):
    out = tmp_path / "civil_run"
    run = tiny_run_config(method="civil", out=str(out))
    cli.cli_train(run)
    assert (out / "phase1.pt").exists()
    bundle, extra = model.load_checkpoint(out / "model.pt")
    assert len(extra["reports"]) == 2
    full_prints = {
        name: model.module_fingerprint(getattr(bundle, name))
        for name in model.ModelBundle.MODULE_NAMES
    }

    (out / "model.pt").unlink()
    cli.cli_train(replace(run, resume=True))
    resumed, _ = model.load_checkpoint(out / "model.pt")
    for name in model.ModelBundle.MODULE_NAMES:
        assert model.module_fingerprint(getattr(resumed, name)) == full_prints[name]


def test_resume_needs_two_phase_method(run_root, tmp_path):
    run = tiny_run_config(method="bc", out=str(tmp_path / "r"), resume=True)
    with pytest.raises(cli.UsageError, match="one phase"):
        cli.cli_train(run)


def test_resume_needs_phase1_checkpoint(run_root, tmp_path):
    run = tiny_run_config(method="civil", out=str(tmp_path / "r"), resume=True)
    with pytest.raises(cli.UsageError, match="phase-1"):
        cli.cli_train(run)


def test_train_rejects_mismatched_dataset_task(run_root, tmp_path):
    data_dir = cli.cli_gen_data(tiny_run_config(out=str(tmp_path / "d")))
    run = tiny_run_config(task="signal", data=str(data_dir), out=str(tmp_path / "r"))
    with pytest.raises(cli.UsageError, match="picking"):
        cli.cli_train(run)


def test_eval_requires_checkpoint(run_root, tmp_path):
    with pytest.raises(cli.UsageError, match="train first"):
        cli.cli_eval(tiny_run_config(out=str(tmp_path / "empty")))


def test_eval_writes_report_and_aggregate(run_root, trained_bc_dir):
    report = cli.cli_eval(tiny_run_config(method="bc", out=str(trained_bc_dir)))
    assert report.n_rollouts == 4
    saved = json.loads((trained_bc_dir / "eval_report.json").read_text())
    assert saved["method"] == "bc"
    assert 0.0 <= saved["success_rate_unseen"] <= 1.0
    assert (trained_bc_dir / "success_rates.png").exists()
    table = run_root / "reports" / "success_table.csv"
    assert table.exists()
    assert "bc" in table.read_text()


def test_eval_uses_checkpoint_metadata_over_config(run_root, trained_bc_dir):
    # method/task recorded at train time win over what the eval config says
    report = cli.cli_eval(
        tiny_run_config(method="civil", task="signal",
                        out=str(trained_bc_dir), model=str(trained_bc_dir / "model.pt"))
    )
    assert report.method == "bc"
    assert report.task == "picking"


def test_theory_cli_outputs(run_root, tmp_path):
    out = cli.cli_theory(tiny_run_config(
        out=str(tmp_path / "theory"), feature_dims=(1, 2), mc_trials=200))
    payload = json.loads((out / "theory_report.json").read_text())
    kinds = [r["experiment"] for r in payload["records"]]
    assert kinds.count("estimator_covariance") == 4
    assert "entropy_scaling" in kinds and "confusion_duplicated" in kinds
    confusion = next(r for r in payload["records"]
                     if r["experiment"] == "confusion_duplicated")
    # min-norm splits the duplicated weight, so the unit-state probe
    # predicts 0.5 where the truth is 1.0
    assert abs(confusion["metrics"]["probe_prediction_at_unit_state"] - 0.5) < 1e-9
    assert abs(confusion["metrics"]["probe_absolute_error"] - 0.5) < 1e-9
    assert confusion["metrics"]["train_rmse"] < 1e-9
    assert confusion["metrics"]["decorrelated_test_rmse"] > 0.1
    assert (out / "entropy_vs_d.png").exists()
    assert (out / "covariance_heatmaps.png").exists()


def test_main_roundtrip_and_error_paths(run_root, tmp_path, capsys):
    rc = cli.main([
        "gen-data", "--task", "picking", "--seed", "4",
        "--n-demos", "2", "--n-play", "1", "--out", str(tmp_path / "d"),
    ])
    assert rc == 0
    assert pipeline.load_dataset(tmp_path / "d").seed == 4

    rc = cli.main(["train", "--task", "signal", "--data", str(tmp_path / "d"),
                   "--method", "bc", "--epochs", "1", "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err

    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "swimming"])


def test_main_reads_config_file(run_root, tmp_path, capsys):
    path = tmp_path / "run.json"
    tiny_run_config(seed=7, out=str(tmp_path / "d")).save(path)
    assert cli.main(["gen-data", "--config", str(path)]) == 0
    assert pipeline.load_dataset(tmp_path / "d").seed == 7


# --------------------------------------------------------------------------
# Teleoperation service


@pytest.fixture()
def teleop(tmp_path, monkeypatch):
    monkeypatch.setenv(cfg.DATA_ROOT_ENV, str(tmp_path / "root"))
    episodes_dir = tmp_path / "episodes"
    run = tiny_run_config(noise_std=0.0, dropout_prob=0.0, out=str(episodes_dir))
    app = service.create_app(run)
    with TestClient(app) as client:
        yield client, episodes_dir


def make_session(client, task="picking", seed=5, **extra):
    body = {"task": task, "seed": seed, "mode": "train_correlated",
            "region": "seen_left", **extra}
    response = client.post("/api/v1/sessions", json=body)
    assert response.status_code == 201, response.text
    return response.json()


def scene_dump(client, sid):
    return client.get(f"/api/v1/sessions/{sid}/scene").json()


def relevant_ids(dump):
    return [o["id"] for o in dump["scene"]["objects"] if o["relevant"]]


def place_markers(client, sid, object_ids):
    for oid in object_ids:
        response = client.post(f"/api/v1/sessions/{sid}/marker",
                               json={"object_id": oid})
        assert response.status_code == 200, response.text


def test_health(teleop):
    client, episodes_dir = teleop
    payload = client.get("/api/v1/health").json()
    assert payload["status"] == "ok"
    assert payload["dataset_dir"] == str(episodes_dir)


def test_create_session_validation(teleop):
    client, _ = teleop
    assert client.post("/api/v1/sessions", json={"task": "flying"}).status_code == 422
    assert client.post("/api/v1/sessions",
                       json={"task": "picking", "mode": "nope"}).status_code == 422
    assert client.post("/api/v1/sessions",
                       json={"task": "picking", "region": "moon"}).status_code == 422


def test_unknown_session_is_404(teleop):
    client, _ = teleop
    assert client.get("/api/v1/sessions/nope/frame").status_code == 404
    assert client.post("/api/v1/sessions/nope/action",
                       json={"velocity": [0, 0]}).status_code == 404


def test_action_requires_markers_first(teleop):
    client, _ = teleop
    sid = make_session(client)["session_id"]
    response = client.post(f"/api/v1/sessions/{sid}/action",
                           json={"velocity": [0.1, 0.0]})
    assert response.status_code == 409
    assert "marker" in response.json()["detail"]


def test_action_velocity_must_be_finite(teleop):
    # python's json parser accepts the Infinity/NaN literals, so they can
    # arrive over the wire even though compliant encoders refuse them
    client, _ = teleop
    sid = make_session(client)["session_id"]
    place_markers(client, sid, relevant_ids(scene_dump(client, sid)))
    url = f"/api/v1/sessions/{sid}/action"
    headers = {"Content-Type": "application/json"}
    for literal in ("Infinity", "-Infinity", "NaN"):
        response = client.post(
            url, content='{"velocity": [%s, 0.0]}' % literal, headers=headers
        )
        assert response.status_code == 422, literal
        assert "finite" in response.json()["detail"][0]["msg"]
    # the rejected steps must not have advanced the session
    frame = client.get(f"/api/v1/sessions/{sid}/frame").json()
    assert frame["step"] == 0


def test_marker_slots_and_duplicates(teleop):
    client, _ = teleop
    created = make_session(client, task="signal")
    assert created["marker_slots"] == 2
    sid = created["session_id"]
    ids = relevant_ids(scene_dump(client, sid))
    place_markers(client, sid, ids[:1])
    dup = client.post(f"/api/v1/sessions/{sid}/marker", json={"object_id": ids[0]})
    assert dup.status_code == 409
    assert "already" in dup.json()["detail"]
    place_markers(client, sid, ids[1:2])
    full = client.post(f"/api/v1/sessions/{sid}/marker", json={"object_id": ids[2]})
    assert full.status_code == 409


def test_marker_by_position_snaps_or_rejects(teleop):
    client, _ = teleop
    sid = make_session(client)["session_id"]
    dump = scene_dump(client, sid)
    target = next(o for o in dump["scene"]["objects"] if o["relevant"])
    hit = client.post(
        f"/api/v1/sessions/{sid}/marker",
        json={"position": [target["position"][0] + 0.01, target["position"][1]]},
    )
    assert hit.status_code == 200
    assert hit.json()["object_id"] == target["id"]

    other = make_session(client, seed=6)["session_id"]
    positions = np.array(
        [o["position"] for o in scene_dump(client, other)["scene"]["objects"]]
    )
    probe = [0.95, 0.05]  # corner far from every object
    assert np.linalg.norm(positions - probe, axis=1).min() > 0.1
    miss = client.post(f"/api/v1/sessions/{other}/marker", json={"position": probe})
    assert miss.status_code == 400


def test_marker_body_needs_exactly_one_field(teleop):
    client, _ = teleop
    sid = make_session(client)["session_id"]
    assert client.post(f"/api/v1/sessions/{sid}/marker", json={}).status_code == 422
    both = client.post(f"/api/v1/sessions/{sid}/marker",
                       json={"object_id": 0, "position": [0.5, 0.5]})
    assert both.status_code == 422


def test_marker_after_motion_rejected(teleop):
    client, _ = teleop
    sid = make_session(client, task="signal")["session_id"]
    ids = relevant_ids(scene_dump(client, sid))
    place_markers(client, sid, ids[:2])
    client.post(f"/api/v1/sessions/{sid}/action", json={"velocity": [0.1, 0.0]})
    # a slot-free task would still refuse: motion has started
    late = client.post(f"/api/v1/sessions/{sid}/marker", json={"object_id": ids[2]})
    assert late.status_code == 409
    assert "before" in late.json()["detail"]


def test_prompt_resolution(teleop):
    client, _ = teleop
    sid = make_session(client)["session_id"]
    dump = scene_dump(client, sid)
    label = next(o["class_label"] for o in dump["scene"]["objects"] if o["relevant"])
    good = client.post(f"/api/v1/sessions/{sid}/prompt",
                       json={"text": f"pick up the {label}"})
    assert good.status_code == 200
    assert good.json()["prompt_count"] == 1
    bad = client.post(f"/api/v1/sessions/{sid}/prompt",
                      json={"text": "zzz qqq xxx"})
    assert bad.status_code == 400


def test_frame_payload_shape(teleop):
    import base64
    import io

    from PIL import Image

    client, _ = teleop
    sid = make_session(client)["session_id"]
    frame = client.get(f"/api/v1/sessions/{sid}/frame").json()
    assert frame["step"] == 0
    assert frame["status"] == "active"
    assert frame["can_place_marker"] is True
    image = Image.open(io.BytesIO(base64.b64decode(frame["static_png"])))
    assert image.size == (world.STATIC_RES, world.STATIC_RES)
    ego = Image.open(io.BytesIO(base64.b64decode(frame["ego_png"])))
    assert ego.size == (world.EGO_RES, world.EGO_RES)
    assert {"id", "class_label", "position"} <= set(frame["objects"][0])
    assert "relevant" not in frame["objects"][0]

    place_markers(client, sid, relevant_ids(scene_dump(client, sid)))
    client.post(f"/api/v1/sessions/{sid}/action", json={"velocity": [0.1, 0.0]})
    frame = client.get(f"/api/v1/sessions/{sid}/frame").json()
    assert frame["step"] == 1
    assert frame["can_place_marker"] is False
    assert len(frame["markers"]) == 1


def test_finish_without_success_discards(teleop):
    client, episodes_dir = teleop
    sid = make_session(client)["session_id"]
    place_markers(client, sid, relevant_ids(scene_dump(client, sid)))
    client.post(f"/api/v1/sessions/{sid}/action", json={"velocity": [0.1, 0.0]})
    done = client.post(f"/api/v1/sessions/{sid}/finish", json={"save": True})
    assert done.status_code == 200
    payload = done.json()
    assert payload["success"] is False
    assert payload["saved"] is False
    assert not episodes_dir.exists()

    again = client.post(f"/api/v1/sessions/{sid}/finish", json={"save": True})
    assert again.status_code == 409
    moved = client.post(f"/api/v1/sessions/{sid}/action", json={"velocity": [0, 0]})
    assert moved.status_code == 409


def test_budget_exhaustion_blocks_actions(teleop):
    client, _ = teleop
    sid = make_session(client, budget_seconds=0.01)["session_id"]
    place_markers(client, sid, relevant_ids(scene_dump(client, sid)))
    time.sleep(0.05)
    response = client.post(f"/api/v1/sessions/{sid}/action",
                           json={"velocity": [0.1, 0.0]})
    assert response.status_code == 409
    assert "budget" in response.json()["detail"]
    # finishing is still allowed so the teacher can keep a long success
    assert client.post(f"/api/v1/sessions/{sid}/finish",
                       json={"save": False}).status_code == 200


def drive_to_success(client, sid, cap=400):
    for _ in range(cap):
        suggestion = client.get(f"/api/v1/sessions/{sid}/expert").json()
        response = client.post(
            f"/api/v1/sessions/{sid}/action",
            json={"velocity": suggestion["velocity"],
                  "gripper_toggle": suggestion["gripper_toggle"]},
        )
        assert response.status_code == 200, response.text
        if response.json()["success"]:
            return response.json()["step"]
    raise AssertionError("expert drive never reached success")


def test_drive_save_and_train(teleop, tmp_path):
    client, episodes_dir = teleop
    sid = make_session(client, seed=9)["session_id"]
    dump = scene_dump(client, sid)
    target = next(o for o in dump["scene"]["objects"]
                  if o["relevant"] and o["graspable"])
    place_markers(client, sid, [target["id"]])
    prompt = client.post(f"/api/v1/sessions/{sid}/prompt",
                         json={"text": f"grab the {target['class_label']}"})
    assert prompt.status_code == 200

    steps = drive_to_success(client, sid)
    done = client.post(f"/api/v1/sessions/{sid}/finish", json={"save": True}).json()
    assert done["saved"] is True
    assert done["episode_index"] == 0
    assert done["steps"] == steps

    dataset = pipeline.load_dataset(episodes_dir)
    assert dataset.task == "picking"
    assert len(dataset.episodes) == 1
    episode = dataset.episodes[0]
    assert len(episode.markers) >= 1
    assert len(episode.prompts) >= 1
    assert episode.length == steps
    assert episode.actions.shape == (steps, 3)
    # glyphs never reach storage: every stored pixel matches a markerless render
    scene = world.SceneSpec.from_dict(episode.scene)
    agent = world.initial_agent_state(scene)
    clean = world.render(scene, agent, "static")
    assert np.array_equal(episode.static[0], clean)

    out = tmp_path / "teleop_train"
    run = tiny_run_config(method="bc", data=str(episodes_dir), out=str(out), epochs=1)
    cli.cli_train(run)
    assert (out / "model.pt").exists()


def test_saved_session_is_frozen_and_reload_matches(teleop):
    client, episodes_dir = teleop
    sid = make_session(client, seed=12)["session_id"]
    dump = scene_dump(client, sid)
    target = next(o for o in dump["scene"]["objects"]
                  if o["relevant"] and o["graspable"])
    place_markers(client, sid, [target["id"]])
    client.post(f"/api/v1/sessions/{sid}/prompt",
                json={"text": f"lift the {target['class_label']}"})
    drive_to_success(client, sid)
    client.post(f"/api/v1/sessions/{sid}/finish", json={"save": True})

    frame = client.get(f"/api/v1/sessions/{sid}/frame").json()
    assert frame["status"] == "saved"
    blocked = client.post(f"/api/v1/sessions/{sid}/marker", json={"object_id": 0})
    assert blocked.status_code == 409

    # a second success appends rather than overwriting
    other = make_session(client, seed=13)["session_id"]
    dump = scene_dump(client, other)
    target = next(o for o in dump["scene"]["objects"]
                  if o["relevant"] and o["graspable"])
    place_markers(client, other, [target["id"]])
    client.post(f"/api/v1/sessions/{other}/prompt",
                json={"text": f"take the {target['class_label']}"})
    drive_to_success(client, other)
    payload = client.post(f"/api/v1/sessions/{other}/finish",
                          json={"save": True}).json()
    assert payload["episode_index"] == 1
    assert len(pipeline.load_dataset(episodes_dir).episodes) == 2
