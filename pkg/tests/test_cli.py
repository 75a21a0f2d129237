import json

import numpy as np
import pytest

from modgnn import cli
from modgnn.config import RunConfig, load_config
from modgnn.evalkit import read_metrics_csv
from modgnn.flocksim import read_dataset
from modgnn.graphcomm import build_comm_graph
from modgnn.model import build_model, load_model
from modgnn.trainer import evaluate_validation, frames_from_episodes, validation_frames

MINIMAL = """
seed = 5
env.n_agents = 2
env.episode_len = 10
train.n_episodes = 1
train.epochs = 0
eval.episodes = 1
matrix.variants = ["gcn"]
matrix.K = [1]
matrix.N = [2]
paths.dataset = "out/data.jsonl"
paths.checkpoints = "out/ckpt"
paths.reports = "out/reports"
"""

SMALL = """
seed = 1
env.n_agents = 4
env.episode_len = 20
train.n_episodes = 4
train.epochs = 3
model.K = 1
model.hidden = 8
eval.episodes = 1
matrix.variants = ["gcn", "modgnn_mlp"]
matrix.K = [1]
matrix.N = [3, 4]
"""


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_minimal_dataset_has_ten_frames(tmp_path, capsys):
    cfg = write_config(tmp_path, MINIMAL)
    assert run("gen-data", "--config", cfg) == 0
    assert "1 episodes, 10 frames" in capsys.readouterr().out
    header, episodes = read_dataset(tmp_path / "out/data.jsonl")
    assert sum(len(ep) for ep in episodes) == 10
    assert header["run_config"]["seed"] == 5


def test_gen_data_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("gen-data", "--config", cfg, "--out", a) == 0
    assert run("gen-data", "--config", cfg, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_flag_changes_the_data(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run("gen-data", "--config", cfg, "--out", a)
    run("gen-data", "--config", cfg, "--out", b, "--seed", 6)
    assert a.read_bytes() != b.read_bytes()


def test_recorded_adjacency_matches_recomputation(tmp_path):
    text = 'env.n_agents = 8\nenv.r_com = 3.5\nenv.episode_len = 30\ntrain.n_episodes = 2\npaths.dataset = "d.jsonl"\n'
    cfg = write_config(tmp_path, text)
    assert run("gen-data", "--config", cfg) == 0
    _, episodes = read_dataset(tmp_path / "d.jsonl")
    for ep in episodes:
        for t in range(len(ep)):
            assert np.array_equal(ep.adjacency[t], build_comm_graph(ep.positions[t], 3.5).adjacency)


def test_unknown_key_exits_with_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, "env.n_agnets = 3\n")
    assert run("gen-data", "--config", cfg) == 1
    assert "env.n_agnets" in capsys.readouterr().err


def test_wrong_type_exits_with_config_error(tmp_path):
    cfg = write_config(tmp_path, 'train.epochs = "many"\n')
    assert run("gen-data", "--config", cfg) == 1


def test_train_without_dataset_fails(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    assert run("train", "--config", cfg, "--variant", "gcn", "--K", 1) == 2


def test_zero_epoch_training_writes_initialization(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    run("gen-data", "--config", cfg)
    assert run("train", "--config", cfg, "--variant", "gcn", "--K", 1) == 0
    model, header = load_model(tmp_path / "out/ckpt/gcn_K1.json")
    init = build_model(load_config(cfg).model_config("gcn", 1))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), init.parameters()))
    assert header["model_variant"] == "gcn" and header["K"] == 1


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, MINIMAL)
    assert run("eval", "--config", cfg, "--variant", "modgnn_mlp", "--K", 1) == 2
    assert "modgnn_mlp_K1.json" in capsys.readouterr().err
    assert run("matrix", "--config", cfg) == 2


def test_expert_eval_has_zero_error(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    assert run("eval", "--config", cfg, "--variant", "expert", "--K", 1) == 0
    path = tmp_path / "out/reports/eval_expert_K1.csv"
    (row,) = read_metrics_csv(path)
    assert row.error == 0.0 and row.variant == "expert"
    meta = json.loads((tmp_path / "out/reports/eval_expert_K1.csv.meta.json").read_text())
    assert meta["run_config"]["seed"] == 5


def test_single_cell_matrix(tmp_path):
    cfg = write_config(tmp_path, MINIMAL)
    run("gen-data", "--config", cfg)
    run("train", "--config", cfg, "--variant", "gcn", "--K", 1)
    assert run("matrix", "--config", cfg) == 0
    rows = read_metrics_csv(tmp_path / "out/reports/matrix.csv")
    assert [(r.variant, r.K, r.N) for r in rows] == [("gcn", 1, 2)]


def test_inspect_prints_headers(tmp_path, capsys):
    cfg = write_config(tmp_path, MINIMAL)
    run("gen-data", "--config", cfg)
    run("train", "--config", cfg, "--variant", "gcn", "--K", 1)
    capsys.readouterr()
    assert run("inspect", tmp_path / "out/data.jsonl") == 0
    assert json.loads(capsys.readouterr().out)["n_episodes"] == 1
    assert run("inspect", tmp_path / "out/ckpt/gcn_K1.json") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_parameters"] == 2 * 6 * 3 and "params" not in doc
    assert run("inspect", tmp_path / "nope.json") == 2


def test_help_lists_config_defaults(capsys):
    with pytest.raises(SystemExit):
        run("--help")
    out = capsys.readouterr().out
    assert "env.leader_noise = 0.02" in out and "train.epochs = 30" in out


def _pipeline(root, cfg):
    assert run("gen-data", "--config", cfg) == 0
    for variant in ("gcn", "modgnn_mlp"):
        assert run("train", "--config", cfg, "--variant", variant) == 0
    assert run("eval", "--config", cfg, "--variant", "modgnn_mlp") == 0
    assert run("matrix", "--config", cfg) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.suffix != ".toml"}


def test_full_pipeline_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    a = _pipeline(first, write_config(first, SMALL))
    b = _pipeline(second, write_config(second, SMALL))
    assert a.keys() == b.keys() and len(a) >= 10
    assert all(a[k] == b[k] for k in a)


def test_variants_log_identical_batch_schedules(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    run("gen-data", "--config", cfg)
    digests = []
    for variant in ("gcn", "modgnn_mlp"):
        run("train", "--config", cfg, "--variant", variant)
        report = json.loads((tmp_path / f"out/reports/{variant}_K1.report.json").read_text())
        digests.append(report["report"]["schedule_digest"])
    assert digests[0] == digests[1] and digests[0]


def test_trained_model_beats_zero_predictor(tmp_path):
    cfg_path = write_config(tmp_path, SMALL.replace("train.epochs = 3", "train.epochs = 8"))
    run("gen-data", "--config", cfg_path)
    assert run("train", "--config", cfg_path, "--variant", "modgnn_mlp") == 0
    cfg = load_config(cfg_path)
    report = json.loads((tmp_path / "out/reports/modgnn_mlp_K1.report.json").read_text())["report"]
    _, episodes = read_dataset(cfg.path("dataset"))
    frames = frames_from_episodes(episodes)
    zero = build_model(cfg.model_config("gcn"))
    for p in zero.parameters():
        p.data[...] = 0.0
    val = validation_frames(frames, cfg.train_config("modgnn_mlp"))
    assert report["val_loss"][-1] < evaluate_validation(zero, val)


def test_default_config_round_trips_through_resolved():
    cfg = RunConfig()
    assert cfg.resolved()["env"]["action_noise"] == 0.5
    assert cfg.env_config().seed == RunConfig().env_config().seed
