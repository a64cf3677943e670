import json
import re
import subprocess
import sys

import numpy as np
import pytest

from riftsim.cli import histogram, main
from riftsim.policy import ScoringParams
from riftsim.worldmap import intersection_scenario

from logs import straight_log


@pytest.fixture
def scenario_file(tmp_path):
    sc = intersection_scenario(5, horizon=25)
    sc.scenario_id = "s5"
    path = tmp_path / "s5.json"
    sc.save(path)
    return path


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_missing_scenario_exit_2(tmp_path):
    assert main(["simulate", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_exit_2(tmp_path):
    assert main(["train", "--objective", "sac", "--out", str(tmp_path)]) == 2


def test_unknown_config_key_exit_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"buffer_capacity": 8, "mystery": 1}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_simulate_writes_logs_and_is_deterministic(tmp_path, scenario_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(a), "--seed", "1"]) == 0
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(b), "--seed", "1"]) == 0
    assert set(_files(a)) == {"episode_s5.csv", "summary.json"}
    assert _files(a) == _files(b)
    assert (a / "episode_s5.csv").read_text().startswith("# schema=riftsim-episode/1")


def test_checkpoint_changes_selection(tmp_path, scenario_file):
    w = np.zeros(8)
    w[2] = 5.0
    ckpt = tmp_path / "ckpt.json"
    ScoringParams(w).save(ckpt)
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(tmp_path / "u")]) == 0
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(tmp_path / "c"),
                 "--checkpoint", str(ckpt)]) == 0
    from riftsim.metrics import EpisodeLog
    u = EpisodeLog.read_csv(tmp_path / "u" / "episode_s5.csv")
    c = EpisodeLog.read_csv(tmp_path / "c" / "episode_s5.csv")
    su = u["selected"][u["controlled"] == 1]
    sc = c["selected"][c["controlled"] == 1]
    assert len(su) and len(sc) and not np.array_equal(su[: len(sc)], sc[: len(su)])


def test_malformed_checkpoint_exit_2(tmp_path, scenario_file):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(bad)]) == 2


def _train(tmp_path, out, objective="rift", iterations=1):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"buffer_capacity": 8, "batch_size": 4, "epochs": 2, "warmup_epochs": 1,
                               "iterations": iterations, "n_scenarios": 2}))
    return main(["train", "--config", str(cfg), "--out", str(out), "--objective", objective, "--seed", "2"])


def test_train_outputs_and_rerun(tmp_path):
    assert _train(tmp_path, tmp_path / "a") == 0
    assert _train(tmp_path, tmp_path / "b") == 0
    fa = _files(tmp_path / "a")
    assert {"checkpoint.json", "train_stats.jsonl", "train_config.json"} <= set(fa)
    assert fa == _files(tmp_path / "b")


def test_train_zero_iterations_is_init(tmp_path):
    assert _train(tmp_path, tmp_path / "z", iterations=0) == 0
    p = ScoringParams.load(tmp_path / "z" / "checkpoint.json")
    assert np.all(p.vector() == 0.0)


def test_train_grpo_records_kl(tmp_path):
    assert _train(tmp_path, tmp_path / "g", objective="grpo") == 0
    rows = [json.loads(x) for x in (tmp_path / "g" / "train_stats.jsonl").read_text().splitlines()]
    assert rows[-1]["kl"] > 0 and rows[-1]["objective_variant"] == "grpo"


def test_train_runtime_failure_exit_3(tmp_path, scenario_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"buffer_capacity": 100000, "batch_size": 4, "iterations": 1}))
    assert main(["train", "--config", str(cfg), "--scenario", str(scenario_file), "--out", str(tmp_path / "o")]) == 3


def test_metrics_command(tmp_path):
    logs = tmp_path / "logs"
    logs.mkdir()
    log = straight_log(n_steps=401, collision_with=lambda k: 0 if k in (3, 300) else -1)
    log.write_csv(logs / "episode_a.csv")
    log.write_csv(logs / "episode_b.csv")
    assert main(["metrics", str(logs), "--out", str(tmp_path / "m")]) == 0
    rep = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert rep["episodes"][0]["metrics"]["CPK"]["value"] == 5.0
    assert rep["aggregate"]["CPK"]["value"] == 5.0
    lines = (tmp_path / "m" / "metrics.csv").read_text().splitlines()
    header = lines[1].split(",")
    assert lines[0].startswith("# schema=")
    assert lines[2].split(",")[header.index("CPK")] == "5.0"
    before = _files(tmp_path / "m")
    assert main(["metrics", str(logs), "--out", str(tmp_path / "m")]) == 0
    assert _files(tmp_path / "m") == before


def test_metrics_empty_dir_exit_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["metrics", str(tmp_path / "empty")]) == 2


def test_histogram_counts():
    counts, edges = histogram([0.0, 0.2, 0.9, 1.0], bins=2)
    assert counts.tolist() == [2, 2] and edges.tolist() == [0.0, 0.5, 1.0]
    counts, _ = histogram([])
    assert len(counts) == 0


def test_plot_outputs(tmp_path):
    logs = tmp_path / "logs"
    logs.mkdir()
    straight_log(n_steps=20).write_csv(logs / "episode_x.csv")
    stats = tmp_path / "train_stats.jsonl"
    stats.write_text("".join(json.dumps({"iteration": i, "epoch": 0, "mean_return": -i}) + "\n" for i in range(3)))
    assert main(["plot", str(logs), str(stats), "--out", str(tmp_path / "p")]) == 0
    files = _files(tmp_path / "p")
    assert set(files) == {f"{s}.{e}" for s in ("speed_hist", "accel_hist", "train_return") for e in ("svg", "csv")}
    speed = (tmp_path / "p" / "speed_hist.csv").read_text().splitlines()
    assert speed[0].startswith("# schema=") and sum(int(r.split(",")[2]) for r in speed[2:]) == 40
    svg = files["speed_hist.svg"].decode()
    assert svg.startswith("<svg") and svg.count('class="bar"') == 20
    ret = (tmp_path / "p" / "train_return.csv").read_text().splitlines()[2:]
    assert [r.split(",")[0] for r in ret] == ["0", "1", "2"]
    assert main(["plot", str(logs), str(stats), "--out", str(tmp_path / "p")]) == 0
    assert _files(tmp_path / "p") == files


def test_plot_bar_heights_follow_counts(tmp_path):
    from riftsim.cli import histogram_svg
    counts, edges = histogram([0.0, 0.1, 0.2, 1.0], bins=2)
    svg = histogram_svg(counts, edges, "t", "x")
    bars = re.findall(r'<rect class="bar"[^>]*height="([0-9.]+)"[^>]*data-count="(\d+)"', svg)
    heights = [float(h) for h, _ in bars]
    assert [int(c) for _, c in bars] == [3, 1]
    assert counts.tolist() == [3, 1]
    assert heights[0] == pytest.approx(3 * heights[1], abs=0.02)


def test_plot_empty_series_axes_only(tmp_path):
    stats = tmp_path / "train_stats.jsonl"
    stats.write_text("")
    assert main(["plot", str(stats), "--out", str(tmp_path / "p")]) == 0
    svg = (tmp_path / "p" / "speed_hist.svg").read_text()
    assert 'class="axis"' in svg and 'class="bar"' not in svg


def test_plot_parse_failure_exit_2(tmp_path):
    bad = tmp_path / "train_stats.jsonl"
    bad.write_text("{not json\n")
    assert main(["plot", str(bad), "--out", str(tmp_path / "p")]) == 2
    other = tmp_path / "notes.txt"
    other.write_text("hi")
    assert main(["plot", str(other), "--out", str(tmp_path / "p")]) == 2


def test_thread_env_var_validated(tmp_path):
    env = {"RIFT_SIM_THREADS": "zero", "PATH": ""}
    r = subprocess.run([sys.executable, "-m", "riftsim.cli", "metrics", str(tmp_path)], env=env,
                       capture_output=True, text=True)
    assert r.returncode == 2 and "RIFT_SIM_THREADS" in r.stderr


def test_scenario_command(tmp_path):
    assert main(["scenario", "--out", str(tmp_path / "sc"), "--seed", "4", "--count", "2"]) == 0
    names = sorted(p.name for p in (tmp_path / "sc").iterdir())
    assert names == ["intersection_4.json", "intersection_5.json"]
