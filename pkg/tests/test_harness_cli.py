import json

import numpy as np
import pytest

from rfsearch import cli
from rfsearch.errors import MalformedRow
from rfsearch.sim import harness
from rfsearch.sim.harness import ExperimentConfig


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig(matrix=[(0, 5, 2)], seed=3, out=str(out))
    paths = harness.run_experiment(cfg)
    return cfg, paths


def test_run_writes_rows_and_summary(small_run):
    _, paths = small_run
    rows = harness.read_episodes(paths["episodes"])
    assert len(rows) == 4
    assert [r["system"] for r in rows] == ["RfGuided", "RfGuided", "Baseline", "Baseline"]
    # both systems see the same scenario seeds
    assert [r["seed"] for r in rows[:2]] == [r["seed"] for r in rows[2:]]
    summary = paths["summary"].read_text().splitlines()
    assert summary[0] == ",".join(harness.SUMMARY_COLUMNS)
    assert len(summary) == 3
    assert paths["episodes"].read_bytes().count(b"\r\n") == 5


def test_summary_matches_rows(small_run):
    _, paths = small_run
    rows = harness.read_episodes(paths["episodes"])
    summary, _ = harness.summarize_rows(rows)
    for s in summary:
        rs = [r for r in rows if r["system"] == s["system"]]
        ok = [r["distance"] for r in rs if r["success"]]
        assert s["completed"] == len(ok) and s["trials"] == len(rs)
        assert s["grasp_attempts"] == sum(r["attempts"] for r in rs)
        if ok:
            assert s["distance_mean"] == pytest.approx(np.mean(ok))
    again, _ = harness.summarize(paths["episodes"])
    assert again == summary


def test_rerun_is_byte_identical(small_run, tmp_path):
    cfg, paths = small_run
    cfg2 = ExperimentConfig(matrix=cfg.matrix, seed=cfg.seed, out=str(tmp_path))
    p2 = harness.run_experiment(cfg2)
    for key in ("episodes", "summary", "comparison"):
        assert p2[key].read_bytes() == paths[key].read_bytes()


def _row(system="RfGuided", seed=0, distance=1.0, success=1, attempts=1):
    return {"system": system, "M": 1, "N": 5, "seed": seed, "distance": distance,
            "explore_distance": distance, "attempts": attempts, "success": bool(success),
            "retries": 0}


def test_population_std():
    summary, _ = harness.summarize_rows([_row(seed=0, distance=1.0), _row(seed=1, distance=3.0)])
    assert summary[0]["distance_mean"] == 2.0
    assert summary[0]["distance_std_pop"] == 1.0
    assert summary[0]["efficiency"] == 1.0


def test_no_successes_leave_empty_fields(tmp_path):
    rows = [_row(success=0, attempts=10), _row(seed=1, success=0, attempts=0),
            _row("Baseline", success=1, distance=2.0, attempts=2)]
    summary, comparison = harness.summarize_rows(rows)
    rf = [s for s in summary if s["system"] == "RfGuided"][0]
    assert rf["distance_mean"] is None and rf["completion"] == 0.0 and rf["efficiency"] == 0.0
    assert comparison[0]["distance_ratio"] is None
    harness.write_csv(tmp_path / "s.csv", harness.SUMMARY_COLUMNS, summary)
    line = (tmp_path / "s.csv").read_text().splitlines()[1]
    assert line == "RfGuided,1,5,2,0,0,,,10,0"


def test_trial_seeds_are_distinct():
    seeds = {harness.trial_seed(0, M, N, t) for M in range(6) for N in range(1, 16)
             for t in range(20)}
    assert len(seeds) == 6 * 15 * 20


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(matrix=[(1, 5, 0)])
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"matrix": [[1, 5, 2]], "bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"matrix": [[1, 5, 2]], "planner": {"horizon": 6}}))
    cfg = ExperimentConfig.load(p)
    assert cfg.episode_config().planner.horizon == 6


# --- command line ----------------------------------------------------------------

def test_cli_malformed_row_exit_code(tmp_path, capsys):
    p = tmp_path / "e.csv"
    p.write_text(",".join(harness.EPISODE_COLUMNS) + "\n"
                 "RfGuided,1,5,0,1.0,1.0,1,1,0\n"
                 "RfGuided,1,5,x,1.0,1.0,1,1,0\n")
    assert cli.main(["summarize", str(p)]) == 3
    assert "line 3" in capsys.readouterr().err
    with pytest.raises(MalformedRow) as info:
        harness.read_episodes(p)
    assert info.value.line == 3


def test_cli_unwritable_output_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"matrix": [[0, 5, 1]]}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(blocker / "sub")]) == 2


def test_cli_summarize_prints_table(small_run, capsys):
    _, paths = small_run
    assert cli.main(["summarize", str(paths["episodes"])]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == ",".join(harness.SUMMARY_COLUMNS)


def test_cli_train_and_demo(tmp_path, capsys):
    ckpt = tmp_path / "p.bin"
    assert cli.main(["train", "--iterations", "3", "--out", str(ckpt)]) == 0
    meta = json.loads((tmp_path / "p.bin.json").read_text())
    assert meta["iterations"] == 3 and meta["iteration"] == 2 and meta["seed"] == 0
    assert np.isfinite(meta["loss"])
    assert (tmp_path / "p.curve.csv").exists()
    demo = tmp_path / "demo"
    assert cli.main(["demo", "--M", "0", "--N", "5", "--out", str(demo),
                     "--policy", str(ckpt)]) == 0
    for name in ("scenario.json", "episode.jsonl", "planner_trace.jsonl", "grid.vxg"):
        assert (demo / name).exists()
    last = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert last["system"] == "RfGuided"
