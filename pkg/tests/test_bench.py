import math
from pathlib import Path

import numpy as np
import pytest

from mfptrl import bench, cli
from mfptrl.gridworld import GridEnv, load_map
from mfptrl.learners import LearnParams
from mfptrl.reachability import read_pgm

ROOT = Path(__file__).resolve().parents[1]
CORRIDOR = ROOT / "maps" / "corridor.map"
FIG1 = ROOT / "maps" / "fig1.map"


def cfg(algorithm="q", map_path=CORRIDOR, seeds=(0, 1, 2), out="out", **params):
    params.setdefault("sample_budget", 20_000)
    return bench.ExperimentConfig(map_path, algorithm, LearnParams(**params), seeds=seeds, out_dir=Path(out))


# --- config parsing -----------------------------------------------------------

def test_parse_config(tmp_path):
    text = "# comment\nmap maps/a.map\nalgorithm mfpt-dyna\nseeds 3, 4 5\nalpha 0.5\nplanning_steps 4\nstep_cost 2.5\n"
    c = bench.parse_config(text, tmp_path)
    assert c.map_path == tmp_path / "maps" / "a.map"
    assert c.algorithm == "mfpt-dyna" and c.seeds == (3, 4, 5)
    assert c.params.alpha == 0.5 and c.params.planning_steps == 4
    assert c.step_cost == 2.5 and c.checkpoint_interval == 100
    assert c.out_dir == tmp_path / "results"


@pytest.mark.parametrize(
    "text",
    [
        "algorithm q\n",
        "map a\nalgorithm sarsa\n",
        "map a\nalgorithm q\nseeds\n",
        "map a\nalgorithm q\nseeds 1 x\n",
        "map a\nalgorithm q\nbogus 1\n",
        "map a\nalgorithm q\nalpha 2\n",
        "map a\nalgorithm q\nalpha 0.1\nalpha 0.2\n",
        "map a\nalgorithm q\nplanning_steps 1.5\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(bench.ConfigError):
        bench.parse_config(text)


def test_empty_seed_list_rejected():
    with pytest.raises(bench.ConfigError):
        cfg(seeds=())


# --- metrics ------------------------------------------------------------------

def test_quantile_handles_censoring():
    assert bench.quantile([1, 2, 3, 4], 0.5) == 2.5
    assert bench.quantile([1, 2, math.inf], 0.5) == 2.0
    assert bench.quantile([1, math.inf], 0.5) == math.inf
    assert bench.quantile([5], 0.25) == 5.0


def test_oracle_residual_within_tolerance():
    env = GridEnv(load_map(FIG1))
    oracle = bench.Oracle.solve(env.mdp())
    assert oracle.bellman_residual() <= LearnParams().epsilon_tol
    assert oracle.is_optimal(oracle.policy)
    assert oracle.judged.sum() == env.n_states - 1


def test_run_experiment_corridor_q():
    report = bench.run_experiment(cfg())
    assert len(report.runs) == 3
    assert all(r.converged for r in report.runs)
    assert all(r.samples_to_converge <= 20_000 for r in report.runs)
    assert all(r.training_time_proxy == r.samples_to_converge for r in report.runs)


@pytest.mark.parametrize("algorithm", ["vi", "pvi"])
def test_planner_rows(algorithm):
    report = bench.run_experiment(cfg(algorithm, seeds=(0,)))
    (run,) = report.runs
    assert run.samples_to_converge == 0 and run.vi_sweeps_total > 0


def test_not_converged_is_recorded():
    report = bench.run_experiment(cfg("q", map_path=FIG1, seeds=(0,), sample_budget=300))
    (run,) = report.runs
    assert not run.converged and run.samples_consumed == 300
    assert ",NA," in report.results_csv()
    assert report.median_samples() == math.inf


def test_csv_byte_identical(tmp_path):
    c = cfg("mfpt-dyna", seeds=(0, 1))
    first = bench.run_experiment(c).write(tmp_path / "a")
    second = bench.run_experiment(c).write(tmp_path / "b")
    for p1, p2 in zip(first, second):
        if p1.name.endswith(".timing.csv"):
            continue
        assert p1.read_bytes() == p2.read_bytes()
    header = first[0].read_text().splitlines()[0]
    assert header == "algorithm,seed,samples_to_converge,vi_sweeps_total,training_time_proxy,converged"
    assert first[1].read_text().splitlines()[0] == "algorithm,seed,wall_clock_ms"


def test_wall_clock_kept_out_of_results(tmp_path):
    paths = bench.run_experiment(cfg(seeds=(0,))).write(tmp_path)
    assert "wall" not in paths[0].read_text()
    assert "wall" not in paths[2].read_text()


# --- compare ------------------------------------------------------------------

def test_compare_single_config():
    table = bench.compare([cfg(seeds=(0, 1))])
    assert len(table.rows()) == 1
    assert table.wins() == []


def test_compare_pair(tmp_path):
    table = bench.compare([cfg("q", seeds=(0, 1, 2)), cfg("mfpt-q", seeds=(0, 1, 2))])
    assert [r[0] for r in table.rows()] == ["q", "mfpt-q"]
    ((a, b, wa, wb, ties),) = table.wins()
    assert (a, b) == ("q", "mfpt-q") and wa + wb + ties == 3
    written = table.write(tmp_path)
    assert {p.name for p in written} == {"comparison.csv", "comparison.timing.csv", "wins.csv"}


def test_compare_mismatch():
    with pytest.raises(bench.ConfigMismatch):
        bench.compare([cfg(seeds=(0, 1)), cfg("dyna", seeds=(0, 2))])
    with pytest.raises(bench.ConfigMismatch):
        bench.compare([cfg(), cfg("dyna", map_path=FIG1)])


# --- landscapes ---------------------------------------------------------------

def test_landscape_at_zero_all_capped(tmp_path):
    c = cfg("mfpt-q", map_path=FIG1, seeds=(0,), out=tmp_path)
    paths = bench.landscape(c, [0])
    assert [p.name for p in paths] == ["landscape_0.pgm", "landscape_0.csv"]
    pixels = read_pgm(paths[0])
    spec = load_map(FIG1)
    gx, gy = spec.goal
    assert pixels[gy, gx] == 0
    pixels[gy, gx] = 255
    assert np.all(pixels == 255)


def test_landscape_converged_goal_pixel(tmp_path):
    c = cfg("mfpt-dyna", map_path=CORRIDOR, seeds=(0,), out=tmp_path, sample_budget=2000)
    snaps = bench.landscape_snapshots(c, [2000])
    assert snaps[2000].mu[2] == 0.0 and not snaps[2000].capped.any()
    paths = bench.landscape(c, [2000])
    assert read_pgm(paths[0])[0, 2] == 0


def test_landscape_needs_mfpt_learner():
    with pytest.raises(bench.ConfigError):
        bench.landscape_snapshots(cfg("dyna"), [0])


# --- CLI ----------------------------------------------------------------------

def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_cli_run_and_seed_override(tmp_path, capsys):
    c = write_config(tmp_path / "c.cfg", f"map {CORRIDOR}\nalgorithm q\nseeds 0 1 2\nsample_budget 5000\n")
    code = cli.main(["--out", str(tmp_path / "o"), "--seed-override", "7,8", "run", "--config", str(c)])
    assert code == cli.EXIT_OK
    rows = (tmp_path / "o" / "q.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["7", "8"]
    assert "2/2 converged" in capsys.readouterr().out


def test_cli_compare(tmp_path):
    a = write_config(tmp_path / "a.cfg", f"map {CORRIDOR}\nalgorithm dyna\nseeds 0 1\nsample_budget 3000\n")
    b = write_config(tmp_path / "b.cfg", f"map {CORRIDOR}\nalgorithm mfpt-dyna\nseeds 0 1\nsample_budget 3000\n")
    assert cli.main(["--out", str(tmp_path / "o"), "compare", "--config", str(a), str(b)]) == 0
    assert (tmp_path / "o" / "wins.csv").read_text().splitlines()[1].startswith("dyna,mfpt-dyna,")


def test_cli_landscape(tmp_path):
    c = write_config(tmp_path / "c.cfg", f"map {FIG1}\nalgorithm mfpt-q\nsample_budget 200\n")
    assert cli.main(["--out", str(tmp_path / "o"), "landscape", "--config", str(c), "--at", "0,200"]) == 0
    assert (tmp_path / "o" / "landscape_200.pgm").exists()


def test_cli_exit_codes(tmp_path):
    bad = write_config(tmp_path / "bad.cfg", f"map {CORRIDOR}\nalgorithm nope\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    broken_map = write_config(tmp_path / "m.map", "2d 3 1\nS.Q\n")
    c = write_config(tmp_path / "c.cfg", f"map {broken_map}\nalgorithm q\n")
    assert cli.main(["run", "--config", str(c)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
    c2 = write_config(tmp_path / "c2.cfg", f"map {tmp_path / 'missing.map'}\nalgorithm q\n")
    assert cli.main(["run", "--config", str(c2)]) == cli.EXIT_IO
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    c3 = write_config(tmp_path / "c3.cfg", f"map {CORRIDOR}\nalgorithm vi\n")
    assert cli.main(["--out", str(blocker / "sub"), "run", "--config", str(c3)]) == cli.EXIT_IO


def test_shipped_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.cfg")):
        c = bench.load_config(path)
        assert c.map_path.exists(), path
