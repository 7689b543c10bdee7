import csv
import json
from fractions import Fraction

import pytest

from resfit.bc import read_demos
from resfit.cli import main
from resfit.config import RunConfig
from resfit.exceptions import ConfigError

TINY = """\
# small settings so every command finishes in seconds
env.name = point_reach
demos.count = 8
bc.epochs = 15
bc.hidden = 32,32
bc.eval_episodes = 10
rl.actor_hidden = 16
rl.critic_hidden = 16
rl.batch_size = 16
rl.n_critics = 3
rl.warmup_steps = 100   # trailing comment
rl.total_env_steps = 500
rl.eval_every = 250
rl.eval_episodes = 5
eval.episodes = 10
eval.pairs = 8
filtered_bc.rounds = 1
filtered_bc.rollouts_per_round = 5
filtered_bc.epochs_per_round = 2
ablate.seeds = 0,1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.kv"
    cfg.write_text(TINY + f"run.out_dir = {root / 'out'}\n")
    assert main(["demos", "--config", str(cfg)]) == 0
    assert main(["bc", "--config", str(cfg)]) == 0
    return root, cfg


def read(path):
    return json.loads(path.read_text())


def test_config_parsing_and_aliases():
    cfg = RunConfig.parse("utd = 1/2\nrl.n_step=5\nuse_layernorm = false\nalgo = filtered_bc\n")
    assert cfg["rl.utd"] == Fraction(1, 2) and cfg["n_step"] == 5
    assert cfg["rl.critic_layernorm"] is False and cfg["run.algo"] == "filtered_bc"
    tc = cfg.train_config()
    assert tc.utd == 0.5 and tc.n_step == 5 and not tc.critic_layernorm
    assert cfg["log.wallclock"] is False


@pytest.mark.parametrize("text", ["rl.utdd = 4", "rl.n_step = three", "algo = ppo",
                                  "just words", "rl.critic_layernorm = maybe"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_resolved_config_round_trips():
    cfg = RunConfig.parse(TINY).apply(["residual_mode=full_action", "rl.utd=1/3"])
    again = RunConfig.parse(cfg.dumps())
    assert again.values == cfg.values


def test_demos_summary_matches_file(workdir):
    root, _ = workdir
    summary = read(root / "out" / "demos_summary.json")
    demos = read_demos(root / "out" / "demos.jsonl")
    assert len(demos) == summary["count"] == 8
    # seeds run first_seed, first_seed+1, ... and the last attempt always succeeds
    attempts = max(d.seed for d in demos) - summary["first_seed"] + 1
    assert summary["attempts"] == attempts
    assert summary["expert_success_rate"] == len(demos) / attempts
    assert (root / "out" / "demos.config.kv").exists()


def test_demos_count_override(workdir, tmp_path):
    _, cfg = workdir
    out = tmp_path / "d"
    assert main(["demos", "--config", str(cfg), "--set", "demos.count=3",
                 "--set", f"run.out_dir={out}"]) == 0
    assert len(read_demos(out / "demos.jsonl")) == 3


def test_exit_codes(workdir, tmp_path, capsys):
    _, cfg = workdir
    assert main(["demos", "--config", str(tmp_path / "missing.kv")]) == 1
    assert "missing.kv" in capsys.readouterr().err
    assert main(["demos", "--config", str(cfg), "--set", "nonsense=1"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["demos", "--config", str(cfg), "--set", f"run.out_dir={tmp_path}",
                 "--set", "demos.noise=50"]) == 2


def test_bc_deterministic_and_eval_consistent(workdir, tmp_path, capsys):
    root, cfg = workdir
    report = read(root / "out" / "bc_report.json")
    other = tmp_path / "again"
    assert main(["bc", "--config", str(cfg), "--set", f"run.out_dir={other}",
                 "--set", f"demos.path={root / 'out' / 'demos.jsonl'}"]) == 0
    assert read(other / "bc_report.json") == report
    capsys.readouterr()
    assert main(["eval", str(root / "out" / "bc.json"), "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["success"] == report["eval_success"]
    assert out["ci95"][0] <= out["success"] <= out["ci95"][1]


@pytest.mark.parametrize("k", [1, 8])
def test_bc_chunk_sizes(workdir, tmp_path, k):
    root, cfg = workdir
    assert main(["bc", "--config", str(cfg), "--set", f"bc.chunk_size={k}",
                 "--set", f"run.out_dir={tmp_path}", "--set", "bc.epochs=2",
                 "--set", f"demos.path={root / 'out' / 'demos.jsonl'}"]) == 0
    assert read(tmp_path / "bc_report.json")["chunk_size"] == k


def test_bc_corrupt_demo_file(workdir, tmp_path):
    _, cfg = workdir
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["bc", "--config", str(cfg), "--set", f"demos.path={bad}",
                 "--set", f"run.out_dir={tmp_path}"]) == 1


def rl_args(root, cfg, out, *extra):
    args = ["rl", "--config", str(cfg), "--set", f"run.out_dir={out}",
            "--set", f"demos.path={root / 'out' / 'demos.jsonl'}",
            "--set", f"bc.path={root / 'out' / 'bc.json'}"]
    for e in extra:
        args += ["--set", e]
    return args


def test_rl_outputs_and_reproducibility(workdir, tmp_path):
    root, cfg = workdir
    assert main(rl_args(root, cfg, tmp_path / "a")) == 0
    run = tmp_path / "a" / "rl"
    summary = read(run / "summary.json")
    rows = list(csv.DictReader((run / "metrics.csv").open()))
    assert len(rows) == summary["episodes"]
    # re-running from the written config reproduces the metrics byte for byte
    written = run / "config.kv"
    text = written.read_text().replace(str(tmp_path / "a"), str(tmp_path / "b"))
    (tmp_path / "again.kv").write_text(text)
    assert main(["rl", "--config", str(tmp_path / "again.kv")]) == 0
    assert (tmp_path / "b" / "rl" / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()


def test_rl_baselines(workdir, tmp_path):
    root, cfg = workdir
    assert main(rl_args(root, cfg, tmp_path / "rlpd", "residual_mode=full_action")) == 0
    meta = read(tmp_path / "rlpd" / "rl" / "actor.json")
    assert meta["residual_mode"] == "full_action" and meta["scale"] == 1.0
    assert main(rl_args(root, cfg, tmp_path / "fbc", "algo=filtered_bc")) == 0
    assert read(tmp_path / "fbc" / "rl" / "summary.json")["algo"] == "filtered_bc"


def test_rl_split_mode(workdir, tmp_path):
    root, cfg = workdir
    assert main(rl_args(root, cfg, tmp_path, "split_mode=true", "lockstep=true")) == 0
    s = read(tmp_path / "rl" / "summary.json")
    assert s["utd_ratio"] == 4.0 and s["segments"] == s["ingested"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rl_divergence_exit_code(workdir, tmp_path):
    root, cfg = workdir
    assert main(rl_args(root, cfg, tmp_path, "rl.critic_lr=1e300", "rl.warmup_steps=50")) == 3
    assert (tmp_path / "rl" / "checkpoints" / "actor_diverged.json").exists()


def test_eval_ab_matches_direct_call(workdir, capsys):
    from resfit.bc import ChunkedBCPolicy
    from resfit.envs import make_env_spec
    from resfit.runtime import evaluate_ab
    root, cfg = workdir
    ckpt = str(root / "out" / "bc.json")
    capsys.readouterr()
    assert main(["eval", ckpt, ckpt, "--config", str(cfg), "--set", "eval.seed=4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["difference"] == 0.0 and out["a_only"] == out["b_only"] == 0
    policy = ChunkedBCPolicy.load(ckpt)
    direct = evaluate_ab(policy, policy, make_env_spec("point_reach"), 8, 4)
    table = (root / "out" / "ab_table.csv").read_text()
    assert table == direct.table()


def test_eval_dimension_mismatch(workdir):
    root, cfg = workdir
    assert main(["eval", str(root / "out" / "bc.json"), "--config", str(cfg),
                 "--set", "env.name=arm_pick_place"]) == 1


def test_ablate_grid(workdir, tmp_path):
    root, cfg = workdir
    args = ["ablate", "--config", str(cfg), "--set", f"run.out_dir={tmp_path}",
            "--set", f"demos.path={root / 'out' / 'demos.jsonl'}",
            "--set", f"bc.path={root / 'out' / 'bc.json'}",
            "--set", "rl.total_env_steps=200", "--set", "rl.eval_every=100",
            "--grid", "utd=0.5,1,4"]
    assert main(args) == 0
    rows = list(csv.DictReader((tmp_path / "ablate" / "aggregate.csv").open()))
    assert len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    assert len(list((tmp_path / "ablate").glob("*/seed*/metrics.csv"))) == 6
    summary = list(csv.DictReader((tmp_path / "ablate" / "summary.csv").open()))
    assert [r["cell"] for r in summary] == ["utd=0.5", "utd=1", "utd=4"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ablate_records_failures(workdir, tmp_path):
    root, cfg = workdir
    args = ["ablate", "--config", str(cfg), "--set", f"run.out_dir={tmp_path}",
            "--set", f"demos.path={root / 'out' / 'demos.jsonl'}",
            "--set", f"bc.path={root / 'out' / 'bc.json'}",
            "--set", "rl.total_env_steps=200", "--set", "rl.critic_lr=1e300",
            "--set", "rl.warmup_steps=50", "--set", "ablate.seeds=0",
            "--grid", "n_step=1,3"]
    assert main(args) == 0
    rows = list(csv.DictReader((tmp_path / "ablate" / "aggregate.csv").open()))
    assert len(rows) == 2 and all(r["status"].startswith("failed") for r in rows)


def test_ablate_rejects_undeclared_key(workdir, tmp_path):
    _, cfg = workdir
    assert main(["ablate", "--config", str(cfg), "--grid", "rl.gamma=0.9,0.99"]) == 1
