import json
import subprocess
import sys

import pytest

from depinning.cli import FIELDS, SCHEMAS, build_config, config_hash, main, metric_values, parse_config_text, run
from depinning.environment import UsageError

SMALL = {
    "simulate": {"T": "60", "window": "16", "n_samples": "3"},
    "criterion": {"L": "4,6,8", "n_samples": "30", "h": "2"},
    "percolation": {"L": "8,16", "n_samples": "40", "n_boot": "10"},
    "renorm-check": {},
    "soft-check": {"L": "4,9", "n_samples": "10", "h": "2"},
    "mixing-check": {"n_samples": "50", "L": "2"},
}


def values_only(path):
    return [v for v in metric_values(path)]


def read(path):
    return [json.loads(line) for line in open(path)]


def test_parse_config_text():
    raw = parse_config_text("# comment\nL = 4, 8\n\nn_samples=10  # trailing\n")
    assert raw == {"L": "4, 8", "n_samples": "10"}
    with pytest.raises(UsageError):
        parse_config_text("just words")


def test_invalid_key_lists_valid_keys():
    with pytest.raises(UsageError) as exc:
        build_config("criterion", {"bogus": "1"}, env={})
    for key in SCHEMAS["criterion"]:
        assert key in str(exc.value)


def test_invalid_value():
    with pytest.raises(UsageError):
        build_config("criterion", {"rule": "nonsense"}, env={})
    with pytest.raises(UsageError):
        build_config("criterion", {"n_samples": "0"}, env={})


def test_env_seed_override():
    cfg = build_config("criterion", {"seed": "3"}, env={"DEPINNING_SEED": "11"})
    assert cfg["seed"] == 11


def test_hash_is_canonical():
    a = build_config("criterion", {"L": "4,8", "law": "bernoulli(p=0.2)"}, env={})
    b = build_config("criterion", {"law": "bernoulli( p=0.2, trap=auto )", "L": "4 8"}, env={})
    assert config_hash("criterion", a) == config_hash("criterion", b)
    assert config_hash("criterion", a) != config_hash("percolation", build_config("percolation", {}, env={}))


@pytest.mark.parametrize("sub", list(SCHEMAS))
def test_every_subcommand_deterministic(sub, tmp_path):
    cfg = build_config(sub, SMALL[sub], env={})
    run(sub, cfg, tmp_path / "a.jsonl")
    run(sub, cfg, tmp_path / "b.jsonl")
    assert values_only(tmp_path / "a.jsonl") == values_only(tmp_path / "b.jsonl")
    recs = read(tmp_path / "a.jsonl")
    assert recs and all(tuple(r) == FIELDS for r in recs)


def test_workers_do_not_change_values(tmp_path):
    cfg = build_config("criterion", {"L": "4,6", "n_samples": "120"}, env={})
    run("criterion", cfg, tmp_path / "a.jsonl", workers=1)
    run("criterion", cfg, tmp_path / "b.jsonl", workers=2)
    assert values_only(tmp_path / "a.jsonl") == values_only(tmp_path / "b.jsonl")


def test_resume_after_interruption(tmp_path):
    cfg = build_config("criterion", {"L": "4,6", "n_samples": "120"}, env={})
    full = tmp_path / "full.jsonl"
    run("criterion", cfg, full)
    lines = open(full).read().splitlines(keepends=True)
    samples = [l for l in lines if '"kind": "sample"' in l]
    part = tmp_path / "part.jsonl"
    cut = len(samples) // 3
    with open(part, "w") as fh:
        fh.writelines(samples[:cut])
        fh.write(samples[cut][:25])  # torn final line
    run("criterion", cfg, part, resume=True)
    agg = lambda p: [v for v in values_only(p) if v[0] == "aggregate"]
    assert agg(part) == agg(full)
    keys = [(r["group"], r["sample_index"], r["metric"]) for r in read_lenient(part) if r["kind"] == "sample"]
    assert len(keys) == len(set(keys)) == len(samples)
    # a second resume finds nothing to do
    size = part.stat().st_size
    run("criterion", cfg, part, resume=True)
    assert part.stat().st_size == size


def read_lenient(path):
    out = []
    for line in open(path):
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            pass
    return out


def test_criterion_p_zero(tmp_path):
    cfg = build_config("criterion", {"law": "bernoulli(p=0.0)", "n_samples": "10"}, env={})
    run("criterion", cfg, tmp_path / "o.jsonl")
    agg = [r for r in read(tmp_path / "o.jsonl") if r["kind"] == "aggregate"]
    assert len(agg) == 1 and agg[0]["metric"] == "p_hat" and agg[0]["value"] == 0.0 and agg[0]["n"] == 10


def test_renorm_check_all_constraints_pass(tmp_path):
    run("renorm-check", build_config("renorm-check", {}, env={}), tmp_path / "o.jsonl")
    rows = read(tmp_path / "o.jsonl")
    cons = [r for r in rows if r["metric"] == "constraint_ok"]
    assert len(cons) == 7 and all(r["value"] for r in cons)
    assert any(r["metric"] == "induction_passed" and r["value"] for r in rows)


def test_renorm_check_infeasible(tmp_path):
    run("renorm-check", build_config("renorm-check", {"alpha": "1"}, env={}), tmp_path / "o.jsonl")
    rows = read(tmp_path / "o.jsonl")
    assert rows[0]["metric"] == "feasible" and rows[0]["value"] is False


def test_main_config_file_and_errors(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("L = 4\nn_samples = 5\n")
    out = tmp_path / "o.jsonl"
    assert main(["criterion", "--config", str(conf), "--out", str(out)]) == 0
    assert out.exists()
    assert main(["criterion", "bogus=1", "--out", str(out)]) == 2
    assert "valid keys" in capsys.readouterr().err
    assert main(["criterion", "--out", str(tmp_path / "missing" / "o.jsonl")]) == 1


def test_console_entry_point(tmp_path):
    out = tmp_path / "o.jsonl"
    res = subprocess.run(
        [sys.executable, "-m", "depinning.cli", "renorm-check", "--out", str(out)],
        capture_output=True, text=True, check=True,
    )
    assert res.stdout.strip() == str(out)
