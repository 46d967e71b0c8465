from __future__ import annotations

import csv
import io
import json

import pytest

from moe_cluster.cli import main
from moe_cluster.config import ROSTER_ENV, ConfigError, load_config, parse_config, parse_roster

SMALL = {"seed": 3, "model": {"n_layers": 2, "d_embed": 16, "d_ffn": 24, "d_qkv_hidden": 16, "n_experts": 8, "top_k": 2, "vocab_size": 64}}


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out)
    return code, out.getvalue()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def small_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def test_parse_roster():
    assert parse_roster("a:1, b:22") == (("a", 1), ("b", 22))
    assert parse_roster(["::1:5"]) == (("::1", 5),)
    with pytest.raises(ConfigError):
        parse_roster("nohost")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="section"):
        parse_config({"modle": {}})
    with pytest.raises(ConfigError, match="model"):
        parse_config({"model": {"layers": 2}})
    with pytest.raises(ConfigError, match="cluster"):
        parse_config({"cluster": {"nodes": 2}})
    with pytest.raises(ConfigError):
        parse_config({"model": {"top_k": 20}})
    with pytest.raises(ConfigError):
        parse_config({"tokens": {"prompt": [999]}})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_env_roster_overrides_file(monkeypatch):
    run_cfg = parse_config({"cluster": {"roster": ["h:1", "h:2", "h:3"]}})
    assert run_cfg.cluster_config().n_nodes == 3
    monkeypatch.setenv(ROSTER_ENV, "x:10,y:11")
    cfg = run_cfg.cluster_config()
    assert cfg.roster == (("x", 10), ("y", 11)) and cfg.n_nodes == 2
    with pytest.raises(ConfigError):
        run_cfg.cluster_config(n_nodes=4)


def test_run_cluster_csv(small_file):
    code, text = run("run-cluster", "--config", small_file, "--nodes", "2", "--gen-tokens", "3")
    assert code == 0
    table = rows(text)
    assert list(table[0]) == ["token", "moe_s", "comm_s", "misc_s"]
    assert [r["token"] for r in table] == ["0", "1", "2"]


def test_run_cluster_output_is_byte_identical(small_file):
    args = ("run-cluster", "--config", small_file, "--nodes", "3", "--strategy", "naive", "--with-ids", "--jsonl")
    first, second = run(*args), run(*args)
    assert first == second
    assert set(json.loads(first[1].splitlines()[0])) == {"token", "moe_s", "comm_s", "misc_s", "token_id"}


def test_run_cluster_prompt_forms(small_file):
    assert run("run-cluster", "--config", small_file, "--prompt-tokens", "5", "--gen-tokens", "1")[0] == 0
    assert run("run-cluster", "--config", small_file, "--prompt-tokens", "1,2", "--gen-tokens", "1")[0] == 0
    assert run("run-cluster", "--config", small_file, "--prompt-tokens", "1,x")[0] == 2
    assert run("run-cluster", "--config", small_file, "--prompt-tokens", "64")[0] == 0
    assert run("run-cluster", "--config", small_file, "--prompt-tokens", "999,1")[0] == 2
    assert run("run-cluster", "--config", small_file, "--gen-tokens", "0")[0] == 2


def test_usage_and_config_exit_codes(tmp_path, small_file):
    assert run("no-such-command")[0] == 2
    assert run("run-cluster", "--mode", "ring")[0] == 2
    assert run("run-cluster", "--config", str(tmp_path / "absent.json"))[0] == 2
    assert run("run-cluster", "--config", small_file, "--nodes", "9")[0] == 2
    assert run("predict", "--nodes", "5")[0] == 2


def test_predict_rows():
    code, text = run("predict", "--nodes", "2,3,4")
    assert code == 0
    table = rows(text)
    assert [float(r["tp_tokens_per_s"]) for r in table] == [9.7, 10.3, 12.2]
    code, text = run("predict", "--nodes", "2", "--nic", "infiniband", "--jsonl")
    assert abs(json.loads(text)["tp_tokens_per_s"] - 16.3) <= 0.5
    assert rows(run("predict", "--nodes", "5", "--E", "1.5")[1])[0]["nodes"] == "5"


def test_cost_rows(tmp_path):
    table = rows(run("cost")[1])
    assert [r["tp_per_usd"] for r in table] == ["0.000389", "0.000447"]
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps([{"solution": "x", "n_nodes": 1, "price_per_node": 100, "throughput": 5}]))
    assert rows(run("cost", "--spec", str(spec))[1])[0]["tp_per_usd"] == "0.050000"


def test_oracle_rows():
    (row,) = rows(run("oracle", "--nodes", "2")[1])
    assert (row["numerator"], row["denominator"], row["expected"]) == ("4816", "1820", "2.6462")
    (row,) = rows(run("oracle", "--nodes", "4", "--replication", "1")[1])
    assert row["numerator"] == "3584"
    assert run("oracle", "--nodes", "32")[0] == 2


def test_bench_packing_rows():
    code, text = run("bench-packing", "--t-wait-ms", "0,16", "--samples", "2")
    assert code == 0
    table = rows(text)
    assert [(r["strategy"], r["T_wait_ms"]) for r in table] == [
        ("unstacked", "0.0"), ("unstacked", "16.0"), ("prestacked", "0.0"), ("prestacked", "16.0")
    ]
    assert float(table[1]["mean_sample_time_ms"]) > float(table[3]["mean_sample_time_ms"])


def test_pack_weights(tmp_path, small_file):
    out = tmp_path / "experts.bin"
    code, text = run("pack-weights", "--generate", "--config", small_file, "--unstacked", str(tmp_path / "u"), "--out", str(out))
    assert code == 0 and out.exists()
    assert int(rows(text)[0]["bytes"]) == out.stat().st_size
    assert run("pack-weights", "--out", str(out))[0] == 2
