import json

import pytest
import yaml

from geoagent.cli import main
from conftest import build_workspace, manifest_record, read_rows
from factories import proposer_script

ZOOM = '<think>sign</think>\n<tool_call>\n{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [10, 20, 100, 200]}}\n</tool_call>'
SEARCH = '<tool_call>\n{"name": "search_web", "arguments": {"query": "The palace museum"}}\n</tool_call>'
BAD_ZOOM = '<tool_call>\n{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [100, 20, 10, 200]}}\n</tool_call>'
LA = ("USA", "California", "Los Angeles", (34.0522, -118.2437))


def answer(text):
    return f"<think>done</think>\n<answer>{text}</answer>"


@pytest.fixture
def rollout_ws(tmp_path):
    records = [manifest_record(f"s{i:02d}", "img.png") for i in range(10)]
    script = {"*": [ZOOM, SEARCH, answer("Hamburg, Germany")], "s04": [BAD_ZOOM, answer("Berlin, Germany")]}
    return build_workspace(tmp_path / "ws", records, script)


def run(*argv):
    return main([str(a) for a in argv])


class TestRollout:
    def test_ten_samples(self, rollout_ws, tmp_path):
        out = tmp_path / "out"
        assert run("rollout", "--config", rollout_ws, "--out", out, "--seed", 7) == 0
        lines = (out / "trajectories.jsonl").read_text().splitlines()
        header = json.loads(lines[0])["header"]
        assert header["seed"] == 7 and len(header["config_hash"]) == 64
        rows = read_rows(out / "trajectories.jsonl")
        assert len(rows) == 10
        assert [r["sample_id"] for r in rows] == [f"s{i:02d}" for i in range(10)]
        summary = json.loads((out / "rollout_summary.json").read_text())
        assert summary["terminations"] == {"answered": 10}
        assert summary["calls_total"] == 19 and summary["calls_failed"] == 1
        assert summary["header"]["seed"] == 7

    def test_limit(self, rollout_ws, tmp_path):
        assert run("rollout", "--config", rollout_ws, "--out", tmp_path / "o", "--limit", 3) == 0
        assert len(read_rows(tmp_path / "o" / "trajectories.jsonl")) == 3

    def test_missing_manifest(self, rollout_ws, tmp_path, capsys):
        out = tmp_path / "out"
        assert run("rollout", "--config", rollout_ws, "--manifest", tmp_path / "nope.jsonl", "--out", out) == 2
        assert not out.exists()
        assert "nope.jsonl" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert run("rollout", "--config", tmp_path / "none.yaml", "--out", tmp_path / "o") == 2

    def test_secret_in_config_refused(self, rollout_ws, tmp_path):
        cfg = yaml.safe_load(rollout_ws.read_text())
        cfg["search"]["api_key"] = "sk-123"
        rollout_ws.write_text(yaml.safe_dump(cfg))
        assert run("rollout", "--config", rollout_ws, "--out", tmp_path / "o") == 2
        assert not (tmp_path / "o").exists()

    def test_deterministic_rerun_identical(self, rollout_ws, tmp_path):
        for name in ("a", "b"):
            assert run("rollout", "--config", rollout_ws, "--out", tmp_path / name, "--deterministic") == 0
        for f in ("trajectories.jsonl", "rollout_summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_protocol_error_exit_status(self, tmp_path):
        records = [manifest_record("s0", "img.png"), manifest_record("s1", "img.png")]
        ws = build_workspace(tmp_path / "ws", records, {"s0": ["!unavailable"], "*": [answer("Hamburg")]})
        assert run("rollout", "--config", ws, "--out", tmp_path / "o", "--deterministic") == 1
        assert len(read_rows(tmp_path / "o" / "trajectories.jsonl")) == 2


class TestEval:
    def test_table(self, rollout_ws, tmp_path, capsys):
        out = tmp_path / "out"
        run("rollout", "--config", rollout_ws, "--out", out)
        assert run("eval", "--config", rollout_ws, "--out", out, "--log", out / "trajectories.jsonl", "--name", "fixture") == 0
        report = json.loads((out / "metrics.json").read_text())["report"]
        # 9 answer "Hamburg, Germany" (geocoded exactly), s04 answers "Berlin, Germany" (country only, not geocoded)
        assert report["country_acc"] == 100.0
        assert report["city_acc"] == 90.0
        assert report["under_3km_rate"] == 90.0
        assert report["median_distance_km"] == 0.0
        assert "| fixture" in capsys.readouterr().out
        assert (out / "metrics.txt").read_text().startswith("| Model")
        assert len(read_rows(out / "eval_records.jsonl")) == 10

    def test_unanswered_counted(self, tmp_path):
        records = [manifest_record("s0", "img.png"), manifest_record("s1", "img.png")]
        ws = build_workspace(tmp_path / "ws", records, {"s0": [SEARCH], "*": [answer("Hamburg, Germany")]},
                             {"loop": {"max_turns": 2, "force_final_answer": False}})
        out = tmp_path / "o"
        run("rollout", "--config", ws, "--out", out)
        assert run("eval", "--config", ws, "--out", out, "--log", out / "trajectories.jsonl") == 0
        report = json.loads((out / "metrics.json").read_text())["report"]
        assert report["n_samples"] == 2 and report["country_acc"] == 50.0

    def test_empty_log(self, rollout_ws, tmp_path, capsys):
        log = tmp_path / "empty.jsonl"
        log.write_text('{"header": {}}\n')
        assert run("eval", "--config", rollout_ws, "--out", tmp_path / "o", "--log", log) == 2
        assert "empty" in capsys.readouterr().err

    def test_id_mismatch_listed(self, rollout_ws, tmp_path, capsys):
        out = tmp_path / "out"
        run("rollout", "--config", rollout_ws, "--out", out, "--limit", 8)
        assert run("eval", "--config", rollout_ws, "--out", out, "--log", out / "trajectories.jsonl") == 2
        err = capsys.readouterr().err
        assert "s08" in err and "s09" in err


class TestReward:
    def test_two_member_group(self, tmp_path):
        ws = build_workspace(tmp_path / "ws", [manifest_record("q", "img.png", label=LA)],
                             {"*": [answer("Los Angeles, California, USA")]})
        out = tmp_path / "o"
        run("rollout", "--config", ws, "--out", out, "--group-size", 2)
        # rewrite the second member to answer nothing usable
        lines = (out / "trajectories.jsonl").read_text().splitlines()
        second = json.loads(lines[2])
        second["final_answer"] = "Somewhere, Europe"
        second["turns"][-1]["answer"] = "Somewhere, Europe"
        lines[2] = json.dumps(second)
        (out / "trajectories.jsonl").write_text("\n".join(lines) + "\n")
        assert run("reward", "--config", ws, "--out", out, "--log", out / "trajectories.jsonl") == 0
        rows = read_rows(out / "rewards.jsonl")
        assert [r["reward"] for r in rows] == [4.0, 0.0]
        assert [r["advantage"] for r in rows] == [1.0, -1.0]
        summary = json.loads((out / "reward_summary.json").read_text())
        assert summary["groups"][0]["mean_reward"] == 2.0
        assert summary["rung_fractions"] == {"city": 0.5, "province": 0.0, "country": 0.0, "none": 0.5}

    def test_group_of_one(self, rollout_ws, tmp_path):
        out = tmp_path / "o"
        run("rollout", "--config", rollout_ws, "--out", out, "--limit", 5)
        assert run("reward", "--config", rollout_ws, "--out", out, "--log", out / "trajectories.jsonl") == 0
        rows = read_rows(out / "rewards.jsonl")
        assert [r["advantage"] for r in rows] == [0.0] * 5
        # s04 answered Berlin: country rung
        assert [r["rung"] for r in rows] == ["city"] * 4 + ["country"]
        summary = json.loads((out / "reward_summary.json").read_text())
        assert summary["rung_fractions"] == {"city": 0.8, "province": 0.0, "country": 0.2, "none": 0.0}

    def test_mixed_group_rejected(self, rollout_ws, tmp_path, capsys):
        out = tmp_path / "o"
        run("rollout", "--config", rollout_ws, "--out", out, "--limit", 2)
        lines = (out / "trajectories.jsonl").read_text().splitlines()
        row = json.loads(lines[2])
        row["group_id"] = "s00"
        lines[2] = json.dumps(row)
        (out / "trajectories.jsonl").write_text("\n".join(lines) + "\n")
        assert run("reward", "--config", rollout_ws, "--out", out, "--log", out / "trajectories.jsonl") == 2
        assert "mixes sample ids" in capsys.readouterr().err


def write_scripts(ws, judge, proposer):
    (ws.parent / "judge.json").write_text(json.dumps(judge))
    (ws.parent / "proposer.json").write_text(json.dumps(proposer))


@pytest.fixture
def landmark_and_street(tmp_path):
    judge = {"landmark": ["landmark: the Elbphilharmonie"], "street": ["localizable"]}
    proposer = {"*": proposer_script([(10, 20, 100, 200)], ["The palace museum"])}
    records = [manifest_record("landmark", "a.png", width=1024, height=768),
               manifest_record("street", "b.png", width=1024, height=768)]
    (tmp_path / "ws").mkdir()
    write_scripts(tmp_path / "ws" / "config.yaml", judge, proposer)
    return build_workspace(tmp_path / "ws", records, extra_config={
        "judge": {"kind": "scripted", "script": "judge.json"},
        "proposer": {"kind": "scripted", "script": "proposer.json"},
    })


class TestCurate:
    def test_one_dropped_one_curated(self, landmark_and_street, tmp_path):
        out = tmp_path / "o"
        assert run("curate", "--config", landmark_and_street, "--out", out) == 0
        assert read_rows(out / "drop_log.jsonl") == [{"sample_id": "landmark", "stage": "filter", "reason": "landmark"}]
        assert [r["sample_id"] for r in read_rows(out / "kept_manifest.jsonl")] == ["street"]
        sft = read_rows(out / "sft.jsonl")
        assert [r["sample_id"] for r in sft] == ["street"]
        assert [m["role"] for m in sft[0]["messages"]][:3] == ["system", "user", "assistant"]

    def test_all_dropped(self, landmark_and_street, tmp_path):
        write_scripts(landmark_and_street, {"*": ["non-localizable"]}, {"*": ["{}"]})
        out = tmp_path / "o"
        assert run("curate", "--config", landmark_and_street, "--out", out) == 0
        assert (out / "sft.jsonl").exists() and read_rows(out / "sft.jsonl") == []
        assert {r["sample_id"] for r in read_rows(out / "drop_log.jsonl")} == {"landmark", "street"}

    def test_proposer_failure_logged_and_continues(self, landmark_and_street, tmp_path):
        write_scripts(landmark_and_street, {"*": ["localizable"]},
                      {"landmark": ["!unavailable"], "*": proposer_script([(10, 20, 100, 200)])})
        out = tmp_path / "o"
        assert run("curate", "--config", landmark_and_street, "--out", out) == 0
        drops = read_rows(out / "drop_log.jsonl")
        assert [(d["sample_id"], d["stage"]) for d in drops] == [("landmark", "proposal")]
        assert [r["sample_id"] for r in read_rows(out / "sft.jsonl")] == ["street"]

    def test_resume_no_duplicates(self, landmark_and_street, tmp_path):
        out = tmp_path / "o"
        assert run("curate", "--config", landmark_and_street, "--out", out, "--limit", 1) == 0
        state = out / "curate_state.jsonl"
        # simulate an interrupt that tore the last line
        with state.open("a") as fh:
            fh.write('{"sample_id": "str')
        assert run("curate", "--config", landmark_and_street, "--out", out) == 0
        first = (out / "sft.jsonl").read_bytes()
        assert run("curate", "--config", landmark_and_street, "--out", out) == 0
        assert (out / "sft.jsonl").read_bytes() == first
        ids = [json.loads(line)["sample_id"] for line in state.read_text().splitlines()
               if line.startswith('{"decision"')]
        assert sorted(ids) == ["landmark", "street"]
        assert len(read_rows(out / "sft.jsonl")) == 1


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert capsys.readouterr().out.strip()
