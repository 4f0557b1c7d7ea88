import json

import pytest

from prefedit.cases import EditCase, TASK_ORDER
from prefedit.cli import main
from prefedit.datapipe import write_jsonl

FLOW = {"steps": 40, "lr": 0.02, "hidden": [8], "batch_size": 64}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def toy_cases(scores_at_center, n, task=TASK_ORDER[0], prefix="c"):
    out = []
    for i in range(n):
        point = (2.0, 0.0) if i < scores_at_center else (2.0, 1.5)
        out.append((EditCase(f"{prefix}{i}", task, "edit", input_embedding=(1.0, 0.5),
                             output_ref=f"o{i}", terminal_point=point), None))
    return out


@pytest.fixture
def flow_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", flow=FLOW, seed=1)
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train-flow", "--config", cfg, "--out", str(out))
    assert code == 0, stdout
    return out


def test_train_flow_outputs(flow_run, tmp_path, capsys):
    assert (flow_run / "checkpoints" / "flow.bin").exists()
    assert (flow_run / "curves" / "flow_loss.csv").read_text().startswith("step,loss\n")
    for d in ("checkpoints", "curves", "datasets", "reports"):
        assert (flow_run / d).is_dir()
    manifest = json.loads((flow_run / "run.json").read_text())
    assert manifest["seed"] == 1 and manifest["config"]["flow"]["lr"] == 0.02
    assert len(manifest["config_hash"]) == 64
    # same seed again, and again from the manifest: identical checkpoints
    again = tmp_path / "again"
    cfg = write_config(tmp_path / "cfg2.json", flow=FLOW, seed=1)
    assert run(capsys, "train-flow", "--config", cfg, "--out", str(again))[0] == 0
    replay = tmp_path / "replay"
    assert run(capsys, "train-flow", "--config", str(flow_run / "run.json"), "--out", str(replay))[0] == 0
    blob = (flow_run / "checkpoints" / "flow.bin").read_bytes()
    assert (again / "checkpoints" / "flow.bin").read_bytes() == blob
    assert (replay / "checkpoints" / "flow.bin").read_bytes() == blob


def test_train_flow_prints_loss(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", flow=FLOW)
    code, out, _ = run(capsys, "train-flow", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 0 and out.startswith("final loss ")


def test_config_errors(tmp_path, capsys):
    no_lr = write_config(tmp_path / "a.json", flow={"steps": 5})
    code, _, err = run(capsys, "train-flow", "--config", no_lr, "--out", str(tmp_path / "o"))
    assert code == 1 and "flow.lr" in err
    typo = write_config(tmp_path / "b.json", flow={**FLOW, "lrate": 1})
    code, _, err = run(capsys, "train-flow", "--config", typo)
    assert code == 1 and "lrate" in err
    wrong_type = write_config(tmp_path / "c.json", flow={**FLOW, "steps": "many"})
    assert run(capsys, "train-flow", "--config", wrong_type)[0] == 1
    assert run(capsys, "train-flow", "--config", str(tmp_path / "missing.json"))[0] == 1
    assert run(capsys, "train-flow")[0] == 1  # no flow section
    assert run(capsys, "fly")[0] == 1
    assert run(capsys, "train-flow", "--set", "noequals")[0] == 1


def test_set_overrides_leaf(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", flow=FLOW)
    out = tmp_path / "o"
    code, _, _ = run(capsys, "train-flow", "--config", cfg, "--set", "flow.steps=3",
                     "--set", "flow.activation=tanh", "--out", str(out))
    assert code == 0
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["config"]["flow"]["steps"] == 3
    assert manifest["config"]["flow"]["activation"] == "tanh"
    assert len((out / "curves" / "flow_loss.csv").read_text().splitlines()) == 4


def dataset_config(tmp_path, raw, **scorer):
    return write_config(tmp_path / "d.json", datapipe={"raw": str(raw)},
                        scorer={"kind": "synthetic", "center": [2.0, 0.0], **scorer})


def test_build_dataset_counts(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(3, 10), raw)
    before = raw.read_bytes()
    code, out, _ = run(capsys, "build-dataset", "--config", dataset_config(tmp_path, raw),
                       "--out", str(tmp_path / "o"))
    assert code == 0 and "retained 7 discarded 3" in out
    hard = (tmp_path / "o" / "datasets" / "hard_cases.jsonl").read_text().splitlines()
    assert len(hard) == 7 and all(json.loads(line)["score"] < 5 for line in hard)
    assert (tmp_path / "o" / "reports" / "dataset_stats.csv").exists()
    assert raw.read_bytes() == before


def test_build_dataset_all_perfect(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(4, 4), raw)
    code, out, err = run(capsys, "build-dataset", "--config", dataset_config(tmp_path, raw),
                         "--out", str(tmp_path / "o"))
    assert code == 0 and "retained 0" in out and "warning" in err
    assert (tmp_path / "o" / "datasets" / "hard_cases.jsonl").read_text() == ""


def test_build_dataset_balancing_and_bad_input(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(0, 30), raw)
    cfg = dataset_config(tmp_path, raw)
    code, out, _ = run(capsys, "build-dataset", "--config", cfg, "--set", "datapipe.cap_ratio=1.0",
                       "--out", str(tmp_path / "o"))
    # one category only: cap = ceil(30 / 1) so nothing is trimmed
    assert code == 0 and "retained 30" in out
    raw.write_text(raw.read_text() + "{broken\n")
    code, _, err = run(capsys, "build-dataset", "--config", cfg, "--out", str(tmp_path / "o2"))
    assert code == 2 and "line 31" in err


def test_build_dataset_remote_unreachable(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(1, 2), raw)
    cfg = dataset_config(tmp_path, raw, kind="remote", endpoint="http://127.0.0.1:9",
                         retries=0, timeout=0.5)
    code, _, err = run(capsys, "build-dataset", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 2 and "127.0.0.1:9" in err


def test_build_dataset_remote_via_env(tmp_path, capsys, monkeypatch, stub_server):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(0, 5), raw)
    stub_server.script = [("score", 5)] * 2
    monkeypatch.setenv("HP_SCORER_ENDPOINT", stub_server.url)
    cfg = dataset_config(tmp_path, raw, kind="remote")
    code, out, _ = run(capsys, "build-dataset", "--config", cfg, "--set", "datapipe.workers=1",
                       "--out", str(tmp_path / "o"))
    assert code == 0 and "retained 3 discarded 2" in out
    assert stub_server.requests == 5


def test_remote_without_endpoint_is_config_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("HP_SCORER_ENDPOINT", raising=False)
    raw = tmp_path / "raw.jsonl"
    write_jsonl(toy_cases(1, 2), raw)
    code, _, err = run(capsys, "build-dataset", "--config", dataset_config(tmp_path, raw, kind="remote"))
    assert code == 1 and "endpoint" in err


def test_post_train_zero_iterations_is_byte_identical(flow_run, capsys):
    code, out, _ = run(capsys, "post-train", "--out", str(flow_run), "--set", "grpo.iterations=0")
    assert code == 0 and "no iterations" in out
    ck = flow_run / "checkpoints"
    assert (ck / "post.bin").read_bytes() == (ck / "flow.bin").read_bytes()
    assert json.loads((ck / "post.grpo.json").read_text())["iterations"] == 0
    assert (flow_run / "curves" / "reward.csv").read_text() == "iteration,mean_reward,mean_score,kl\n"


def test_post_train_writes_curve(flow_run, capsys):
    code, out, _ = run(capsys, "post-train", "--out", str(flow_run), "--set", "grpo.iterations=3",
                       "--set", "grpo.groups_per_iteration=2", "--set", "grpo.steps=8")
    assert code == 0 and out.startswith("final mean reward")
    lines = (flow_run / "curves" / "reward.csv").read_text().splitlines()
    assert len(lines) == 4
    assert json.loads((flow_run / "run.json").read_text())["command"] == "post-train"


def test_post_train_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "post-train", "--out", str(tmp_path / "empty"))
    assert code == 2 and "checkpoint" in err


def write_suite(root, drop=None):
    root.mkdir()
    for t in TASK_ORDER:
        if t != drop:
            write_jsonl(toy_cases(0, 2, t, prefix=f"{t.value}-"), root / f"{t.value}.jsonl")
    return root


def test_evaluate_and_compare(flow_run, tmp_path, capsys):
    suite = write_suite(tmp_path / "suite")
    cfg = write_config(tmp_path / "e.json", bench={"suite": str(suite), "model_id": "toy", "steps": 10},
                       scorer={"center": [0.0, 0.0], "r5": 0.5, "r3": 2.0})
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--out", str(flow_run))
    assert code == 0 and out.startswith("overall ")
    report = flow_run / "reports" / "report.csv"
    first = report.read_bytes()
    assert run(capsys, "evaluate", "--config", cfg, "--out", str(flow_run))[0] == 0
    assert report.read_bytes() == first

    baseline = tmp_path / "baseline.csv"
    baseline.write_text(first.decode().replace("toy,", "baseline,"))
    code, _, _ = run(capsys, "evaluate", "--config", cfg, "--out", str(flow_run), "--compare", str(baseline))
    assert code == 0
    rows = report.read_text().splitlines()
    assert len(rows) == 3 and {r.split(",")[0] for r in rows[1:]} == {"toy", "baseline"}


def test_evaluate_missing_task_file(flow_run, tmp_path, capsys):
    suite = write_suite(tmp_path / "suite", drop=TASK_ORDER[3])
    cfg = write_config(tmp_path / "e.json", bench={"suite": str(suite)})
    code, _, err = run(capsys, "evaluate", "--config", cfg, "--out", str(flow_run))
    assert code == 2 and "background_replace" in err
