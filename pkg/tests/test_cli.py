import json

import pytest

from lenctl.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_OK, main
from lenctl.config import ConfigError, load_config
from lenctl.segmenter import segment_batch
from lenctl.units import LengthUnit


# --- config ----------------------------------------------------------------


def test_config_defaults():
    cfg = load_config(None)
    assert cfg.backend_kind == "compliant"
    assert cfg.temperature == 0.8 and cfg.top_p == 0.95
    assert cfg.tolerance_for(LengthUnit.TOKEN) == 10
    assert cfg.tolerance_for(LengthUnit.SENTENCE) == 0


def test_config_file_parsing(tmp_path):
    path = tmp_path / "lenctl.conf"
    path.write_text(
        """
        # comment
        backend.kind = noisy
        backend.compliance = 0.8
        tolerance.word = 5
        grid.sentence = 5:15:5
        grid.token = 100,200
        sampling.temperature = 0.2
        run.parallelism = 2
        """,
        encoding="utf-8",
    )
    cfg = load_config(str(path))
    assert cfg.backend_kind == "noisy"
    assert cfg.compliance == 0.8
    assert cfg.tolerances[LengthUnit.WORD] == 5
    assert cfg.grids[LengthUnit.SENTENCE] == (5, 10, 15)
    assert cfg.grids[LengthUnit.TOKEN] == (100, 200)
    assert cfg.temperature == 0.2


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("backend.flavor = vanilla\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))
    path.write_text("just a line\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_config_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("LENCTL_ENDPOINT", "http://example.invalid/v1")
    monkeypatch.setenv("LENCTL_API_KEY", "k")
    cfg = load_config(None)
    assert cfg.endpoint_url == "http://example.invalid/v1"
    assert cfg.api_key == "k"


# --- commands ---------------------------------------------------------------


def test_generate_compliant_sentences(capsys):
    code = main(
        [
            "generate",
            "--unit",
            "sentence",
            "--target",
            "5",
            "--tolerance",
            "0",
            "--instruction",
            "Write about tides.",
        ]
    )
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert len(segment_batch(out.strip())) == 5


def test_generate_missing_target_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["generate", "--unit", "sentence", "--instruction", "x"])
    assert err.value.code == 2


def test_generate_bad_config_exit(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("backend.kind = warp\n", encoding="utf-8")
    code = main(
        [
            "--config",
            str(conf),
            "generate",
            "--unit",
            "sentence",
            "--target",
            "2",
            "--instruction",
            "x",
        ]
    )
    assert code == EXIT_CONFIG


def test_generate_trace_and_baseline_has_no_markers(tmp_path, capsys):
    trace = tmp_path / "trace.jsonl"
    code = main(
        [
            "generate",
            "--unit",
            "sentence",
            "--target",
            "3",
            "--mode",
            "baseline",
            "--instruction",
            "Write about tides.",
            "--trace",
            str(trace),
        ]
    )
    assert code == EXIT_OK
    records = [json.loads(l) for l in trace.read_text().splitlines()]
    assert records
    assert all(r["events"] == [] for r in records)


def test_generate_backend_failure_exit(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text(
        "backend.kind = http_sse\nbackend.endpoint_url = http://127.0.0.1:9/v1\n",
        encoding="utf-8",
    )
    code = main(
        [
            "--config",
            str(conf),
            "generate",
            "--unit",
            "sentence",
            "--target",
            "2",
            "--instruction",
            "x",
        ]
    )
    assert code == EXIT_BACKEND


def test_generate_resume_limit_exit(capsys):
    code = main(
        [
            "generate",
            "--unit",
            "sentence",
            "--target",
            "9",
            "--tolerance",
            "0",
            "--max-resumes",
            "2",
            "--instruction",
            "Write about tides.",
        ]
    )
    assert code == 5


def test_bench_writes_artifacts(tmp_path, capsys):
    dataset = tmp_path / "items.txt"
    dataset.write_text("First topic\nSecond topic\n", encoding="utf-8")
    out = tmp_path / "out"
    code = main(
        [
            "bench",
            "--dataset",
            str(dataset),
            "--unit",
            "sentence",
            "--grid",
            "5,10",
            "--epsilon",
            "0",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pm"] == 1.0
    assert summary["n"] == 4
    rows = (out / "pairs.csv").read_text().splitlines()
    assert rows[0] == "unit,target,generated,sample_id"
    assert len(rows) == 5


def test_bench_reproducible_byte_for_byte(tmp_path, capsys):
    dataset = tmp_path / "items.txt"
    dataset.write_text("Alpha topic\nBeta topic\nGamma topic\n", encoding="utf-8")
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert (
            main(
                [
                    "bench",
                    "--dataset",
                    str(dataset),
                    "--unit",
                    "word",
                    "--grid",
                    "60,90",
                    "--out",
                    str(out),
                ]
            )
            == EXIT_OK
        )
        blobs.append(
            ((out / "pairs.csv").read_bytes(), (out / "summary.json").read_bytes())
        )
    assert blobs[0] == blobs[1]


def test_pilot_cli_with_estimator(tmp_path, capsys):
    dataset = tmp_path / "pilot.jsonl"
    lines = []
    for n in (60, 160, 260):
        lines.append(json.dumps({"text": " ".join(["w"] * n), "specified": n + 5}))
    dataset.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out = tmp_path / "out"
    code = main(
        [
            "pilot",
            "--dataset",
            str(dataset),
            "--unit",
            "word",
            "--estimator-offset",
            "20",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    payload = json.loads((out / "pilot.json").read_text())
    assert all(b["mae_est_vs_gen"] == 20.0 for b in payload["buckets"].values())


def test_sft_build_deterministic(tmp_path, capsys):
    dataset = tmp_path / "qa.jsonl"
    rows = [
        {"question": f"Q{i}?", "response": f"Answer {i} is here. It has twists."}
        for i in range(10)
    ]
    dataset.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (out1, out2):
        code = main(
            [
                "sft-build",
                "--dataset",
                str(dataset),
                "--variant",
                "feedback",
                "--seed",
                "7",
                "--n",
                "10",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
    assert out1.read_bytes() == out2.read_bytes()


def test_judge_emit_and_score(tmp_path, capsys):
    inputs = tmp_path / "inputs.jsonl"
    inputs.write_text(
        json.dumps(
            {"sample_id": "s1", "document": "Long report.", "summary": "Short."}
        )
        + "\n",
        encoding="utf-8",
    )
    prompts_out = tmp_path / "prompts.jsonl"
    code = main(
        [
            "judge",
            "--template",
            "summary_coherence",
            "--inputs",
            str(inputs),
            "--out",
            str(prompts_out),
        ]
    )
    assert code == EXIT_OK
    prompt = json.loads(prompts_out.read_text().splitlines()[0])
    assert prompt["template_id"] == "summary_coherence"

    replies = tmp_path / "replies.jsonl"
    replies.write_text(
        json.dumps({"sample_id": "s1", "reply": "Good. \\boxed{4}"})
        + "\n"
        + json.dumps({"sample_id": "s2", "reply": "meh"})
        + "\n",
        encoding="utf-8",
    )
    scores_out = tmp_path / "scores.json"
    code = main(
        [
            "judge",
            "--template",
            "summary_coherence",
            "--replies",
            str(replies),
            "--out",
            str(scores_out),
        ]
    )
    assert code == EXIT_OK
    scores = json.loads(scores_out.read_text())
    assert scores[0] == {"sample_id": "s1", "score": 4}
    assert "error" in scores[1]


def test_judge_requires_inputs_or_replies():
    with pytest.raises(SystemExit) as err:
        main(["judge", "--template", "summary_coherence"])
    assert err.value.code == 2
