import json
import subprocess
import sys

import pytest

from streamscd import cli
from streamscd.evaluation import read_report_tsv
from streamscd.scd import AnnotatedTranscript
from streamscd.synth import TEST_PRESET
from streamscd.transducer import NumericError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny synth, train, decode run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data, st, tv = root / "data", root / "st", root / "tv"
    assert run("synth-data", "--out", data, "--n-samples", 3, "--mean-duration", 3.0, "--min-segment", 0.6, "--seed", 1) == 0
    # enough steps for the model to emit tokens on this tiny set
    assert run("train-st", "--data", data, "--out", st, "--steps", 150) == 0
    st_bytes = st.with_suffix(".nnc").read_bytes()
    assert run("train-tvector", "--data", data, "--st", st, "--out", tv, "--steps", 30) == 0
    assert st.with_suffix(".nnc").read_bytes() == st_bytes
    dec = ["--data", data, "--st", st, "--tvector", tv, "--profiles", tv.with_suffix(".profiles.json"), "--threshold", 0.9, "--min-gap", 0.0]
    assert run("decode", *dec, "--out", root / "stream") == 0
    assert run("decode", *dec, "--out", root / "full", "--full") == 0
    return root


def test_outputs_written(pipeline):
    for name in ["st.nnc", "st.json", "st.vocab", "st.loss.tsv", "st.opt.nnc", "tv.nnc", "tv.json", "tv.profiles.json"]:
        assert (pipeline / name).exists(), name
    ids = [json.loads(l)["sample_id"] for l in (pipeline / "data" / "reference.jsonl").read_text().splitlines()]
    for sid in ids:
        for suffix in [".txt", ".gender.json", ".tvec.jsonl"]:
            assert (pipeline / "stream" / f"{sid}{suffix}").exists()


def test_loss_log_has_one_line_per_step(pipeline):
    lines = (pipeline / "st.loss.tsv").read_text().splitlines()
    assert lines[0] == "step\tloss" and [int(l.split("\t")[0]) for l in lines[1:]] == list(range(150))
    assert len((pipeline / "tv.loss.tsv").read_text().splitlines()) == 31


def _numbers(obj):
    if isinstance(obj, dict):
        return [x for k in sorted(obj) for x in _numbers(obj[k])]
    if isinstance(obj, list):
        return [x for v in obj for x in _numbers(v)]
    return [obj] if isinstance(obj, float) else []


def _strip_floats(obj):
    if isinstance(obj, dict):
        return {k: _strip_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_floats(v) for v in obj]
    return None if isinstance(obj, float) else obj


def test_chunked_decode_equals_full_decode(pipeline):
    files = sorted(f.name for f in (pipeline / "stream").iterdir())
    assert files == sorted(f.name for f in (pipeline / "full").iterdir())
    for name in files:
        a, b = (pipeline / "stream" / name).read_text(), (pipeline / "full" / name).read_text()
        if name.endswith(".txt"):
            assert a == b, name
        else:
            # tokens, frames and labels match exactly; scores and t-vectors to round-off
            ja, jb = [json.loads(l) for l in a.splitlines()], [json.loads(l) for l in b.splitlines()]
            assert _strip_floats(ja) == _strip_floats(jb), name
            assert max((abs(x - y) for x, y in zip(_numbers(ja), _numbers(jb))), default=0.0) <= 1e-9, name


def test_transcript_files_parse(pipeline):
    for line in (pipeline / "stream" / "hyps.jsonl").read_text().splitlines():
        h = json.loads(line)
        tokens, marks = AnnotatedTranscript.parse_text((pipeline / "stream" / f"{h['sample_id']}.txt").read_text())
        assert tokens == h["tokens"]
        assert all(0 < u < len(tokens) for u, _ in marks)


def test_evaluate_commands(pipeline, capsys):
    hyp, ref = pipeline / "stream", pipeline / "data" / "reference.jsonl"
    assert run("evaluate-scd", "--hyp", hyp, "--ref", ref, "--report", pipeline / "scd") == 0
    assert run("sweep", "--hyp", hyp, "--ref", ref, "--report", pipeline / "sweep", "--thresholds", "0.5,0.9,1.0") == 0
    assert run("evaluate-gender", "--hyp", hyp, "--ref", ref, "--report", pipeline / "gender") == 0
    rows = read_report_tsv((pipeline / "sweep.tsv").read_text())
    twin = json.loads((pipeline / "sweep.json").read_text())
    assert [list(r) for r in rows] == [["threshold", "recall", "precision", "f1"]] * 3
    assert all(r[k] == t[k] for r, t in zip(rows, twin) for k in r)
    assert [r["threshold"] for r in rows] == [0.5, 0.9, 1.0]
    g = json.loads((pipeline / "gender.json").read_text())
    assert 0.0 <= g["accuracy"] <= 1.0 and g["tokens"] > 0
    assert read_report_tsv((pipeline / "gender.tsv").read_text()) == [{"accuracy": g["accuracy"], "tokens": g["tokens"]}]
    assert "threshold\trecall\tprecision\tf1" in capsys.readouterr().out


def test_empty_hypothesis_gives_zero_recall(pipeline, tmp_path):
    refs = [json.loads(l) for l in (pipeline / "data" / "reference.jsonl").read_text().splitlines()]
    (tmp_path / "events.jsonl").write_text("".join(json.dumps({"sample_id": r["sample_id"], "threshold": 0.9, "events": []}) + "\n" for r in refs))
    assert run("evaluate-scd", "--hyp", tmp_path, "--ref", pipeline / "data" / "reference.jsonl", "--report", tmp_path / "r") == 0
    (row,) = read_report_tsv((tmp_path / "r.tsv").read_text())
    assert row["recall"] == 0.0


def test_sample_id_mismatch_is_data_error(pipeline, tmp_path):
    ref = tmp_path / "ref.jsonl"
    ref.write_text(json.dumps({"sample_id": "other", "sc_times_s": [1.0]}) + "\n")
    for cmd in ("evaluate-scd", "sweep", "evaluate-gender"):
        assert run(cmd, "--hyp", pipeline / "stream", "--ref", ref, "--report", tmp_path / "r") == 3


def test_unknown_lid_is_data_error(pipeline, tmp_path):
    p = pipeline
    assert run("decode", "--data", p / "data", "--st", p / "st", "--tvector", p / "tv", "--out", tmp_path, "--lang", "zz") == 3


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth-data", "--out", tmp_path / d, "--n-samples", 2, "--seed", 7) == 0
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert names == sorted(f.name for f in (tmp_path / "b").iterdir())
    assert all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    assert TEST_PRESET.n_samples == 688


def test_usage_errors(tmp_path):
    assert run() == 2
    assert run("synth-data") == 2
    assert run("synth-data", "--out", tmp_path, "--n-samples", 0) == 2
    assert run("synth-data", "--out", tmp_path, "--min-speakers", 1) == 2
    assert run("--config", tmp_path / "missing.json", "synth-data", "--out", tmp_path) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run("--config", tmp_path / "bad.json", "synth-data", "--out", tmp_path) == 2
    assert run("sweep", "--hyp", tmp_path, "--ref", tmp_path / "r", "--report", tmp_path / "x", "--thresholds", "a,b") == 2


def test_data_errors(tmp_path):
    assert run("train-st", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 3
    assert run("evaluate-scd", "--hyp", tmp_path, "--ref", tmp_path / "nope.jsonl", "--report", tmp_path / "r") == 3


def test_numeric_failure_exit_code(pipeline, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "train_st", boom)
    assert run("train-st", "--data", pipeline / "data", "--out", tmp_path / "m", "--steps", 1) == 4


def test_config_file_and_env_with_flag_override(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_samples": 2, "seed": 5}))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert run("synth-data", "--out", tmp_path / "env") == 0
    written = json.loads((tmp_path / "env" / "config.json").read_text())
    assert (written["n_samples"], written["seed"]) == (2, 5)
    assert run("synth-data", "--out", tmp_path / "flag", "--n-samples", 3) == 0
    written = json.loads((tmp_path / "flag" / "config.json").read_text())
    assert (written["n_samples"], written["seed"]) == (3, 5)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"seed": 9}))
    assert run("--config", other, "synth-data", "--out", tmp_path / "explicit") == 0
    assert json.loads((tmp_path / "explicit" / "config.json").read_text())["seed"] == 9


def test_resumed_training_reproduces_trajectory(pipeline, tmp_path):
    data = pipeline / "data"
    assert run("train-st", "--data", data, "--out", tmp_path / "full", "--steps", 4) == 0
    assert run("train-st", "--data", data, "--out", tmp_path / "half", "--steps", 2) == 0
    assert run("train-st", "--data", data, "--out", tmp_path / "rest", "--steps", 4, "--resume", tmp_path / "half") == 0
    assert (tmp_path / "full.nnc").read_bytes() == (tmp_path / "rest.nnc").read_bytes()
    assert (tmp_path / "full.opt.nnc").read_bytes() == (tmp_path / "rest.opt.nnc").read_bytes()
    full = (tmp_path / "full.loss.tsv").read_text().splitlines()
    split = (tmp_path / "half.loss.tsv").read_text().splitlines() + (tmp_path / "rest.loss.tsv").read_text().splitlines()[1:]
    assert full == split
    assert run("train-st", "--data", data, "--out", tmp_path / "x", "--resume", tmp_path / "missing") == 3


def test_resumed_tvector_training_reproduces_trajectory(pipeline, tmp_path):
    common = ["--data", pipeline / "data", "--st", pipeline / "st"]
    assert run("train-tvector", *common, "--out", tmp_path / "full", "--steps", 4) == 0
    assert run("train-tvector", *common, "--out", tmp_path / "half", "--steps", 2) == 0
    assert run("train-tvector", *common, "--out", tmp_path / "rest", "--steps", 4, "--resume", tmp_path / "half") == 0
    assert (tmp_path / "full.nnc").read_bytes() == (tmp_path / "rest.nnc").read_bytes()


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "streamscd.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ["synth-data", "train-st", "train-tvector", "decode", "evaluate-scd", "evaluate-gender", "sweep"]:
        assert cmd in out.stdout
