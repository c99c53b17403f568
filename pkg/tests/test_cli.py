import json
import subprocess
import sys

import numpy as np
import pytest

from gladmole.cli import main
from gladmole.mole import router_to_json
from gladmole.routing import init_router
from gladmole.tensor import make_rng, read_tsv, write_tsv


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return str(path)


@pytest.fixture
def score_files(tmp_path):
    refs = [
        {"id": "a", "speakers": [{"words": "a b c d e f g h i j", "start": 0}], "ratio": 0.1},
        {"id": "b", "speakers": [{"words": "a b c d e f g h i j", "start": 0}], "ratio": 0.3},
        {"id": "c", "speakers": [{"words": "a b c d e f g h i j", "start": 0},
                                 {"words": "k l m n o p q r s t", "start": 1}], "ratio": 0.7},
    ]
    hyps = [
        {"id": "a", "sot": "a b c d e f g h i x"},          # 1/10
        {"id": "b", "sot": "a b c d e f g h x x"},          # 2/10
        {"id": "c", "sot": "k l m n o p q r s t $ a b c"},  # 7/20 after the speaker swap
    ]
    return write_lines(tmp_path / "refs.jsonl", refs), write_lines(tmp_path / "hyps.jsonl", hyps)


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert main(["count-params", "--bogus"]) == 1


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--trials", "2", "--seed", "3"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_grad_check_impossible_tolerance_fails(capsys):
    assert main(["grad-check", "--trials", "1", "--tol", "1e-15"]) == 1
    assert "worst tensor" in capsys.readouterr().err


def test_grad_check_local_only_reports_zero_global(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fusion_mode": "local_only"}))
    assert main(["grad-check", "--config", str(cfg), "--trials", "1"]) == 0
    assert "exactly zero" in capsys.readouterr().out


def test_grad_check_bad_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert main(["grad-check", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"d_h": 64}))
    assert main(["grad-check", "--config", str(cfg)]) == 1


def test_missing_file_is_io_error(tmp_path):
    assert main(["grad-check", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["score", "--refs", str(tmp_path / "r"), "--hyps", str(tmp_path / "h")]) == 2


def test_count_params(capsys):
    assert main(["count-params", "--per-layer"]) == 0
    out = capsys.readouterr().out
    assert "none=2224" in out and "both=4176" in out and "ordering" in out
    assert main(["count-params", "--per-layer"]) == 0
    assert capsys.readouterr().out == out


def test_score_reports_oa_wer(score_files, tmp_path, capsys):
    refs, hyps = score_files
    out = tmp_path / "report.json"
    assert main(["score", "--refs", refs, "--hyps", hyps, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["per_band"] == pytest.approx({"low": 10.0, "mid": 20.0, "high": 35.0})
    assert report["oa_wer"] == pytest.approx(65 / 3)
    assert report["pooled"] == pytest.approx(100 * 10 / 40)
    assert "21.7" in capsys.readouterr().out


def test_score_missing_band_warns(tmp_path, capsys):
    refs = write_lines(tmp_path / "r.jsonl", [{"id": "a", "speakers": [{"words": "x"}], "ratio": 0.1}])
    hyps = write_lines(tmp_path / "h.jsonl", [{"id": "a", "sot": "x"}])
    assert main(["score", "--refs", refs, "--hyps", hyps]) == 0
    assert "OA-WER omitted" in capsys.readouterr().out


def test_score_id_mismatch(tmp_path, capsys):
    refs = write_lines(tmp_path / "r.jsonl", [{"id": "a", "speakers": [{"words": "x"}], "ratio": 0.1}])
    hyps = write_lines(tmp_path / "h.jsonl", [{"id": "b", "sot": "x"}])
    assert main(["score", "--refs", refs, "--hyps", hyps]) == 1
    err = capsys.readouterr().err
    assert "without hypothesis: a" in err and "without reference: b" in err


def test_score_malformed_json(tmp_path):
    refs = tmp_path / "r.jsonl"
    refs.write_text("{oops\n")
    hyps = write_lines(tmp_path / "h.jsonl", [])
    assert main(["score", "--refs", str(refs), "--hyps", hyps]) == 1


def test_mix(tmp_path, capsys):
    rng = make_rng(0)
    corpus = write_lines(tmp_path / "c.jsonl", [
        {"id": f"u{i}", "duration": float(d)} for i, d in enumerate(rng.uniform(2, 20, 300))])
    out = tmp_path / "m.jsonl"
    assert main(["mix", "--corpus", corpus, "--composition", "low:0.1,mid:0.1,high:0.1",
                 "--single", "0.2", "--out", str(out), "--seed", "5"]) == 0
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert {x["band"] for x in lines} == {"none", "low", "mid", "high"}
    assert "Dur.(hrs)" in capsys.readouterr().out
    first = out.read_text()
    assert main(["mix", "--corpus", corpus, "--composition", "low:0.1,mid:0.1,high:0.1",
                 "--single", "0.2", "--out", str(out), "--seed", "5"]) == 0
    assert out.read_text() == first


def test_mix_zero_hours(tmp_path):
    corpus = write_lines(tmp_path / "c.jsonl", [{"id": "a", "duration": 3.0}])
    out = tmp_path / "m.jsonl"
    assert main(["mix", "--corpus", corpus, "--composition", "", "--single", "0",
                 "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_mix_infeasible(tmp_path):
    corpus = write_lines(tmp_path / "c.jsonl", [{"id": "a", "duration": 3.0}])
    assert main(["mix", "--corpus", corpus, "--quiet"]) == 1


def test_route_with_router_file(tmp_path):
    router = init_router(make_rng(1), 4, 3, d_global=4)
    (tmp_path / "r.json").write_text(json.dumps(router_to_json(router)))
    x = make_rng(2).standard_normal((5, 4))
    write_tsv(x, tmp_path / "x.tsv")
    for mode, row_sum in (("dynamic", 1.0), ("static_sum", 2.0), ("local_only", 1.0)):
        out = tmp_path / f"{mode}.tsv"
        assert main(["route", "--xs", str(tmp_path / "x.tsv"), "--router", str(tmp_path / "r.json"),
                     "--mode", mode, "--out", str(out)]) == 0
        p = read_tsv(out)
        assert p.shape == (5, 3)
        np.testing.assert_allclose(p.sum(axis=1), row_sum, atol=1e-12)


def test_route_shape_mismatch(tmp_path):
    write_tsv(np.zeros((2, 4)), tmp_path / "xs.tsv")
    write_tsv(np.zeros((3, 4)), tmp_path / "xin.tsv")
    assert main(["route", "--xs", str(tmp_path / "xs.tsv"), "--xin", str(tmp_path / "xin.tsv")]) == 1


def test_glad_seed_environment(tmp_path, monkeypatch):
    write_tsv(make_rng(3).standard_normal((2, 4)), tmp_path / "x.tsv")

    def run(out, *extra):
        assert main(["route", "--xs", str(tmp_path / "x.tsv"), "--out", str(out), *extra]) == 0
        return (tmp_path / out).read_text()

    monkeypatch.setenv("GLAD_SEED", "7")
    from_env = run(tmp_path / "a.tsv")
    assert run(tmp_path / "b.tsv", "--seed", "7") == from_env
    assert run(tmp_path / "c.tsv", "--seed", "8") != from_env
    monkeypatch.setenv("GLAD_SEED", "x")
    assert main(["route", "--xs", str(tmp_path / "x.tsv")]) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gladmole.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("grad-check", "count-params", "score", "mix", "route"):
        assert cmd in proc.stdout
