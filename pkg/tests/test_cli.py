import subprocess
import sys

import pytest

from spikedistill.cli import emit_summary_table, main
from spikedistill.metrics import format_record, parse_record, read_records

TINY = ["data.train_per_class=12", "data.test_per_class=5", "data.size=8", "b=12", "epochs=1",
        "teacher.epochs=1", "qk.d_h=8", "qk.d_k=4", "stm_window=1"]


def test_unknown_key_exits_one_naming_it(capsys):
    assert main(["distill", "Tt=3"]) == 1
    assert "Tt" in capsys.readouterr().err


def test_bad_verb_and_invalid_value_exit_one(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["distill", "T=0"]) == 1
    assert "T" in capsys.readouterr().err


def test_stray_argument_is_usage_error():
    assert main(["distill", "sastc"]) == 1


def test_distill_with_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[run]\nmode = kd\nT = 1\n")
    out = tmp_path / "run"
    assert main(["distill", "--config", str(cfg), "--out", str(out), "mode=sastc", "T=2"] + TINY) == 0
    summary = parse_record(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["mode"] == "sastc" and summary["T"] == 2
    assert (out / "student.ckpt").exists() and (out / "summary.log").exists()

    assert main(["eval", "--checkpoint", str(out / "student.ckpt")] + TINY) == 0
    rec = parse_record(capsys.readouterr().out.strip())
    assert rec["acc"] == summary["test_acc"]

    assert main(["stm", "--run", str(out), "stm_window=1"]) == 0
    assert parse_record(capsys.readouterr().out.strip())["stm_ln"] == summary["stm_ln"]


def test_teacher_checkpoint_reuse(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path / "t")] + TINY) == 0
    ckpt = tmp_path / "t" / "teacher.ckpt"
    assert main(["distill", "--teacher", str(ckpt), "--out", str(tmp_path / "d"), "mode=kd"] + TINY) == 0
    assert main(["distill", "--teacher", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "x")] + TINY) == 2


def test_summary_rows_absent_and_empty(tmp_path, capsys):
    for name, mode in (("a", "kd"), ("b", "sastc")):
        d = tmp_path / name
        d.mkdir()
        (d / "summary.log").write_text(format_record({"kind": "summary", "mode": mode, "T": 3, "seed": 1,
                                                      "test_acc": 0.5, "stm_ln": 6.25}) + "\n")
    (tmp_path / "c").mkdir()
    table, rows = emit_summary_table([tmp_path / "a", tmp_path / "b", tmp_path / "c"], tmp_path / "rows.log")
    lines = table.splitlines()
    assert lines[0].split() == ["run", "mode", "T", "seed", "test_acc", "stm_ln"]
    assert len(lines) == 4 and rows[2]["mode"] == "absent"
    assert rows[1]["stm_ln"] == 6.25
    assert [r["run"] for r in read_records(tmp_path / "rows.log")] == ["a", "b", "c"]
    header_only, rows = emit_summary_table([])
    assert rows == [] and len(header_only.splitlines()) == 1
    assert header_only.split() == ["run", "mode", "T", "seed", "test_acc", "stm_ln"]
    assert main(["summary", str(tmp_path / "a"), str(tmp_path / "c")]) == 0


def test_gen_data_formats(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "raw")] + TINY) == 0
    assert main(["gen-data", "--format", "idx", "--out", str(tmp_path / "idx")] + TINY) == 0
    cfg = TINY + ["data.source=idx", f"data.train_images={tmp_path}/idx/train-images.idx",
                  f"data.train_labels={tmp_path}/idx/train-labels.idx",
                  f"data.test_images={tmp_path}/idx/test-images.idx",
                  f"data.test_labels={tmp_path}/idx/test-labels.idx"]
    assert main(["train-teacher", "--out", str(tmp_path / "t")] + cfg) == 0


def test_grad_check_verb(capsys):
    assert main(["grad-check", "--trials", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "spikedistill", "distill", "Tt=3"], capture_output=True, text=True)
    assert r.returncode == 1 and "Tt" in r.stderr


@pytest.mark.parametrize("argv", [["ablate-pairs"], ["noisy-suite", "--fractions", "0,0.5", "--modes", "baseline"]])
def test_suite_verbs_write_tables(tmp_path, capsys, argv):
    out = tmp_path / "suite"
    assert main(argv + ["--out", str(out)] + TINY) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == (8 if argv[0] == "ablate-pairs" else 2)
    assert (out / ("ablation.log" if argv[0] == "ablate-pairs" else "noisy.log")).exists()


def test_grad_check_failure_exits_two(monkeypatch, capsys):
    from spikedistill import cli
    from spikedistill.gradcheck import GradCheckReport

    monkeypatch.setattr(cli, "run_suite", lambda trials: [GradCheckReport("ok", 0.0, True),
                                                          GradCheckReport("bad", 1.0, False, (0, 3))])
    assert main(["grad-check"]) == 2
    assert "FAIL bad" in capsys.readouterr().out
