import csv
import io
import json
import subprocess
import sys


from pconvlab.cli import EX_CONFIG, EX_OK, EX_USAGE, EX_WARN, dispatch

TINY_ARCH = {"custom": {"widths": [8, 16, 32, 64], "blocks": [1, 1, 1, 1], "r": 0.25, "activation": "relu"},
             "num_classes": 5}


def run(capsys, *argv):
    code = dispatch(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys)[0] == EX_USAGE

    def test_unknown_flag(self, capsys):
        assert run(capsys, "flops", "--variant", "T0", "--frobnicate")[0] == EX_USAGE

    def test_unknown_command(self, capsys):
        assert run(capsys, "train")[0] == EX_USAGE

    def test_help(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == EX_OK and "bench" in out

    def test_bad_dims(self, capsys):
        assert run(capsys, "flops", "--op", "conv", "--dims", "8x8")[0] == EX_USAGE

    def test_json_and_csv_exclusive(self, capsys):
        assert run(capsys, "flops", "--variant", "T0", "--json", "--csv")[0] == EX_USAGE


class TestFlops:
    def test_variant_summary(self, capsys):
        code, out, _ = run(capsys, "flops", "--variant", "T0")
        assert code == EX_OK and out.strip() == "0.34 GFLOPs, 3.9M params"

    def test_variant_json(self, capsys):
        code, out, _ = run(capsys, "flops", "--variant", "L", "--json")
        d = json.loads(out)
        assert d["flops"] == 15_494_383_616 and "layers" not in d

    def test_operator_table(self, capsys):
        code, out, _ = run(capsys, "flops", "--op", "dwconv", "--json")
        cells = [o["table_m"] for o in json.loads(out)["operators"]]
        assert cells == ["27.09", "13.54", "6.77", "3.38"]

    def test_operator_csv(self, capsys):
        code, out, _ = run(capsys, "flops", "--op", "conv", "--op", "pconv:1/4", "--csv")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [r["table_m"] for r in rows] == ["2601"] * 4 + ["162"] * 4

    def test_arch_file(self, capsys, tmp_path):
        path = tmp_path / "a.json"
        path.write_text(json.dumps(TINY_ARCH))
        code, out, _ = run(capsys, "flops", "--arch", str(path), "--size", "64", "--per-layer")
        assert code == EX_OK and "FC_5" in out

    def test_bad_variant_is_config_error(self, capsys):
        assert run(capsys, "flops", "--variant", "Z9")[0] == EX_CONFIG

    def test_unreadable_arch(self, capsys, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        assert run(capsys, "flops", "--arch", str(tmp_path / "bad.json"))[0] == EX_CONFIG


class TestBuildAnalyze:
    def test_build_then_analyze(self, capsys, tmp_path):
        arch = tmp_path / "a.json"
        arch.write_text(json.dumps(TINY_ARCH))
        out_dir = tmp_path / "w"
        code, out, _ = run(capsys, "build", "--arch", str(arch), "--size", "64", "--out", str(out_dir), "--json")
        assert code == EX_OK
        d = json.loads(out)
        assert d["params_stored"] == d["cost"]["params"]
        assert (out_dir / "manifest.json").exists() and (out_dir / "cost.json").exists()

        code, out, _ = run(capsys, "analyze", "--weights", str(out_dir), "--json")
        assert code == EX_OK and json.loads(out)["total"] == 2 + 4 + 8 + 16

    def test_fold_bn(self, capsys, tmp_path):
        arch = tmp_path / "a.json"
        arch.write_text(json.dumps(TINY_ARCH))
        code, out, _ = run(capsys, "build", "--arch", str(arch), "--fold-bn", "--json")
        assert code == EX_OK and not any("BN" in json.dumps(m) for m in json.loads(out)["manifest"])

    def test_analyze_missing(self, capsys, tmp_path):
        assert run(capsys, "analyze", "--weights", str(tmp_path))[0] == EX_CONFIG


class TestApprox:
    def test_curve_to_file(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"student_kind": "partial", "epochs": 3,
                                   "dataset": {"n": 20, "c": 8, "h": 5, "w": 5, "seed": 1}}))
        code, _, err = run(capsys, "approx", "--config", str(cfg), "--out", str(tmp_path / "curve.csv"))
        assert code == EX_OK and "final test MSE" in err
        assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "epoch,train,val,test"

    def test_curve_stdout(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"student_kind": "depthwise", "epochs": 1,
                                   "dataset": {"n": 10, "c": 4, "h": 4, "w": 4, "seed": 1}}))
        code, out, _ = run(capsys, "approx", "--config", str(cfg), "--quiet")
        assert code == EX_OK and len(out.splitlines()) == 3

    def test_bad_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"optimizer": "adam"}))
        assert run(capsys, "approx", "--config", str(cfg))[0] == EX_CONFIG

    def test_bad_kind(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"student_kind": "fft"}))
        assert run(capsys, "approx", "--config", str(cfg))[0] == EX_CONFIG


class TestBench:
    def test_csv_stdout(self, capsys):
        code, out, _ = run(capsys, "bench", "--op", "pconv:0.25", "--dims", "16x8x8", "--layers", "2",
                           "--warmup", "1", "--iters", "5", "--csv")
        assert code in (EX_OK, EX_WARN)
        rows = list(csv.DictReader(io.StringIO(out)))
        assert len(rows) == 1 and rows[0]["operator"] == "pconv:0.25"

    def test_json(self, capsys):
        code, out, _ = run(capsys, "bench", "--op", "conv", "--op", "dwconv", "--dims", "8x8x8",
                           "--warmup", "1", "--iters", "5", "--json")
        d = json.loads(out)
        assert code in (EX_OK, EX_WARN) and len(d["records"]) == 2 and "report" in d

    def test_iters_too_few(self, capsys):
        assert run(capsys, "bench", "--op", "conv", "--dims", "8x8x8", "--iters", "2")[0] == EX_CONFIG

    def test_unknown_op(self, capsys):
        assert run(capsys, "bench", "--op", "fft", "--dims", "8x8x8")[0] == EX_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pconvlab", "flops", "--variant", "T0"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "GFLOPs" in proc.stdout
