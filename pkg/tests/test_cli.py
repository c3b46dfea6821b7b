import json
import shutil
import subprocess
import sys

import pytest
from test_graph import TOY_SPECS

from tnn_accel.cli import (
    EXIT_EVAL,
    EXIT_OK,
    EXIT_PARSE,
    EXIT_VALIDATION,
    VALIDATORS,
    MismatchedLayers,
    compare_reports,
    dumps,
    load_workload,
    main,
    read_report,
    run_validation,
)
from tnn_accel.hardware import preset_dir


def write_workload(path, names=("TTM", "TR")):
    layers = [{"name": f"toy_{n.lower()}", **TOY_SPECS[n].to_dict()} for n in names]
    path.write_text(json.dumps({"layers": layers}))
    return str(path)


@pytest.fixture
def workload(tmp_path):
    return write_workload(tmp_path / "toy.json")


@pytest.fixture
def report(tmp_path, workload):
    out = tmp_path / "search.json"
    assert (
        main(["search", "--workload", workload, "--hardware", "fetta", "--candidates", "8", "--out", str(out)])
        == EXIT_OK
    )
    return out


class TestSearchEvaluate:
    def test_search_report_shape(self, report):
        data = json.loads(report.read_text())
        assert data["command"] == "search"
        assert [r["name"] for r in data["layers"]] == ["toy_ttm", "toy_tr"]
        for rec in data["layers"]:
            assert {"sequence", "cost", "perf", "baselines", "dense", "search"} <= set(rec)
            assert rec["cost"]["total_macs"] <= rec["baselines"]["fixed"]["cost"]["total_macs"]

    @pytest.mark.parametrize("seq", ["csse", "restricted", "fixed", "reconstruct"])
    def test_evaluate_sequences(self, tmp_path, workload, seq):
        out = tmp_path / f"{seq}.json"
        argv = ["evaluate", "--workload", workload, "--sequence", seq, "--candidates", "4", "--out", str(out)]
        assert main(argv + ["--hardware", "fetta", "--hardware", "tpu-like"]) == EXIT_OK
        rec = json.loads(out.read_text())["layers"][0]
        assert set(rec["perf"]) == {"fetta", "tpu-like"}

    def test_preset_workload_by_name(self):
        layers = load_workload("fig6_ttm")
        assert len(layers) == 1 and layers[0]["spec"].format == "TTM"

    def test_inference_mode_override(self, tmp_path, workload):
        out = tmp_path / "inf.json"
        assert main(["evaluate", "--workload", workload, "--mode", "inference", "--out", str(out)]) == EXIT_OK
        rec = json.loads(out.read_text())["layers"][0]
        assert set(rec["perf"]["fetta"]["per_phase"]) <= {"FP", "reorder"}

    def test_deterministic_output(self, tmp_path, workload):
        texts = []
        for k, jobs in enumerate(("1", "2")):
            out = tmp_path / f"r{k}.json"
            main(["search", "--workload", workload, "--candidates", "4", "--jobs", jobs, "--out", str(out)])
            texts.append(out.read_text())
        assert texts[0] == texts[1]

    def test_empty_workload(self, tmp_path, capsys):
        empty = tmp_path / "empty.json"
        empty.write_text("")
        assert main(["search", "--workload", str(empty)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["layers"] == []

    def test_malformed_json_reports_position(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"layers": [\n  {"name": "x",,}\n]}')
        assert main(["search", "--workload", str(bad)]) == EXIT_PARSE
        assert "bad.json:2:" in capsys.readouterr().err

    def test_invalid_layer(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps({"layers": [{"name": "x", "format": "CP", "batch": 2, "m_dims": [2], "n_dims": [2]}]})
        )
        assert main(["search", "--workload", str(bad)]) == EXIT_PARSE
        assert "x" in capsys.readouterr().err

    def test_unknown_hardware(self, workload):
        assert main(["search", "--workload", workload, "--hardware", "nope"]) == EXIT_PARSE

    def test_bad_arguments(self):
        assert main(["search"]) == EXIT_PARSE
        assert main(["frobnicate"]) == EXIT_PARSE

    def test_unmappable_layer_is_eval_error(self, tmp_path, workload):
        hw = tmp_path / "tiny.json"
        # stationary tiles never fit and no output-stationary fallback exists
        hw.write_text(json.dumps({"name": "tiny", "unified_mem_bytes": 8, "dataflow_modes": ["WS"]}))
        out = tmp_path / "o.json"
        assert main(["evaluate", "--workload", workload, "--hardware", str(hw), "--out", str(out)]) == EXIT_EVAL
        assert "NoLegalMapping" in json.loads(out.read_text())["layers"][0]["error"]

    def test_zero_memory_config_rejected(self, tmp_path, workload):
        hw = tmp_path / "zero.json"
        hw.write_text(json.dumps({"name": "zero", "unified_mem_bytes": 0}))
        assert main(["evaluate", "--workload", workload, "--hardware", str(hw)]) == EXIT_PARSE


class TestReportCompare:
    def test_round_trip_byte_identical(self, tmp_path, report):
        again = tmp_path / "again.json"
        assert main(["report", str(report), "--out", str(again)]) == EXIT_OK
        assert again.read_bytes() == report.read_bytes()
        assert dumps(read_report(str(again))) == report.read_text()

    def test_summary_lists_layers(self, report, capsys):
        assert main(["report", str(report)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "toy_ttm" in out and "toy_tr" in out

    def test_self_compare_is_unity(self, report):
        data = read_report(str(report))
        rows, plot = compare_reports([("a", data), ("b", data)])
        assert rows and all(r[5] == 1.0 for r in rows)
        assert plot["baseline"] == "a"

    def test_compare_dense_baseline(self, report):
        rows, plot = compare_reports([("a", read_report(str(report)))], "dense")
        params = [r for r in rows if r[2] == "params"]
        assert len(params) == 2
        for _, _, _, val, ref, ratio in params:
            assert ref == 36 and ratio == pytest.approx(ref / val)
        assert plot["baseline"] == "dense"

    def test_compare_cli_csv(self, tmp_path, report, capsys):
        plot = tmp_path / "plot.json"
        assert main(["compare", str(report), str(report), "--plot", str(plot)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "report,layer,metric,value,reference,ratio"
        assert json.loads(plot.read_text())["metrics"]

    def test_mismatched_layers(self, tmp_path, report):
        other = tmp_path / "other.json"
        assert (
            main(
                [
                    "search",
                    "--workload",
                    write_workload(tmp_path / "w2.json", ("TT",)),
                    "--candidates",
                    "4",
                    "--out",
                    str(other),
                ]
            )
            == EXIT_OK
        )
        with pytest.raises(MismatchedLayers):
            compare_reports([("a", read_report(str(report))), ("b", read_report(str(other)))])
        assert main(["compare", str(report), str(other)]) == EXIT_PARSE

    def test_unreadable_report(self, tmp_path):
        bad = tmp_path / "r.json"
        bad.write_text("[1, 2")
        assert main(["report", str(bad)]) == EXIT_PARSE
        assert main(["report", str(tmp_path / "missing.json")]) == EXIT_PARSE


class TestValidate:
    def test_all_pass(self, capsys):
        assert main(["validate"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out == [f"PASS {name}" for name in VALIDATORS]

    @pytest.mark.parametrize("name", sorted(VALIDATORS))
    def test_injected_fault_names_property(self, name, capsys):
        assert main(["validate", "--inject-fault", name]) == EXIT_VALIDATION
        assert f"FAIL {name}" in capsys.readouterr().out.splitlines()

    def test_unknown_fault(self):
        assert main(["validate", "--inject-fault", "nope"]) == EXIT_PARSE

    @pytest.mark.parametrize("seed", range(10))
    def test_seeds(self, seed):
        assert all(run_validation(seed).values())


def test_preset_dir_override(tmp_path, monkeypatch, workload):
    shutil.copytree(preset_dir(), tmp_path / "presets")
    custom = tmp_path / "presets" / "hardware" / "fetta.json"
    data = json.loads(custom.read_text())
    data["frequency_hz"] = 5e8
    custom.write_text(json.dumps(data))
    monkeypatch.setenv("TNN_ACCEL_PRESET_DIR", str(tmp_path / "presets"))
    out = tmp_path / "o.json"
    assert main(["evaluate", "--workload", workload, "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["hardware"]["fetta"]["frequency_hz"] == 5e8


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tnn_accel", "--version"], check=False, capture_output=True, text=True)
    assert proc.returncode == 0 and "tnn-accel" in proc.stdout
