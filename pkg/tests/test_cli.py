import json

import numpy as np
import pytest

from ggdquant import cli, formats
from ggdquant.netsim import LayerSpec, NetworkModel


def run(*argv):
    return cli.main([str(a) for a in argv])


def workflow(root):
    """gen-fixture -> stats -> quantize -> bft -> evaluate on a small fixture."""
    fx = root / "fx"
    assert run("gen-fixture", "--out", fx, "--calib-size", 64, "--eval-size", 200) == 0
    model, calib, evals = fx / "model.json", fx / "calib.json", fx / "eval.json"
    assert run("stats", "--model", model, "--calib", calib, "--out", root / "stats.json") == 0
    assert (
        run(
            "quantize", "--model", model, "--stats", root / "stats.json", "--scheme", "wq-fq",
            "--bw-weights", 8, "--bw-fm", 4, "--fm-bw-layer", "fc=8", "--calib", calib, "--eval", evals,
            "--out", root / "q.json", "--report", root / "report.json",
        )
        == 0
    )
    assert (
        run("bft", "--model", model, "--config", root / "q.json", "--eval", evals, "--out", root / "q2.json",
            "--trace", root / "trace.json")
        == 0
    )
    assert (
        run("evaluate", "--model", model, "--config", root / "q2.json", "--eval", evals, "--calib", calib,
            "--out", root / "eval_report.json")
        == 0
    )
    return fx


OUTPUTS = ("stats.json", "q.json", "report.json", "q2.json", "trace.json", "eval_report.json")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    workflow(a)
    workflow(b)
    return a, b


def test_outputs_byte_identical_across_runs(runs):
    a, b = runs
    for name in OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for blob in ("calib.f32", "eval.f32", "tensors/conv1.weight.f32"):
        assert (a / "fx" / blob).read_bytes() == (b / "fx" / blob).read_bytes()


def test_outputs_roundtrip(runs):
    a, _ = runs
    for name in OUTPUTS + ("fx/model.json", "fx/calib.json"):
        text = (a / name).read_text()
        assert formats.dumps(formats.loads(text)) == text, name


def test_scheme_tags_and_layers(runs):
    a, _ = runs
    report = formats.read_doc(a / "report.json", formats.REPORT)
    assert report["scheme"] == "WQ_FQ"
    assert [r["layer"] for r in report["layers"]] == ["input", "conv1", "conv2", "conv3", "fc"]
    assert report["layers"][-1]["fm_bw"] == 8
    assert formats.read_config(a / "q2.json").scheme == "WQ_FQ+"
    trace = formats.read_doc(a / "trace.json", formats.TRACE)
    assert trace["final_score"] >= trace["initial_score"]


def test_quantize_ristretto_and_floors(runs, tmp_path, capsys):
    a, _ = runs
    fx = a / "fx"
    code = run(
        "quantize", "--model", fx / "model.json", "--stats", a / "stats.json", "--scheme", "ristretto",
        "--bw-weights", 4, "--bw-fm", 4, "--calib", fx / "calib.json", "--sqnr-floor-weights", 12,
        "--sqnr-floor-fm", 12, "--out", tmp_path / "r.json", "--report", tmp_path / "rr.json",
    )
    assert code == 0
    report = formats.read_doc(tmp_path / "rr.json")
    assert report["scheme"] == "ristretto"
    assert "weights_ratio_percent" in report["promotion"]
    assert "promoted:" in capsys.readouterr().out


def test_fast_mode_without_calibration(runs, tmp_path):
    a, _ = runs
    fx = a / "fx"
    code = run(
        "quantize", "--model", fx / "model.json", "--stats", a / "stats.json", "--scheme", "wq-fq",
        "--mode", "fast", "--out", tmp_path / "f.json",
    )
    assert code == 0


def test_weights_from(runs, tmp_path):
    a, _ = runs
    fx = a / "fx"
    model, stats = fx / "model.json", a / "stats.json"
    assert run("quantize", "--model", model, "--stats", stats, "--scheme", "wq", "--out", tmp_path / "w.json") == 0
    assert run("bft", "--model", model, "--config", tmp_path / "w.json", "--eval", fx / "eval.json",
               "--target", "weights", "--out", tmp_path / "w2.json") == 0
    assert formats.read_config(tmp_path / "w2.json").scheme == "WQ+"
    assert run("quantize", "--model", model, "--stats", stats, "--scheme", "wq-fq", "--calib", fx / "calib.json",
               "--weights-from", tmp_path / "w2.json", "--out", tmp_path / "w3.json") == 0
    assert formats.read_config(tmp_path / "w3.json").scheme == "WQ+_FQ"


# -- toy model checks ---------------------------------------------------------------------------


def toy(tmp_path, weight=1.0):
    w = np.full((1, 1, 1, 1), weight)
    model = NetworkModel((1, 2, 2), [LayerSpec("conv", "conv", w, np.zeros(1)), LayerSpec("relu", "relu")])
    formats.write_model(model, tmp_path / "model.json")
    formats.write_dataset(np.array([[[[0.0, 1.0], [2.0, 6.0]]]]), tmp_path / "data.json")
    return tmp_path / "model.json", tmp_path / "data.json"


def test_toy_stats_match_hand_moments(tmp_path):
    model, data = toy(tmp_path)
    assert run("stats", "--model", model, "--calib", data, "--out", tmp_path / "s.json") == 0
    layers = {r["name"]: r for r in formats.read_doc(tmp_path / "s.json")["layers"]}
    conv = layers["conv"]
    assert (conv["count_total"], conv["count_zero"], conv["count_negative"]) == (4, 1, 0)
    assert conv["mean_excl_zero"] == 3.0
    assert conv["var_excl_zero"] == pytest.approx(14 / 3, rel=1e-8)


def test_degenerate_layer_flagged_not_fatal(tmp_path, capsys):
    model, data = toy(tmp_path, weight=-1.0)
    assert run("stats", "--model", model, "--calib", data, "--out", tmp_path / "s.json") == 0
    layers = {r["name"]: r for r in formats.read_doc(tmp_path / "s.json")["layers"]}
    assert layers["conv"]["status"] == "degenerate"
    assert layers["input"]["status"] == "ok"
    assert "conv" in capsys.readouterr().err
    # designing feature maps from it is a domain error
    code = run("quantize", "--model", model, "--stats", tmp_path / "s.json", "--scheme", "wq-fq",
               "--calib", data, "--out", tmp_path / "q.json")
    assert code == 1


def test_exact_config_reports_inf(tmp_path, capsys):
    model, data = toy(tmp_path)
    q = {
        "format": "ggdquant-config", "version": 1, "scheme": "WQ_FQ",
        "input": {"bit_width": 8, "fractional_length": 0, "signed": True},
        "layers": [{"name": "conv", "weight_fl": 4, "weight_bw": 8, "bias_fl": 4, "bias_bw": 8,
                    "fm_fl": 0, "fm_bw": 8, "fm_signed": False}],
        "notes": [],
    }
    (tmp_path / "q.json").write_text(json.dumps(q))
    assert run("evaluate", "--model", model, "--config", tmp_path / "q.json", "--eval", data,
               "--out", tmp_path / "e.json") == 0
    out = capsys.readouterr().out
    assert "top1_agreement: 1.0000" in out and "inf" in out
    assert '"fm_sqnr_network_db": "inf"' in (tmp_path / "e.json").read_text()


# -- exit codes ---------------------------------------------------------------------------------


def test_missing_blob_exit_code(tmp_path, capsys):
    model, data = toy(tmp_path)
    (tmp_path / "tensors" / "conv.weight.f32").unlink()
    assert run("stats", "--model", model, "--calib", data, "--out", tmp_path / "s.json") == 2
    assert "conv.weight.f32" in capsys.readouterr().err


def test_parse_error_exit_code(tmp_path, capsys):
    (tmp_path / "model.json").write_text("{ not json")
    assert run("stats", "--model", tmp_path / "model.json", "--calib", tmp_path / "x.json", "--out", tmp_path / "s") == 2
    assert "model.json:1:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["bft", "--model", "m", "--config", "c", "--eval", "e", "--out", "o", "--window", "0"],
        ["quantize", "--model", "m", "--stats", "s", "--scheme", "lloyd", "--out", "o"],
        ["quantize", "--model", "m", "--stats", "s", "--scheme", "wq", "--out", "o", "--bogus"],
        ["quantize", "--model", "m", "--stats", "s", "--scheme", "wq", "--out", "o", "--fm-bw-layer", "conv1"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
