import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ggdquant import formats, pipeline
from ggdquant.bft import run_bft
from ggdquant.errors import FormatError
from ggdquant.netsim import INPUT_KEY


def roundtrip_bytes(doc):
    text = formats.dumps(doc)
    again = formats.dumps(formats.loads(text))
    return text, again


json_values = st.recursive(
    st.none()
    | st.booleans()
    | st.integers(-(2**53), 2**53)
    | st.floats(allow_nan=True, allow_infinity=True)
    | st.text(max_size=8),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=6), children, max_size=4),
    max_leaves=20,
)


@given(json_values)
def test_emit_parse_emit_is_identity(value):
    text, again = roundtrip_bytes({"format": "x", "version": 1, "value": value})
    assert text == again


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_nine_significant_digits(x):
    parsed = formats.loads(formats.dumps({"format": "x", "version": 1, "v": x}))["v"]
    assert parsed == float(f"{x:.9g}")


def test_non_finite_written_as_strings():
    text = formats.dumps({"format": "x", "version": 1, "a": math.inf, "b": -math.inf, "name": "inf"})
    assert '"a": "inf"' in text and '"b": "-inf"' in text
    doc = formats.loads(text)
    assert doc["a"] == math.inf and doc["b"] == -math.inf
    assert doc["name"] == "inf"


class TestErrors:
    def test_bad_json_reports_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "format": "ggdquant-config",\n  "version": 1,\n  oops\n}\n')
        with pytest.raises(FormatError, match=r"bad\.json:4:"):
            formats.read_doc(p)

    def test_wrong_kind(self):
        with pytest.raises(FormatError, match="expected"):
            formats.loads('{"format": "ggdquant-stats", "version": 1}', kind=formats.CONFIG)

    def test_missing_header(self):
        with pytest.raises(FormatError):
            formats.loads('{"layers": []}')

    def test_unsupported_version(self):
        with pytest.raises(FormatError, match="version"):
            formats.loads('{"format": "x", "version": 99}')

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            formats.read_doc(tmp_path / "nope.json")

    def test_missing_blob_named(self, tmp_path, net):
        formats.write_model(net.model, tmp_path / "model.json")
        (tmp_path / "tensors" / "conv2.bias.f32").unlink()
        with pytest.raises(FormatError, match="conv2.bias.f32"):
            formats.read_model(tmp_path / "model.json")

    def test_blob_size_mismatch(self, tmp_path):
        formats.write_blob(tmp_path / "t.f32", np.zeros(5))
        with pytest.raises(FormatError, match="holds 5"):
            formats.read_blob(tmp_path / "t.f32", (2, 3))


class TestDocuments:
    def test_model_roundtrip(self, tmp_path, net):
        path = tmp_path / "m" / "model.json"
        formats.write_model(net.model, path)
        loaded = formats.read_model(path)
        assert [(a.name, a.kind, a.stride, a.padding) for a in loaded.layers] == [
            (a.name, a.kind, a.stride, a.padding) for a in net.model.layers
        ]
        for a, b in zip(loaded.param_layers, net.model.param_layers):
            assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
        text, again = roundtrip_bytes(formats.model_to_doc(net.model))
        assert text == again == formats.dumps(formats.model_to_doc(loaded))

    def test_dataset_roundtrip(self, tmp_path, net):
        formats.write_dataset(net.evals[:5], tmp_path / "d.json", label="five")
        x, label = formats.read_dataset(tmp_path / "d.json")
        assert label == "five"
        assert np.array_equal(x, net.evals[:5])
        doc = formats.read_doc(tmp_path / "d.json")
        assert doc["shape"] == [5, 3, 16, 16]

    def test_stats_roundtrip(self, net):
        doc = formats.stats_to_doc(net.stats, {"extra": "layer 'extra': all samples are zero"})
        text, again = roundtrip_bytes(doc)
        assert text == again
        stats, degenerate = formats.stats_from_doc(formats.loads(text))
        assert list(degenerate) == ["extra"]
        assert formats.dumps(formats.stats_to_doc(stats, degenerate)) == text
        assert stats[INPUT_KEY].count_total == net.stats[INPUT_KEY].count_total

    def test_config_roundtrip(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(6, 4)).config
        text = formats.dumps(formats.config_to_doc(q))
        parsed = formats.config_from_doc(formats.loads(text))
        assert parsed == q
        assert formats.dumps(formats.config_to_doc(parsed)) == text

    def test_config_without_feature_maps(self, net):
        q = pipeline.quantize_network(net.model, net.stats, None, "wq", pipeline.BitWidths(8, 8)).config
        parsed = formats.config_from_doc(formats.loads(formats.dumps(formats.config_to_doc(q))))
        assert parsed == q and parsed.input_format is None

    def test_invalid_config_values(self, net):
        q = pipeline.quantize_network(net.model, net.stats, None, "wq", pipeline.BitWidths(8, 8)).config
        doc = formats.config_to_doc(q)
        doc["layers"][0]["weight_bw"] = 64
        with pytest.raises(FormatError):
            formats.config_from_doc(doc)

    def test_report_and_trace_roundtrip(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(4, 4)).config
        report = pipeline.build_report(net.model, q, net.stats, net.acts, net.evals[:50])
        for doc in (formats.report_to_doc(report), formats.trace_to_doc(run_bft(net.model, q, net.evals[:50])[1])):
            text, again = roundtrip_bytes(doc)
            assert text == again
