import numpy as np
import pytest

from ggdquant import fixture, pipeline
from ggdquant.errors import DegenerateStatsError, InvalidSampleError, ModelError
from ggdquant.fixedpoint import FixedPointFormat, on_grid
from ggdquant.netsim import (
    LayerQuant,
    LayerSpec,
    NetworkModel,
    QuantConfig,
    capture_activations,
    capture_calibration,
    fixed_grids,
    forward_fixed,
    forward_float,
    generous_config,
    quantized_sqnr,
    top1_agreement,
    topk_agreement,
)
from ggdquant.quantizers import FlSearchConfig, Mode, collect_stats, quantize_fm


def identity_conv(channels=2, size=4):
    w = np.zeros((channels, channels, 1, 1))
    w[np.arange(channels), np.arange(channels)] = 1.0
    return NetworkModel((channels, size, size), [LayerSpec("conv", "conv", w, np.zeros(channels))])


class TestLayers:
    def test_identity_conv(self):
        m = identity_conv()
        x = np.random.default_rng(0).normal(size=(3, 2, 4, 4))
        assert np.array_equal(forward_float(m, x)[-1], x)

    def test_relu(self):
        m = NetworkModel((1, 1, 3), [LayerSpec("r", "relu")])
        out = forward_float(m, np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3))[-1]
        assert out.ravel().tolist() == [0.0, 0.0, 2.0]

    def test_avgpool_constant(self):
        m = NetworkModel((2, 4, 4), [LayerSpec("p", "avgpool", kernel=2, stride=2)])
        out = forward_float(m, np.full((1, 2, 4, 4), 1.7))[-1]
        assert out.shape == (1, 2, 2, 2)
        assert np.allclose(out, 1.7)

    def test_maxpool(self):
        m = NetworkModel((1, 2, 2), [LayerSpec("p", "maxpool", kernel=2, stride=2)])
        assert forward_float(m, np.array([[[1.0, 4.0], [3.0, 2.0]]]))[-1].item() == 4.0

    def test_conv_against_direct_loop(self):
        rng = np.random.default_rng(1)
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        m = NetworkModel((2, 5, 5), [LayerSpec("c", "conv", w, b, stride=2, padding=1)])
        x = rng.normal(size=(1, 2, 5, 5))
        out = forward_float(m, x)[-1]
        xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
        ref = np.empty((3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
        assert np.allclose(out[0], ref, atol=1e-12)

    def test_softmax_rows_sum_to_one(self, net):
        prob = forward_float(net.model, net.evals[:10])[-1]
        assert np.allclose(prob.sum(axis=1), 1.0)


class TestValidation:
    def test_channel_mismatch_names_layer(self):
        w = np.zeros((4, 3, 3, 3))
        with pytest.raises(ModelError, match="conv2"):
            NetworkModel((2, 8, 8), [LayerSpec("conv2", "conv", w, np.zeros(4))])

    def test_fc_mismatch(self):
        with pytest.raises(ModelError, match="fc"):
            NetworkModel((1, 2, 2), [LayerSpec("fc", "fc", np.zeros((3, 5)), np.zeros(3))])

    def test_unknown_kind(self):
        with pytest.raises(ModelError):
            NetworkModel((1, 2, 2), [LayerSpec("x", "lrn")])

    def test_duplicate_and_reserved_names(self):
        with pytest.raises(ModelError):
            NetworkModel((1, 2, 2), [LayerSpec("r", "relu"), LayerSpec("r", "relu")])
        with pytest.raises(ModelError):
            NetworkModel((1, 2, 2), [LayerSpec("input", "relu")])

    def test_input_shape_mismatch(self, net):
        with pytest.raises(ModelError):
            forward_float(net.model, np.zeros((1, 3, 8, 8)))

    def test_missing_config_entry(self, net):
        q = generous_config(net.model)
        layers = dict(q.layers)
        del layers["conv2"]
        with pytest.raises(ModelError, match="conv2"):
            forward_fixed(net.model, net.evals[:2], QuantConfig(layers))


class TestFixedPath:
    def test_generous_config_matches_float(self, net):
        x = net.evals[:50]
        fl, fx = forward_float(net.model, x), forward_fixed(net.model, x, generous_config(net.model))
        assert max(np.max(np.abs(a - b)) for a, b in zip(fl, fx)) < 1e-6

    def test_on_grid_conv_is_exact(self):
        rng = np.random.default_rng(2)
        w = rng.integers(-8, 8, size=(2, 2, 3, 3)) / 8.0
        b = rng.integers(-8, 8, size=2) / 8.0
        m = NetworkModel((2, 5, 5), [LayerSpec("c", "conv", w, b, padding=1)])
        x = rng.integers(-16, 16, size=(4, 2, 5, 5)) / 4.0
        q = QuantConfig(
            {"c": LayerQuant(3, 8, 3, 8, 10, 32, True)}, input_format=FixedPointFormat(8, 2, True)
        )
        assert np.array_equal(forward_fixed(m, x, q)[-1], forward_float(m, x)[-1])

    def test_outputs_on_declared_grids(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(6, 6)).config
        outs = forward_fixed(net.model, net.evals[:20], q)
        grids = fixed_grids(net.model, q)
        checked = 0
        for out, fmt in zip(outs, grids):
            if fmt is not None:
                assert on_grid(out, fmt)
                checked += 1
        # relu1, pool1, relu2, pool2, relu3 and fc
        assert checked == 6

    def test_avgpool_requantized(self):
        m = NetworkModel((1, 2, 2), [LayerSpec("p", "avgpool", kernel=2, stride=2)])
        q = QuantConfig({}, input_format=FixedPointFormat(8, 0, True))
        out = forward_fixed(m, np.array([[[1.0, 2.0], [2.0, 2.0]]]), q)[-1]
        assert out.item() == 2.0  # 1.75 rounds onto the integer grid

    def test_bw8_layer_sqnr(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(8, 8)).config
        x = net.evals[:200]
        fl, fx = forward_float(net.model, x), forward_fixed(net.model, x, q)
        for layer in net.model.param_layers:
            idx = net.model.activation_index(layer.name)
            assert quantized_sqnr(fl[idx], fx[idx]) >= 20.0, layer.name

    def test_deterministic(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(4, 4)).config
        a = forward_fixed(net.model, net.evals[:64], q)
        b = forward_fixed(net.model, net.evals[:64], q)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_batch_split_agrees_to_rounding(self, net):
        # BLAS blocking depends on batch size, so only the last bits may differ
        x = net.evals[:300]
        whole = forward_float(net.model, x)[-1]
        parts = np.concatenate([forward_float(net.model, x[:7])[-1], forward_float(net.model, x[7:])[-1]])
        assert np.allclose(whole, parts, rtol=0, atol=1e-12)


class TestCalibration:
    def test_all_zero_layer_named(self):
        w = -np.ones((1, 1, 1, 1))
        m = NetworkModel((1, 2, 2), [LayerSpec("conv", "conv", w, np.zeros(1)), LayerSpec("relu", "relu")])
        with pytest.raises(DegenerateStatsError, match="conv"):
            capture_calibration(m, np.ones((1, 1, 2, 2)))

    def test_matches_concatenated_stream(self, net):
        x = net.calib[:2]
        stats = capture_calibration(net.model, x)
        acts = capture_activations(net.model, x)
        for name, s in stats.items():
            ref = collect_stats(acts[name])
            assert s.count_total == ref.count_total and s.count_negative == ref.count_negative
            assert s.mean_excl_zero == pytest.approx(ref.mean_excl_zero, rel=1e-12)
            assert s.var_excl_zero == pytest.approx(ref.var_excl_zero, rel=1e-9)

    def test_order_independent_moments(self, net):
        a = capture_calibration(net.model, net.calib[:4])
        b = capture_calibration(net.model, net.calib[:4][::-1])
        for name in a:
            assert a[name].mean_excl_zero == pytest.approx(b[name].mean_excl_zero, rel=1e-12)

    def test_empty(self, net):
        with pytest.raises(InvalidSampleError):
            capture_calibration(net.model, np.zeros((0, 3, 16, 16)))

    @pytest.mark.parametrize("bw", [4, 6, 8])
    def test_small_calibration_is_stable(self, net, bw):
        small = capture_calibration(net.model, fixture.synthetic_inputs(64, 0, "calibration"))
        large = capture_calibration(net.model, fixture.synthetic_inputs(6400, 0, "calibration"))
        agree = [
            quantize_fm(None, small[n], FlSearchConfig(bw, mode=Mode.FAST)).fractional_length
            == quantize_fm(None, large[n], FlSearchConfig(bw, mode=Mode.FAST)).fractional_length
            for n in small
        ]
        assert sum(agree) / len(agree) >= 0.9


class TestAgreement:
    def test_generous_is_perfect(self, net):
        assert top1_agreement(net.model, generous_config(net.model), net.evals) == 1.0

    def test_absurd_format_is_near_chance(self, net):
        q = generous_config(net.model)
        for name in q.layers:
            q = q.with_layer(name, fm_bw=2, fm_fl=12)
        assert abs(top1_agreement(net.model, q, net.evals) - 1 / net.model.num_classes) < 0.05

    def test_bw8_designed(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(8, 8)).config
        assert top1_agreement(net.model, q, net.evals) >= 0.95

    def test_topk_monotone_in_k(self, net):
        q = pipeline.quantize_network(net.model, net.stats, net.acts, "wq-fq", pipeline.BitWidths(4, 4)).config
        scores = [topk_agreement(net.model, q, net.evals, k) for k in (1, 2, 5, 10)]
        assert scores == sorted(scores)
        assert scores[-1] == 1.0

    def test_ties_pick_lowest_index(self):
        m = NetworkModel((1, 1, 2), [LayerSpec("fc", "fc", np.eye(2), np.zeros(2))])
        q = QuantConfig({"fc": LayerQuant(0, 8, 0, 8, -4, 2, True)})
        # fixed outputs collapse to a tie; float prefers index 0
        assert top1_agreement(m, q, np.array([[[1.0, 0.9]]])) == 1.0
        assert top1_agreement(m, q, np.array([[[0.9, 1.0]]])) == 0.0

    def test_empty_inputs(self, net):
        with pytest.raises(InvalidSampleError):
            top1_agreement(net.model, generous_config(net.model), np.zeros((0, 3, 16, 16)))
