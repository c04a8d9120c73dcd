import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ALL_KINDS, FIVE_LAYER, FIXTURES, make_model, random_image
from oracles import finite_difference_probes, reference_forward, relative_error
from xplain_bench import nn
from xplain_bench.corpus import FIXTURE_SPEC
from xplain_bench.nn import (
    Conv2D, Dense, ModelError, ModelFormatError, ModelGraph, forward, input_gradient,
    load_model, preprocess, save_model, softmax, target_probability,
)


def _graph(layers, shape=(3, 1, 1), ncls=None, mean=(0, 0, 0), std=(1, 1, 1)):
    return ModelGraph(shape, mean, std, layers, ncls)


class TestLoadSave:
    def test_fixture_file(self):
        m = load_model(FIXTURES / "tiny_cnn.xbw")
        assert len(m.layers) == 6
        assert m.num_classes == 10
        assert [l.kind for l in m.layers] == ["Conv2D", "ReLU", "MaxPool2D", "AvgPool2D", "Flatten", "Dense"]
        assert m.layers[0].weight.shape == (4, 3, 3, 3)
        assert m.layers[5].weight.shape == (10, 64)

    def test_round_trip_bit_exact(self, tmp_path):
        m = load_model(FIXTURES / "tiny_cnn.xbw")
        save_model(m, tmp_path / "a.xbw")
        again = load_model(tmp_path / "a.xbw")
        assert (tmp_path / "a.xbw").read_bytes() == (FIXTURES / "tiny_cnn.xbw").read_bytes()
        for l1, l2 in zip(m.layers, again.layers):
            for p1, p2 in zip(l1.params, l2.params):
                assert p1.tobytes() == p2.tobytes()
        assert m.mean.tobytes() == again.mean.tobytes()
        assert m.std.tobytes() == again.std.tobytes()

    def _write(self, path, header_lines, floats):
        path.write_bytes(("\n".join(header_lines) + "\n").encode() + np.asarray(floats, "<f4").tobytes())

    def test_dense_shape_mismatch_names_layer(self, tmp_path):
        # declared Dense 2x3 but the preceding layer gives 3 features -> ok;
        # declare 2x4 so weights disagree with the graph
        p = tmp_path / "bad.xbw"
        self._write(p, ["XBW 1 2 3 1 1 2 0 0 0 1 1 1", "Flatten", "Dense 2 4"], np.zeros(10))
        with pytest.raises(ModelFormatError, match="layer 1"):
            load_model(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.xbw"
        self._write(p, ["XBW 1 2 3 1 1 2 0 0 0 1 1 1", "Flatten", "Dense 2 3"], np.zeros(7))
        with pytest.raises(ModelFormatError, match="layer 1: truncated"):
            load_model(p)

    def test_non_finite_weight(self, tmp_path):
        p = tmp_path / "n.xbw"
        w = np.zeros(8)
        w[2] = np.nan
        self._write(p, ["XBW 1 2 3 1 1 2 0 0 0 1 1 1", "Flatten", "Dense 2 3"], w)
        with pytest.raises(ModelFormatError, match="layer 1: non-finite"):
            load_model(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "h.xbw"
        p.write_bytes(b"XBX 1 0\n")
        with pytest.raises(ModelFormatError, match="malformed header"):
            load_model(p)

    def test_empty_layer_list(self, tmp_path):
        p = tmp_path / "e.xbw"
        p.write_bytes(b"XBW 1 0 3 1 1 2 0 0 0 1 1 1\n")
        with pytest.raises(ModelFormatError, match="model has no layers"):
            load_model(p)
        with pytest.raises(ModelError, match="model has no layers"):
            _graph([], ncls=2)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "x.xbw"
        self._write(p, ["XBW 1 2 3 1 1 2 0 0 0 1 1 1", "Flatten", "Dense 2 3"], np.zeros(9))
        with pytest.raises(ModelFormatError, match="trailing"):
            load_model(p)


class TestGraphInvariants:
    def test_final_output_must_match_classes(self):
        with pytest.raises(ModelError, match="final output"):
            _graph([nn.Flatten(), Dense(np.zeros((2, 3), np.float32), np.zeros(2, np.float32))], ncls=3)

    def test_std_positive(self):
        with pytest.raises(ModelError, match="std"):
            _graph([nn.Flatten()], ncls=3, std=(1, 0, 1))

    def test_layers_are_read_only(self, five_layer):
        with pytest.raises(ValueError):
            five_layer.layers[0].weight[0, 0, 0, 0] = 1


class TestPreprocess:
    def test_zero_image(self):
        m = _graph([nn.Flatten()], ncls=3)
        assert np.all(preprocess(np.zeros((1, 1, 3), np.uint8), m) == 0)

    def test_full_scale_pixel(self):
        m = _graph([nn.Flatten()], ncls=3, mean=(0.5,) * 3, std=(0.5,) * 3)
        assert np.all(preprocess(np.full((1, 1, 3), 255, np.uint8), m) == 1.0)

    def test_round_trip(self, five_layer, rng):
        img = random_image(rng)
        back = nn.deprocess(preprocess(img, five_layer), five_layer)
        assert np.max(np.abs(back.astype(int) - img)) <= 1

    def test_dimension_mismatch(self, five_layer):
        with pytest.raises(ModelError):
            preprocess(np.zeros((8, 8, 3), np.uint8), five_layer)


class TestForward:
    def test_identity_conv(self, rng):
        w = np.zeros((3, 3, 1, 1), np.float32)
        w[[0, 1, 2], [0, 1, 2]] = 1
        m = ModelGraph((3, 4, 4), (0, 0, 0), (1, 1, 1),
                       [Conv2D(w, np.zeros(3, np.float32)), nn.GlobalAvgPool()], 3)
        x = rng.normal(size=(3, 4, 4)).astype(np.float32)
        assert np.array_equal(forward(m, x).outputs[0], x)

    def test_dense_hand_computed(self):
        w = np.array([[1, 2], [3, -1]], np.float32)
        b = np.array([0.5, -0.5], np.float32)
        m = ModelGraph((2, 1, 1), (0, 0), (1, 1), [nn.Flatten(), Dense(w, b)], 2)
        out = forward(m, np.array([2, 3], np.float32).reshape(2, 1, 1)).logits
        # [1*2 + 2*3 + 0.5, 3*2 - 1*3 - 0.5]
        assert out.tolist() == [8.5, 2.5]

    def test_trace_caches_every_layer(self, five_layer, rng):
        tr = forward(five_layer, preprocess(random_image(rng), five_layer))
        assert len(tr.inputs) == len(tr.outputs) == len(five_layer.layers)
        for i in range(1, len(tr.inputs)):
            assert tr.inputs[i] is tr.outputs[i - 1]
        assert np.array_equal(tr.logits, tr.outputs[-1])

    def test_softmax_normalized(self, all_kinds_net, rng):
        for _ in range(10):
            p = forward(all_kinds_net, preprocess(random_image(rng), all_kinds_net)).probabilities
            assert abs(p.sum() - 1) <= 1e-5
            assert np.all((p > 0) & (p < 1))

    def test_shape_mismatch(self, five_layer):
        with pytest.raises(ModelError):
            forward(five_layer, np.zeros((3, 8, 8), np.float32))

    def test_matches_reference_forward(self, all_kinds_net, rng):
        x = preprocess(random_image(rng), all_kinds_net)
        ref, _ = reference_forward(all_kinds_net, x)
        np.testing.assert_allclose(forward(all_kinds_net, x).logits, ref, rtol=1e-4, atol=1e-5)

    def test_deterministic(self, five_layer, rng):
        x = preprocess(random_image(rng), five_layer)
        assert forward(five_layer, x).logits.tobytes() == forward(five_layer, x).logits.tobytes()

    def test_composition(self, five_layer, rng):
        x = preprocess(random_image(rng), five_layer)[None]
        full = nn.run_layers(five_layer, x)[-1]
        for cut in range(1, len(five_layer.layers)):
            mid = nn.run_layers(five_layer, x, 0, cut)[-1]
            assert np.array_equal(nn.run_layers(five_layer, mid, cut)[-1], full)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=10), st.floats(-100, 100))
    def test_softmax_translation_invariance(self, logits, c):
        z = np.array(logits, np.float32)
        assert np.max(np.abs(softmax(z) - softmax(z + np.float32(c)))) <= 1e-6


class TestTargetProbability:
    def test_uniform_logits(self):
        m = ModelGraph((3, 2, 2), (0, 0, 0), (1, 1, 1),
                       [nn.Flatten(), Dense(np.zeros((10, 12), np.float32), np.zeros(10, np.float32))], 10)
        assert target_probability(m, np.zeros((2, 2, 3), np.uint8), 3) == pytest.approx(0.1, abs=1e-12)

    def test_peaked_logits(self):
        b = np.zeros(10, np.float32)
        b[0] = 10
        m = ModelGraph((3, 2, 2), (0, 0, 0), (1, 1, 1),
                       [nn.Flatten(), Dense(np.zeros((10, 12), np.float32), b)], 10)
        expected = np.exp(10) / (np.exp(10) + 9)  # closed-form softmax
        assert target_probability(m, np.zeros((2, 2, 3), np.uint8), 0) == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(0.99959, abs=1e-5)

    def test_bit_identical(self, five_layer, rng):
        img = random_image(rng)
        assert target_probability(five_layer, img, 2) == target_probability(five_layer, img, 2)

    def test_class_out_of_range(self, five_layer, rng):
        with pytest.raises(ValueError):
            target_probability(five_layer, random_image(rng), 10)


class TestGradients:
    @pytest.mark.parametrize("spec", [FIVE_LAYER, ALL_KINDS], ids=["five_layer", "all_kinds"])
    def test_finite_differences(self, spec, rng):
        m = make_model(spec, seed=7)
        x = preprocess(random_image(rng), m)
        target = int(forward(m, x).logits.argmax())
        g = input_gradient(m, x, target)
        for idx, fd in finite_difference_probes(m, x, target, 100, rng):
            assert relative_error(float(g[idx]), fd) <= 1e-2, idx

    def test_batch_matches_single(self, five_layer, rng):
        xs = np.stack([preprocess(random_image(rng), five_layer) for _ in range(3)])
        gb = input_gradient(five_layer, xs, 1)
        for i in range(3):
            np.testing.assert_allclose(gb[i], input_gradient(five_layer, xs[i], 1), rtol=1e-6, atol=1e-7)

    def test_maxpool_ties_go_to_first(self):
        pool = nn.MaxPool2D(2, 2)
        x = np.ones((1, 1, 2, 2), np.float32)
        g = pool.backward(x, np.ones((1, 1, 1, 1), np.float32))
        assert g[0, 0].tolist() == [[1, 0], [0, 0]]


class TestTraining:
    def test_zero_learning_rate_is_noop(self, trained):
        model, corpus, _ = trained
        same = nn.train_fixture(model, corpus.images[:10], corpus.labels[:10], epochs=1, learning_rate=0)
        for a, b in zip(model.layers, same.layers):
            for p, q in zip(a.params, b.params):
                assert p.tobytes() == q.tobytes()

    def test_synthetic_accuracy(self, trained):
        assert trained[2] >= 0.9

    def test_single_sample_overfit(self, rng):
        m = make_model(FIVE_LAYER, seed=11)
        img = random_image(rng)
        out = nn.train_fixture(m, [img], [7], epochs=200, learning_rate=0.05, batch_size=1)
        assert int(nn.predict(out, [img])[0]) == 7

    def test_does_not_decrease_accuracy(self, trained):
        model, corpus, _ = trained
        init = nn.random_model(FIXTURE_SPEC, model.input_shape, model.num_classes, seed=5)
        before = nn.accuracy(init, corpus.images[:40], corpus.labels[:40])
        after_model = nn.train_fixture(init, corpus.images[:40], corpus.labels[:40], epochs=2)
        assert nn.accuracy(after_model, corpus.images[:40], corpus.labels[:40]) >= before

    def test_bad_labels(self, five_layer, rng):
        with pytest.raises(ValueError):
            nn.train_fixture(five_layer, [random_image(rng)], [10])
        with pytest.raises(ValueError):
            nn.train_fixture(five_layer, [], [])

    def test_nonfinite_loss_reports_epoch(self, rng):
        m = make_model(FIVE_LAYER, seed=2)
        with pytest.raises(nn.TrainingError, match=r"non-finite loss at epoch \d+, batch \d+"):
            nn.train_fixture(m, [random_image(rng)] * 4, [0, 1, 2, 3], epochs=3, learning_rate=1e30)
