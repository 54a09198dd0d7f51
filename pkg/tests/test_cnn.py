"""CNN tests: op arithmetic, shape validation, model files, threaded inference."""

import numpy as np
import pytest

from ecgpipe.cnn import (
    AMPLITUDE_SCALE,
    INPUT_LENGTH,
    ClassProbs,
    Conv1d,
    Dense,
    Flatten,
    LeakyRelu,
    MaxPool1d,
    Model,
    ModelFormatError,
    Segment,
    ShapeError,
    Softmax,
    classify_stream,
    conv1d,
    default_model,
    dense,
    forward,
    leaky_relu,
    load_model,
    max_pool1d,
    save_model,
    segment_stream,
    softmax,
)
from naive_cnn import naive_forward


def f32(values):
    return np.asarray(values, dtype=np.float32)


class TestOps:
    def test_conv_identity_kernel(self):
        x = f32([[1, 2, 3, 4]])
        out = conv1d(x, f32([[[1]]]), f32([0]))
        assert out.tolist() == [[1, 2, 3, 4]]

    def test_conv_difference_kernel(self):
        out = conv1d(f32([[1, 2, 3]]), f32([[[1, 0, -1]]]), f32([0]))
        assert out.tolist() == [[-2.0]]

    def test_conv_bias_and_window_walk(self):
        out = conv1d(f32([[1, 2, 3, 4]]), f32([[[1, 1]]]), f32([10]))
        assert out.tolist() == [[13.0, 15.0, 17.0]]

    def test_conv_sums_over_input_channels(self):
        x = f32([[1, 2], [10, 20]])
        weights = f32([[[1], [1]], [[2], [0]]])  # two output channels
        out = conv1d(x, weights, f32([0, 0]))
        assert out.tolist() == [[11.0, 22.0], [2.0, 4.0]]

    def test_conv_stride(self):
        out = conv1d(f32([[1, 2, 3, 4, 5]]), f32([[[1]]]), f32([0]), stride=2)
        assert out.tolist() == [[1.0, 3.0, 5.0]]

    def test_leaky_relu(self):
        out = leaky_relu(f32([-2.0, -0.5, 0.0, 3.0]))
        assert out.tolist() == pytest.approx([-0.02, -0.005, 0.0, 3.0])

    def test_leaky_relu_custom_alpha(self):
        assert leaky_relu(f32([-10.0]), alpha=0.2).tolist() == pytest.approx([-2.0])

    def test_max_pool(self):
        out = max_pool1d(f32([[1, 3, 2, 5]]), size=2, stride=2)
        assert out.tolist() == [[3.0, 5.0]]

    def test_max_pool_drops_trailing_window(self):
        out = max_pool1d(f32([[1, 3, 2, 5, 9]]), size=2, stride=2)
        assert out.tolist() == [[3.0, 5.0]]

    def test_dense(self):
        out = dense(f32([2, 3]), f32([[1, 1]]), f32([1]))
        assert out.tolist() == [6.0]

    def test_softmax_uniform(self):
        assert softmax(f32([0.0, 0.0])).tolist() == [0.5, 0.5]

    def test_softmax_known_ratio(self):
        out = softmax(np.array([np.log(2.0), 0.0]))
        assert out.tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-12)

    def test_softmax_shift_invariant(self):
        x = np.array([0.3, -1.2, 2.0])
        assert softmax(x + 100.0).tolist() == pytest.approx(softmax(x).tolist(),
                                                            abs=1e-12)

    def test_softmax_survives_huge_logits(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert out[0] == pytest.approx(1.0)
        assert np.isfinite(out).all()

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            out = softmax(rng.normal(0, 10, size=2))
            assert abs(float(out.sum()) - 1.0) < 1e-12


class TestForward:
    def test_zeroed_head_gives_even_split(self):
        model = default_model(seed=1)
        final = model.layers[-2]
        assert isinstance(final, Dense)
        model.layers[-2] = Dense(weights=np.zeros_like(final.weights),
                                 bias=np.zeros_like(final.bias))
        probs = forward(model, np.zeros(INPUT_LENGTH, dtype=np.int32))
        assert probs == ClassProbs(0.5, 0.5)

    def test_probabilities_sum_to_one(self):
        model = default_model(seed=2)
        rng = np.random.default_rng(1)
        seg = rng.integers(-30000, 30000, INPUT_LENGTH, dtype=np.int32)
        probs = forward(model, seg)
        assert 0.0 <= probs.p_mi <= 1.0
        assert abs(probs.p_mi + probs.p_normal - 1.0) < 1e-9

    def test_accepts_segment_objects(self):
        model = default_model(seed=2)
        samples = np.arange(INPUT_LENGTH, dtype=np.int32)
        direct = forward(model, samples)
        wrapped = forward(model, Segment(index=0, start_sample=0, samples=samples))
        assert direct == wrapped

    def test_rejects_wrong_length(self):
        model = default_model(seed=2)
        with pytest.raises(ValueError):
            forward(model, np.zeros(100, dtype=np.int32))

    def test_amplitude_normalisation(self):
        # One conv layer with identity kernel exposes the /2^15 scaling:
        # build the minimal legal stack around it.
        model = Model(layers=[
            Conv1d(weights=f32([[[1]]]), bias=f32([0])),
            MaxPool1d(size=4, stride=4),
            Flatten(),
            Dense(weights=f32([[1], [0]]).reshape(2, 1), bias=f32([0, 0])),
            Softmax(),
        ], input_length=4)
        probs = forward(model, np.array([16384, 0, 0, 0], dtype=np.int32))
        expect = softmax(np.array([16384 / AMPLITUDE_SCALE, 0.0]))
        assert probs.p_mi == pytest.approx(float(expect[0]), abs=1e-7)

    def test_matches_naive_oracle_spot_check(self):
        model = default_model(seed=77)
        rng = np.random.default_rng(7)
        seg = rng.integers(-2000, 2000, INPUT_LENGTH, dtype=np.int32)
        fast = forward(model, seg)
        slow = naive_forward(model, seg.tolist())
        assert abs(fast.p_mi - slow[0]) < 1e-6
        assert abs(fast.p_normal - slow[1]) < 1e-6


class TestDefaultModel:
    def test_compute_layer_census(self):
        model = default_model()
        convs = [l for l in model.layers if isinstance(l, Conv1d)]
        pools = [l for l in model.layers if isinstance(l, MaxPool1d)]
        denses = [l for l in model.layers if isinstance(l, Dense)]
        assert (len(convs), len(pools), len(denses)) == (4, 4, 3)
        assert isinstance(model.layers[-1], Softmax)

    def test_channel_and_width_plan(self):
        model = default_model()
        convs = [l for l in model.layers if isinstance(l, Conv1d)]
        assert [tuple(c.weights.shape) for c in convs] == [
            (3, 1, 5), (10, 3, 5), (10, 10, 5), (10, 10, 5)]
        denses = [l for l in model.layers if isinstance(l, Dense)]
        assert [tuple(d.weights.shape) for d in denses] == [
            (30, 1560), (10, 30), (2, 10)]

    def test_seed_controls_weights(self):
        a = default_model(seed=1)
        b = default_model(seed=1)
        c = default_model(seed=2)
        assert np.array_equal(a.layers[0].weights, b.layers[0].weights)
        assert not np.array_equal(a.layers[0].weights, c.layers[0].weights)


class TestShapeValidation:
    def test_dense_input_mismatch_names_layer(self):
        with pytest.raises(ShapeError, match="layer 1"):
            Model(layers=[
                Flatten(),
                Dense(weights=f32(np.zeros((2, 99))), bias=f32([0, 0])),
                Softmax(),
            ], input_length=100)

    def test_conv_after_flatten_rejected(self):
        with pytest.raises(ShapeError, match="conv after flatten"):
            Model(layers=[
                Flatten(),
                Conv1d(weights=f32([[[1]]]), bias=f32([0])),
                Softmax(),
            ], input_length=16)

    def test_kernel_longer_than_input(self):
        with pytest.raises(ShapeError, match="layer 0"):
            Model(layers=[
                Conv1d(weights=f32(np.zeros((1, 1, 40))), bias=f32([0])),
                Flatten(),
                Dense(weights=f32(np.zeros((2, 1))), bias=f32([0, 0])),
                Softmax(),
            ], input_length=16)

    def test_must_end_in_two_way_softmax(self):
        with pytest.raises(ShapeError):
            Model(layers=[
                Flatten(),
                Dense(weights=f32(np.zeros((3, 16))), bias=f32([0, 0, 0])),
                Softmax(),
            ], input_length=16)
        with pytest.raises(ShapeError):
            Model(layers=[
                Flatten(),
                Dense(weights=f32(np.zeros((2, 16))), bias=f32([0, 0])),
            ], input_length=16)

    def test_empty_model_rejected(self):
        with pytest.raises(ShapeError):
            Model(layers=[])


class TestModelFiles:
    def test_round_trip_preserves_outputs(self, tmp_path):
        model = default_model(seed=5)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        rng = np.random.default_rng(3)
        seg = rng.integers(-5000, 5000, INPUT_LENGTH, dtype=np.int32)
        assert forward(model, seg) == forward(loaded, seg)

    def test_canonical_bytes_stable(self, tmp_path):
        model = default_model(seed=5)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_model(model, a)
        save_model(load_model(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_unknown_layer_type(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"input_length": 16, "layers": [{"type": "gru"}]}')
        with pytest.raises(ModelFormatError, match="gru"):
            load_model(path)

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"input_length": 16, "layers": [{"type": "dense"}]}')
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_bad_shapes_caught_on_load(self, tmp_path):
        doc = ('{"input_length": 16, "input_channels": 1, "layers": ['
               '{"type": "flatten"},'
               '{"type": "dense", "weights": [[1, 2]], "bias": [0]},'
               '{"type": "softmax"}]}')
        path = tmp_path / "bad.json"
        path.write_text(doc)
        with pytest.raises(ShapeError):
            load_model(path)


class TestSegmentStream:
    def test_whole_segments_only(self):
        assert len(segment_stream(np.zeros(5120))) == 2
        assert len(segment_stream(np.zeros(2559))) == 0
        assert len(segment_stream(np.zeros(2561))) == 1

    def test_indices_and_starts(self):
        segments = segment_stream(np.arange(6000))
        assert [(s.index, s.start_sample) for s in segments] == [(0, 0), (1, 2560)]
        assert segments[1].samples[0] == 2560

    def test_hop_overlap(self):
        segments = segment_stream(np.arange(5120), hop=1280)
        assert [s.start_sample for s in segments] == [0, 1280, 2560]

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            segment_stream(np.zeros(100), segment_len=0)
        with pytest.raises(ValueError):
            segment_stream(np.zeros(100), hop=0)


class TestClassifyStream:
    def test_worker_count_does_not_change_results(self):
        model = default_model(seed=9)
        rng = np.random.default_rng(4)
        stream = rng.integers(-3000, 3000, 4 * INPUT_LENGTH, dtype=np.int32)
        segments = segment_stream(stream)
        one = classify_stream(model, segments, workers=1)
        two = classify_stream(model, segments, workers=2)
        assert [(e.p_mi, e.p_normal) for e in one] == [
            (e.p_mi, e.p_normal) for e in two]

    def test_order_and_metadata_preserved(self):
        model = default_model(seed=9)
        segments = segment_stream(np.zeros(3 * INPUT_LENGTH, dtype=np.int32))
        entries = classify_stream(model, segments)
        assert [e.segment_index for e in entries] == [0, 1, 2]
        assert [e.start_sample for e in entries] == [0, 2560, 5120]
        assert all(e.duration_ms > 0 for e in entries)

    def test_empty_input(self):
        assert classify_stream(default_model(seed=9), []) == []

    def test_rejects_zero_workers(self):
        with pytest.raises(ValueError):
            classify_stream(default_model(seed=9), [], workers=0)
