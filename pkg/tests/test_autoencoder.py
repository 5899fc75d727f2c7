import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hunod import autoencoder as ae
from hunod.autoencoder import AutoencoderConfig, NetworkModel
from hunod.data import Dataset, FeatureSchema
from hunod.errors import ConfigError, DataError, NumericError
from hunod.kmeans import OutlierSet


def numeric_gradients(model, batch, lam, h=1e-5, **kw):
    """Central differences of the loss for every parameter entry."""
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = ae.loss(model, batch, lam, **kw)
            p[idx] = old - h
            down = ae.loss(model, batch, lam, **kw)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


def random_model(rng, d, hidden):
    """He-initialized network with small random biases, away from ReLU kinks at zero."""
    model = NetworkModel.initialize(d, hidden, rng)
    for b in model.biases:
        b[:] = rng.uniform(-0.1, 0.1, b.shape)
    return model


def identity_model(d):
    """One hidden layer of width d copying the non-negative input."""
    return NetworkModel([np.eye(d), np.eye(d)], [np.zeros(d), np.zeros(d)])


def _dataset(x):
    x = np.asarray(x, dtype=float)
    return Dataset(FeatureSchema(tuple(f"f{i}" for i in range(x.shape[1]))),
                   tuple(f"e{i:03d}" for i in range(len(x))), x)


class TestLayout:
    @pytest.mark.parametrize("expr,d,width", [("d/2", 7, 4), ("d/4", 446, 112), ("3d/4", 10, 8),
                                              ("d", 5, 5), (3, 9, 3), ("12", 9, 12)])
    def test_width(self, expr, d, width):
        assert ae.layer_width(expr, d) == width

    @pytest.mark.parametrize("expr", ["d*2", "half", "0", "d/0x"])
    def test_bad_width(self, expr):
        with pytest.raises(ConfigError):
            ae.layer_width(expr, 8)

    def test_presets(self):
        assert ae.parse_layout("1", 8) == [4]
        assert ae.parse_layout("3", 8) == [4, 2, 4]
        assert ae.parse_layout("5", 8) == [6, 4, 2, 4, 6]
        assert ae.parse_layout("d/2,2", 8) == [4, 2]
        assert AutoencoderConfig(layout="5").widths(8) == [6, 4, 2, 4, 6]

    def test_config_validation(self):
        for bad in (dict(keep_prob=0.0), dict(keep_prob=1.5), dict(activity_reg=-1),
                    dict(batch_size=0), dict(activity_layers="output")):
            with pytest.raises(ConfigError):
                AutoencoderConfig(**bad)


class TestForward:
    def test_identity_reconstruction(self):
        x = np.array([[0.2, 0.5, 1.0]])
        assert ae.reconstruction_error(identity_model(3), x) == 0.0

    def test_error_example(self):
        # output is the zero vector, so the error is the squared norm of the input
        model = NetworkModel([np.zeros((2, 1)), np.zeros((1, 2))], [np.zeros(1), np.zeros(2)])
        assert ae.reconstruction_error(model, np.array([3.0, 4.0])) == 25.0

    def test_relu_and_linear_output(self):
        model = NetworkModel([np.array([[1.0], [-1.0]]), np.array([[1.0, -2.0]])],
                             [np.zeros(1), np.array([0.5, 0.5])])
        np.testing.assert_allclose(ae.forward(model, [[0.0, 2.0]]).output, [[0.5, 0.5]])
        np.testing.assert_allclose(ae.forward(model, [[3.0, 1.0]]).output, [[2.5, -3.5]])

    def test_keep_prob_one_train_equals_infer(self, rng):
        model = NetworkModel.initialize(6, [3, 2, 3], rng)
        x = rng.random((5, 6))
        a = ae.forward(model, x, "train", 1.0, rng).output
        np.testing.assert_array_equal(a, ae.forward(model, x, "infer").output)

    def test_dropout_expectation(self, rng):
        model = identity_model(4)
        x = np.full((20000, 4), 0.5)
        out = ae.forward(model, x, "train", 0.5, rng).output
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert abs(out.mean() - 0.5) < 0.01

    def test_dropout_needs_rng(self):
        with pytest.raises(ConfigError):
            ae.forward(identity_model(2), [[1, 1]], "train", 0.5)
        with pytest.raises(ConfigError):
            ae.forward(identity_model(2), [[1, 1]], "fit")

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            ae.forward(identity_model(2), [[1, 1, 1]])

    def test_initialization(self, rng):
        model = NetworkModel.initialize(8, [4, 2, 4], rng)
        assert [w.shape for w in model.weights] == [(8, 4), (4, 2), (2, 4), (4, 8)]
        assert all((b == 0).all() for b in model.biases)
        assert np.abs(model.weights[0]).max() <= np.sqrt(6 / 8)


class TestLoss:
    def test_linear_in_lambda(self, rng):
        model = NetworkModel.initialize(6, [3, 2, 3], rng)
        x = rng.random((7, 6))
        l0, l1, l2 = (ae.loss(model, x, lam) for lam in (0.0, 0.1, 0.2))
        assert l2 - l1 == pytest.approx(l1 - l0, rel=1e-12)
        assert l1 >= l0

    def test_penalty_value(self):
        model = identity_model(2)
        x = np.array([[1.0, 2.0]])
        # zero reconstruction error; hidden activations (1, 2) give 5, the output adds 5 more
        assert ae.loss(model, x, 0.1) == pytest.approx(0.5)
        assert ae.loss(model, x, 0.1, activity_layers="hidden+output") == pytest.approx(1.0)

    def test_empty_batch(self):
        with pytest.raises(DataError):
            ae.loss(identity_model(2), np.zeros((0, 2)), 0.1)

    @pytest.mark.parametrize("layers", ["hidden", "hidden+output"])
    @pytest.mark.parametrize("lam", [0.0, 0.1])
    def test_gradient_check(self, rng, lam, layers):
        model = random_model(rng, 6, [3, 2, 3])
        x = rng.random((5, 6))
        fp = ae.forward(model, x)
        analytic = ae.gradients(model, x, fp, lam, layers)
        numeric = numeric_gradients(model, x, lam, activity_layers=layers)
        assert relative_error(analytic, numeric) <= 1e-4

    def test_gradient_check_with_dropout(self, rng):
        model = random_model(rng, 6, [4, 3, 4])
        x = rng.random((5, 6))
        # a fresh generator with the same seed replays the same masks
        kw = dict(mode="train", keep_prob=0.7)
        fp = ae.forward(model, x, "train", 0.7, np.random.default_rng(3))
        analytic = ae.gradients(model, x, fp, 0.1)
        numeric = []
        for p in model.parameters():
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                vals = []
                for step in (1e-5, -1e-5):
                    p[idx] = old + step
                    vals.append(ae.loss(model, x, 0.1, rng=np.random.default_rng(3), **kw))
                p[idx] = old
                g[idx] = (vals[0] - vals[1]) / 2e-5
            numeric.append(g)
        assert relative_error(analytic, numeric) <= 1e-4


class TestTrain:
    def test_zero_epochs_keeps_initialization(self, rng):
        x = rng.random((20, 6))
        cfg = AutoencoderConfig(layout=(3, 2, 3), epochs=0, seed=5)
        model = ae.train(x, cfg)
        ref = NetworkModel.initialize(6, [3, 2, 3], np.random.Generator(np.random.PCG64(5)))
        for a, b in zip(model.parameters(), ref.parameters()):
            np.testing.assert_array_equal(a, b)
        assert model.max_error == pytest.approx(ae.reconstruction_errors(ref, x).max())

    def test_zero_learning_rate_keeps_initialization(self, rng):
        x = rng.random((20, 6))
        frozen = ae.train(x, AutoencoderConfig(layout=(3,), epochs=3, learning_rate=0.0, seed=1))
        ref = ae.train(x, AutoencoderConfig(layout=(3,), epochs=0, seed=1))
        for a, b in zip(frozen.parameters(), ref.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_loss_decreases(self, rng):
        x = rng.random((200, 8)) * np.linspace(0.2, 1.0, 8)
        model = ae.train(x, AutoencoderConfig(layout="d/2", keep_prob=1.0, activity_reg=0.0,
                                              epochs=40, learning_rate=1e-2, seed=0))
        assert model.loss_history[-1] < 0.5 * model.loss_history[0]

    def test_deterministic(self, rng):
        x = rng.random((50, 6))
        cfg = AutoencoderConfig(layout=(3,), epochs=5, seed=2)
        a, b = ae.train(x, cfg), ae.train(x, cfg)
        assert a.loss_history == b.loss_history
        assert a.max_error == b.max_error

    def test_max_error_is_training_maximum(self, rng):
        x = rng.random((30, 6))
        model = ae.train(x, AutoencoderConfig(layout=(3,), epochs=2))
        assert model.max_error == ae.reconstruction_errors(model, x).max()

    def test_divergence_raises(self, rng):
        x = rng.random((30, 6)) * 1e200
        with pytest.raises(NumericError, match="diverged"), np.errstate(over="ignore"):
            ae.train(x, AutoencoderConfig(layout=(3,), epochs=2))

    def test_bad_data(self):
        with pytest.raises(DataError):
            ae.train(np.zeros((0, 3)), AutoencoderConfig())

    def test_checkpoint_round_trip(self, rng, tmp_path):
        model = ae.train(rng.random((30, 6)), AutoencoderConfig(layout=(3, 2, 3), epochs=1))
        model.save(tmp_path / "m.npz")
        back = NetworkModel.load(tmp_path / "m.npz")
        assert back.max_error == model.max_error and back.hidden_widths == [3, 2, 3]
        x = rng.random((4, 6))
        np.testing.assert_array_equal(ae.reconstruction_errors(back, x), ae.reconstruction_errors(model, x))

    def test_checkpoint_format_checked(self, tmp_path):
        np.savez(tmp_path / "m.npz", header=np.array('{"format": "other"}'))
        with pytest.raises(DataError):
            NetworkModel.load(tmp_path / "m.npz")


class TestSelectionAndChecks:
    def test_training_threshold_inclusive(self):
        data = _dataset(np.zeros((4, 2)))
        sel = ae.select_training(data, [0.3, 0.29, 0.5, 0.1], 0.3)
        assert sel.training == {"e000", "e002"} and sel.rest == {"e001", "e003"}

    def test_training_overlap_with_kmeans(self):
        data = _dataset(np.zeros((4, 2)))
        sel = ae.select_training(data, [1, 1, 0, 0], 0.5, OutlierSet({"e001": 1.0, "e003": 1.0}, "kmeans"))
        assert sel.jaccard_vs_kmeans == pytest.approx(1 / 3)
        assert sel.share_in_kmeans == 0.5

    def test_empty_training_set(self):
        with pytest.raises(DataError, match="no instance"):
            ae.select_training(_dataset(np.zeros((3, 2))), [0, 0, 0], 0.5)
        with pytest.raises(DataError):
            ae.select_training(_dataset(np.zeros((3, 2))), [0, 0], 0.5)

    def test_strict_threshold(self):
        model = identity_model(2)
        model.max_error = 0.0
        # the identity network reconstructs non-negative rows exactly, negative entries are lost
        out = ae.detect_outliers(model, np.array([[0.5, 0.5], [-1.0, 0.0]]), ["a", "b"])
        assert out.ids == {"b"} and out.scores["b"] == 1.0

    def test_untrained_model(self):
        with pytest.raises(ConfigError):
            ae.detect_outliers(identity_model(2), np.zeros((1, 2)), ["a"])

    def test_cross_check_example(self):
        sel = ae.TrainingSelection(frozenset("abcd"), frozenset("efgh"), 0.0, 0.0)
        a = OutlierSet({"e": 1.0, "f": 1.0, "g": 1.0}, "autoencoder")
        o = OutlierSet({"a": 1.0, "e": 1.0, "f": 1.0, "x": 1.0}, "kmeans")
        report = ae.cross_check(a, o, sel)
        assert report.training_jaccard == pytest.approx(1 / 7)
        assert report.training_share == 0.25
        assert report.outlier_jaccard == pytest.approx(2 / 5)
        assert report.outlier_share == pytest.approx(2 / 3)
        assert set(report.to_json()) == {"C_t_jaccard", "V_T", "C_a_jaccard", "V_O"}

    def test_cross_check_empty(self):
        sel = ae.TrainingSelection(frozenset("ab"), frozenset("c"), 0.0, 0.0)
        report = ae.cross_check(OutlierSet({}, "autoencoder"), OutlierSet({}, "kmeans"), sel)
        assert report.outlier_share == 0.0 and report.outlier_jaccard == 0.0

    @given(st.sets(st.sampled_from("abcdefgh")), st.sets(st.sampled_from("abcdefgh")))
    def test_cross_check_bounds(self, a, o):
        sel = ae.TrainingSelection(frozenset("ab"), frozenset("cdefgh"), 0.0, 0.0)
        r = ae.cross_check(OutlierSet(dict.fromkeys(a, 1.0), "autoencoder"),
                           OutlierSet(dict.fromkeys(o, 1.0), "kmeans"), sel)
        for v in r.to_json().values():
            assert 0.0 <= v <= 1.0
        assert r.outlier_jaccard <= r.outlier_share


def test_run_flags_far_rows(rng):
    normal = rng.normal(0.5, 0.02, (120, 5))
    far = np.array([[3.0] * 5, [-2.0] * 5, [4.0] * 5])
    data = _dataset(np.vstack([normal, rng.normal(0.5, 0.02, (10, 5)), far]))
    scores = np.r_[np.ones(120), np.zeros(13)]
    cfg = AutoencoderConfig(layout=(3,), epochs=30, learning_rate=1e-2, activity_reg=0.0)
    result = ae.run(data, scores, 0.5, cfg)
    assert {"e130", "e131", "e132"} <= result.outliers.ids
    assert not result.outliers.ids & result.selection.training
    assert set(result.errors) == set(data.ids)
