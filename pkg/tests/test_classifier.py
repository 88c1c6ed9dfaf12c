from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import log_softmax

from tubeletkit.classifier import (
    MODES,
    ClassifierConfig,
    TemporalClassifier,
    box_regression_targets,
    classifier_loss,
    classify_batch,
    classify_tubelet,
    label_tubelet_frames,
    load_classifier,
    predict_box_deltas,
    save_classifier,
    train_classifier,
)
from tubeletkit.nncore import DenseLayer, LstmState, NonFiniteError, grad_check, lstm_step, softmax
from tubeletkit.synthworld import FeatureOracleParams, ObjectTrack, SyntheticVideo, WorldConfig


def model(mode, f=6, c=3, hidden=5, std=0.5, seed=0, box=False):
    return TemporalClassifier.init(mode, f, c, hidden, std, np.random.default_rng(seed), box_head=box)


def reference_encoder_decoder(m: TemporalClassifier, x: np.ndarray) -> np.ndarray:
    """Step-by-step evaluation with explicit frame indices, for one tubelet (l, f)."""
    l = len(x)
    st = LstmState.zeros(m.hidden)
    for t in range(l):
        st = lstm_step(m.encoder, st, x[t])
    state = LstmState(st.c.copy(), st.h.copy())
    hidden_at = {}
    for t in range(l - 1, -1, -1):
        state = lstm_step(m.decoder, state, x[t])
        hidden_at[t] = state.h
    logits = np.stack([hidden_at[t] @ m.class_head.weights + m.class_head.bias for t in range(l)])
    return softmax(logits)


def reference_vanilla(m: TemporalClassifier, x: np.ndarray) -> np.ndarray:
    st = LstmState.zeros(m.hidden)
    out = []
    for t in range(len(x)):
        st = lstm_step(m.encoder, st, x[t])
        out.append(st.h @ m.class_head.weights + m.class_head.bias)
    return softmax(np.stack(out))


class TestForward:
    @pytest.mark.parametrize("mode", MODES)
    def test_distributions_sum_to_one(self, mode, rng):
        p = classify_batch(model(mode), rng.normal(size=(4, 7, 6)))
        assert p.shape == (4, 7, 4)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    @pytest.mark.parametrize("mode", MODES)
    def test_zero_parameters_give_uniform(self, mode, rng):
        m = model(mode)
        for v in m.params().values():
            v[...] = 0.0
        np.testing.assert_allclose(classify_batch(m, rng.normal(size=(2, 5, 6))), 0.25, atol=1e-15)

    @pytest.mark.parametrize("mode", MODES)
    def test_length_one(self, mode, rng):
        x = rng.normal(size=(1, 6))
        assert classify_tubelet(model(mode), x).shape == (1, 4)

    def test_length_one_encoder_decoder_reference(self, rng):
        m = model("encoder_decoder")
        x = rng.normal(size=(1, 6))
        np.testing.assert_allclose(classify_tubelet(m, x), reference_encoder_decoder(m, x), atol=1e-14)

    def test_encoder_decoder_matches_stepwise_reference(self, rng):
        m = model("encoder_decoder", std=0.8, seed=3)
        x = rng.normal(size=(9, 6))
        np.testing.assert_allclose(classify_tubelet(m, x), reference_encoder_decoder(m, x), atol=1e-13)

    def test_vanilla_matches_stepwise_reference(self, rng):
        m = model("vanilla_lstm", std=0.8, seed=4)
        x = rng.normal(size=(9, 6))
        np.testing.assert_allclose(classify_tubelet(m, x), reference_vanilla(m, x), atol=1e-13)

    def test_per_frame_ignores_order(self, rng):
        m = model("per_frame_linear")
        x = rng.normal(size=(6, 6))
        np.testing.assert_allclose(classify_tubelet(m, x[::-1])[::-1], classify_tubelet(m, x), atol=1e-15)

    def test_encoder_decoder_first_frame_sees_the_whole_tubelet(self, rng):
        m = model("encoder_decoder", std=0.8)
        x = rng.normal(size=(6, 6))
        y = x.copy()
        y[-1] += 1.0
        assert not np.allclose(classify_tubelet(m, x)[0], classify_tubelet(m, y)[0])
        v = model("vanilla_lstm", std=0.8)
        np.testing.assert_array_equal(classify_tubelet(v, x)[0], classify_tubelet(v, y)[0])

    def test_batch_equals_single(self, rng):
        m = model("encoder_decoder")
        x = rng.normal(size=(3, 5, 6))
        for i in range(3):
            np.testing.assert_allclose(classify_batch(m, x)[i], classify_tubelet(m, x[i]), atol=1e-15)


class TestValidation:
    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            model("transformer")

    def test_wrong_feature_dim(self, rng):
        with pytest.raises(ValueError):
            classify_batch(model("vanilla_lstm"), rng.normal(size=(2, 3, 7)))

    def test_bad_shapes(self, rng):
        with pytest.raises(ValueError):
            classify_tubelet(model("per_frame_linear"), rng.normal(size=(6,)))
        with pytest.raises(ValueError):
            classify_batch(model("per_frame_linear"), rng.normal(size=(2, 0, 6)))

    def test_mismatched_head(self, rng):
        enc = model("vanilla_lstm").encoder
        with pytest.raises(ValueError):
            TemporalClassifier("vanilla_lstm", DenseLayer(np.zeros((3, 4)), np.zeros(4)), enc)

    def test_decoder_only_for_encoder_decoder(self):
        m = model("encoder_decoder")
        with pytest.raises(ValueError):
            TemporalClassifier("vanilla_lstm", m.class_head, m.encoder, m.decoder)

    def test_no_box_head(self, rng):
        with pytest.raises(ValueError):
            predict_box_deltas(model("vanilla_lstm"), rng.normal(size=(1, 2, 6)))


class TestGradients:
    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("box", [False, True])
    def test_grad_check(self, mode, box, rng):
        m = model(mode, std=0.5, box=box)
        x = rng.normal(size=(3, 4, 6))
        y = rng.integers(0, 4, size=(3, 4))
        bt = rng.normal(size=(3, 4, 4)) * 2
        bm = rng.random((3, 4)) > 0.4
        err = grad_check(lambda p: classifier_loss(m, x, y, bt, bm, 0.7 if box else 0.0), m.params(), epsilon=1e-5)
        assert err < 1e-5


def separable_corpus(rng, n=300, l=4, f=6, c=3):
    centers = rng.normal(0, 3, size=(c + 1, f))
    labels = rng.integers(0, c + 1, size=(n, l))
    return centers[labels] + rng.normal(0, 0.5, size=(n, l, f)), labels


def logistic_oracle(x, y, k):
    """Multinomial logistic regression fitted by L-BFGS."""
    X = np.hstack([x, np.ones((len(x), 1))])

    def nll(flat):
        W = flat.reshape(X.shape[1], k)
        lp = log_softmax(X @ W, axis=1)
        g = X.T @ (np.exp(lp) - np.eye(k)[y]) / len(X)
        return -lp[np.arange(len(X)), y].mean(), g.ravel()

    res = minimize(nll, np.zeros(X.shape[1] * k), jac=True, method="L-BFGS-B")
    return res.x.reshape(X.shape[1], k)


class TestTraining:
    def test_per_frame_linear_learns_separable_classes(self, rng):
        x, y = separable_corpus(rng, n=600)
        x, xt, y, yt = x[:300], x[300:], y[:300], y[300:]
        cfg = ClassifierConfig("per_frame_linear", learning_rate=0.5, init_std=0.01, iterations=300, decay_every=100)
        m, log = train_classifier(x, y, 3, cfg)
        ours = (classify_batch(m, xt).argmax(-1) == yt).mean()
        W = logistic_oracle(x.reshape(-1, 6), y.ravel(), 4)
        oracle = ((np.hstack([xt.reshape(-1, 6), np.ones((yt.size, 1))]) @ W).argmax(1) == yt.ravel()).mean()
        assert ours > 0.95
        assert ours >= oracle - 0.02
        assert log.iteration_loss[-1] < log.iteration_loss[0]

    @pytest.mark.parametrize("mode", ["vanilla_lstm", "encoder_decoder"])
    def test_lstm_modes_fit_a_small_corpus(self, mode, rng):
        x, y = separable_corpus(rng, n=120)
        cfg = ClassifierConfig(mode, hidden=16, learning_rate=0.5, init_std=0.1, iterations=300, decay_every=150)
        m, _ = train_classifier(x, y, 3, cfg)
        assert (classify_batch(m, x).argmax(-1) == y).mean() > 0.95

    def test_deterministic(self, rng):
        x, y = separable_corpus(rng, n=40)
        cfg = ClassifierConfig("encoder_decoder", hidden=4, iterations=5, seed=7)
        a, la = train_classifier(x, y, 3, cfg)
        b, lb = train_classifier(x, y, 3, cfg)
        assert la.iteration_loss == lb.iteration_loss
        for k, v in a.params().items():
            np.testing.assert_array_equal(v, b.params()[k])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self, rng):
        x, y = separable_corpus(rng, n=40)
        x[3, 1, 2] = np.inf
        with pytest.raises(NonFiniteError):
            train_classifier(x, y, 3, ClassifierConfig("per_frame_linear", batch=40, iterations=2))

    @pytest.mark.parametrize(
        "labels_fix, n_classes",
        [(lambda y: y[:, :2], 3), (lambda y: y + 5, 3), (lambda y: y - 1, 3)],
    )
    def test_label_errors(self, rng, labels_fix, n_classes):
        x, y = separable_corpus(rng, n=10)
        with pytest.raises(ValueError):
            train_classifier(x, labels_fix(y), n_classes, ClassifierConfig("per_frame_linear", iterations=1))

    def test_box_weight_needs_targets(self, rng):
        x, y = separable_corpus(rng, n=10)
        with pytest.raises(ValueError):
            train_classifier(x, y, 3, ClassifierConfig("per_frame_linear", iterations=1, box_loss_weight=1.0))

    @pytest.mark.parametrize("mode", MODES)
    @pytest.mark.parametrize("box", [False, True])
    def test_checkpoint_round_trip(self, mode, box, rng, tmp_path):
        m = model(mode, box=box)
        save_classifier(tmp_path / "c.npz", m, {"n_classes": 3})
        back, meta = load_classifier(tmp_path / "c.npz")
        assert back.mode == mode and meta["n_classes"] == 3
        x = rng.normal(size=(2, 4, 6))
        np.testing.assert_array_equal(classify_batch(back, x), classify_batch(m, x))


def one_object_video(box, class_id=2, n_frames=12):
    cfg = WorldConfig(n_frames=n_frames, oracle=FeatureOracleParams(noise_std=0.0))
    boxes = np.tile(np.asarray(box, dtype=float), (n_frames, 1))
    return SyntheticVideo(1, cfg, [ObjectTrack(class_id, boxes, np.ones(n_frames, bool), 5)])


class TestLabels:
    def test_drifting_tubelet_loses_its_label(self):
        v = one_object_video([100, 100, 40, 40])
        tube = np.array([[100.0 + 5 * k, 100, 40, 40] for k in range(6)])
        labels, matched = label_tubelet_frames(v, tube, 3)
        # IoU (40 - 5k) / (40 + 5k): 1, 0.78, 0.6, 0.45, ...
        np.testing.assert_array_equal(labels, [3, 3, 3, 0, 0, 0])
        np.testing.assert_array_equal(matched[:3], np.tile([100.0, 100, 40, 40], (3, 1)))
        np.testing.assert_array_equal(matched[3:], tube[3:])

    def test_invisible_object_is_background(self):
        v = one_object_video([100, 100, 40, 40])
        v.tracks[0].visible[4:] = False
        labels, _ = label_tubelet_frames(v, np.tile([100.0, 100, 40, 40], (4, 1)), 2)
        np.testing.assert_array_equal(labels, [3, 3, 0, 0])

    def test_box_targets(self):
        tube = np.array([[100.0, 100, 40, 40], [120, 100, 40, 40]])
        matched = np.array([[110.0, 100, 40, 80], [120, 100, 40, 40]])
        t, mask = box_regression_targets(tube, matched, np.array([1, 0]))
        np.testing.assert_allclose(t[0], [0.25, 0, 0, np.log(2)])
        np.testing.assert_array_equal(mask, [True, False])
