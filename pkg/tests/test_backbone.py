import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from pmal import backbone as bb
from pmal.datastore import LabeledDataset


def blobs(seed=0, n=100):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(-3, 0.6, (n, 2)), rng.normal(3, 0.6, (n, 2))])
    y = np.repeat([0, 1], n)
    return LabeledDataset(np.arange(2 * n), x, y, 2)


def finite_difference(model, x, y, extra=None, h=1e-4):
    grads = {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up, _ = bb.loss_and_gradients(model, x, y, extra)
            p[i] = old - h
            down, _ = bb.loss_and_gradients(model, x, y, extra)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_rel_err(a, b):
    worst = 0.0
    for k in a:
        denom = np.maximum(np.abs(a[k]) + np.abs(b[k]), 1e-6)
        worst = max(worst, float(np.max(np.abs(a[k] - b[k]) / denom)))
    return worst


def test_uniform_softmax_with_zero_parameters():
    m = bb.init_model(3, 4, 2, 4, seed=0)
    for v in m.params.values():
        v[...] = 0
    _, _, p = bb.forward(m, np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(p, [0.25] * 4)


def test_closed_form_softmax():
    np.testing.assert_allclose(bb.softmax(np.array([np.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_probabilities_normalise(seed, shift):
    m = bb.init_model(5, 6, 3, 4, seed=seed)
    x = np.random.default_rng(seed).standard_normal(5) * 10 + shift
    z, logits, p = bb.forward(m, x)
    assert abs(p.sum() - 1) <= 1e-6
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p, bb.softmax(z @ m.params["head_weights"] + m.params["head_bias"]))


def test_forward_rejects_wrong_dimension():
    m = bb.init_model(3, 4, 2, 2, seed=0)
    with pytest.raises(ValueError):
        bb.forward(m, np.zeros(4))


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = bb.init_model(4, 5, 3, 3, seed=seed)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    _, g = bb.loss_and_gradients(m, x, y)
    assert max_rel_err(g, finite_difference(m, x, y)) <= 1e-4


def test_tiny_scalar_net():
    # F=H=D=1, K=2: eight scalar parameters in total
    rng = np.random.default_rng(11)
    m = bb.init_model(1, 1, 1, 2, seed=3)
    m.params["hidden_bias"][...] = 0.3  # keep the unit active
    x = rng.standard_normal((4, 1))
    y = np.array([0, 1, 1, 0])
    _, g = bb.loss_and_gradients(m, x, y)
    assert max_rel_err(g, finite_difference(m, x, y)) <= 1e-4


def test_extra_hook_gradients():
    rng = np.random.default_rng(4)
    m = bb.init_model(3, 4, 3, 2, seed=1)
    target = rng.standard_normal(3)

    def hook(z, y):
        diff = z - target
        return 0.5 * np.mean(np.sum(diff**2, axis=1)), diff / len(z)

    x = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, 5)
    _, g = bb.loss_and_gradients(m, x, y, hook)
    assert max_rel_err(g, finite_difference(m, x, y, hook)) <= 1e-4


def test_loss_is_mean_cross_entropy():
    m = bb.init_model(3, 4, 2, 3, seed=2)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((7, 3)), rng.integers(0, 3, 7)
    loss, _ = bb.loss_and_gradients(m, x, y)
    _, _, p = bb.forward_batch(m, x)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(7), y])), rel=1e-12)


def test_confident_correct_sample_has_vanishing_loss():
    m = bb.init_model(2, 3, 2, 2, seed=0)
    m.params["head_bias"][...] = [60.0, -60.0]
    loss, g = bb.loss_and_gradients(m, np.array([[0.1, 0.2]]), np.array([0]))
    assert loss < 1e-12
    assert all(np.abs(v).max() < 1e-12 for v in g.values())


def test_logistic_oracle_and_training_accuracy():
    data = blobs()
    oracle = LogisticRegression().fit(data.features, data.labels)
    assert oracle.score(data.features, data.labels) == 1.0
    model = bb.train_classifier(data, bb.TrainConfig(epochs=50, batch_size=32, hidden_dim=16, embed_dim=4))
    assert bb.accuracy(model, data) >= 0.99
    assert model.history[-1] <= bb.dataset_loss(bb.init_model(2, 16, 4, 2, 0), data)


def test_seeds_give_distinct_models_and_same_seed_is_bitwise_identical():
    data = blobs(1, 40)
    cfg = bb.TrainConfig(epochs=3, batch_size=16, hidden_dim=8, embed_dim=3)
    a = bb.train_classifier(data, cfg)
    b = bb.train_classifier(data, cfg)
    c = bb.train_classifier(data, bb.TrainConfig(epochs=3, batch_size=16, hidden_dim=8, embed_dim=3, rng_seed=1))
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert a.layer_sizes == c.layer_sizes
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_zero_epochs_returns_initialised_model():
    data = blobs(2, 10)
    cfg = bb.TrainConfig(epochs=0, hidden_dim=8, embed_dim=3, rng_seed=5)
    m = bb.train_classifier(data, cfg)
    fresh = bb.init_model(2, 8, 3, 2, 5)
    assert all(np.array_equal(m.params[k], fresh.params[k]) for k in m.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    data = blobs(3, 20)
    with pytest.raises(bb.TrainingDiverged):
        bb.train_classifier(data, bb.TrainConfig(epochs=20, learning_rate=1e6, momentum=0.5, hidden_dim=8, embed_dim=3))


def test_extraction_matches_forward_and_is_deterministic():
    data = blobs(4, 5)
    m = bb.train_classifier(data, bb.TrainConfig(epochs=2, batch_size=4, hidden_dim=8, embed_dim=3))
    s1 = bb.extract_embedding_space(m, data, 1)
    s2 = bb.extract_embedding_space(m, data, 1)
    assert s1.embeddings.shape == (10, 3)
    for i in range(data.n):
        z, _, _ = bb.forward(m, data.features[i])
        np.testing.assert_allclose(s1.embeddings[i], z.astype(np.float32), rtol=1e-6, atol=1e-7)
    assert s1.same_as(s2)
    np.testing.assert_array_equal(s1.head_weights, m.params["head_weights"].astype(np.float32))
    m2 = bb.fit(m, data, bb.TrainConfig(epochs=1, batch_size=4, hidden_dim=8, embed_dim=3))
    assert bb.extract_embedding_space(m2, data, 1).content_hash() != s1.content_hash()


def test_checkpoint_round_trip(tmp_path):
    m = bb.init_model(3, 4, 2, 3, seed=9)
    bb.save_model(m, tmp_path / "ck")
    back = bb.load_model(tmp_path / "ck")
    assert back.layer_sizes == m.layer_sizes and back.rng_seed == 9
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k].astype(np.float32))
