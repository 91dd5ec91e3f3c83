import csv
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import combined_loss_gradient_error
from pmal import backbone as bb
from pmal.mining import Prototype, PrototypeBook
from pmal.protolearn import (
    LossCurve,
    ProtoLossConfig,
    PrototypeEmbeddings,
    class_distances,
    optimize_embedding,
    point_to_set_distance,
    prototype_embeddings,
    prototype_loss,
)
from pmal.synthlab import SynthSpec, generate, holdout


def cosine_distance(a, b):
    return 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_singleton_set_reduces_to_cosine():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z, p = rng.standard_normal(6), rng.standard_normal((6, 1))
        expected = cosine_distance(z, p[:, 0])
        assert point_to_set_distance(z, p, "attention") == pytest.approx(expected, abs=1e-12)
        assert point_to_set_distance(z, p, "nearest") == pytest.approx(expected, abs=1e-12)


def test_equal_and_orthogonal_examples():
    z = np.array([1.0, 2.0, 0.0, 0.0])
    same = np.tile(z[:, None], (1, 3))
    assert point_to_set_distance(z, same, "attention") == pytest.approx(0, abs=1e-12)
    assert point_to_set_distance(z, same, "nearest") == pytest.approx(0, abs=1e-12)
    ortho = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [3.0, -1.0]])
    assert point_to_set_distance(z, ortho, "attention") == pytest.approx(1.0, abs=1e-12)


def test_attention_weights_hand_computed():
    z = np.array([1.0, 0.0])
    p = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = np.exp([1 / math.sqrt(2), 0.0])
    w /= w.sum()
    expected = cosine_distance(z, p @ w)
    assert point_to_set_distance(z, p, "attention") == pytest.approx(expected, abs=1e-12)
    assert point_to_set_distance(z, p, "attention", scale_dim=8) != pytest.approx(expected, abs=1e-6)


def test_nearest_mode_is_min_cosine_and_scale_invariant():
    rng = np.random.default_rng(1)
    z, p = rng.standard_normal(5), rng.standard_normal((5, 4))
    expected = min(cosine_distance(z, p[:, j]) for j in range(4))
    assert point_to_set_distance(z, p, "nearest") == pytest.approx(expected, abs=1e-12)
    assert point_to_set_distance(3.7 * z, p, "nearest") == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.sampled_from(["attention", "nearest"]))
def test_distance_range(seed, t, mode):
    rng = np.random.default_rng(seed)
    z, p = rng.standard_normal(4) * 10, rng.standard_normal((4, t)) * 10
    assert 0.0 <= point_to_set_distance(z, p, mode) <= 2.0


def test_zero_norm_errors():
    with pytest.raises(ValueError):
        point_to_set_distance(np.zeros(3), np.ones((3, 2)))
    with pytest.raises(ValueError):
        point_to_set_distance(np.array([1.0, -1.0]), np.array([[1.0, -1.0], [1.0, -1.0]]))
    with pytest.raises(ValueError):
        point_to_set_distance(np.ones(2), np.zeros((2, 1)), "nearest")


def embeds_with_distances(d_own, d_other):
    """Two classes, one prototype each, giving a unit z the requested cosine distances."""
    def unit(cos):
        return np.array([[cos], [math.sqrt(1 - cos**2)]])

    return PrototypeEmbeddings({0: unit(1 - d_own), 1: unit(1 - d_other)})


@pytest.mark.parametrize("own, other, hinge", [(0.2, 0.9, 0.0), (0.8, 0.4, 0.9)])
def test_hinge_arithmetic(own, other, hinge):
    pe = embeds_with_distances(own, other)
    loss, rivals = prototype_loss(np.array([[1.0, 0.0]]), [0], pe, ProtoLossConfig())
    assert loss == pytest.approx(hinge, abs=1e-12)
    assert rivals.tolist() == [1]


def test_loss_is_zero_exactly_when_margins_hold():
    pe = PrototypeEmbeddings({k: np.eye(3)[:, [k]] * 2.0 for k in range(3)})
    z = np.eye(3) * 5.0
    assert prototype_loss(z, [0, 1, 2], pe, ProtoLossConfig())[0] == 0.0
    # margin larger than the achievable gap activates every hinge
    loss, _ = prototype_loss(z, [0, 1, 2], pe, ProtoLossConfig(margin=1.5))
    assert loss == pytest.approx(0.5, abs=1e-12)


def test_rival_ties_go_to_smallest_class():
    pe = PrototypeEmbeddings({0: np.array([[1.0], [0.0], [0.0]]), 1: np.array([[0.0], [1.0], [0.0]]), 2: np.array([[0.0], [0.0], [1.0]])})
    _, rivals = prototype_loss(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), [2, 0], pe, ProtoLossConfig())
    assert rivals.tolist() == [0, 1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 3.0), st.sampled_from(["attention", "nearest"]))
def test_rival_is_never_true_class_and_ignores_margin(seed, margin, mode):
    rng = np.random.default_rng(seed)
    pe = PrototypeEmbeddings({k: rng.standard_normal((4, 3)) for k in range(4)})
    z, y = rng.standard_normal((10, 4)), rng.integers(0, 4, 10)
    _, r1 = prototype_loss(z, y, pe, ProtoLossConfig(margin=margin, distance_mode=mode))
    _, r2 = prototype_loss(z, y, pe, ProtoLossConfig(margin=0.5, distance_mode=mode))
    assert np.all(r1 != y) and np.array_equal(r1, r2)
    d = class_distances(z, pe, mode)
    masked = np.where(np.arange(4)[None, :] == y[:, None], np.inf, d)
    assert np.array_equal(r1, np.argmin(masked, axis=1))


def test_single_class_and_missing_label_fatal():
    pe = PrototypeEmbeddings({0: np.ones((2, 1))})
    with pytest.raises(ValueError):
        prototype_loss(np.ones((1, 2)), [0], pe, ProtoLossConfig())
    pe2 = PrototypeEmbeddings({0: np.ones((2, 1)), 2: -np.ones((2, 1))})
    with pytest.raises(ValueError):
        prototype_loss(np.ones((1, 2)), [1], pe2, ProtoLossConfig())


def test_config_validation():
    for bad in (dict(margin=0), dict(weight=-1), dict(distance_mode="x"), dict(refresh_policy="x"), dict(scale_dim=0)):
        with pytest.raises(ValueError):
            ProtoLossConfig(**bad)


@pytest.mark.parametrize("margin", [0.5, 2.5])
@pytest.mark.parametrize("mode", ["attention", "nearest"])
@pytest.mark.parametrize("seed", range(3))
def test_combined_gradient_matches_finite_differences(seed, mode, margin):
    assert combined_loss_gradient_error(seed, mode, margin) <= 1e-4


def synth_problem(seed=0):
    spec = SynthSpec(k_known=3, k_unknown=1, feature_dim=6, samples_per_class=40, class_mean_radius=4.0, rng_seed=seed)
    known, _, _ = generate(spec)
    train, test = holdout(known, 0.25, seed)
    book = PrototypeBook(
        3, {k: [Prototype(int(i), j + 1, 1.0, 1.0) for j, i in enumerate(train.ids[train.labels == k][:3])] for k in range(3)}
    )
    return train, test, book


def test_zero_weight_reproduces_plain_continuation():
    train, _, book = synth_problem()
    cfg = bb.TrainConfig(epochs=2, batch_size=16, hidden_dim=8, embed_dim=4)
    warm = bb.train_classifier(train, cfg)
    plain = bb.fit(warm, train, cfg)
    zero = optimize_embedding(warm, train, book, cfg, ProtoLossConfig(weight=0.0))
    for k in plain.params:
        assert plain.params[k].tobytes() == zero.params[k].tobytes()


def mean_own_distance(model, train, data, book, mode="attention"):
    pe = prototype_embeddings(model, train, book)
    d = class_distances(bb.embed(model, data.features), pe, mode)
    return float(np.mean(d[np.arange(data.n), data.labels]))


@pytest.mark.parametrize("policy", ["per_step", "per_epoch"])
def test_optimisation_tightens_classes_and_logs_curve(policy, tmp_path):
    train, test, book = synth_problem(1)
    cfg = bb.TrainConfig(epochs=5, batch_size=16, hidden_dim=16, embed_dim=4, learning_rate=0.02)
    warm = bb.train_classifier(train, cfg)
    curve = LossCurve()
    tuned = optimize_embedding(warm, train, book, cfg, ProtoLossConfig(refresh_policy=policy), curve)
    assert mean_own_distance(tuned, train, test, book) < mean_own_distance(warm, train, test, book)
    steps = math.ceil(train.n / 16) * 5
    assert len(curve.rows) == steps
    curve.write_csv(tmp_path / "loss.csv")
    rows = list(csv.reader(Path(tmp_path / "loss.csv").read_text().splitlines()))
    assert rows[0] == ["step", "L_cls", "L_p", "L_total"]
    vals = np.array(rows[1:], dtype=float)
    assert np.all(np.isfinite(vals))
    np.testing.assert_allclose(vals[:, 1] + vals[:, 2], vals[:, 3], rtol=1e-9, atol=1e-12)


def test_optimisation_is_deterministic_and_needs_every_class():
    train, _, book = synth_problem(2)
    cfg = bb.TrainConfig(epochs=1, batch_size=16, hidden_dim=8, embed_dim=4)
    warm = bb.train_classifier(train, cfg)
    a = optimize_embedding(warm, train, book, cfg)
    b = optimize_embedding(warm, train, book, cfg)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    partial = PrototypeBook(3, {k: book.entries[k] for k in (0, 1)})
    with pytest.raises(ValueError):
        optimize_embedding(warm, train, partial, cfg)


def test_prototype_embeddings_match_forward():
    train, _, book = synth_problem(3)
    model = bb.init_model(train.feature_dim, 8, 4, 3, seed=0)
    pe = prototype_embeddings(model, train, book, version=7)
    assert pe.model_version == 7
    for k in book.classes:
        for col, sid in enumerate(book.ids(k)):
            z, _, _ = bb.forward(model, train.features[train.index_of([sid])[0]])
            np.testing.assert_allclose(pe.matrices[k][:, col], z, atol=1e-12)
