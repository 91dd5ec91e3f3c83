import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmal.datastore import EmbeddingSpace
from pmal.metric import MetricModel, pairwise_distances
from pmal.mining import PrototypeBook, filter_diverse, greedy_oracle
from pmal.uncertainty import CandidateSets


def setup(points, r, ids=None, label=0):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n, d = points.shape
    ids = list(range(n)) if ids is None else list(ids)
    members = {label: [(ids[i], i, float(np.log(r[i]))) for i in np.argsort(ids)]}
    space = EmbeddingSpace(1, points, np.eye(d, 2), np.zeros(2), "c")
    return CandidateSets(members, 0.7), space, MetricModel(np.eye(d))


def test_single_candidate():
    c, s, m = setup([[1.0, 2.0]], [0.9])
    with pytest.warns(UserWarning, match="only 1 candidates"):
        book = filter_diverse(c, s, m, 10)
    assert book.ids(0) == [0]
    assert book.entries[0][0].rank == 1


def test_one_dimensional_hand_execution():
    c, s, m = setup([0.0, 1.0, 10.0], [1.0, 0.9, 0.8])
    book = filter_diverse(c, s, m, 2)
    assert book.ids(0) == [0, 2]
    # nearest more-robust neighbour of the point at 10 is the point at 1
    assert [p.e_value for p in book.entries[0]] == [10.0, 9.0]
    with pytest.warns(UserWarning):
        full = filter_diverse(c, s, m, 5)
    assert full.ids(0) == [0, 2, 1]
    assert [p.e_value for p in full.entries[0]] == [10.0, 9.0, 1.0]


def test_exhaustion_orders_by_descending_e():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((7, 2))
    r = rng.uniform(0.1, 1, 7)
    c, s, m = setup(pts, r)
    with pytest.warns(UserWarning):
        book = filter_diverse(c, s, m, 20)
    e = [p.e_value for p in book.entries[0]]
    assert sorted(book.ids(0)) == list(range(7))
    assert e == sorted(e, reverse=True)
    assert [p.rank for p in book.entries[0]] == list(range(1, 8))


def test_equidistant_candidates_follow_robustness():
    pts = np.eye(5) * 3.0
    r = [0.3, 0.9, 0.5, 0.7, 0.1]
    c, s, m = setup(pts, r)
    d = pairwise_distances(m, pts, pts)
    assert greedy_oracle(range(5), d, r, 5) == [1, 3, 2, 0, 4]
    assert filter_diverse(c, s, m, 5).ids(0) == [1, 3, 2, 0, 4]


def max_min_subset(points, size):
    best, best_val = None, -1.0
    for combo in itertools.combinations(range(len(points)), size):
        val = min(np.linalg.norm(points[a] - points[b]) for a, b in itertools.combinations(combo, 2))
        if val > best_val:
            best, best_val = combo, val
    return best


def test_two_far_clusters_give_one_prototype_each():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 0.3, (6, 2))
    b = rng.normal(20, 0.3, (6, 2))
    pts = np.vstack([a, b])
    r = rng.uniform(0.2, 1.0, 12)
    cluster = np.repeat([0, 1], 6)
    exhaustive = max_min_subset(pts, 2)
    assert sorted(cluster[list(exhaustive)]) == [0, 1]
    c, s, m = setup(pts, r)
    chosen = filter_diverse(c, s, m, 2).ids(0)
    assert sorted(cluster[chosen]) == [0, 1]
    d = pairwise_distances(m, pts, pts)
    assert greedy_oracle(range(12), d, r, 2) == chosen


def test_ties_broken_by_robustness_then_id():
    # two maxima tie on r; both keep E = max(D) and come out in id order
    c, s, m = setup([0.0, 5.0, 2.0], [0.9, 0.9, 0.5], ids=[40, 10, 20])
    assert filter_diverse(c, s, m, 3).ids(0) == [10, 40, 20]


def test_rank_one_has_max_robustness():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = rng.integers(2, 30)
        r = rng.uniform(0.1, 1, n)
        c, s, m = setup(rng.standard_normal((n, 3)), r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            book = filter_diverse(c, s, m, 5)
        assert book.ids(0)[0] == int(np.argmax(r))
        assert len(set(book.ids(0))) == len(book.ids(0)) == min(5, n)


def test_threads_and_determinism():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((40, 3))
    members = {k: [(i, i, float(np.log(rng.uniform(0.1, 1)))) for i in range(k * 10, k * 10 + 10)] for k in range(4)}
    c = CandidateSets(members, 0.7)
    s = EmbeddingSpace(1, pts, np.eye(3, 4), np.zeros(4), "c")
    m = MetricModel(np.eye(3))
    assert filter_diverse(c, s, m, 3) == filter_diverse(c, s, m, 3, threads=4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 6))
def test_separable_clusters_are_covered(seed, clusters, t):
    t = min(t, clusters)
    rng = np.random.default_rng(seed)
    centres = np.arange(clusters)[:, None] * 100.0 * np.ones((1, 2))
    sizes = rng.integers(1, 6, clusters)
    pts = np.vstack([centres[i] + rng.uniform(-1, 1, (sizes[i], 2)) for i in range(clusters)])
    label = np.repeat(np.arange(clusters), sizes)
    r = rng.permutation(len(pts)) / len(pts) + 0.01
    c, s, m = setup(pts, r)
    chosen = filter_diverse(c, s, m, t).ids(0)
    assert len(set(label[chosen])) == t


def test_book_csv_round_trip(tmp_path):
    c, s, m = setup([0.0, 1.0, 10.0, 4.0], [1.0, 0.9, 0.8, 0.85])
    book = filter_diverse(c, s, m, 3)
    book.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "class,rank,sample_id,r,e_value"
    back = PrototypeBook.read_csv(tmp_path / "b.csv")
    assert back == book


def test_invalid_t():
    c, s, m = setup([0.0], [1.0])
    with pytest.raises(ValueError):
        filter_diverse(c, s, m, 0)
