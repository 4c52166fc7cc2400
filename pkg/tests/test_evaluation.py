import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidcontrast.data import VideoSpec, generate_dataset
from vidcontrast.encoder import EncoderConfig, EncoderPair
from vidcontrast.errors import ConfigError, DataError
from vidcontrast.evaluation import (
    FrozenFeatures,
    cooccurrence_probability,
    extract_features,
    few_shot_subset,
    fit_linear_probe,
    linear_probe,
    nn_quality,
    recall_at_k,
    stratified_split,
    topk_same_class_fraction,
)

from oracles import brute_recall


def _features(rng, n, d, k):
    return FrozenFeatures(rng.normal(size=(n, d)), np.arange(n) % k, np.arange(n))


def test_separable_two_class_probe_is_perfect(rng):
    x = np.vstack([rng.normal(size=(20, 3)) + [4, 0, 0], rng.normal(size=(20, 3)) - [4, 0, 0]])
    y = np.repeat([0, 1], 20)
    train = FrozenFeatures(x[::2], y[::2], np.arange(20))
    test = FrozenFeatures(x[1::2], y[1::2], np.arange(20))
    assert linear_probe(train, test) == 1.0


def test_permuted_labels_give_chance_accuracy():
    rng = np.random.default_rng(3)
    k, n = 8, 2000
    centres = rng.normal(size=(k, 10)) * 3
    y = rng.integers(0, k, size=2 * n)
    x = centres[y] + rng.normal(size=(2 * n, 10))
    y_perm = rng.permutation(y)
    acc = linear_probe(FrozenFeatures(x[:n], y_perm[:n], np.arange(n)), FrozenFeatures(x[n:], y_perm[n:], np.arange(n)))
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) <= 3 * sigma


def test_probe_loss_is_non_increasing(rng):
    train = _features(rng, 60, 6, 4)
    losses = np.array(fit_linear_probe(train, epochs=100, lr=0.5).losses)
    if np.any(np.diff(losses) > 1e-12):
        losses = np.array(fit_linear_probe(train, epochs=100, lr=0.05).losses)
    assert np.all(np.diff(losses) <= 1e-12)


def test_probe_rejects_single_class_and_empty_test(rng):
    one = FrozenFeatures(rng.normal(size=(5, 2)), np.zeros(5), np.arange(5))
    with pytest.raises(ConfigError):
        fit_linear_probe(one)
    with pytest.raises(ConfigError):
        linear_probe(_features(rng, 6, 2, 2), FrozenFeatures(np.zeros((0, 2)), [], []))


def test_recall_matches_exhaustive_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(5):
        q, g = _features(rng, 64, 16, 16), _features(rng, 64, 16, 16)
        res = recall_at_k(q, g, (1, 5, 10, 20)).recall
        for k, v in res.items():
            assert v == brute_recall(q.features, q.class_ids, g.features, g.class_ids, k)


def test_recall_trivial_cases(rng):
    q = _features(rng, 20, 5, 4)
    assert recall_at_k(q, q, (1,)).recall[1] == 1.0
    single = FrozenFeatures(rng.normal(size=(10, 3)), np.zeros(10), np.arange(10))
    assert all(v == 1.0 for v in recall_at_k(single, single, (1, 5, 10)).recall.values())
    with pytest.raises(ConfigError):
        recall_at_k(q, q, (21,))
    empty = recall_at_k(FrozenFeatures(np.zeros((0, 5)), [], []), q, (1,))
    assert np.isnan(empty.recall[1]) and empty.as_dict() == {"R@1": empty.recall[1]}


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000))
def test_recall_is_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    r = recall_at_k(_features(rng, 12, 4, 3), _features(rng, 30, 4, 3), range(1, 31)).recall
    vals = [r[k] for k in sorted(r)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_few_shot_subsets(rng):
    feats = _features(rng, 160, 4, 16)
    assert np.array_equal(few_shot_subset(feats, 1.0, 0).video_ids, feats.video_ids)
    half = few_shot_subset(feats, 0.5, 3)
    assert np.bincount(half.class_ids).tolist() == [5] * 16
    assert np.array_equal(half.video_ids, few_shot_subset(feats, 0.5, 3).video_ids)
    assert not np.array_equal(half.video_ids, few_shot_subset(feats, 0.5, 4).video_ids)
    with pytest.raises(ConfigError):
        few_shot_subset(feats, 0.05, 0)
    with pytest.raises(ConfigError):
        few_shot_subset(feats, 0.0, 0)


def test_cooccurrence_goldens():
    assert cooccurrence_probability(400, 1024) == pytest.approx(1 - (399 / 400) ** 1024, rel=1e-12)
    assert cooccurrence_probability(400, 0) == 0.0
    assert cooccurrence_probability(1, 7) == 1.0
    with pytest.raises(ConfigError):
        cooccurrence_probability(0, 5)


def cooccurrence_monotone(ks=range(2, 60), qs=range(0, 200)) -> bool:
    # strict only where the gap to 1.0 is still resolvable in float64
    grid = np.array([[cooccurrence_probability(k, q) for q in qs] for k in ks])
    dq, dk = np.diff(grid, axis=1), np.diff(grid[:, 1:], axis=0)
    in_q = np.all(dq >= 0) and np.all(dq[grid[:, :-1] < 1 - 1e-9] > 0)
    in_k = np.all(dk <= 0) and np.all(dk[grid[1:, 1:] < 1 - 1e-9] < 0)
    return bool(in_q and in_k)


def test_cooccurrence_monotone_on_grid():
    assert cooccurrence_monotone()


@given(k=st.integers(2, 10_000), q=st.integers(0, 10_000))
def test_cooccurrence_monotone_property(k, q):
    p = cooccurrence_probability(k, q)
    assert 0.0 <= p <= 1.0
    assert cooccurrence_probability(k, q + 1) >= p
    assert cooccurrence_probability(k + 1, q) <= p


def test_topk_same_class(rng):
    assert topk_same_class_fraction(rng.normal(size=(8, 3)), np.zeros(8)) == 1.0
    k, n = 16, 1600
    frac = topk_same_class_fraction(rng.normal(size=(n, 16)), rng.integers(0, k, n))
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(frac - 1 / k) <= 3 * sigma
    with pytest.raises(ConfigError):
        topk_same_class_fraction(rng.normal(size=(5, 3)), np.zeros(5))


def test_extraction_contract_and_no_mutation():
    spec = VideoSpec()
    videos = generate_dataset(0, 16, 16, spec)
    pair = EncoderPair(EncoderConfig(), np.random.default_rng(0))
    digest = lambda: hashlib.sha256(b"".join(p.data.tobytes() for p in pair.query.params.values())).hexdigest()  # noqa: E731
    before = digest()
    a = extract_features(pair.query, videos, "train", spec)
    b = extract_features(pair.query, videos, "train", spec)
    assert a.features.shape == (16, 32) and np.array_equal(a.features, b.features)
    assert 0.0 <= nn_quality(pair.query, videos, spec) <= 1.0
    assert digest() == before
    with pytest.raises(ConfigError):
        extract_features(pair.query, videos, "train", VideoSpec(clip_len=2))
    with pytest.raises(ConfigError):
        nn_quality(pair.query, videos[:5], spec)


def test_stratified_split_is_per_class():
    videos = generate_dataset(0, 80, 16)
    train, test = stratified_split(videos, 0.2)
    assert len(train) == 64 and len(test) == 16
    assert sorted(v.class_id for v in test) == list(range(16))
    assert not {v.video_id for v in train} & {v.video_id for v in test}


def test_misaligned_features_are_rejected():
    with pytest.raises(DataError):
        FrozenFeatures(np.zeros((3, 2)), [0, 1], [0, 1, 2])


# ---------------------------------------------------------------------------
# reference run (default config, seed 42)


@pytest.mark.slow
def test_reference_untrained_probe_is_above_chance_and_below_trained(reference_run):
    untrained, trained = reference_run["untrained"]["probe"], reference_run["trained"]["probe"]
    assert 1 / 16 < untrained < trained


@pytest.mark.slow
def test_reference_fewshot_accuracy_is_non_decreasing_in_fraction(reference_run):
    fewshot = reference_run["trained"]["fewshot"]
    means = [np.mean(fewshot[f]) for f in sorted(fewshot)]
    assert all(b >= a - 0.02 for a, b in zip(means, means[1:])), means


@pytest.mark.slow
def test_reference_nn_quality_improves_over_training(reference_run):
    epochs = reference_run["epochs"]
    assert epochs[-1]["nn_top5_same_class"] > epochs[0]["nn_top5_same_class"]
