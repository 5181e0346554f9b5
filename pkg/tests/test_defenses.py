import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajpoison.defenses import (RobustTrainConfig, activation_clustering, clip_rows, clipped_noisy_grad_fn,
                                 cluster_margin, export_latents, kmeans, read_latents, recall_at_fpr, robust_train,
                                 scene_latents, silhouette)
from trajpoison.predictor import TrainHyper, encode_scene, per_example_grads, predict, train


def blobs(rng, n_big=40, n_small=10, dim=2, sep=10.0):
    centre = np.zeros(dim)
    other = np.zeros(dim)
    other[0] = sep
    x = np.vstack([rng.normal(centre, 1.0, (n_big, dim)), rng.normal(other, 1.0, (n_small, dim))])
    return x, np.r_[np.zeros(n_big, bool), np.ones(n_small, bool)], np.stack([centre, other])


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.array_equal(a, b) or np.array_equal(a, 1 - b)


def inertia_of(x, labels):
    return sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in (0, 1) if (labels == c).any())


def exhaustive_two_means(x):
    best, arg = np.inf, None
    n = len(x)
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.all() or not labels.any():
            continue
        val = inertia_of(x, labels)
        if val < best:
            best, arg = val, labels
    return arg, best


def naive_silhouette(x, labels):
    vals = []
    for i in range(len(x)):
        own = [j for j in range(len(x)) if labels[j] == labels[i] and j != i]
        if not own:
            vals.append(0.0)
            continue
        a = np.mean([np.linalg.norm(x[i] - x[j]) for j in own])
        b = min(np.mean([np.linalg.norm(x[i] - x[j]) for j in range(len(x)) if labels[j] == c])
                for c in set(labels) if c != labels[i])
        vals.append((b - a) / max(a, b))
    return float(np.mean(vals))


def test_blobs_detected(rng):
    x, truth, centres = blobs(rng)
    rep = activation_clustering(x, truth)
    nearest = np.argmin(((x[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    assert same_partition(rep.assignments, nearest)
    assert rep.silhouette > 0.8
    assert rep.recall == 1.0 and rep.false_positive_rate == 0.0
    assert rep.detects()
    assert rep.smaller_fraction == pytest.approx(0.2)


def test_identical_vectors_degenerate():
    rep = activation_clustering(np.ones((6, 3)), [True, False] * 3)
    assert rep.degenerate and rep.silhouette == 0.0 and not rep.detects()


def test_exhaustive_oracle(rng):
    for n in range(4, 13):
        x = rng.normal(size=(n, 2)) + np.r_[np.zeros((n // 2, 2)), np.full((n - n // 2, 2), 1.5)]
        labels, val = kmeans(x, 2, seed=n)
        want, best = exhaustive_two_means(x)
        assert val == pytest.approx(best, rel=1e-9)
        assert same_partition(labels, want)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(3, 10), dim=st.integers(1, 4))
def test_kmeans_reaches_exhaustive_optimum(seed, n, dim):
    x = np.random.default_rng(seed).normal(size=(n, dim))
    _, val = kmeans(x, 2, seed=0)
    _, best = exhaustive_two_means(x)
    assert val == pytest.approx(best, rel=1e-9)


def test_silhouette_matches_naive(rng):
    x = rng.normal(size=(30, 3))
    labels = (x[:, 0] > 0).astype(int)
    assert silhouette(x, labels, chunk=7) == pytest.approx(naive_silhouette(x, labels), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_kmeans_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 3))
    x[:8] += 3.0
    perm = rng.permutation(len(x))
    a, ia = kmeans(x, 2, seed=0)
    b, ib = kmeans(x[perm], 2, seed=0)
    np.testing.assert_array_equal(a[perm], b)
    assert ia == pytest.approx(ib, rel=1e-12)


def test_latent_export(tmp_path, trained, scenes):
    flags = [i % 5 == 0 for i in range(len(scenes))]
    export_latents(trained, scenes, flags, tmp_path / "a.csv")
    export_latents(trained, scenes, flags, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ids, got_flags, lat = read_latents(tmp_path / "a.csv")
    assert len(ids) == len(scenes) and got_flags.tolist() == flags
    np.testing.assert_array_equal(lat, scene_latents(trained, scenes))
    np.testing.assert_allclose(lat[0], predict(trained, encode_scene(scenes[0], trained.config)).latent,
                               rtol=0, atol=1e-15)


def test_clip_definition():
    g = np.array([[6.0, 8.0], [0.3, 0.4]])
    out = clip_rows(g, 1.0)
    assert np.linalg.norm(out[0]) == pytest.approx(1.0)
    np.testing.assert_array_equal(out[1], g[1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3))
def test_clip_norm_bound(seed, c):
    rng = np.random.default_rng(seed)
    g = rng.normal(0, rng.uniform(0.01, 100), (5, 7))
    out = clip_rows(g, c)
    assert np.all(np.linalg.norm(out, axis=1) <= c * (1 + 1e-12))
    small = np.linalg.norm(g, axis=1) <= c
    np.testing.assert_array_equal(out[small], g[small])


def test_clip_inside_training_step(trained, scenes):
    z = np.stack([trained.features(encode_scene(s, trained.config)) for s in scenes[:4]])
    y = np.stack([(s.target.fut.points - s.target.obs.points[-1]).ravel() for s in scenes[:4]])
    _, g = clipped_noisy_grad_fn(RobustTrainConfig(clip_norm=1.0))(trained, z, y)
    _, per = per_example_grads(trained, z, y)
    np.testing.assert_allclose(g, clip_rows(per, 1.0).mean(axis=0), rtol=1e-12)
    assert np.linalg.norm(g) <= 1.0 + 1e-12


@pytest.fixture(scope="module")
def data(scenes, small_config):
    return [(encode_scene(s, small_config), s.target.fut) for s in scenes[:40]]


def test_disabled_defense_is_plain_training(data, small_config):
    hyper = TrainHyper(epochs=3, batch=8)
    a = robust_train(small_config, data, RobustTrainConfig(), hyper)
    b = train(small_config, data, hyper)
    np.testing.assert_array_equal(a.params.theta, b.params.theta)


def test_noise_seed_sensitivity(data, small_config):
    hyper = TrainHyper(epochs=2, batch=8)
    a = robust_train(small_config, data, RobustTrainConfig(noise_std=1.0, noise_seed=0), hyper)
    b = robust_train(small_config, data, RobustTrainConfig(noise_std=1.0, noise_seed=1), hyper)
    c = robust_train(small_config, data, RobustTrainConfig(noise_std=1.0, noise_seed=0), hyper)
    assert not np.array_equal(a.params.theta, b.params.theta)
    np.testing.assert_array_equal(a.params.theta, c.params.theta)


def test_robust_config_round_trip():
    rt = RobustTrainConfig(clip_norm=math.inf, noise_std=2.0)
    assert RobustTrainConfig.from_dict(rt.to_dict()) == rt
    assert rt.to_dict()["clip_norm"] is None
    with pytest.raises(ValueError):
        RobustTrainConfig(clip_norm=0)
    with pytest.raises(ValueError):
        RobustTrainConfig(noise_std=-1)


def test_recall_at_fpr_examples():
    truth = [True, True, False, False, False, False, False]
    assert recall_at_fpr([9, 8, 1, 2, 3, 4, 5], truth, 0.0) == 1.0
    assert recall_at_fpr([9, 1, 8, 2, 3, 4, 5], truth, 0.0) == 0.5
    assert recall_at_fpr([9, 1, 8, 2, 3, 4, 5], truth, 0.2) == 0.5
    assert recall_at_fpr([0, 0, 0, 0, 0, 0, 0], truth, 0.2) == 0.0
    with pytest.raises(ValueError):
        recall_at_fpr([1, 2], [False, False])


def test_cluster_margin_sign(rng):
    x, truth, _ = blobs(rng)
    rep = activation_clustering(x, truth)
    m = cluster_margin(x, rep.assignments)
    assert np.all(m[truth] > 0) and np.all(m[~truth] < 0)
    assert recall_at_fpr(m, truth, 0.0) == 1.0
