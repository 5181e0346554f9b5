import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (alignment_grad_error, alignment_value, input_grad_error, naive_forward, param_grad_error,
                     random_instance)
from trajpoison.predictor import (ModelParams, PredictorConfig, TrainHyper, batch_grad, encode_scene,
                                  grad_alignment_wrt_input, grad_params, init_params, loss, per_example_grads,
                                  predict, select_agents, train)
from trajpoison.scene import Agent, DrivingScene, SceneGenConfig, Trajectory, generate_dataset


def line_agent(aid, x0, y0, v=2.0, T=4, F=12):
    pts = np.column_stack([x0 + np.arange(T + F) * v * 0.5, np.full(T + F, y0)])
    return Agent(aid, Trajectory(pts[:T], 0.5), Trajectory(pts[T:], 0.5))


def crowded_scene(rng, n):
    agents = [line_agent("t", 0, 0), line_agent("av", -20, 4)]
    agents += [line_agent(f"o{i:02d}", *rng.uniform(-60, 60, 2)) for i in range(n - 2)]
    return DrivingScene("crowd", "av", "t", agents)


def test_encoding_translation_invariant(scenes, small_config):
    for s in scenes[:10]:
        a, b = encode_scene(s.translated((100.0, 100.0)), small_config), encode_scene(s, small_config)
        assert a.agent_ids == b.agent_ids
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.coords, b.coords, rtol=0, atol=1e-9)


def test_target_relative_origin(scenes, small_config):
    for s in scenes[:10]:
        t = encode_scene(s, small_config)
        np.testing.assert_array_equal(t.coords[0, -1], [0.0, 0.0])
        assert t.agent_ids[:2] == (s.target_id, s.av_id)


def test_truncation_keeps_nearest(rng, small_config):
    m = small_config.max_agents
    s = crowded_scene(rng, m + 3)
    origin = s.target.obs.points[-1]
    others = [a for a in s.agents if a.id not in ("t", "av")]
    by_dist = sorted(others, key=lambda a: np.linalg.norm(a.obs.points[-1] - origin))
    expected = {a.id for a in by_dist[: m - 2]}
    kept = select_agents(s, m)
    assert kept[:2] == ["t", "av"]
    assert set(kept[2:]) == expected
    t = encode_scene(s, small_config)
    assert t.mask.sum() == m * small_config.obs_len


def test_padding_is_masked(small_config):
    s = DrivingScene("two", "av", "t", [line_agent("t", 0, 0), line_agent("av", -20, 4)])
    t = encode_scene(s, small_config)
    assert t.mask[:2].all() and not t.mask[2:].any()
    assert not t.coords[2:].any()


def test_zero_params_predict_last_point(scenes, small_config):
    p = ModelParams(small_config, np.zeros(small_config.num_params))
    pred = predict(p, encode_scene(scenes[0], small_config))
    assert not pred.waypoints.any()


def test_predict_deterministic(trained, scenes, small_config):
    t = encode_scene(scenes[0], small_config)
    a, b = predict(trained, t), predict(trained, t)
    np.testing.assert_array_equal(a.waypoints, b.waypoints)
    np.testing.assert_array_equal(a.latent, b.latent)


def test_shape_mismatch(trained, scenes):
    other = encode_scene(scenes[0], PredictorConfig(max_agents=4))
    with pytest.raises(ValueError):
        predict(trained, other)


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(21)
    for _ in range(10):
        params, tensor, _ = random_instance(rng)
        pred = predict(params, tensor)
        way, latent = naive_forward(params, tensor)
        np.testing.assert_allclose(pred.waypoints, way, rtol=0, atol=1e-12)
        np.testing.assert_allclose(pred.latent, latent, rtol=0, atol=1e-12)


def test_loss_examples(trained, scenes, small_config):
    t = encode_scene(scenes[0], small_config)
    pred = predict(trained, t).waypoints + t.origin
    assert loss(trained, t, pred) == pytest.approx(0.0, abs=1e-24)
    assert loss(trained, t, pred - [1.0, 0.0]) == pytest.approx(0.5, abs=1e-12)
    label = scenes[0].target.fut.points
    assert loss(trained, t, label) == pytest.approx(np.mean((pred - label) ** 2), rel=1e-12)


def test_zero_loss_zero_gradient(trained, scenes, small_config):
    t = encode_scene(scenes[0], small_config)
    pred = predict(trained, t).waypoints + t.origin
    assert np.max(np.abs(grad_params(trained, t, pred))) < 1e-12


def test_param_gradient_finite_difference():
    rng = np.random.default_rng(7)
    for _ in range(5):
        params, tensor, label = random_instance(rng)
        assert param_grad_error(params, tensor, label) < 1e-4


def test_input_gradient_finite_difference():
    rng = np.random.default_rng(8)
    for _ in range(5):
        params, tensor, label = random_instance(rng)
        assert input_grad_error(params, tensor, label) < 1e-4


def test_batch_gradient_is_mean_of_per_example(trained, scenes, small_config):
    z = np.stack([trained.features(encode_scene(s, small_config)) for s in scenes[:5]])
    y = np.stack([(s.target.fut.points - s.target.obs.points[-1]).ravel() for s in scenes[:5]])
    l, g = batch_grad(trained, z, y)
    ls, gs = per_example_grads(trained, z, y)
    assert l == pytest.approx(ls.mean(), rel=1e-12)
    np.testing.assert_allclose(g, gs.mean(axis=0), rtol=1e-10, atol=1e-14)


def test_alignment_gradient_two_hidden_units():
    rng = np.random.default_rng(9)
    for _ in range(5):
        params, tensor, label = random_instance(rng, hidden=(2,))
        adv = rng.normal(size=params.config.num_params)
        assert alignment_grad_error(params, tensor, label, adv) < 1e-3


def test_alignment_parallel_case():
    rng = np.random.default_rng(10)
    params, tensor, label = random_instance(rng, hidden=(2,))
    adv = grad_params(params, tensor, label)
    res = grad_alignment_wrt_input(params, tensor, label, adv)
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert alignment_grad_error(params, tensor, label, adv) < 1e-3


def test_alignment_scale_invariant():
    rng = np.random.default_rng(11)
    params, tensor, label = random_instance(rng)
    adv = rng.normal(size=params.config.num_params)
    a, b = (grad_alignment_wrt_input(params, tensor, label, c * adv) for c in (1.0, 5.0))
    assert a.value == pytest.approx(b.value, abs=1e-12)
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-9, atol=1e-15)


def test_alignment_degenerate(trained, scenes, small_config):
    t = encode_scene(scenes[0], small_config)
    pred = predict(trained, t).waypoints + t.origin
    res = grad_alignment_wrt_input(trained, t, pred, np.ones(small_config.num_params))
    assert res.degenerate and res.value == 1.0 and not res.grad.any()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_alignment_in_range(seed):
    rng = np.random.default_rng(seed)
    params, tensor, label = random_instance(rng)
    adv = rng.normal(size=params.config.num_params)
    v = alignment_value(params, tensor, label, adv)
    assert -1e-12 <= v <= 2 + 1e-12
    assert grad_alignment_wrt_input(params, tensor, label, adv).value == pytest.approx(v, abs=1e-12)


def test_memorises_single_sample(scenes, small_config):
    data = [(encode_scene(scenes[0], small_config), scenes[0].target.fut)]
    res = train(small_config, data, TrainHyper(lr=0.003, epochs=500, batch=1))
    assert res.losses[-1] < 1e-3


def test_training_deterministic(scenes, small_config):
    data = [(encode_scene(s, small_config), s.target.fut) for s in scenes[:30]]
    hyper = TrainHyper(epochs=3, batch=8)
    a, b = train(small_config, data, hyper), train(small_config, data, hyper)
    np.testing.assert_array_equal(a.params.theta, b.params.theta)


def test_loss_curve_decreases(small_config):
    data_scenes = generate_dataset(SceneGenConfig(num_scenes=200), 2)
    data = [(encode_scene(s, small_config), s.target.fut) for s in data_scenes]
    res = train(small_config, data, TrainHyper(lr=0.005, epochs=20, batch=16))
    assert res.losses[-1] < res.losses[0]


def test_model_round_trip(tmp_path, trained):
    trained.save(tmp_path / "m.json")
    back = ModelParams.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta, trained.theta)
    np.testing.assert_array_equal(back.norm.matrix, trained.norm.matrix)
    assert back.config == trained.config


def test_init_matches_seed(small_config):
    a, b = init_params(small_config), init_params(small_config)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.theta.shape == (small_config.num_params,)
