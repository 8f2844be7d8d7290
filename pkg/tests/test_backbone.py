import numpy as np
import pytest

from sceneenc import diffcore as dc
from sceneenc.backbone import ModelConfig, classify, forward_full, init_params, is_descriptor_param
from sceneenc.geometry import PointCloud
from sceneenc.losses import cls_loss

SMALL = ModelConfig(n_classes=5, encoder_widths=(8, 16), head_widths=(16, 8), descriptor_widths=(8,))


def _setup(seed=0, n=30):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    cloud = PointCloud(rng.uniform(0, 3, size=(n, 3)), rng.integers(0, 5, n))
    return params, cloud


def test_init_shapes_bounds_and_zero_biases():
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(0))
    for layer, (a, b) in cfg.layer_shapes().items():
        w = params[f"{layer}.W"]
        assert w.shape == (a, b)
        assert np.abs(w).max() <= np.sqrt(6 / (a + b))
        assert not params[f"{layer}.b"].any()
    assert cfg.layer_shapes()["enc0"] == (3, 32)
    assert cfg.layer_shapes()["head0"] == (256, 128)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance(seed):
    params, cloud = _setup(seed)
    perm = np.random.default_rng(100 + seed).permutation(len(cloud))
    a = forward_full(cloud, params)
    b = forward_full(cloud.permuted(perm), params)
    assert np.array_equal(a.global_feature.value, b.global_feature.value)
    assert np.array_equal(a.descriptor.value, b.descriptor.value)
    for name in ("point_features", "probs", "refined"):
        np.testing.assert_allclose(getattr(a, name).value[perm], getattr(b, name).value, rtol=0, atol=1e-14)


def test_duplicated_points_keep_global_feature():
    params, cloud = _setup(1)
    doubled = PointCloud(np.vstack([cloud.coords, cloud.coords]), np.concatenate([cloud.labels] * 2))
    a = forward_full(cloud, params).global_feature.value
    b = forward_full(doubled, params).global_feature.value
    np.testing.assert_array_equal(a, b)


def test_single_point_global_equals_embedding():
    params, _ = _setup(2)
    cloud = PointCloud(np.array([[0.3, 0.1, 0.2]]))
    out = forward_full(cloud, params)
    # normalizing a single point maps it to the origin
    h = np.zeros((1, 3))
    for i in range(2):
        h = np.maximum(h @ params[f"enc{i}.W"] + params[f"enc{i}.b"], 0)
    np.testing.assert_allclose(out.global_feature.value, h, atol=1e-15)


def _classify_with_logits(logits):
    g = dc.Graph()
    n = logits.shape[1]
    pv = {"cls.W": g.param(np.eye(n), "cls.W"), "cls.b": g.param(np.zeros((1, n)), "cls.b")}
    return classify(g.const(logits), pv).value


def test_classify_examples():
    assert np.allclose(_classify_with_logits(np.zeros((1, 4))), 0.25)
    assert _classify_with_logits(np.array([[50.0, 0.0, 0.0]]))[0, 0] == pytest.approx(1.0, abs=1e-20)
    p = _classify_with_logits(np.random.default_rng(0).normal(scale=5, size=(100, 6)))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9) and np.all(p >= 0)


def test_row_stochastic_outputs_and_descriptor_range():
    for seed in range(5):
        params, cloud = _setup(seed)
        out = forward_full(cloud, params)
        assert np.all(np.abs(out.probs.value.sum(axis=1) - 1) <= 1e-9)
        assert np.all(np.abs(out.refined.value.sum(axis=1) - 1) <= 1e-9)
        d = out.descriptor.value
        assert np.all(d > 0) and np.all(d < 1)


def _force_descriptor(params, bias):
    p = dict(params)
    last = max(k for k in p if k.startswith("des") and k.endswith(".W"))
    p[last] = np.zeros_like(p[last])
    p[last.replace(".W", ".b")] = np.asarray(bias, dtype=float).reshape(1, -1)
    return p


def test_all_ones_descriptor_leaves_probabilities():
    params, cloud = _setup(3)
    out = forward_full(cloud, _force_descriptor(params, [100.0] * 5))
    np.testing.assert_allclose(out.refined.value, out.probs.value, rtol=1e-12)


def test_one_hot_descriptor_gives_one_hot_rows():
    params, cloud = _setup(3)
    out = forward_full(cloud, _force_descriptor(params, [-100, -100, 100, -100, -100]), threshold=0.5)
    assert np.array_equal(out.refined.value, np.tile([0.0, 0, 1, 0, 0], (len(cloud), 1)))


def test_bypass_returns_raw_probabilities():
    params, cloud = _setup(4)
    out = forward_full(cloud, params, scene_encoder=False)
    assert out.descriptor is None
    assert out.refined is out.probs


def test_stop_gradient_wiring():
    params, cloud = _setup(5)
    out = forward_full(cloud, params)
    grads = dc.backward(out.graph, cls_loss(out.refined, cloud.labels))
    for name, g in grads.items():
        if is_descriptor_param(name):
            assert not g.any(), name
    assert any(grads[n].any() for n in grads if not is_descriptor_param(n))
    # the debug switch lets the classification loss reach the descriptor head
    out = forward_full(cloud, params, stop_gradient=False)
    grads = dc.backward(out.graph, cls_loss(out.refined, cloud.labels))
    assert max(np.abs(g).max() for n, g in grads.items() if is_descriptor_param(n)) > 0


def test_bad_widths_rejected():
    with pytest.raises(ValueError):
        ModelConfig(encoder_widths=())
    with pytest.raises(ValueError):
        ModelConfig(n_classes=1)
