import numpy as np
import pytest

from scaleood import BlobSpec, ConfigError, GaussianParams, SynthSpec, gen_blob_dataset, gen_linear_head, gen_rectified_features
from scaleood.synth import DEFAULT_ID_PARAMS, DEFAULT_OOD_PARAMS


def test_rectified_features_shape_and_relu():
    post, pre = gen_rectified_features(SynthSpec(DEFAULT_ID_PARAMS, n_samples=50, dim=64, seed=3), tag="id")
    assert post.data.shape == (50, 64) and pre.data.shape == (50, 64)
    assert post.post_relu and post.data.min() >= 0
    np.testing.assert_array_equal(post.data, np.maximum(pre.data, 0.0))
    assert pre.data.min() < 0


def test_same_seed_same_matrix_any_thread_count():
    spec = SynthSpec(DEFAULT_OOD_PARAMS, n_samples=700, dim=32, seed=9)
    a, _ = gen_rectified_features(spec, threads=1)
    b, _ = gen_rectified_features(spec, threads=4)
    np.testing.assert_array_equal(a.data, b.data)
    c, _ = gen_rectified_features(SynthSpec(DEFAULT_OOD_PARAMS, n_samples=700, dim=32, seed=10))
    assert not np.array_equal(a.data, c.data)


def test_sample_means_concentrate():
    spec = SynthSpec(GaussianParams(1.0, 0.05), rectified=False, n_samples=20, dim=2048, seed=0)
    post, _ = gen_rectified_features(spec)
    assert not post.post_relu
    tol = 3 * 0.05 / np.sqrt(2048)
    assert np.all(np.abs(post.data.mean(axis=1) - 1.0) < tol * 2)


def test_default_params_are_ordered():
    assert DEFAULT_ID_PARAMS.gamma == pytest.approx(2.0)
    assert DEFAULT_OOD_PARAMS.gamma == pytest.approx(1.3333, abs=1e-4)


def test_linear_head():
    h1 = gen_linear_head(10, 128, seed=0)
    h2 = gen_linear_head(10, 128, seed=1)
    assert h1.weights.shape == (10, 128) and h1.bias.tolist() == [0.0] * 10
    assert not np.array_equal(h1.weights, h2.weights)
    np.testing.assert_array_equal(h1.weights, gen_linear_head(10, 128, seed=0).weights)
    assert np.std(h1.weights) == pytest.approx(1 / np.sqrt(128), rel=0.1)
    assert np.any(gen_linear_head(4, 8, seed=0, bias_scale=1.0).bias != 0)
    with pytest.raises(ConfigError):
        gen_linear_head(0, 8)


def test_blob_dataset_layout():
    spec = BlobSpec(samples_per_class=100, seed=1)
    data = gen_blob_dataset(spec)
    assert spec.ood_classes == (7, 8, 9)
    assert data.train.data.shape == (7 * 80, 32)
    assert data.id_test.data.shape == (7 * 20, 32)
    assert data.ood_test.data.shape == (3 * 20, 32)
    assert set(data.train.labels.tolist()) == set(range(7))
    assert data.ood_test.labels is None
    assert data.ood_test.split == "ood-near"


def test_noise_free_blobs_are_linearly_separable():
    data = gen_blob_dataset(BlobSpec(noise=0.0, samples_per_class=10, seed=2))
    centers = np.array([data.train.data[data.train.labels == k][0] for k in range(7)])
    pred = np.argmax(data.id_test.data @ centers.T - 0.5 * np.sum(centers ** 2, axis=1), axis=1)
    assert np.mean(pred == data.id_test.labels) == 1.0


def test_blob_spec_validation():
    with pytest.raises(ConfigError, match="held-out"):
        BlobSpec(n_classes=3, id_classes=(0, 1, 2))
    with pytest.raises(ConfigError, match="distinct"):
        BlobSpec(id_classes=(0, 0))
    with pytest.raises(ConfigError, match="test_fraction"):
        BlobSpec(test_fraction=1.0)
    with pytest.raises(ConfigError):
        SynthSpec(DEFAULT_ID_PARAMS, n_samples=0)


@pytest.mark.parametrize("dim", [64, 1024])
def test_head_logit_variance_tracks_activation_power(dim):
    post, _ = gen_rectified_features(SynthSpec(DEFAULT_ID_PARAMS, n_samples=1, dim=dim, seed=5))
    a = post.data[0]
    head = gen_linear_head(4000, dim, seed=6, scale=2.0)
    logits = head.weights @ a
    assert np.var(logits) == pytest.approx(4.0 * np.mean(a**2), rel=0.1)
