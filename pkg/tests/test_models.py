import numpy as np
import pytest

from calibench import losses, models
from calibench.numkit import ConfigError, ShapeError, Tensor
from calibench.numkit.calt import FormatError


def test_build_deterministic():
    a, b = models.build(seed=3), models.build(seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)
    c = models.build(seed=4)
    assert not np.array_equal(a.params["G"][0].data, c.params["G"][0].data)


def test_heads_differ_at_init():
    b = models.build(seed=0)
    wr = losses.weight_regularization(models.weight_vector(b, "C1"), models.weight_vector(b, "C2")).item()
    assert -1 < wr < 1
    assert not np.array_equal(b.params["C1"][0].data, b.params["C2"][0].data)


def test_output_shapes():
    b = models.build(models.ArchitectureConfig(num_classes=2), seed=0)
    p1, p2, f = models.forward_seg(b, np.zeros((3, 8, 8)))
    assert p1.shape == (2, 8, 8) and p2.shape == (2, 8, 8)
    assert f.shape == (16, 8, 8)


def test_degenerate_config_rejected():
    for cfg in (models.ArchitectureConfig(num_classes=1), models.ArchitectureConfig(feature_channels=0),
                models.ArchitectureConfig(disc_channels=(16, 2))):
        with pytest.raises(ConfigError):
            models.build(cfg)


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        models.forward_seg(models.build(), np.zeros((1, 8, 8)))


def test_forward_is_pure_and_distributions():
    b = models.build(seed=1)
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    p1, p2, f = models.forward_seg(b, x)
    q1, q2, g = models.forward_seg(b, Tensor(x.copy()))
    assert np.array_equal(p1.data, q1.data) and np.array_equal(f.data, g.data)
    assert np.allclose(p1.data.sum(axis=0), 1, atol=1e-12)
    assert np.allclose(p2.data.sum(axis=0), 1, atol=1e-12)


def test_heads_and_discriminator_share_features():
    b = models.build(seed=2)
    x = np.random.default_rng(1).uniform(size=(3, 16, 16))
    _, _, f = models.forward_seg(b, x)
    assert np.array_equal(models.extract(b, x).data, f.data)
    assert models.forward_domain(b, x) == models.discriminate(b, f).item()


def test_domain_output_in_open_interval():
    b = models.build(seed=3)
    for scale in (0.0, 1.0, 100.0):
        d = models.forward_domain(b, np.full((3, 16, 16), scale))
        assert 0 < d < 1


def test_weight_vector_layout_and_copy():
    b = models.build(seed=0)
    w = models.weight_vector(b, "C1")
    assert w.size == sum(p.size for p in b.params["C1"])
    assert np.array_equal(w.data, models.weight_vector(b, "C1").data)
    b.copy_head("C1", "C2")
    cos = losses.weight_regularization(w, models.weight_vector(b, "C2")).item()
    assert cos == pytest.approx(1.0)


def test_predict_labels_tie_rule():
    assert models.predict_labels(np.full((3, 2, 2), 1 / 3)).tolist() == [[0, 0], [0, 0]]
    p = np.array([0.2, 0.5, 0.3]).reshape(3, 1, 1)
    assert models.predict_labels(p)[0, 0] == 1
    assert models.predict_labels(np.eye(4)[2].reshape(4, 1, 1))[0, 0] == 2


def test_argmax_softmax_equals_argmax_logits():
    b = models.build(seed=0)
    x = np.random.default_rng(3).uniform(size=(3, 8, 8))
    f = models.extract(b, x)
    w, bias = b.params["C1"]
    logits = w.data @ f.data.reshape(16, -1) + bias.data[:, None]
    assert np.array_equal(models.predict_labels(models.classify(b, "C1", f)).reshape(-1), logits.argmax(axis=0))


def test_checkpoint_round_trip(tmp_path):
    b = models.build(seed=9)
    models.save_checkpoint(b, tmp_path / "m.ckpt", iteration=42)
    c, it = models.load_checkpoint(tmp_path / "m.ckpt")
    assert it == 42 and c.config == b.config
    for p, q in zip(b.parameters(), c.parameters()):
        assert np.array_equal(p.data, q.data)


def test_checkpoint_corruption(tmp_path):
    b = models.build(seed=9)
    path = tmp_path / "m.ckpt"
    models.save_checkpoint(b, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        models.load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        models.load_checkpoint(path)
