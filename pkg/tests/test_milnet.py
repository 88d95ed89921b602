import numpy as np
import pytest

from toolrefine.gradcheck import check_gradients, random_problem
from toolrefine.milnet import (
    CheckpointError,
    ConfigError,
    EmptyBagError,
    NetworkConfig,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)

SMALL = NetworkConfig(feature_dim=8, num_classes=3, model_dim=16, num_heads=4, num_layers=2,
                      mlp_hidden_dim=12, ff_hidden_dim=24, seed=3)


def test_init_is_deterministic():
    a, b = init_model(SMALL), init_model(SMALL)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()


def test_heads_must_divide_model_dim():
    with pytest.raises(ConfigError, match="divisible"):
        NetworkConfig(feature_dim=4, num_classes=2, model_dim=16, num_heads=3)


def test_layernorm_init():
    m = init_model(SMALL)
    for name, p in m.params.items():
        if name.endswith(".g"):
            assert (p == 1).all()
        if name.endswith("ln1.b") or name.endswith("ln2.b"):
            assert (p == 0).all()


def test_default_config_has_five_layers():
    cfg = NetworkConfig(feature_dim=4, num_classes=2)
    assert (cfg.num_layers, cfg.model_dim, cfg.num_heads) == (5, 64, 4)


def test_single_instance_attention_is_value_projection():
    m = init_model(SMALL)
    x = np.random.default_rng(0).normal(size=(1, 8))
    acts = forward(m, x)
    a, _, _, _, v, attn, ctx, *_ = acts.cache["layers"][0]
    assert (attn == 1.0).all()
    expected = a @ m.params["layer0.wv"] + m.params["layer0.bv"]
    np.testing.assert_array_equal(ctx, expected)


def test_permutation_equivariance():
    m = init_model(SMALL)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    np.testing.assert_allclose(forward(m, x[perm]).probs, forward(m, x).probs[perm], atol=1e-6)


def test_probabilities_are_sigmoid_of_logits():
    m = init_model(SMALL)
    acts = forward(m, np.random.default_rng(2).normal(size=(5, 8)))
    assert ((acts.probs > 0) & (acts.probs < 1)).all()
    np.testing.assert_allclose(acts.probs, 1 / (1 + np.exp(-acts.logits)), atol=1e-12, rtol=0)


def test_sigmoid_extreme_inputs():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_forward_is_deterministic():
    m = init_model(SMALL)
    x = np.random.default_rng(3).normal(size=(4, 8))
    assert forward(m, x).logits.tobytes() == forward(m, x).logits.tobytes()


def test_empty_bag_rejected():
    with pytest.raises(EmptyBagError):
        forward(init_model(SMALL), np.zeros((0, 8)))


def test_wrong_feature_dim_rejected():
    with pytest.raises(ValueError):
        forward(init_model(SMALL), np.zeros((2, 7)))


def test_zero_upstream_leaves_grads_unchanged():
    m = init_model(SMALL)
    acts = forward(m, np.random.default_rng(4).normal(size=(3, 8)))
    m.backward(acts, np.zeros((3, 3)))
    assert all(not g.any() for g in m.grads.values())


def test_backward_accumulates():
    m = init_model(SMALL)
    rng = np.random.default_rng(5)
    acts = forward(m, rng.normal(size=(3, 8)))
    g1, g2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    m.backward(acts, g1)
    first = {k: v.copy() for k, v in m.grads.items()}
    m.zero_grad()
    m.backward(acts, g2)
    second = {k: v.copy() for k, v in m.grads.items()}
    m.zero_grad()
    m.backward(acts, g1)
    m.backward(acts, g2)
    for k in m.grads:
        np.testing.assert_allclose(m.grads[k], first[k] + second[k], rtol=1e-12, atol=1e-15)


def test_backward_shape_mismatch():
    m = init_model(SMALL)
    acts = forward(m, np.ones((3, 8)))
    with pytest.raises(ValueError):
        m.backward(acts, np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    model, X, y, S, alpha = random_problem(100 + seed)
    result = check_gradients(model, X, y, S, alpha)
    assert result.passed, result
    assert result.max_rel_error < 1e-4


def test_checkpoint_round_trip(tmp_path):
    m = init_model(SMALL)
    m.params["head.b"] += 0.123456789
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()


def test_checkpoint_class_mismatch_names_field(tmp_path):
    save_checkpoint(init_model(SMALL), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match="num_classes"):
        load_checkpoint(tmp_path / "m.ckpt", expected={"num_classes": 5})


def test_checkpoint_is_byte_stable(tmp_path):
    save_checkpoint(init_model(SMALL), tmp_path / "a.ckpt")
    save_checkpoint(init_model(SMALL), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(SMALL), path)
    raw = path.read_bytes().replace(b'"format_version":1', b'"format_version":9')
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
