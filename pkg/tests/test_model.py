import numpy as np
import pytest

from binformer.errors import CheckpointError, ConfigError, ContractError
from binformer.model import (
    ModelConfig,
    classification_forward,
    count_parameters,
    embed_sequence,
    forward_hidden,
    init_model,
    load_checkpoint,
    parallel_heads_forward,
    save_checkpoint,
    swap_pretrain_head_for_classifier,
)
from binformer.preprocess import Scaler


TINY = ModelConfig(n=3, d=8, L=6, layers=1, heads=2, k=5, seed=0)


def _random_batch(config, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(batch, config.L, config.n))


class TestConfig:
    def test_heads_must_divide_d(self):
        with pytest.raises(ConfigError):
            ModelConfig(n=3, d=8, L=6, layers=1, heads=3, k=5)

    def test_invalid_arch(self):
        with pytest.raises(ConfigError):
            ModelConfig(n=3, d=8, L=6, layers=1, heads=2, k=5, arch="bidirectional")

    def test_positive_sizes(self):
        with pytest.raises(ConfigError):
            ModelConfig(n=0, d=8, L=6, layers=1, heads=2, k=5)


class TestInit:
    def test_deterministic(self):
        a = init_model(TINY)
        b = init_model(TINY)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_seed_changes_weights(self):
        a = init_model(TINY)
        b = init_model(ModelConfig(n=3, d=8, L=6, layers=1, heads=2, k=5, seed=1))
        assert not np.array_equal(a.params["embed.W"].data, b.params["embed.W"].data)

    def test_biases_zero_gains_one(self):
        model = init_model(TINY)
        np.testing.assert_array_equal(model.params["embed.b"].data, 0.0)
        np.testing.assert_array_equal(model.params["final_ln.g"].data, 1.0)
        np.testing.assert_array_equal(model.params["final_ln.b"].data, 0.0)


def test_embedding_is_linear_plus_position():
    model = init_model(TINY)
    x = _random_batch(TINY)
    out = embed_sequence(x, model).data
    W = model.params["embed.W"].data
    pos = model.params["pos"].data
    expected = x @ W.T + pos[None, : TINY.L]
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_forward_shapes():
    model = init_model(TINY)
    H = forward_hidden(_random_batch(TINY), model)
    assert H.data.shape == (2, TINY.L, TINY.d)
    logits = parallel_heads_forward(H, model)
    assert len(logits) == TINY.n
    for li in logits:
        assert li.data.shape == (2, TINY.L, TINY.k)


def test_heads_require_pretrain_mode():
    config = ModelConfig(n=3, d=8, L=6, layers=1, heads=2, k=5, num_classes=4)
    model = init_model(config, mode="classify")
    H = forward_hidden(_random_batch(config), model)
    with pytest.raises(ContractError):
        parallel_heads_forward(H, model)
    logits = classification_forward(H, model)
    assert logits.data.shape == (2, 4)


def test_shorter_input_than_L_is_allowed():
    # the decoder next-token context is L-1 long; positions must truncate
    model = init_model(ModelConfig(n=3, d=8, L=6, layers=1, heads=2, k=5,
                                   arch="decoder"))
    rng = np.random.default_rng(0)
    H = forward_hidden(rng.uniform(size=(2, 5, 3)), model)
    assert H.data.shape == (2, 5, 8)


def test_decoder_causality_tiny():
    model = init_model(ModelConfig(n=2, d=8, L=4, layers=2, heads=2, k=3,
                                   arch="decoder"))
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(1, 4, 2))
    base = forward_hidden(x, model).data.copy()
    y = x.copy()
    y[0, 3] = 0.123  # future-most position only
    perturbed = forward_hidden(y, model).data
    np.testing.assert_array_equal(base[0, :3], perturbed[0, :3])
    assert not np.array_equal(base[0, 3], perturbed[0, 3])


def test_encoder_is_not_causal():
    model = init_model(ModelConfig(n=2, d=8, L=4, layers=1, heads=2, k=3))
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(1, 4, 2))
    base = forward_hidden(x, model).data.copy()
    y = x.copy()
    y[0, 3] = 0.123
    perturbed = forward_hidden(y, model).data
    assert not np.array_equal(base[0, 0], perturbed[0, 0])


class TestHeadSwap:
    def test_body_copied_exactly(self):
        pre = init_model(TINY)
        clf = swap_pretrain_head_for_classifier(pre, num_classes=4, seed=7)
        for name, t in pre.params.items():
            if name.startswith("head"):
                assert name not in clf.params
            else:
                np.testing.assert_array_equal(clf.params[name].data, t.data)

    def test_classifier_head_fresh(self):
        pre = init_model(TINY)
        clf = swap_pretrain_head_for_classifier(pre, num_classes=4, seed=7)
        assert clf.params["cls.W"].data.shape == (4, TINY.d)
        assert clf.mode == "classify"
        assert clf.config.num_classes == 4


def test_count_parameters_tiny_by_hand():
    # embed 8*3+8, pos 6*8, attention 4*(64+8), LN 2*16, ffn 8*32+32+32*8+8,
    # final LN 16, heads 3*(5*8+5)
    model = init_model(TINY)
    expected = (8 * 3 + 8) + 6 * 8 + (4 * (8 * 8 + 8)) + 2 * 2 * 8 \
        + (8 * 32 + 32 + 32 * 8 + 8) + 2 * 8 + 3 * (5 * 8 + 5)
    assert count_parameters(model) == expected


class TestCheckpoint:
    def _scaler(self):
        return Scaler(x_min=np.array([0.0, 1.0, 2.0]),
                      x_max=np.array([1.0, 2.0, 3.0]),
                      mean=np.array([0.5, 1.5, 2.5]), winsor_fraction=0.05)

    def test_round_trip_bit_identical(self, tmp_path):
        model = init_model(TINY)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, self._scaler(), path)
        loaded, config, scaler = load_checkpoint(path)
        assert config == TINY
        for name, t in model.params.items():
            np.testing.assert_array_equal(
                loaded.params[name].data, t.data.astype(np.float32)
            )
        np.testing.assert_array_equal(scaler.x_min, [0.0, 1.0, 2.0])

    def test_truncated_file_rejected(self, tmp_path):
        model = init_model(TINY)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, self._scaler(), path)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[: len(blob) - 16])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        with open(path, "wb") as f:
            f.write(b'{"magic": "something-else"}\n')
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_garbage_rejected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        with open(path, "wb") as f:
            f.write(b"\x00\x01\x02 not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
