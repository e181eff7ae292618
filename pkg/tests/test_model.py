import numpy as np
import pytest

from locvae import tensor as T
from locvae.model import LatentDistribution, LocVAE, ModelConfig, reconstruct_expected, reparameterize
from locvae.tensor import Tensor
from oracles import SMALL


@pytest.fixture(scope="module")
def model():
    return LocVAE(ModelConfig(), seed=0)


def test_default_config_structure():
    cfg = ModelConfig()
    assert cfg.latent_dim == 8
    assert cfg.compression_ratio == 512
    assert cfg.conv_layer_count == 13


def test_parameter_counts_by_hand():
    # encoder: stem 8*27+8, ten 8->8 3^3 convs (8*8*27+8 each), two 1^3 heads (8+1 each)
    encoder = 224 + 10 * 1736 + 2 * 9
    # tied decoder owns: 1^3 input conv (8+8), ten transposed biases (8), output bias (1)
    tied = encoder + 16 + 80 + 1
    assert LocVAE(ModelConfig(), seed=0).registry.count() == tied
    untied = tied + 10 * 8 * 8 * 27 + 8 * 27
    assert LocVAE(ModelConfig.for_variant("BetaVAE"), seed=0).registry.count() == untied


def test_variant_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="LocVAE", tied_weights=False)
    with pytest.raises(ValueError):
        ModelConfig(variant="Other")
    with pytest.raises(ValueError):
        ModelConfig(latent_grid=(4, 4, 4))
    assert ModelConfig.for_variant("BetaVAE").tied_weights is False
    assert ModelConfig.for_variant("BetaVAETW").tied_weights is True


def test_encode_shapes_and_positive_sigma(model, rng):
    dist = model.encode(rng.uniform(size=(3, 16, 16, 16)))
    assert dist.mu.shape == dist.sigma.shape == (3, 8)
    assert np.all(dist.sigma.data > 0)


def test_encoder_is_deterministic(model, rng):
    v = rng.uniform(size=(16, 16, 16))
    a, b = model.encode(v), model.encode(v)
    np.testing.assert_array_equal(a.mu.data, b.mu.data)
    np.testing.assert_array_equal(a.sigma.data, b.sigma.data)


def test_encode_rejects_wrong_shape(model):
    with pytest.raises(ValueError):
        model.encode(np.zeros((8, 8, 8)))


def test_reparameterize_zero_noise_is_mean():
    dist = LatentDistribution(Tensor([[0.5, -1.0]]), Tensor([[2.0, 3.0]]))
    np.testing.assert_array_equal(reparameterize(dist, eps=0.0).z.data, dist.mu.data)
    tiny = LatentDistribution(Tensor([[0.5, -1.0]]), Tensor([[1e-12, 1e-12]]))
    np.testing.assert_allclose(reparameterize(tiny, np.random.default_rng(0)).z.data, tiny.mu.data, atol=1e-10)


def test_reparameterize_sample_mean():
    n = 100_000
    mu, sigma = np.array([0.3, -2.0, 1.0]), np.array([0.5, 1.5, 2.0])
    dist = LatentDistribution(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(sigma, (n, 1))))
    z = reparameterize(dist, np.random.default_rng(1)).z.data
    assert np.all(np.abs(z.mean(axis=0) - mu) < 4 * sigma / np.sqrt(n))


def test_decode_shape_and_range(model, rng):
    out = model.decode(rng.standard_normal((2, 8)) * 5)
    assert out.shape == (2, 16, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))
    assert model.decode(np.zeros(8)).shape == (1, 16, 16, 16)


def test_tied_encoder_kernel_changes_decoder_output(rng):
    m = LocVAE(ModelConfig(**SMALL), seed=0)
    z = rng.standard_normal((1, 8))
    before = m.decode(z).data.copy()
    m.registry["enc.s0.b0.conv_a.weight"].data[0, 0, 1, 1, 1] += 0.5
    assert not np.array_equal(before, m.decode(z).data)


def test_untied_encoder_kernel_leaves_decoder_alone(rng):
    m = LocVAE(ModelConfig.for_variant("BetaVAE", **SMALL), seed=0)
    z = rng.standard_normal((1, 8))
    before = m.decode(z).data.copy()
    m.registry["enc.s0.b0.conv_a.weight"].data[0, 0, 1, 1, 1] += 0.5
    np.testing.assert_array_equal(before, m.decode(z).data)


def test_reconstruct_single_sample_equals_one_pass(rng):
    m = LocVAE(ModelConfig(**SMALL), seed=0)
    v = rng.uniform(size=(8, 8, 8))
    a = reconstruct_expected(m, v, np.random.default_rng(3), n_samples=1)
    with T.no_grad():
        b = m.decode(reparameterize(m.encode(v), np.random.default_rng(3))).data[0]
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, reconstruct_expected(m, v, np.random.default_rng(3), n_samples=1))


def test_reconstruct_variance_shrinks_with_samples(rng):
    m = LocVAE(ModelConfig(**SMALL), seed=0)
    m.registry["enc.logvar_head.bias"].data[:] = 2.0  # wide posterior so sampling noise is visible
    v = rng.uniform(size=(8, 8, 8))

    def spread(n):
        runs = np.stack([reconstruct_expected(m, v, np.random.default_rng(s), n) for s in range(40)])
        return runs.var(axis=0).mean()

    ratio = spread(1) / spread(16)
    assert 8 < ratio < 32


def test_save_load_round_trip(tmp_path, rng):
    for variant in ("BetaVAE", "LocVAE"):
        m = LocVAE(ModelConfig.for_variant(variant, **SMALL), seed=4)
        m.save(tmp_path / f"{variant}.lvae")
        m2 = LocVAE.load(tmp_path / f"{variant}.lvae")
        assert m2.config == m.config
        z = rng.standard_normal((2, 8))
        np.testing.assert_array_equal(m.decode(z).data, m2.decode(z).data)
        if variant == "LocVAE":
            assert m2.registry["dec.output.weight"] is m2.registry["enc.stem.weight"]
