import re
from dataclasses import replace

import numpy as np
import pytest

from autodiff.tensor import Tensor, no_grad
from models.errors import ShapeError
from models.network import BLOCK_CONV_BANK, ModelConfig
from networks.blocks import APCBlock
from networks.srd_model import MAIN, SIBLING, SRDModel, analytic_param_count, time_shuffle
from services.losses import recon_loss

# time-constant shifts right before a normalization
NORMALIZED_BIAS = re.compile(r"^(content_encoder|decoder)\.blocks\.\d+\.(branches\.\d+|projection)\.bias$")


def zero_weights(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


@pytest.fixture
def model(tiny_model_config):
    return SRDModel(tiny_model_config, seed=3, dtype=np.float64)


@pytest.mark.unit
class TestModelConfig:
    def test_reference_param_count(self):
        cfg = ModelConfig()
        count = SRDModel(cfg).param_count()
        assert count.total == analytic_param_count(cfg) == 1_488_144
        assert 800_000 <= count.total <= 1_800_000
        assert sum(count.breakdown.values()) == count.total

    def test_conv_bank_is_heavier(self):
        cfg = ModelConfig()
        assert analytic_param_count(replace(cfg, block_type=BLOCK_CONV_BANK)) > analytic_param_count(cfg)

    @pytest.mark.parametrize("overrides", [
        {'apc_kernel': 5},
        {'apc_dilations': [1, 1]},
        {'apc_dilations': [0, 2]},
        {'n_adain_layers': 3},
        {'ts_chunk': 0},
        {'block_type': "lstm"},
    ])
    def test_rejects_invalid_topologies(self, overrides):
        with pytest.raises(ShapeError):
            ModelConfig(**overrides)

    def test_speaker_code_dim(self, tiny_model_config):
        assert tiny_model_config.speaker_code_dim == 2 * 2 * 8


@pytest.mark.unit
class TestBlocks:
    @pytest.mark.parametrize("frames", [1, 2, 17, 128])
    def test_apc_preserves_shape(self, rng, frames):
        block = APCBlock(4, [1, 2, 4, 8], rng, dtype=np.float64)
        out = block(Tensor(rng.standard_normal((2, 4, frames))))
        assert out.shape == (2, 4, frames)
        assert block.receptive_field == 17

    def test_zeroed_apc_is_identity(self, rng):
        block = APCBlock(4, [1, 2, 4], rng, dtype=np.float64)
        zero_weights(block)
        x = rng.standard_normal((2, 4, 33))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)

    def test_conv_bank_model_runs(self, tiny_model_config, rng):
        model = SRDModel(replace(tiny_model_config, block_type=BLOCK_CONV_BANK), dtype=np.float64)
        with no_grad():
            out = model.convert_codes(rng.standard_normal((16, 40)), rng.standard_normal((16, 30)))
        assert out.shape == (16, 40)
        assert model.num_parameters() == analytic_param_count(model.config)


@pytest.mark.unit
class TestSRDModel:
    def test_param_count_matches_closed_form(self, model, tiny_model_config):
        assert model.num_parameters() == analytic_param_count(tiny_model_config)

    def test_sibling_shares_parameters(self, model, rng):
        assert model.sibling_encoder is model.speaker_encoder
        z = rng.standard_normal((16, 64))
        main_embedding, main_code = model.speaker_encode(z, MAIN)
        sibling_embedding, sibling_code = model.speaker_encode(z, SIBLING)
        np.testing.assert_array_equal(main_embedding.values.data, sibling_embedding.values.data)
        np.testing.assert_array_equal(main_code.flatten().data, sibling_code.flatten().data)
        names = [name for name, _ in model.named_parameters()]
        assert not any(name.startswith("sibling_encoder") for name in names)

    def test_unknown_encoder_name(self, model, rng):
        with pytest.raises(ShapeError):
            model.speaker_encode(rng.standard_normal((16, 8)), "third")

    def test_shapes(self, model, rng, tiny_model_config):
        z = rng.standard_normal((3, 16, 128))
        content = model.content_encode(z)
        embedding, code = model.speaker_encode(z)
        assert content.values.shape == (3, 8, 128)
        assert content.frames().shape == (3, 128, 8)
        assert embedding.values.shape == (3, 12)
        assert code.alpha.shape == code.beta.shape == (3, 2, 8)
        assert code.flatten().shape == (3, tiny_model_config.speaker_code_dim)
        assert model.decode(content, code).shape == z.shape

    @pytest.mark.parametrize("source_frames,target_frames", [(100, 128), (128, 128), (500, 37), (5, 300)])
    def test_conversion_keeps_source_length(self, model, rng, source_frames, target_frames):
        with no_grad():
            out = model.convert_codes(rng.standard_normal((16, source_frames)),
                                      rng.standard_normal((16, target_frames)))
        assert out.shape == (16, source_frames)

    def test_content_maps_are_instance_normalized(self, model, rng):
        maps = []
        model.content_encode(rng.standard_normal((2, 16, 64)) * 4.0 + 1.0, maps)
        assert len(maps) == 1
        np.testing.assert_allclose(maps[0].data.mean(axis=-1), 0.0, atol=1e-8)
        np.testing.assert_allclose(maps[0].data.std(axis=-1), 1.0, atol=1e-2)

    def test_decoder_maps_carry_speaker_statistics(self, model, rng):
        content = model.content_encode(rng.standard_normal((1, 16, 64)))
        _, code = model.speaker_encode(rng.standard_normal((1, 16, 64)))
        maps = []
        model.decode(content, code, maps)
        for layer, h in enumerate(maps):
            np.testing.assert_allclose(h.data.mean(axis=-1), code.alpha.data[:, layer], atol=1e-8)
            np.testing.assert_allclose(h.data.std(axis=-1), np.abs(code.beta.data[:, layer]), rtol=1e-2)

    def test_pooling_ignores_frame_repetition(self, model, rng):
        for block in model.speaker_encoder.blocks:
            zero_weights(block)
        z = rng.standard_normal((16, 40))
        with no_grad():
            base, _ = model.speaker_encode(z)
            doubled, _ = model.speaker_encode(np.repeat(z, 2, axis=-1))
        np.testing.assert_allclose(doubled.values.data, base.values.data, rtol=1e-6, atol=1e-12)

    def test_reconstruction_gradient_reaches_every_parameter(self, model, rng):
        z = rng.standard_normal((2, 16, 64))
        z_hat = model.reconstruct(z, rng=np.random.default_rng(0))
        recon_loss(z, z_hat).backward()
        for name, p in model.named_parameters():
            if NORMALIZED_BIAS.match(name):
                assert p.grad is None or np.allclose(p.grad, 0.0, atol=1e-8), name
            else:
                assert p.grad is not None and np.any(p.grad != 0), name

    def test_decode_rejects_batch_mismatch(self, model, rng):
        content = model.content_encode(rng.standard_normal((2, 16, 32)))
        _, code = model.speaker_encode(rng.standard_normal((3, 16, 32)))
        with pytest.raises(ShapeError):
            model.decode(content, code)

    def test_reconstruct_without_shuffle_is_convert(self, model, rng):
        z = rng.standard_normal((16, 64))
        with no_grad():
            a = model.reconstruct(z, shuffle=False)
            b = model.convert_codes(z, z)
        np.testing.assert_array_equal(a.data, b.data)

    def test_reconstruct_with_shuffle_needs_rng(self, model, rng):
        with pytest.raises(ShapeError):
            model.reconstruct(rng.standard_normal((16, 32)))

    def test_same_seed_same_weights(self, tiny_model_config):
        a = SRDModel(tiny_model_config, seed=11).state_dict()
        b = SRDModel(tiny_model_config, seed=11).state_dict()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_load_state_dict_rejects_wrong_shapes(self, model):
        state = model.state_dict()
        name = next(iter(state))
        state[name] = np.zeros((1, 1))
        with pytest.raises(ShapeError):
            model.load_state_dict(state)


@pytest.mark.unit
class TestTimeShuffle:
    @pytest.mark.parametrize("frames", [1, 7, 8, 128, 130])
    def test_preserves_frame_multiset(self, rng, frames):
        z = rng.standard_normal((4, frames))
        shuffled = time_shuffle(z, 8, np.random.default_rng(0))
        assert shuffled.shape == z.shape
        original = sorted(map(tuple, z.T))
        assert sorted(map(tuple, shuffled.T)) == original

    def test_moves_whole_chunks(self):
        z = np.arange(24, dtype=np.float64).reshape(1, 24)
        shuffled = time_shuffle(z, 8, np.random.default_rng(5))[0]
        chunks = [tuple(shuffled[i:i + 8]) for i in range(0, 24, 8)]
        assert sorted(chunks) == [tuple(range(0, 8)), tuple(range(8, 16)), tuple(range(16, 24))]

    def test_batched_tensor_gradient_flows(self, rng):
        z = Tensor(rng.standard_normal((2, 3, 16)), requires_grad=True)
        time_shuffle(z, 4, np.random.default_rng(1)).sum().backward()
        np.testing.assert_allclose(z.grad, 1.0)

    def test_rejects_empty_chunk(self, rng):
        with pytest.raises(ShapeError):
            time_shuffle(rng.standard_normal((2, 8)), 0, rng)
