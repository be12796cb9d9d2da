import pytest
import torch
from pydantic import ValidationError

from imputad.denoiser import (
    DenoiserConfig,
    DenoiserInput,
    build_denoiser,
    is_untrained,
    predict_noise,
    reference_values,
)
from imputad.errors import ConfigError, InferenceError
from imputad.masking import grating_masks

from tests.conftest import TINY_T, tiny_denoiser_config


def _perturb_head(model):
    with torch.no_grad():
        gen = torch.Generator().manual_seed(0)
        for layer in [model.output_projection2] + [block.output_projection for block in model.residual_layers]:
            layer.weight.copy_(0.1 * torch.randn(layer.weight.shape, generator=gen))
    return model


def _input(state, x0, mask, t=3, policy=0, mode="conditional"):
    return DenoiserInput.build(state, reference_values(state, x0, mode), mask, t, policy)


def test_same_seed_same_parameters():
    a = build_denoiser(tiny_denoiser_config(), n_features=2, seed=3)
    b = build_denoiser(tiny_denoiser_config(), n_features=2, seed=3)
    c = build_denoiser(tiny_denoiser_config(), n_features=2, seed=4)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_fresh_network_predicts_zero_noise(tiny_model):
    x0 = torch.randn(20, 2)
    mask = torch.as_tensor(grating_masks(20, 2).m0, dtype=torch.float32)

    out = predict_noise(tiny_model, _input(torch.randn(20, 2), x0, mask))

    assert out.shape == (20, 2)
    assert torch.count_nonzero(out) == 0
    assert is_untrained(tiny_model)


def test_batched_output_shape(tiny_model):
    _perturb_head(tiny_model)
    mask = torch.as_tensor(grating_masks(20, 2).m1, dtype=torch.float32)
    state = torch.randn(3, 20, 2)
    inp = DenoiserInput.build(state, state, mask, torch.tensor([1, 3, TINY_T]), 1)

    out = predict_noise(tiny_model, inp)

    assert out.shape == (3, 20, 2)
    assert torch.all(torch.isfinite(out))
    assert not is_untrained(tiny_model)


def test_channels_respect_the_mask():
    state = torch.randn(20, 2)
    x0 = torch.randn(20, 2)
    mask = torch.as_tensor(grating_masks(20, 2).m0, dtype=torch.float32)

    inp = _input(state, x0, mask)

    assert torch.all(inp.masked_channel[mask == 1] == 0)
    assert torch.all(inp.reference_channel[mask == 0] == 0)
    torch.testing.assert_close(inp.reference_channel[mask == 1], x0[mask == 1])


def test_prediction_ignores_state_on_observed_cells(tiny_model):
    _perturb_head(tiny_model)
    mask = torch.as_tensor(grating_masks(20, 2).m0, dtype=torch.float32)
    x0 = torch.randn(20, 2)
    state = torch.randn(20, 2)
    altered = state + 5.0 * mask

    a = predict_noise(tiny_model, _input(state, x0, mask))
    b = predict_noise(tiny_model, _input(altered, x0, mask))

    torch.testing.assert_close(a, b)


def test_reference_modes():
    noise, x0 = torch.zeros(2, 2), torch.ones(2, 2)
    assert torch.equal(reference_values(noise, x0, "unconditional"), noise)
    assert torch.equal(reference_values(noise, x0, "conditional"), x0)
    with pytest.raises(ConfigError):
        reference_values(noise, x0, "oracle")


def _random_channels(K, seed=2):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(20, K, generator=gen), torch.randn(20, K, generator=gen)


def test_without_temporal_attention_timestamps_do_not_interact():
    model = _perturb_head(build_denoiser(tiny_denoiser_config(use_temporal=False), n_features=3, seed=1))
    state, reference = _random_channels(3)
    mask = torch.as_tensor(grating_masks(20, 3).m0, dtype=torch.float32)
    altered_state, altered_reference = state.clone(), reference.clone()
    altered_state[7] += 3.0
    altered_reference[7] -= 3.0

    with torch.no_grad():
        a = predict_noise(model, DenoiserInput.build(state, reference, mask, 2, 0))
        b = predict_noise(model, DenoiserInput.build(altered_state, altered_reference, mask, 2, 0))

    others = torch.arange(20) != 7
    torch.testing.assert_close(a[others], b[others])
    assert not torch.allclose(a[7], b[7])


def test_without_spatial_attention_features_are_exchangeable():
    model = _perturb_head(build_denoiser(tiny_denoiser_config(use_spatial=False), n_features=3, seed=1))
    state, reference = _random_channels(3)
    mask = torch.as_tensor(grating_masks(20, 3).m1, dtype=torch.float32)
    perm = torch.tensor([2, 0, 1])

    with torch.no_grad():
        a = predict_noise(model, DenoiserInput.build(state, reference, mask, 2, 1))
        b = predict_noise(model, DenoiserInput.build(state[:, perm], reference[:, perm], mask[:, perm], 2, 1,
                                                     feature_index=perm))

    torch.testing.assert_close(b, a[:, perm])


def test_spatial_attention_mixes_features():
    model = _perturb_head(build_denoiser(tiny_denoiser_config(use_temporal=False), n_features=3, seed=1))
    state, reference = _random_channels(3)
    mask = torch.as_tensor(grating_masks(20, 3).m1, dtype=torch.float32)
    altered = reference.clone()
    altered[:, 0] += 3.0

    with torch.no_grad():
        a = predict_noise(model, DenoiserInput.build(state, reference, mask, 2, 1))
        b = predict_noise(model, DenoiserInput.build(state, altered, mask, 2, 1))

    assert not torch.allclose(a[:, 1:], b[:, 1:])


def test_shape_and_step_checks(tiny_model):
    mask = torch.ones(20, 3)
    with pytest.raises(InferenceError, match="features"):
        predict_noise(tiny_model, DenoiserInput.build(torch.zeros(20, 3), torch.zeros(20, 3), mask, 1, 0))
    mask = torch.ones(20, 2)
    with pytest.raises(InferenceError, match="diffusion step"):
        predict_noise(tiny_model, DenoiserInput.build(torch.zeros(20, 2), torch.zeros(20, 2), mask, TINY_T + 1, 0))


def test_attention_switches():
    model = build_denoiser(tiny_denoiser_config(use_spatial=False), n_features=2)
    assert all(block.feature_layer is None for block in model.residual_layers)
    assert all(block.time_layer is not None for block in model.residual_layers)

    # a single feature skips spatial attention without failing
    single = _perturb_head(build_denoiser(tiny_denoiser_config(), n_features=1))
    out = predict_noise(single, DenoiserInput.build(torch.randn(20, 1), torch.randn(20, 1), torch.zeros(20, 1), 2, 2))
    assert out.shape == (20, 1)


def test_config_validation():
    with pytest.raises(ValidationError):
        DenoiserConfig(hidden_dim=30, n_heads=8)
    with pytest.raises(ValidationError):
        DenoiserConfig(step_embed_dim=15)
