import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from diffrestore.denoiser import (
    DenoiserConfig,
    PromptBlock,
    PromptDenoiser,
    TransformerBlock,
    timestep_embedding,
)


def randomize_(module: torch.nn.Module, seed: int) -> None:
    """Replace every parameter with seeded, fan-in-scaled noise.

    Kills the zero-initialized projections (which would block gradient flow
    upstream) while keeping activations O(1), so finite differences stay
    well-conditioned.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            if p.ndim >= 2:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                p.copy_(noise * fan_in**-0.5)
            else:
                # norm scales / temperatures / biases: stay near their
                # nominal operating point
                p.copy_(1.0 + 0.2 * noise)


def sample_entries(params: list[torch.Tensor], n: int, seed: int):
    """n (tensor_index, flat_index) picks, uniform over all scalar entries."""
    rng = np.random.default_rng(seed)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    picks = []
    for flat in rng.integers(0, total, size=n):
        for ti, s in enumerate(sizes):
            if flat < s:
                picks.append((ti, int(flat)))
                break
            flat -= s
    return picks


def check_gradients(loss_fn, params, picks, h=1e-5, tol=1e-4):
    """Central finite differences vs backprop for the sampled entries."""
    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    backprop = [p.grad.detach().clone().reshape(-1) for p in params]
    for ti, idx in picks:
        flat = params[ti].data.reshape(-1)
        old = flat[idx].item()
        with torch.no_grad():
            flat[idx] = old + h
            f_plus = float(loss_fn())
            flat[idx] = old - h
            f_minus = float(loss_fn())
            flat[idx] = old
        fd = (f_plus - f_minus) / (2.0 * h)
        bp = float(backprop[ti][idx])
        denom = max(abs(fd), abs(bp))
        if denom >= 1e-6:
            assert abs(fd - bp) / denom < tol, (ti, idx, fd, bp)
        else:
            # both gradients at the finite-difference noise floor
            assert abs(fd - bp) < 1e-10, (ti, idx, fd, bp)


class TestTimestepEmbedding:
    def test_t_zero_alternates(self):
        emb = timestep_embedding(0, 8)
        assert torch.equal(emb, torch.tensor([0.0, 1.0] * 4))

    def test_deterministic(self):
        assert torch.equal(timestep_embedding(17, 32), timestep_embedding(17, 32))

    def test_adjacent_timesteps_differ(self):
        dim = 64
        e1 = timestep_embedding(1, dim, dtype=torch.float64)
        e2 = timestep_embedding(2, dim, dtype=torch.float64)
        assert int(((e1 - e2).abs() > 1e-6).sum()) >= dim // 2

    def test_matches_direct_formula(self):
        dim, t = 16, 9
        emb = timestep_embedding(t, dim, dtype=torch.float64)
        for i in range(dim // 2):
            angle = t / 10000.0 ** (2 * i / dim)
            assert float(emb[2 * i]) == pytest.approx(math.sin(angle), abs=1e-12)
            assert float(emb[2 * i + 1]) == pytest.approx(math.cos(angle), abs=1e-12)

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            timestep_embedding(3, 7)

    def test_batched(self):
        emb = timestep_embedding(torch.tensor([0, 5, 9]), 12)
        assert emb.shape == (3, 12)


class TestTransformerBlock:
    def test_zero_projections_identity(self, torch_gen):
        block = TransformerBlock(8, 2)
        with torch.no_grad():
            block.attn.project_out.weight.zero_()
            block.ffn.project_out.weight.zero_()
        x = torch.randn(2, 8, 16, 16, generator=torch_gen)
        assert torch.equal(block(x), x)

    def test_shape_contract(self, torch_gen):
        block = TransformerBlock(8, 2)
        randomize_(block, 0)
        x = torch.randn(1, 8, 16, 16, generator=torch_gen)
        assert block(x).shape == x.shape

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            TransformerBlock(9, 2)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        block = TransformerBlock(8, 2).double()
        randomize_(block, 3)
        x = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(4),
                        dtype=torch.float64)
        w = torch.randn(x.shape, generator=torch.Generator().manual_seed(5),
                        dtype=torch.float64)
        params = list(block.parameters())
        n = max(1, sum(p.numel() for p in params) // 100)  # 1% of weights
        picks = sample_entries(params, n, seed=6)
        check_gradients(lambda: (block(x) * w).sum(), params, picks)


class TestPromptBlock:
    def make(self, components=3, dim=8):
        return PromptBlock(dim, components, prompt_channels=8, prompt_size=4, heads=2)

    def test_singleton_softmax(self, torch_gen):
        block = self.make(components=1)
        x = torch.randn(2, 8, 8, 8, generator=torch_gen)
        w = block.component_weights(x)
        assert torch.equal(w, torch.ones(2, 1))

    def test_weights_sum_to_one(self, torch_gen):
        block = self.make(components=5)
        randomize_(block, 1)
        x = torch.randn(3, 8, 8, 8, generator=torch_gen)
        w = block.component_weights(x)
        assert w.shape == (3, 5)
        assert torch.allclose(w.sum(dim=1), torch.ones(3), atol=1e-6)

    def test_weights_depend_on_input(self):
        block = self.make(components=4)
        randomize_(block, 2)
        x1 = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(10))
        x2 = torch.randn(1, 8, 8, 8, generator=torch.Generator().manual_seed(11))
        with torch.no_grad():
            dw = (block.component_weights(x1) - block.component_weights(x2)).abs()
        assert float(dw.max()) > 0.0

    def test_zero_projection_identity(self, torch_gen):
        block = self.make()
        randomize_(block, 3)
        with torch.no_grad():
            block.output_proj.weight.zero_()
        x = torch.randn(2, 8, 8, 8, generator=torch_gen)
        assert torch.equal(block(x), x)

    def test_zero_components_rejected(self):
        with pytest.raises(ValueError):
            self.make(components=0)


class TestDenoiserConfig:
    def test_defaults_are_paper_faithful(self):
        cfg = DenoiserConfig()
        assert cfg.levels == 4
        assert len(cfg.prompt_spatial) == 3  # one prompt block per decoder stage
        assert cfg.level_channels == (48, 96, 192, 384)

    def test_validation(self):
        with pytest.raises(ValueError):
            DenoiserConfig(base_channels=8, heads=(3, 2, 4, 8))
        with pytest.raises(ValueError):
            DenoiserConfig(timestep_embed_dim=15)
        with pytest.raises(ValueError):
            DenoiserConfig(prompt_components=0)
        with pytest.raises(ValueError):
            DenoiserConfig(blocks=(1, 1, 1))

    def test_round_trip_dict(self):
        cfg = tiny_config()
        assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg


class TestPromptDenoiser:
    def test_output_shape(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        y = torch.randn(3, 32, 32, generator=torch_gen)
        c = torch.randn(3, 32, 32, generator=torch_gen)
        assert model(y, c, 1).shape == (3, 32, 32)

    def test_batched_shape(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        y = torch.randn(2, 3, 32, 32, generator=torch_gen)
        c = torch.randn(2, 3, 32, 32, generator=torch_gen)
        out = model(y, c, torch.tensor([1, 40]))
        assert out.shape == (2, 3, 32, 32)
        assert torch.isfinite(out).all()

    def test_timestep_changes_output(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        y = torch.randn(3, 32, 32, generator=torch_gen)
        c = torch.randn(3, 32, 32, generator=torch_gen)
        diff = (model(y, c, 1) - model(y, c, 50)).abs()
        assert float(diff.max()) > 0.0

    def test_condition_changes_output(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        y = torch.randn(3, 32, 32, generator=torch_gen)
        c = torch.randn(3, 32, 32, generator=torch_gen)
        permuted = c[[1, 2, 0]]
        diff = (model(y, c, 5) - model(y, permuted, 5)).abs()
        assert float(diff.max()) > 0.0

    def test_divisibility_violation(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        y = torch.randn(3, 20, 20, generator=torch_gen)
        with pytest.raises(ValueError, match="divisible"):
            model(y, y.clone(), 1)

    def test_shape_mismatch(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        with pytest.raises(ValueError, match="mismatch"):
            model(
                torch.randn(3, 32, 32, generator=torch_gen),
                torch.randn(3, 32, 16, generator=torch_gen),
                1,
            )

    def test_non_finite_parameter_detected(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        with torch.no_grad():
            model.decoder.output.weight[0, 0, 0, 0] = float("nan")
        y = torch.randn(3, 32, 32, generator=torch_gen)
        with pytest.raises(FloatingPointError, match="non-finite"):
            model(y, y.clone(), 1)

    def test_every_block_is_identity_at_init(self, torch_gen):
        model = PromptDenoiser(tiny_config())
        n_checked = 0
        for module in model.modules():
            if isinstance(module, TransformerBlock):
                dim = module.norm1.weight.numel()
                x = torch.randn(1, dim, 8, 8, generator=torch_gen)
                assert torch.equal(module(x), x)
                n_checked += 1
            elif isinstance(module, PromptBlock):
                dim = module.weight_head.in_features
                x = torch.randn(1, dim, 8, 8, generator=torch_gen)
                assert torch.equal(module(x), x)
                n_checked += 1
        assert n_checked >= 7  # 4 encoder+latent, 3 prompts, decoder blocks...

    def test_freeze_mask_covers_exactly_encoder(self):
        model = PromptDenoiser(tiny_config())
        mask = model.trainable_mask(freeze_encoder=True)
        assert all(not v for n, v in mask.items() if n.startswith("encoder."))
        assert all(v for n, v in mask.items() if n.startswith("decoder."))
        assert any(n.startswith("encoder.") for n in mask)
        assert all(model.trainable_mask(freeze_encoder=False).values())

    def test_end_to_end_gradients(self):
        cfg = tiny_config()
        model = PromptDenoiser(cfg).double()
        randomize_(model, 7)
        gen = torch.Generator().manual_seed(18)
        y = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)
        c = torch.randn(3, 16, 16, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            # central differences of an L1 norm are only valid away from its
            # kinks; this base point keeps every output clear of zero
            assert float(model(y, c, 3).abs().min()) > 1e-3
        params = list(model.parameters())
        picks = sample_entries(params, 40, seed=9)
        check_gradients(lambda: model(y, c, 3).abs().sum(), params, picks)
