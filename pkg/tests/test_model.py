import math

import numpy as np
import pytest
import torch

from conftest import copy_matching_params, random_batch, tiny_config

from dropdt.errors import ConfigurationError, InvalidInputError
from dropdt.model import DropDT, RolloutContext, gaussian_action_nll


def state_rtg_token_cols(K):
    cols = []
    for j in range(K):
        cols.extend([3 * j, 3 * j + 1])
    return cols


class TestTokenEncoding:
    def test_explicit_minus_none_is_psi_of_k(self, rng):
        explicit = DropDT(tiny_config(dropspan_mode="explicit"), seed=1).eval()
        none = DropDT(tiny_config(dropspan_mode="none"), seed=2).eval()
        copy_matching_params(explicit, none)
        batch = random_batch(rng, explicit.config, with_pads=False)
        batch.drop_spans[:] = 0
        batch.mask_token_flags[:] = False
        tok_e, _ = explicit.encode_tokens(batch)
        tok_n, _ = none.encode_tokens(batch)
        psi0 = explicit.embed_dropspan.weight[0]
        K = explicit.config.context
        for col in range(3 * K):
            if col % 3 == 2:  # action tokens never carry the span embedding
                assert torch.equal(tok_e[:, col], tok_n[:, col])
            else:
                assert torch.allclose(tok_e[:, col] - tok_n[:, col], psi0.expand_as(tok_n[:, col]))

    def test_implicit_at_zero_span_equals_none_mode(self, rng):
        implicit = DropDT(
            tiny_config(dropspan_mode="implicit", use_timestep_embedding=True), seed=3
        ).eval()
        none = DropDT(tiny_config(dropspan_mode="none", use_timestep_embedding=True), seed=4).eval()
        copy_matching_params(implicit, none)
        batch = random_batch(rng, implicit.config, with_pads=False)
        batch.drop_spans[:] = 0
        batch.mask_token_flags[:] = False
        tok_i, _ = implicit.encode_tokens(batch)
        tok_n, _ = none.encode_tokens(batch)
        assert torch.equal(tok_i, tok_n)

    def test_implicit_shifts_timestep_to_source_frame(self, rng):
        model = DropDT(
            tiny_config(dropspan_mode="implicit", use_timestep_embedding=True), seed=5
        ).eval()
        batch = random_batch(rng, model.config, with_pads=False)
        batch.drop_spans[:] = 0
        batch.mask_token_flags[:] = False
        base, _ = model.encode_tokens(batch)
        shifted = random_batch(rng, model.config, with_pads=False)
        for f in ("rtg", "obs", "act", "timesteps", "pad_mask"):
            setattr(shifted, f, getattr(batch, f).copy())
        shifted.drop_spans = batch.drop_spans.copy()
        shifted.mask_token_flags = batch.mask_token_flags.copy()
        shifted.drop_spans[0, 3] = 2  # source frame is t-2
        tok, _ = model.encode_tokens(shifted)
        w = model.embed_timestep.weight
        t = int(batch.timesteps[0, 3])
        delta = w[t - 2] - w[t]
        assert torch.allclose(tok[0, 9] - base[0, 9], delta, atol=1e-6)
        assert torch.allclose(tok[0, 10] - base[0, 10], delta, atol=1e-6)
        assert torch.equal(tok[0, 11], base[0, 11])  # action token unshifted

    def test_action_tokens_ignore_span(self, rng):
        model = DropDT(tiny_config(), seed=6).eval()
        a = random_batch(rng, model.config, with_pads=False)
        a.mask_token_flags[:] = False
        b = random_batch(rng, model.config, with_pads=False)
        for f in ("rtg", "obs", "act", "timesteps", "pad_mask", "mask_token_flags"):
            setattr(b, f, getattr(a, f).copy())
        b.drop_spans = a.drop_spans + 3
        tok_a, _ = model.encode_tokens(a)
        tok_b, _ = model.encode_tokens(b)
        for j in range(model.config.context):
            assert torch.equal(tok_a[:, 3 * j + 2], tok_b[:, 3 * j + 2])

    def test_span_clamped_at_table_edge(self, rng):
        model = DropDT(tiny_config(max_dropspan=4), seed=7).eval()
        a = random_batch(rng, model.config, with_pads=False)
        a.mask_token_flags[:] = False
        b = random_batch(rng, model.config, with_pads=False)
        for f in ("rtg", "obs", "act", "timesteps", "pad_mask", "mask_token_flags"):
            setattr(b, f, getattr(a, f).copy())
        a.drop_spans = np.full_like(a.drop_spans, 4)
        b.drop_spans = np.full_like(b.drop_spans, 11)
        tok_a, _ = model.encode_tokens(a)
        tok_b, _ = model.encode_tokens(b)
        assert torch.equal(tok_a, tok_b)

    def test_disabled_timestep_embedding_is_inert(self, rng):
        model = DropDT(tiny_config(use_timestep_embedding=False), seed=8).eval()
        a = random_batch(rng, model.config, with_pads=False)
        a.mask_token_flags[:] = False
        b = random_batch(rng, model.config, with_pads=False)
        for f in ("rtg", "obs", "act", "drop_spans", "pad_mask", "mask_token_flags"):
            setattr(b, f, getattr(a, f).copy())
        b.timesteps = a.timesteps + 5
        tok_a, _ = model.encode_tokens(a)
        tok_b, _ = model.encode_tokens(b)
        assert torch.equal(tok_a, tok_b)

    @pytest.mark.parametrize("kind", ["shared", "separate"])
    def test_mask_token_replaces_content(self, rng, kind):
        model = DropDT(tiny_config(mask_token=kind), seed=9).eval()
        a = random_batch(rng, model.config, with_pads=False)
        b = random_batch(rng, model.config, with_pads=False)
        for f in ("act", "timesteps", "drop_spans", "pad_mask", "mask_token_flags"):
            setattr(b, f, getattr(a, f).copy())
        flagged = a.mask_token_flags
        b.rtg = np.where(flagged, a.rtg + 99.0, a.rtg)
        b.obs = np.where(flagged[..., None], a.obs + 99.0, a.obs)
        tok_a, _ = model.encode_tokens(a)
        tok_b, _ = model.encode_tokens(b)
        assert torch.equal(tok_a, tok_b)

    def test_shared_vs_separate_mask_embeddings(self):
        shared = DropDT(tiny_config(mask_token="shared"), seed=10)
        separate = DropDT(tiny_config(mask_token="separate"), seed=10)
        assert shared.mask_embed_rtg is shared.mask_embed_state
        assert separate.mask_embed_rtg is not separate.mask_embed_state


class TestForward:
    def test_causality_under_token_perturbation(self, rng):
        model = DropDT(tiny_config(), seed=11).eval()
        for trial in range(5):
            batch = random_batch(rng, model.config, with_pads=False)
            tokens, valid = model.encode_tokens(batch)
            v = model.trunk(tokens, valid)
            cut = int(rng.integers(1, tokens.shape[1]))
            noised = tokens.clone()
            noised[:, cut:] += torch.from_numpy(
                rng.normal(size=noised[:, cut:].shape).astype(np.float32)
            )
            v2 = model.trunk(noised, valid)
            assert torch.equal(v[:, :cut], v2[:, :cut])

    def test_single_step_ignores_action_token(self, rng):
        model = DropDT(tiny_config(context=1), seed=12).eval()
        a = random_batch(rng, model.config, batch_size=2, with_pads=False)
        b = random_batch(rng, model.config, batch_size=2, with_pads=False)
        for f in ("rtg", "obs", "timesteps", "drop_spans", "pad_mask", "mask_token_flags"):
            setattr(b, f, getattr(a, f).copy())
        out_a = model.forward(a)
        out_b = model.forward(b)
        assert torch.equal(out_a["mean"], out_b["mean"])

    def test_eval_mode_deterministic(self, rng):
        model = DropDT(tiny_config(dropout=0.1), seed=13).eval()
        batch = random_batch(rng, model.config)
        out1 = model.forward(batch)
        out2 = model.forward(batch)
        assert torch.equal(out1["mean"], out2["mean"])

    def test_row_permutation_equivariance(self, rng):
        model = DropDT(tiny_config(), seed=14).eval()
        batch = random_batch(rng, model.config, batch_size=6)
        out = model.forward(batch)["mean"]
        perm = np.array([3, 0, 5, 1, 4, 2])
        for f in (
            "rtg",
            "obs",
            "act",
            "timesteps",
            "drop_spans",
            "pad_mask",
            "mask_token_flags",
            "next_obs",
            "next_rtg",
            "next_valid",
        ):
            setattr(batch, f, getattr(batch, f)[perm])
        out_p = model.forward(batch)["mean"]
        assert torch.equal(out_p, out[torch.from_numpy(perm)])

    def test_padded_keys_do_not_leak(self, rng):
        # changing content at padded positions never changes real outputs
        model = DropDT(tiny_config(), seed=15).eval()
        batch = random_batch(rng, model.config, batch_size=3, with_pads=False)
        batch.pad_mask[:, :2] = True
        out = model.forward(batch)["mean"][:, 2:]
        batch.obs[:, :2] += 50.0
        batch.rtg[:, :2] -= 10.0
        out2 = model.forward(batch)["mean"][:, 2:]
        assert torch.equal(out, out2)

    def test_aux_heads_present_when_enabled(self, rng):
        model = DropDT(tiny_config(predict_state=True, predict_rtg=True), seed=16).eval()
        batch = random_batch(rng, model.config)
        out = model.forward(batch)
        assert out["state_pred"].shape == (4, model.config.context, 3)
        assert out["rtg_pred"].shape == (4, model.config.context)


class TestLoss:
    def test_gaussian_closed_form_at_mode(self, rng):
        # mu = a and sigma = 1 at every position -> 0.5*log(2*pi) per dim
        model = DropDT(tiny_config(), seed=17).eval()
        with torch.no_grad():
            model.action_mean.weight.zero_()
            model.action_mean.bias.copy_(torch.tensor([0.3, -0.2]))
            model.action_log_std.weight.zero_()
            model.action_log_std.bias.zero_()
        batch = random_batch(rng, model.config)
        batch.act = np.broadcast_to(
            np.array([0.3, -0.2], dtype=np.float32), batch.act.shape
        ).copy()
        loss, parts = model.loss(batch)
        expect = 0.5 * math.log(2 * math.pi) * model.config.action_dim
        assert float(loss.detach()) == pytest.approx(expect, abs=1e-6)

    def test_categorical_uniform_logits(self, rng):
        model = DropDT(
            tiny_config(action_head="categorical", action_dim=5), seed=18
        ).eval()
        with torch.no_grad():
            model.action_logits.weight.zero_()
            model.action_logits.bias.zero_()
        batch = random_batch(rng, model.config)
        loss, _ = model.loss(batch)
        assert float(loss.detach()) == pytest.approx(math.log(5.0), abs=1e-6)

    def test_matches_elementwise_oracle(self, rng):
        model = DropDT(tiny_config(), seed=19).eval()
        batch = random_batch(rng, model.config)
        loss, _ = model.loss(batch)
        out = model.forward(batch)
        mean = out["mean"].detach().numpy().astype(np.float64)
        std = np.exp(out["log_std"].detach().numpy().astype(np.float64))
        a = batch.act.astype(np.float64)
        # independent elementwise density evaluation
        dens = (
            np.log(1.0 / (std * np.sqrt(2 * np.pi)))
            - 0.5 * ((a - mean) / std) ** 2
        )
        nll = -dens.sum(axis=-1)
        expect = nll[~batch.pad_mask].mean()
        assert float(loss.detach()) == pytest.approx(expect, abs=1e-5)

    def test_gradients_match_finite_differences(self):
        a = torch.tensor([[0.37]], dtype=torch.float64)
        mean = torch.tensor([[0.12]], dtype=torch.float64, requires_grad=True)
        log_std = torch.tensor([[-0.5]], dtype=torch.float64, requires_grad=True)
        nll = gaussian_action_nll(mean, log_std, a).sum()
        nll.backward()
        eps = 1e-6
        for param, grad in ((mean, mean.grad), (log_std, log_std.grad)):
            with torch.no_grad():
                up = param + eps
                down = param - eps
            if param is mean:
                f_up = gaussian_action_nll(up, log_std.detach(), a).sum()
                f_down = gaussian_action_nll(down, log_std.detach(), a).sum()
            else:
                f_up = gaussian_action_nll(mean.detach(), up, a).sum()
                f_down = gaussian_action_nll(mean.detach(), down, a).sum()
            fd = float((f_up - f_down) / (2 * eps))
            assert float(grad) == pytest.approx(fd, rel=1e-4)

    def test_pad_positions_do_not_contribute(self, rng):
        model = DropDT(tiny_config(), seed=20).eval()
        batch = random_batch(rng, model.config, with_pads=False)
        batch.pad_mask[:, :3] = True
        loss, _ = model.loss(batch)
        batch.act = batch.act.copy()
        batch.act[:, :3] = 99.0  # absurd targets at padded positions
        loss2, _ = model.loss(batch)
        assert float(loss.detach()) == pytest.approx(float(loss2.detach()), abs=1e-7)

    def test_aux_losses_added_with_weight(self, rng):
        cfg = tiny_config(predict_state=True, predict_rtg=True, aux_loss_weight=0.0)
        model = DropDT(cfg, seed=21).eval()
        batch = random_batch(rng, model.config)
        loss0, parts0 = model.loss(batch)
        assert float(loss0.detach()) == pytest.approx(parts0["action_nll"], abs=1e-7)
        model.config.aux_loss_weight = 2.0
        loss2, parts2 = model.loss(batch)
        expect = parts2["action_nll"] + 2.0 * (parts2["state_mse"] + parts2["rtg_mse"])
        assert float(loss2.detach()) == pytest.approx(expect, abs=1e-5)


class TestParameterGroups:
    def test_partition_is_disjoint_and_exhaustive(self):
        model = DropDT(tiny_config(predict_state=True, predict_rtg=True, mask_token="separate"))
        groups = model.parameter_groups()
        ids = [id(p) for ps in groups.values() for p in ps]
        assert len(ids) == len(set(ids))
        assert set(ids) == {id(p) for p in model.parameters()}

    def test_none_mode_has_empty_span_group(self):
        model = DropDT(tiny_config(dropspan_mode="none"))
        assert model.parameter_groups()["dropspan_encoder"] == []

    def test_mask_embeddings_belong_to_trunk(self):
        model = DropDT(tiny_config(mask_token="separate"))
        groups = model.parameter_groups()
        trunk_ids = {id(p) for p in groups["trunk"]}
        assert id(model.mask_embed_state) in trunk_ids
        assert id(model.mask_embed_rtg) in trunk_ids

    def test_action_predictor_maps_state_outputs(self):
        model = DropDT(tiny_config())
        groups = model.parameter_groups()
        names = {id(p) for p in groups["action_predictor"]}
        assert id(model.action_mean.weight) in names
        assert id(model.action_log_std.weight) in names


class TestAct:
    def make_context(self, model, n_steps, rng):
        ctx = RolloutContext(state_dim=3, action_dim=2)
        for t in range(n_steps):
            ctx.append(1.0 - 0.1 * t, rng.normal(size=3), t, 0)
            ctx.set_last_action(rng.uniform(-1, 1, size=2))
        return ctx

    def test_mean_mode_repeatable(self, rng):
        model = DropDT(tiny_config(), seed=22).eval()
        ctx = self.make_context(model, 4, rng)
        a1 = model.act(ctx)
        a2 = model.act(ctx)
        assert np.array_equal(a1, a2)

    def test_context_eviction_keeps_last_k(self, rng):
        model = DropDT(tiny_config(context=4), seed=23).eval()
        long_ctx = self.make_context(model, 9, rng)
        short_ctx = RolloutContext(state_dim=3, action_dim=2)
        short_ctx.entries = [list(e) for e in long_ctx.entries[-4:]]
        assert np.array_equal(model.act(long_ctx), model.act(short_ctx))

    def test_empty_context_rejected(self):
        model = DropDT(tiny_config(), seed=24).eval()
        with pytest.raises(InvalidInputError):
            model.act(RolloutContext(state_dim=3, action_dim=2))

    def test_sample_collapses_at_tiny_sigma(self, rng):
        model = DropDT(tiny_config(), seed=25).eval()
        with torch.no_grad():
            model.action_log_std.weight.zero_()
            model.action_log_std.bias.fill_(-5.0)
        ctx = self.make_context(model, 3, rng)
        mean_action = model.act(ctx, mode="mean")
        sampled = model.act(ctx, mode="sample", rng=np.random.default_rng(0))
        assert np.max(np.abs(sampled - mean_action)) < 1e-2

    def test_actions_clipped_to_bounds(self, rng):
        model = DropDT(tiny_config(), seed=26).eval()
        with torch.no_grad():
            model.action_mean.bias.fill_(10.0)
        ctx = self.make_context(model, 2, rng)
        action = model.act(ctx)
        assert (action <= 1.0).all() and (action >= -1.0).all()

    def test_categorical_modes(self, rng):
        model = DropDT(tiny_config(action_head="categorical", action_dim=4), seed=27).eval()
        ctx = RolloutContext(state_dim=3, action_dim=4, discrete=True)
        for t in range(3):
            ctx.append(0.5, rng.normal(size=3), t, 0)
            ctx.set_last_action(int(rng.integers(0, 4)))
        greedy = model.act(ctx, mode="mean")
        assert isinstance(greedy, int) and 0 <= greedy < 4
        sampled = model.act(ctx, mode="sample", rng=np.random.default_rng(1))
        assert 0 <= sampled < 4


class TestConfigValidation:
    def test_bad_head_rejected(self):
        with pytest.raises(ConfigurationError):
            tiny_config(action_head="softmax").validate()

    def test_dim_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            tiny_config(embed_dim=33).validate()

    def test_bad_dropspan_mode(self):
        with pytest.raises(ConfigurationError):
            tiny_config(dropspan_mode="magic").validate()
