import numpy as np
import pytest

from dropdt.data import TokenBatch
from dropdt.model import DropDT, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        state_dim=3,
        action_dim=2,
        n_layers=2,
        n_heads=2,
        embed_dim=32,
        context=6,
        dropout=0.0,
        max_timestep=64,
        max_dropspan=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng, config: ModelConfig, batch_size=4, with_pads=True) -> TokenBatch:
    B, K = batch_size, config.context
    ds = config.state_dim
    discrete = config.action_head == "categorical"
    rtg = rng.normal(size=(B, K)).astype(np.float32)
    obs = rng.normal(size=(B, K, ds)).astype(np.float32)
    if discrete:
        act = rng.integers(0, config.action_dim, size=(B, K)).astype(np.int64)
    else:
        act = rng.uniform(-1, 1, size=(B, K, config.action_dim)).astype(np.float32)
    pad = np.zeros((B, K), dtype=bool)
    timesteps = np.zeros((B, K), dtype=np.int64)
    spans = np.zeros((B, K), dtype=np.int64)
    for b in range(B):
        n_pad = int(rng.integers(0, K)) if with_pads else 0
        pad[b, :n_pad] = True
        start = int(rng.integers(0, config.max_timestep - K))
        timesteps[b, n_pad:] = start + np.arange(K - n_pad)
        for j in range(n_pad, K):
            limit = min(int(timesteps[b, j]), config.max_dropspan)
            spans[b, j] = rng.integers(0, limit + 1)
    return TokenBatch(
        rtg=rtg,
        obs=obs,
        act=act,
        timesteps=timesteps,
        drop_spans=spans,
        pad_mask=pad,
        mask_token_flags=spans > 0,
        next_obs=rng.normal(size=(B, K, ds)).astype(np.float32),
        next_rtg=rng.normal(size=(B, K)).astype(np.float32),
        next_valid=~pad,
    )


def copy_matching_params(src: DropDT, dst: DropDT) -> None:
    """Copy every parameter dst shares (by name and shape) with src."""
    import torch

    src_params = dict(src.named_parameters())
    with torch.no_grad():
        for name, p in dst.named_parameters():
            if name in src_params and src_params[name].shape == p.shape:
                p.copy_(src_params[name])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
