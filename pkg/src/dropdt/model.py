"""Return-conditioned causal transformer with drop-span awareness.

Each timestep contributes three tokens (reward-to-go, state, action). The
action distribution for step t is read from the trunk output at the state
token of step t, so it conditions on everything up to and including the
current (possibly stale) observation. How staleness is communicated is
selected by `dropspan_mode`:

  explicit -- a learned embedding of the span k is added to the reward-to-go
              and state tokens (never to action tokens)
  implicit -- no span embedding; the timestep embedding of reward-to-go and
              state tokens is shifted to the source frame, w(t - k)
  none     -- staleness is not communicated at all (the plain decision
              transformer baseline; with no train-time dropping this IS
              vanilla behavior, one codepath)
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import TokenBatch
from .errors import ConfigurationError, InvalidInputError, NumericalError
from .rngs import child_seed

logger = logging.getLogger(__name__)

_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu, "tanh": torch.tanh}


def gaussian_action_nll(mean, log_std, target):
    """Diagonal-Gaussian negative log-likelihood, summed over action dims.

    Shapes: [..., action_dim] -> [...]. This is the closed form
    0.5*log(2*pi) + log_std + 0.5*((a - mu)/sigma)^2 per dimension.
    """
    inv_var = torch.exp(-2.0 * log_std)
    per_dim = 0.5 * math.log(2.0 * math.pi) + log_std + 0.5 * (target - mean) ** 2 * inv_var
    return per_dim.sum(dim=-1)


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int  # continuous dimensionality, or number of discrete actions
    action_head: str = "gaussian"  # gaussian | categorical
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context: int = 20
    dropout: float = 0.1
    activation: str = "relu"
    max_timestep: int = 1024
    max_dropspan: int = 64
    use_timestep_embedding: bool = False
    dropspan_mode: str = "explicit"  # explicit | implicit | none
    predict_state: bool = False
    predict_rtg: bool = False
    aux_loss_weight: float = 1.0
    mask_token: str = "off"  # off | shared | separate
    log_std_bounds: tuple = (-5.0, 2.0)
    action_low: float = -1.0
    action_high: float = 1.0

    def validate(self) -> None:
        if self.context < 1:
            raise ConfigurationError("context must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigurationError("embed_dim must be divisible by n_heads")
        if self.max_dropspan < 1:
            raise ConfigurationError("max_dropspan must be >= 1")
        if self.action_head not in ("gaussian", "categorical"):
            raise ConfigurationError(f"unknown action_head {self.action_head!r}")
        if self.dropspan_mode not in ("explicit", "implicit", "none"):
            raise ConfigurationError(f"unknown dropspan_mode {self.dropspan_mode!r}")
        if self.mask_token not in ("off", "shared", "separate"):
            raise ConfigurationError(f"unknown mask_token {self.mask_token!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.log_std_bounds[0] >= self.log_std_bounds[1]:
            raise ConfigurationError("log_std_bounds must be (low, high) with low < high")


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.n_heads = config.n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.attn_dropout = nn.Dropout(config.dropout)
        self.resid_dropout = nn.Dropout(config.dropout)

    def forward(self, x, allowed):
        # allowed: [B, T, T] bool, True where query may attend to key
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        att = self.attn_dropout(F.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.resid_dropout(self.proj(y))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, 4 * d)
        self.out = nn.Linear(4 * d, d)
        self.mlp_dropout = nn.Dropout(config.dropout)
        self.act = _ACTIVATIONS[config.activation]

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp_dropout(self.out(self.act(self.fc(self.ln2(x)))))


class DropDT(nn.Module):
    """The policy network; one codepath covers all span/placeholder variants."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        config.validate()
        self.config = config
        if seed is not None:
            torch.manual_seed(child_seed(seed, "model-init"))
        d = config.embed_dim

        self.embed_rtg = nn.Linear(1, d)
        self.embed_state = nn.Linear(config.state_dim, d)
        if config.action_head == "categorical":
            self.embed_action = nn.Embedding(config.action_dim, d)
        else:
            self.embed_action = nn.Linear(config.action_dim, d)
        if config.use_timestep_embedding:
            self.embed_timestep = nn.Embedding(config.max_timestep, d)
        if config.dropspan_mode == "explicit":
            self.embed_dropspan = nn.Embedding(config.max_dropspan + 1, d)
        if config.mask_token == "shared":
            self.mask_embed_state = nn.Parameter(torch.zeros(d))
            self.mask_embed_rtg = self.mask_embed_state
        elif config.mask_token == "separate":
            self.mask_embed_state = nn.Parameter(torch.zeros(d))
            self.mask_embed_rtg = nn.Parameter(torch.zeros(d))

        self.embed_ln = nn.LayerNorm(d)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)

        if config.action_head == "gaussian":
            self.action_mean = nn.Linear(d, config.action_dim)
            self.action_log_std = nn.Linear(d, config.action_dim)
        else:
            self.action_logits = nn.Linear(d, config.action_dim)
        if config.predict_state:
            self.state_head = nn.Linear(d, config.state_dim)
        if config.predict_rtg:
            self.rtg_head = nn.Linear(d, 1)

        self.apply(self._init_weights)
        if config.mask_token != "off":
            nn.init.normal_(self.mask_embed_state, std=0.02)
            if config.mask_token == "separate":
                nn.init.normal_(self.mask_embed_rtg, std=0.02)
        self._clamp_warned = False

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def _tensors(self, batch: TokenBatch):
        dev = next(self.parameters()).device
        to = lambda a, dt: torch.as_tensor(np.ascontiguousarray(a), dtype=dt, device=dev)
        act_dtype = torch.long if self.config.action_head == "categorical" else torch.float32
        return {
            "rtg": to(batch.rtg, torch.float32).unsqueeze(-1),
            "obs": to(batch.obs, torch.float32),
            "act": to(batch.act, act_dtype),
            "t": to(batch.timesteps, torch.long),
            "k": to(batch.drop_spans, torch.long),
            "valid": ~to(batch.pad_mask, torch.bool),
            "flags": to(batch.mask_token_flags, torch.bool),
        }

    def encode_tokens(self, batch: TokenBatch):
        """Assemble the interleaved (rtg, state, action) token sequence.

        Returns (tokens [B, 3K, d], valid [B, K]). Spans beyond the
        embedding table are clamped to its edge, never an error.
        """
        cfg = self.config
        ts = self._tensors(batch)
        e_g = self.embed_rtg(ts["rtg"])
        e_s = self.embed_state(ts["obs"])
        e_a = self.embed_action(ts["act"])

        if cfg.mask_token != "off":
            flags = ts["flags"].unsqueeze(-1)
            e_s = torch.where(flags, self.mask_embed_state.expand_as(e_s), e_s)
            e_g = torch.where(flags, self.mask_embed_rtg.expand_as(e_g), e_g)

        k = ts["k"]
        if cfg.dropspan_mode == "explicit":
            if bool((k > cfg.max_dropspan).any()) and not self._clamp_warned:
                logger.warning(
                    "drop-span exceeded %d; clamping to the embedding table edge",
                    cfg.max_dropspan,
                )
                self._clamp_warned = True
            psi = self.embed_dropspan(k.clamp(max=cfg.max_dropspan))
            e_s = e_s + psi
            e_g = e_g + psi

        if cfg.use_timestep_embedding:
            t = ts["t"].clamp(max=cfg.max_timestep - 1)
            w_action = self.embed_timestep(t)
            if cfg.dropspan_mode == "implicit":
                t_src = (ts["t"] - k).clamp(min=0, max=cfg.max_timestep - 1)
                w_obs = self.embed_timestep(t_src)
            else:
                w_obs = w_action
            e_g = e_g + w_obs
            e_s = e_s + w_obs
            e_a = e_a + w_action

        B, K, d = e_s.shape
        tokens = torch.stack([e_g, e_s, e_a], dim=2).reshape(B, 3 * K, d)
        return tokens, ts["valid"]

    def trunk(self, tokens, valid):
        """Run the causal transformer over an interleaved token sequence.

        Padded timesteps are invisible as attention keys; their own outputs
        are garbage and must be excluded downstream.
        """
        B, T, _ = tokens.shape
        valid_tok = valid.repeat_interleave(3, dim=1)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool, device=tokens.device))
        allowed = causal.unsqueeze(0) & valid_tok.unsqueeze(1)
        # pad queries still attend to themselves so softmax stays finite
        allowed = allowed | torch.eye(T, dtype=torch.bool, device=tokens.device)
        x = self.embed_dropout(self.embed_ln(tokens))
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_f(x)

    def forward(self, batch: TokenBatch):
        """Per-position action distribution plus optional auxiliary predictions.

        The action distribution is read at each state token; the auxiliary
        heads read the action token (the last token before the next step)
        and predict the true next state / reward-to-go.
        """
        cfg = self.config
        tokens, valid = self.encode_tokens(batch)
        v = self.trunk(tokens, valid)
        v_state = v[:, 1::3]
        v_action = v[:, 2::3]
        out = {"valid": valid}
        if cfg.action_head == "gaussian":
            out["mean"] = self.action_mean(v_state)
            low, high = cfg.log_std_bounds
            out["log_std"] = self.action_log_std(v_state).clamp(low, high)
        else:
            out["logits"] = self.action_logits(v_state)
        if cfg.predict_state:
            out["state_pred"] = self.state_head(v_action)
        if cfg.predict_rtg:
            out["rtg_pred"] = self.rtg_head(v_action).squeeze(-1)
        return out

    def loss(self, batch: TokenBatch):
        """Mean per-position action NLL over non-pad positions (+ aux MSE)."""
        cfg = self.config
        out = self.forward(batch)
        valid = out["valid"]
        n_valid = valid.sum()
        if n_valid == 0:
            raise InvalidInputError("batch contains no non-pad positions")

        if cfg.action_head == "gaussian":
            target = torch.as_tensor(batch.act, dtype=torch.float32)
            per_pos = gaussian_action_nll(out["mean"], out["log_std"], target)
        else:
            target = torch.as_tensor(batch.act, dtype=torch.long)
            per_pos = F.cross_entropy(
                out["logits"].transpose(1, 2), target, reduction="none"
            )
        nll = per_pos[valid].mean()
        parts = {"action_nll": float(nll.detach())}
        total = nll

        aux_valid = valid & torch.as_tensor(batch.next_valid, dtype=torch.bool)
        if cfg.predict_state:
            tgt = torch.as_tensor(batch.next_obs, dtype=torch.float32)
            mse = F.mse_loss(out["state_pred"][aux_valid], tgt[aux_valid])
            parts["state_mse"] = float(mse.detach())
            total = total + cfg.aux_loss_weight * mse
        if cfg.predict_rtg:
            tgt = torch.as_tensor(batch.next_rtg, dtype=torch.float32)
            mse = F.mse_loss(out["rtg_pred"][aux_valid], tgt[aux_valid])
            parts["rtg_mse"] = float(mse.detach())
            total = total + cfg.aux_loss_weight * mse

        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss: {parts}")
        return total, parts

    def parameter_groups(self):
        """Disjoint, exhaustive split: trunk / dropspan_encoder / action_predictor / other_heads.

        The action predictor is the head mapping state-token outputs to
        distribution parameters; the drop-span encoder is the span embedding
        table; auxiliary prediction heads are their own group; everything
        else (blocks, token/timestep/mask embeddings, norms) is trunk.
        """
        cfg = self.config
        groups = {"trunk": [], "dropspan_encoder": [], "action_predictor": [], "other_heads": []}
        head_prefixes = ("action_mean", "action_log_std", "action_logits")
        aux_prefixes = ("state_head", "rtg_head")
        for name, p in self.named_parameters():
            if name.startswith("embed_dropspan"):
                groups["dropspan_encoder"].append(p)
            elif name.startswith(head_prefixes):
                groups["action_predictor"].append(p)
            elif name.startswith(aux_prefixes):
                groups["other_heads"].append(p)
            else:
                groups["trunk"].append(p)
        assert cfg.dropspan_mode == "explicit" or not groups["dropspan_encoder"]
        return groups

    @torch.no_grad()
    def act(self, context: "RolloutContext", mode: str = "mean", rng=None):
        """Action for the newest context entry; requires eval-mode usage."""
        cfg = self.config
        if len(context) == 0:
            raise InvalidInputError("cannot act on an empty context")
        batch = context.to_batch(cfg.context, mask_flags=cfg.mask_token != "off")
        was_training = self.training
        self.eval()
        try:
            out = self.forward(batch)
        finally:
            if was_training:
                self.train()

        if cfg.action_head == "gaussian":
            mean = out["mean"][0, -1].cpu().numpy().astype(np.float64)
            if mode == "mean":
                action = mean
            elif mode == "sample":
                if rng is None:
                    raise InvalidInputError("sample mode needs an rng")
                std = np.exp(out["log_std"][0, -1].cpu().numpy().astype(np.float64))
                action = mean + std * rng.standard_normal(mean.shape)
            else:
                raise InvalidInputError(f"unknown action mode {mode!r}")
            return np.clip(action, cfg.action_low, cfg.action_high)

        logits = out["logits"][0, -1].cpu().numpy().astype(np.float64)
        if mode == "mean":
            return int(np.argmax(logits))
        if mode == "sample":
            if rng is None:
                raise InvalidInputError("sample mode needs an rng")
            p = np.exp(logits - logits.max())
            return int(rng.choice(len(p), p=p / p.sum()))
        raise InvalidInputError(f"unknown action mode {mode!r}")


@dataclass
class RolloutContext:
    """Running (rtg, obs, action, t, k) history fed to the model at test time.

    Entries are appended as frames are delivered; the newest entry's action
    stays a zero placeholder until the agent commits one (causality keeps it
    unread when predicting that step's action). An optional placeholder
    transform mirrors at test time what the matching training view did to
    dropped frames.
    """

    state_dim: int
    action_dim: int
    discrete: bool = False
    placeholder: str = "repeat_last"
    noise_scale: float = 0.1
    noise_stats: object = None
    noise_rng: object = None
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def append(self, rtg: float, obs, timestep: int, span: int) -> None:
        obs = np.asarray(obs, dtype=np.float64).copy()
        if span > 0:
            if self.placeholder == "zeros":
                obs = np.zeros_like(obs)
                rtg = 0.0
            elif self.placeholder == "noise":
                if self.noise_stats is None or self.noise_rng is None:
                    raise InvalidInputError("noise placeholder needs noise_stats and noise_rng")
                z = self.noise_rng.standard_normal(obs.shape)
                obs = obs + self.noise_scale * (
                    span * self.noise_stats.mean + math.sqrt(span) * self.noise_stats.std * z
                )
        action = 0 if self.discrete else np.zeros(self.action_dim)
        self.entries.append([float(rtg), obs, action, int(timestep), int(span)])

    def set_last_action(self, action) -> None:
        self.entries[-1][2] = action

    def to_batch(self, context_len: int, mask_flags: bool = False) -> TokenBatch:
        entries = self.entries[-context_len:]
        L, K = len(entries), context_len
        ds = self.state_dim
        rtg = np.zeros((1, K), dtype=np.float32)
        obs = np.zeros((1, K, ds), dtype=np.float32)
        act = np.zeros((1, K), dtype=np.int64) if self.discrete else np.zeros(
            (1, K, self.action_dim), dtype=np.float32
        )
        timesteps = np.zeros((1, K), dtype=np.int64)
        spans = np.zeros((1, K), dtype=np.int64)
        pad = np.ones((1, K), dtype=bool)
        flags = np.zeros((1, K), dtype=bool)
        for j, (g, s, a, t, k) in enumerate(entries):
            col = K - L + j
            rtg[0, col] = g
            obs[0, col] = s
            if self.discrete:
                act[0, col] = int(a)
            else:
                act[0, col] = np.asarray(a, dtype=np.float32)
            timesteps[0, col] = t
            spans[0, col] = k
            pad[0, col] = False
            if mask_flags and k > 0:
                flags[0, col] = True
        zeros_f = np.zeros((1, K), dtype=np.float32)
        return TokenBatch(
            rtg=rtg,
            obs=obs,
            act=act,
            timesteps=timesteps,
            drop_spans=spans,
            pad_mask=pad,
            mask_token_flags=flags,
            next_obs=np.zeros((1, K, ds), dtype=np.float32),
            next_rtg=zeros_f,
            next_valid=np.zeros((1, K), dtype=bool),
        )
