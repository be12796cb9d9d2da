"""
Noise-prediction network: stacked residual blocks, each holding a temporal and a
spatial transformer layer, conditioned on the diffusion step, the mask policy and
time/feature side information.

Tensors enter and leave as (B, W, K); inside the network they are laid out as
(B, C, K, W) so that 1x1 convolutions act per (time, feature) token.
"""
import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator

from imputad.errors import ConfigError, InferenceError
from imputad.masking import N_POLICIES

MODEL_VERSION = 1
REFERENCE_MODES = ("unconditional", "conditional")


class DenoiserConfig(BaseModel):
    n_blocks: int = Field(4, ge=1, description="Number of residual blocks")
    hidden_dim: int = Field(128, ge=1, description="Channels per (time, feature) token")
    n_heads: int = Field(8, ge=1, description="Attention heads in both transformer layers")
    step_embed_dim: int = Field(128, ge=2, description="Sinusoidal diffusion-step embedding size")
    time_embed_dim: int = Field(128, ge=2, description="Sinusoidal time-index embedding size")
    feature_embed_dim: int = Field(16, ge=1, description="Learned feature embedding size")
    ff_dim: int = Field(64, ge=1, description="Feed-forward width inside the transformer layers")
    T: int = Field(50, ge=1, description="Diffusion steps the step embedding covers")
    use_temporal: bool = Field(True, description="Temporal self-attention across the window axis")
    use_spatial: bool = Field(True, description="Spatial self-attention across the feature axis")

    @model_validator(mode="after")
    def _heads_divide_hidden(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim={self.hidden_dim} is not divisible by n_heads={self.n_heads}")
        if self.step_embed_dim % 2 or self.time_embed_dim % 2:
            raise ValueError("sinusoidal embedding sizes must be even")
        return self


def conv1d_with_init(in_channels: int, out_channels: int) -> nn.Conv1d:
    layer = nn.Conv1d(in_channels, out_channels, 1)
    nn.init.kaiming_normal_(layer.weight)
    return layer


def zero_init(layer: nn.Conv1d) -> nn.Conv1d:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def sinusoidal_embedding(position: torch.Tensor, dim: int) -> torch.Tensor:
    """(…,) positions -> (…, dim) interleaved sin/cos encoding."""
    position = position.unsqueeze(-1)
    div_term = 1.0 / torch.pow(10000.0, torch.arange(0, dim, 2, device=position.device, dtype=position.dtype) / dim)
    pe = torch.zeros(*position.shape[:-1], dim, device=position.device, dtype=position.dtype)
    pe[..., 0::2] = torch.sin(position * div_term)
    pe[..., 1::2] = torch.cos(position * div_term)
    return pe


def transformer_layer(heads: int, channels: int, ff_dim: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d_model=channels, nhead=heads, dim_feedforward=ff_dim, activation="gelu", dropout=0.0, batch_first=True
    )


class DiffusionEmbedding(nn.Module):
    def __init__(self, num_steps: int, embedding_dim: int = 128):
        super().__init__()
        self.register_buffer("embedding", self._build_embedding(num_steps, embedding_dim // 2), persistent=False)
        self.projection1 = nn.Linear(embedding_dim, embedding_dim)
        self.projection2 = nn.Linear(embedding_dim, embedding_dim)

    def forward(self, step_index: torch.Tensor) -> torch.Tensor:
        x = self.embedding[step_index].to(self.projection1.weight.dtype)
        x = F.silu(self.projection1(x))
        return F.silu(self.projection2(x))

    @staticmethod
    def _build_embedding(num_steps: int, dim: int) -> torch.Tensor:
        steps = torch.arange(num_steps).unsqueeze(1)
        frequencies = 10.0 ** (torch.arange(dim) / max(dim - 1, 1) * 4.0).unsqueeze(0)
        table = steps * frequencies
        return torch.cat([torch.sin(table), torch.cos(table)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, side_dim: int, channels: int, embed_dim: int, n_heads: int, ff_dim: int,
                 use_temporal: bool = True, use_spatial: bool = True):
        super().__init__()
        self.diffusion_projection = nn.Linear(embed_dim, channels)
        self.cond_projection = conv1d_with_init(side_dim, 2 * channels)
        self.mid_projection = conv1d_with_init(channels, 2 * channels)
        self.output_projection = zero_init(conv1d_with_init(channels, 2 * channels))
        self.time_layer = transformer_layer(n_heads, channels, ff_dim) if use_temporal else None
        self.feature_layer = transformer_layer(n_heads, channels, ff_dim) if use_spatial else None

    def forward_time(self, y: torch.Tensor, base_shape) -> torch.Tensor:
        B, channel, K, W = base_shape
        if self.time_layer is None or W == 1:
            return y
        y = y.reshape(B, channel, K, W).permute(0, 2, 3, 1).reshape(B * K, W, channel)
        y = self.time_layer(y)
        return y.reshape(B, K, W, channel).permute(0, 3, 1, 2).reshape(B, channel, K * W)

    def forward_feature(self, y: torch.Tensor, base_shape) -> torch.Tensor:
        B, channel, K, W = base_shape
        if self.feature_layer is None or K == 1:
            return y
        y = y.reshape(B, channel, K, W).permute(0, 3, 2, 1).reshape(B * W, K, channel)
        y = self.feature_layer(y)
        return y.reshape(B, W, K, channel).permute(0, 3, 2, 1).reshape(B, channel, K * W)

    def forward(self, x: torch.Tensor, side_info: torch.Tensor, step_emb: torch.Tensor):
        B, channel, K, W = x.shape
        base_shape = x.shape
        x = x.reshape(B, channel, K * W)

        y = x + self.diffusion_projection(step_emb).unsqueeze(-1)
        y = self.forward_time(y, base_shape)
        y = self.forward_feature(y, base_shape)
        y = self.mid_projection(y)

        side_dim = side_info.shape[1]
        y = y + self.cond_projection(side_info.reshape(B, side_dim, K * W))

        gate, filt = torch.chunk(y, 2, dim=1)
        y = self.output_projection(torch.sigmoid(gate) * torch.tanh(filt))

        residual, skip = torch.chunk(y, 2, dim=1)
        x = x.reshape(base_shape)
        return (x + residual.reshape(base_shape)) / math.sqrt(2.0), skip.reshape(base_shape)


class ImputationTransformer(nn.Module):
    """
    The learnable noise predictor epsilon_theta(X_t masked, t | reference, p).

    Holds its own config snapshot and version tag so a checkpoint can rebuild it.
    """

    def __init__(self, cfg: DenoiserConfig, n_features: int):
        super().__init__()
        self.config = cfg
        self.n_features = int(n_features)
        self.version = MODEL_VERSION
        channels = cfg.hidden_dim
        side_dim = cfg.time_embed_dim + cfg.feature_embed_dim

        self.diffusion_embedding = DiffusionEmbedding(cfg.T, cfg.step_embed_dim)
        self.policy_embedding = nn.Embedding(N_POLICIES, cfg.step_embed_dim)
        self.feature_embedding = nn.Embedding(self.n_features, cfg.feature_embed_dim)

        self.input_projection = conv1d_with_init(2, channels)
        self.side_projection = conv1d_with_init(side_dim, channels)
        self.output_projection1 = conv1d_with_init(channels, channels)
        self.output_projection2 = zero_init(conv1d_with_init(channels, 1))

        self.residual_layers = nn.ModuleList([
            ResidualBlock(side_dim, channels, cfg.step_embed_dim, cfg.n_heads, cfg.ff_dim,
                          use_temporal=cfg.use_temporal, use_spatial=cfg.use_spatial)
            for _ in range(cfg.n_blocks)
        ])

    def side_info(self, time_index: torch.Tensor, feature_index: torch.Tensor, K: int) -> torch.Tensor:
        """(B, W) time and (K,) feature indices -> (B, side_dim, K, W)."""
        B, W = time_index.shape
        dtype = self.output_projection1.weight.dtype
        time_embed = sinusoidal_embedding(time_index.to(dtype), self.config.time_embed_dim)
        time_embed = time_embed.unsqueeze(2).expand(-1, -1, K, -1)
        feature_embed = self.feature_embedding(feature_index).to(dtype)
        feature_embed = feature_embed.unsqueeze(0).unsqueeze(0).expand(B, W, -1, -1)
        side = torch.cat([time_embed, feature_embed], dim=-1)
        return side.permute(0, 3, 2, 1)

    def forward(self, masked_channel, reference_channel, t, policy, time_index, feature_index):
        B, W, K = masked_channel.shape
        channels = self.config.hidden_dim
        x = torch.stack([masked_channel, reference_channel], dim=1).transpose(2, 3)
        x = F.relu(self.input_projection(x.reshape(B, 2, K * W))).reshape(B, channels, K, W)

        step_emb = self.diffusion_embedding(t - 1) + self.policy_embedding(policy).to(x.dtype)
        side = self.side_info(time_index, feature_index, K)

        skip = []
        for layer in self.residual_layers:
            x, skip_connection = layer(x, side, step_emb)
            skip.append(skip_connection)

        x = torch.sum(torch.stack(skip), dim=0) / math.sqrt(len(self.residual_layers))
        x = x.reshape(B, channels, K * W) + self.side_projection(side.reshape(B, side.shape[1], K * W))
        x = F.relu(self.output_projection1(x))
        x = self.output_projection2(x)
        return x.reshape(B, K, W).transpose(1, 2)


@dataclass
class DenoiserInput:
    """
    One (batched) network input.

    ``masked_channel`` carries the diffused values on masked cells and
    ``reference_channel`` the reference on observed cells; each is zero elsewhere.
    All value tensors are (B, W, K) or unbatched (W, K).
    """
    masked_channel: torch.Tensor
    reference_channel: torch.Tensor
    mask: torch.Tensor
    t: Union[int, torch.Tensor]
    policy: Union[int, torch.Tensor]
    time_index: Optional[torch.Tensor] = None
    feature_index: Optional[torch.Tensor] = None

    @classmethod
    def build(cls, state, reference, mask, t, policy, time_index=None, feature_index=None) -> "DenoiserInput":
        """Apply the mask to both channels so the channel invariants hold by construction."""
        mask = torch.as_tensor(mask, dtype=state.dtype, device=state.device)
        return cls(
            masked_channel=state * (1.0 - mask),
            reference_channel=reference * mask,
            mask=mask,
            t=t,
            policy=policy,
            time_index=time_index,
            feature_index=feature_index,
        )


def build_denoiser(cfg: DenoiserConfig, n_features: int, seed: int = 0) -> ImputationTransformer:
    """
    Build a freshly initialized network.

    Convolutions use Kaiming-normal init; the output projection of every residual
    block and of the head start at zero, so the untrained network predicts zeros.
    Initialization draws from a private generator: the same seed gives
    bitwise-identical parameters and global RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return ImputationTransformer(cfg, n_features)


def _as_batch(value: Union[int, torch.Tensor], batch: int, device) -> torch.Tensor:
    value = torch.as_tensor(value, dtype=torch.long, device=device)
    if value.dim() == 0:
        value = value.expand(batch)
    return value


def predict_noise(model: ImputationTransformer, inp: DenoiserInput) -> torch.Tensor:
    """Predict the noise over the full W×K grid; output shape matches the input values."""
    masked = inp.masked_channel
    unbatched = masked.dim() == 2
    if unbatched:
        masked = masked.unsqueeze(0)
    reference = inp.reference_channel.unsqueeze(0) if unbatched else inp.reference_channel
    if masked.dim() != 3 or reference.shape != masked.shape:
        raise InferenceError(
            f"masked/reference channels must share a (B, W, K) shape, got "
            f"{tuple(inp.masked_channel.shape)} and {tuple(inp.reference_channel.shape)}"
        )
    B, W, K = masked.shape
    if K != model.n_features:
        raise InferenceError(f"input has {K} features, the network was built for {model.n_features}")
    device = masked.device

    t = _as_batch(inp.t, B, device)
    if torch.any(t < 1) or torch.any(t > model.config.T):
        raise InferenceError(f"diffusion step outside [1, {model.config.T}]")
    policy = _as_batch(inp.policy, B, device)
    time_index = inp.time_index if inp.time_index is not None else torch.arange(W, device=device)
    if time_index.dim() == 1:
        time_index = time_index.unsqueeze(0).expand(B, -1)
    if time_index.shape[-1] != W:
        raise InferenceError(f"time_index has length {time_index.shape[-1]}, window has {W}")
    feature_index = inp.feature_index if inp.feature_index is not None else torch.arange(K, device=device)
    if feature_index.shape[-1] != K:
        raise InferenceError(f"feature_index has length {feature_index.shape[-1]}, input has {K} features")

    out = model(masked, reference, t, policy, time_index, feature_index)
    if not torch.all(torch.isfinite(out)):
        raise InferenceError("non-finite activations in the noise prediction")
    return out[0] if unbatched else out


def reference_values(noise: torch.Tensor, x0: torch.Tensor, mode: str) -> torch.Tensor:
    """
    Values the reference channel is built from before masking.

    ``unconditional`` shows the ground-truth forward noise that took the observed
    cells to the current step, so their values never reach the network;
    ``conditional`` shows the raw observed values.
    """
    if mode == "unconditional":
        return noise
    if mode == "conditional":
        return x0
    raise ConfigError(f"unknown reference mode '{mode}', expected one of {REFERENCE_MODES}")


def is_untrained(model: ImputationTransformer) -> bool:
    """True while the output head still holds its all-zero initialization."""
    head = model.output_projection2
    return bool(torch.all(head.weight == 0) and torch.all(head.bias == 0))
