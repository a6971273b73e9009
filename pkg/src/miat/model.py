"""Maneuver-intention-aware transformer and its vanilla encoder-decoder baseline.

Both networks share the same trunk:

    motion encoder (per vehicle) -> social attention (per step)
    -> temporal multi-head attention -> final-step encoding

MIAT adds the lateral/longitudinal intention heads and decodes one Gaussian
trajectory per maneuver mode; the vanilla model decodes a single unconditioned
trajectory.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import (
    N_LATERAL,
    N_LONGITUDINAL,
    N_MODES,
    GaussianTrajectory,
    GridSpec,
    ManeuverDistribution,
    PredictionOutput,
    TrajectorySample,
)

SIGMA_FLOOR = 1e-4

_SOFTMAX_CHECK = {"enabled": False, "tol": 1e-6}
_KINK_LOG: Optional[list] = None


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every LeakyReLU input evaluated in the context."""
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def leaky_relu(x: torch.Tensor, slope: float) -> torch.Tensor:
    if _KINK_LOG is not None:
        _KINK_LOG.append((x.detach() > 0).reshape(-1))
    return F.leaky_relu(x, slope)


@contextlib.contextmanager
def softmax_checks(tol: float = 1e-6):
    """Assert inside the context that every attention/softmax row sums to 1."""
    prev = dict(_SOFTMAX_CHECK)
    _SOFTMAX_CHECK.update(enabled=True, tol=tol)
    try:
        yield
    finally:
        _SOFTMAX_CHECK.update(prev)


def _check_rows(p: torch.Tensor, valid: Optional[torch.Tensor] = None):
    if not _SOFTMAX_CHECK["enabled"]:
        return
    sums = p.detach().sum(-1)
    target = torch.ones_like(sums) if valid is None else valid.to(sums.dtype)
    err = (sums - target).abs().max().item() if sums.numel() else 0.0
    if not err <= _SOFTMAX_CHECK["tol"]:
        raise AssertionError(f"softmax rows deviate from 1 by {err:g}")


def masked_softmax(logits: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the last axis; rows without any valid entry become all-zero."""
    if mask is None:
        p = torch.softmax(logits, dim=-1)
        _check_rows(p)
        return p
    any_valid = mask.any(dim=-1, keepdim=True)
    logits = logits.masked_fill(~mask, float("-inf")).masked_fill(~any_valid, 0.0)
    p = torch.softmax(logits, dim=-1) * any_valid.to(logits.dtype)
    _check_rows(p, any_valid.squeeze(-1))
    return p


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 8
    n_encoder_layers: int = 1
    history_len: int = 16
    future_len: int = 25
    input_dim: int = 2
    ff_dim: int = 128
    mlp_hidden: int = 64
    leaky_slope: float = 0.1
    dropout: float = 0.0
    position_scale: float = 10.0
    prior_steps: int = 5
    share_ego_encoder: bool = False
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            object.__setattr__(self, "grid", GridSpec(**self.grid))
        for name in ("d_model", "n_heads", "n_encoder_layers", "history_len", "future_len",
                     "input_dim", "ff_dim", "mlp_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.position_scale <= 0:
            raise ValueError("position_scale must be positive")
        if not 0 <= self.prior_steps < self.history_len:
            raise ValueError("prior_steps must be in [0, history_len)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_linear(layer: nn.Linear) -> None:
    bound = math.sqrt(1.0 / layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if layer.bias is not None:
        nn.init.uniform_(layer.bias, -bound, bound)


def sinusoidal_encoding(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return pe.float()


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with explicit query/key/value maps."""

    def __init__(self, d_model: int, n_heads: int, out_proj: bool = True, bias: bool = True):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.W_q = nn.Linear(d_model, d_model, bias=bias)
        self.W_k = nn.Linear(d_model, d_model, bias=bias)
        self.W_v = nn.Linear(d_model, d_model, bias=bias)
        self.W_o = nn.Linear(d_model, d_model) if out_proj else None
        self.last_weights = None

    def forward(self, query, key, key_mask=None):
        *lead, Lq, d = query.shape
        Lk = key.shape[-2]
        h, dh = self.n_heads, self.d_head
        q = self.W_q(query).reshape(*lead, Lq, h, dh).transpose(-2, -3)
        k = self.W_k(key).reshape(*lead, Lk, h, dh).transpose(-2, -3)
        v = self.W_v(key).reshape(*lead, Lk, h, dh).transpose(-2, -3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        mask = None
        if key_mask is not None:
            mask = key_mask[..., None, None, :].expand_as(logits)
        w = masked_softmax(logits, mask)
        self.last_weights = w
        out = (w @ v).transpose(-2, -3).reshape(*lead, Lq, d)
        return self.W_o(out) if self.W_o is not None else out


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer (self-attention + GELU feed-forward)."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ff_dim)
        self.ff2 = nn.Linear(ff_dim, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        x = self.norm1(x + self.drop(self.attn(x, x, key_mask)))
        return self.norm2(x + self.drop(self.ff2(F.gelu(self.ff1(x)))))


class GLU(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(d_model, 2 * d_model)

    def forward(self, x):
        a, b = self.proj(x).chunk(2, dim=-1)
        return a * torch.sigmoid(b)


class MotionEncoder(nn.Module):
    """LeakyReLU embedding, latent projection, positional encoding, encoder layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.W_e = nn.Linear(cfg.input_dim, cfg.d_model)
        self.W_p = nn.Linear(cfg.d_model, cfg.d_model)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.n_encoder_layers))
        self.register_buffer("pe", sinusoidal_encoding(cfg.history_len, cfg.d_model), persistent=False)

    def forward(self, history, step_mask=None):
        if history.shape[-2:] != (self.cfg.history_len, self.cfg.input_dim):
            raise ValueError(f"history shape {tuple(history.shape)} does not match "
                             f"({self.cfg.history_len}, {self.cfg.input_dim})")
        e = leaky_relu(self.W_e(history / self.cfg.position_scale), self.cfg.leaky_slope)
        z = self.W_p(e) + self.pe.to(history.dtype)
        for layer in self.layers:
            z = layer(z, step_mask)
        return z


class SocialAttention(nn.Module):
    """Single-head attention from the ego encoding to the occupied grid cells."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.W_q = nn.Linear(d_model, d_model, bias=False)
        self.W_k = nn.Linear(d_model, d_model, bias=False)
        self.W_v = nn.Linear(d_model, d_model, bias=False)
        self.glu = GLU(d_model)
        self.norm = nn.LayerNorm(d_model)
        self.last_weights = None

    def forward(self, h_ego, grid, mask):
        """h_ego: (..., d), grid: (..., C, d), mask: (..., C) bool."""
        q = self.W_q(h_ego)
        logits = (self.W_k(grid) @ q[..., None]).squeeze(-1) / math.sqrt(self.d_model)
        alpha = masked_softmax(logits, mask)
        self.last_weights = alpha
        social = (alpha[..., None, :] @ self.W_v(grid)).squeeze(-2)
        return self.norm(h_ego + self.glu(social))


class TemporalDependency(nn.Module):
    """Multi-head self-attention across the per-step social encodings."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, out_proj=False, bias=False)
        self.glu = GLU(d_model)
        self.norm = nn.LayerNorm(d_model)

    @property
    def last_weights(self):
        return self.attn.last_weights

    def forward(self, h):
        return self.norm(h + self.glu(self.attn(h, h)))


class IntentionHeads(nn.Module):
    def __init__(self, d_model: int, slope: float):
        super().__init__()
        self.slope = slope
        self.W_r = nn.Linear(d_model, d_model)
        self.W_la = nn.Linear(d_model, N_LATERAL)
        self.W_lo = nn.Linear(d_model, N_LONGITUDINAL)

    def forward(self, h_last):
        r = leaky_relu(self.W_r(h_last), self.slope)
        return r, self.W_la(r), self.W_lo(r)


class FusionAttention(nn.Module):
    """Soft attention over the encoded history driven by a query vector per mode."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.W_k = nn.Linear(d_model, d_model, bias=False)
        self.W_v = nn.Linear(d_model, d_model, bias=False)
        self.last_weights = None

    def forward(self, queries, h):
        """queries: (B, M, d) or (M, d), h: (B, T, d) -> (B, M, d)."""
        if queries.dim() == 2:
            queries = queries.expand(h.shape[0], *queries.shape)
        logits = queries @ self.W_k(h).transpose(-1, -2) / math.sqrt(self.d_model)
        w = masked_softmax(logits)
        self.last_weights = w
        return w @ self.W_v(h)


class TrajectoryDecoder(nn.Module):
    """Non-autoregressive decoder over F positionally encoded copies plus Gaussian MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layer = EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim, cfg.dropout)
        self.mlp1 = nn.Linear(cfg.d_model, cfg.mlp_hidden)
        self.mlp2 = nn.Linear(cfg.mlp_hidden, 4)
        self.register_buffer("pe", sinusoidal_encoding(cfg.future_len, cfg.d_model), persistent=False)

    def hidden(self, fused):
        """fused: (..., d) -> (..., F, d)."""
        lead = fused.shape[:-1]
        x = fused[..., None, :].expand(*lead, self.cfg.future_len, self.cfg.d_model) + self.pe.to(fused.dtype)
        x = self.layer(x.reshape(-1, self.cfg.future_len, self.cfg.d_model))
        return x.reshape(*lead, self.cfg.future_len, self.cfg.d_model)

    def head(self, h):
        raw = self.mlp2(leaky_relu(self.mlp1(h), self.cfg.leaky_slope))
        return gaussian_params(raw, self.cfg.position_scale)

    def forward(self, fused, prior=None):
        params = self.head(self.hidden(fused))
        if prior is None:
            return params
        return torch.cat([params[..., :2] + prior, params[..., 2:]], dim=-1)


def gaussian_params(raw: torch.Tensor, position_scale: float = 1.0) -> torch.Tensor:
    """Map raw (..., 4) outputs to (mu_x, mu_y, sigma_x, sigma_y)."""
    mu = raw[..., :2] * position_scale
    sigma = F.softplus(raw[..., 2:]) + SIGMA_FLOOR
    return torch.cat([mu, sigma], dim=-1)


def mode_one_hot(modes: torch.Tensor) -> torch.Tensor:
    """(..., ) mode indices -> (..., 6) lateral one-hot followed by longitudinal one-hot."""
    lat = F.one_hot(modes // N_LONGITUDINAL, N_LATERAL)
    lon = F.one_hot(modes % N_LONGITUDINAL, N_LONGITUDINAL)
    return torch.cat([lat, lon], dim=-1)


def constant_velocity_prior(ego: torch.Tensor, future_len: int, steps: int) -> torch.Tensor:
    """(B, T, D) ego history -> (B, F, 2) positions extrapolated at the mean
    velocity of the last ``steps`` history intervals."""
    last = ego[:, -1, :2]
    velocity = (last - ego[:, -1 - steps, :2]) / steps
    k = torch.arange(1, future_len + 1, dtype=ego.dtype)
    return last[:, None, :] + k[None, :, None] * velocity[:, None, :]


class _Trunk(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.neighbor_encoder = MotionEncoder(cfg)
        self.ego_encoder = None if cfg.share_ego_encoder else MotionEncoder(cfg)
        self.social = SocialAttention(cfg.d_model)
        self.temporal = TemporalDependency(cfg.d_model, cfg.n_heads)
        self.decoder = TrajectoryDecoder(cfg)

    def encode(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Spatio-temporal encoding (B, T, d) of a collated batch."""
        ego, nbrs, mask = batch["ego"], batch["neighbors"], batch["mask"]
        if nbrs.shape[1] != self.cfg.grid.n_cells:
            raise ValueError(f"expected {self.cfg.grid.n_cells} grid cells, got {nbrs.shape[1]}")
        B, C, T, D = nbrs.shape
        h_ego = (self.ego_encoder or self.neighbor_encoder)(ego)

        occupied = mask.any(dim=-1)
        grid = h_ego.new_zeros(B, C, T, self.cfg.d_model)
        if occupied.any():
            b_idx, c_idx = occupied.nonzero(as_tuple=True)
            enc = self.neighbor_encoder(nbrs[b_idx, c_idx], mask[b_idx, c_idx])
            grid = grid.index_put((b_idx, c_idx), enc)
        h_tilde = self.social(h_ego, grid.transpose(1, 2), mask.transpose(1, 2))
        return self.temporal(h_tilde)

    def prior(self, batch, n_modes: int):
        """Mean offset added to every decoded mode, shape (B, 1, F, 2) or None."""
        if self.cfg.prior_steps == 0:
            return None
        return constant_velocity_prior(batch["ego"], self.cfg.future_len, self.cfg.prior_steps)[:, None]


class MIAT(_Trunk):
    """Maneuver-intention-aware transformer producing 9 mode-conditioned Gaussians."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__(cfg)
        self.intention = IntentionHeads(cfg.d_model, cfg.leaky_slope)
        self.mode_embed = nn.Linear(N_LATERAL + N_LONGITUDINAL, cfg.d_model)
        self.fusion = FusionAttention(cfg.d_model)
        reset_parameters(self)

    def forward(self, batch, modes: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        """Run the network on a collated batch.

        With ``modes`` None every one of the 9 modes is decoded and ``traj`` has
        shape (B, 9, F, 4). Passing a (B,) tensor of mode indices decodes only
        those, giving (B, 1, F, 4); ``modes="argmax"`` decodes the mode with the
        highest joint maneuver probability (lowest index on ties).
        """
        h = self.encode(batch)
        _, lat_logits, lon_logits = self.intention(h[:, -1])
        p_lat, p_lon = masked_softmax(lat_logits), masked_softmax(lon_logits)
        if isinstance(modes, str):
            if modes != "argmax":
                raise ValueError(f"unknown mode selector {modes!r}")
            modes = (p_lat[:, :, None] * p_lon[:, None, :]).reshape(-1, N_MODES).argmax(-1)
        if modes is None:
            onehot = mode_one_hot(torch.arange(N_MODES)).to(h.dtype)
            queries = self.mode_embed(onehot)
        else:
            queries = self.mode_embed(mode_one_hot(modes).to(h.dtype))[:, None, :]
        fused = self.fusion(queries, h)
        return {
            "traj": self.decoder(fused, self.prior(batch, fused.shape[1])),
            "lat_logits": lat_logits,
            "lon_logits": lon_logits,
            "p_lat": p_lat,
            "p_lon": p_lon,
            "modes": modes,
        }


class VanillaTransformer(_Trunk):
    """Same trunk as MIAT with one learned, maneuver-agnostic decoding query."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__(cfg)
        self.query = nn.Parameter(torch.zeros(cfg.d_model))
        self.fusion = FusionAttention(cfg.d_model)
        reset_parameters(self)

    def forward(self, batch, modes=None) -> Dict[str, torch.Tensor]:
        h = self.encode(batch)
        fused = self.fusion(self.query[None, :], h)
        return {"traj": self.decoder(fused, self.prior(batch, 1))}


def reset_parameters(model: nn.Module) -> None:
    """Uniform +-sqrt(1/fan_in) for linear maps, unit gain / zero bias for layer norms."""
    for m in model.modules():
        if isinstance(m, nn.Linear):
            init_linear(m)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if isinstance(model, VanillaTransformer):
        bound = math.sqrt(1.0 / model.cfg.d_model)
        nn.init.uniform_(model.query, -bound, bound)


def build_model(cfg: ModelConfig, kind: str = "miat", seed: Optional[int] = None) -> _Trunk:
    if seed is not None:
        torch.manual_seed(seed)
    if kind == "miat":
        return MIAT(cfg)
    if kind == "vanilla":
        return VanillaTransformer(cfg)
    raise ValueError(f"unknown model kind: {kind!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_groups(model: nn.Module) -> Dict[str, List[str]]:
    """Parameter names grouped by the layer that owns them."""
    groups: Dict[str, List[str]] = {}
    for name, _ in model.named_parameters():
        owner = name.rsplit(".", 1)[0] if "." in name else name
        groups.setdefault(owner, []).append(name)
    return groups


# --------------------------------------------------------------------------- batching

def collate(samples: Sequence[TrajectorySample], dtype=torch.float32) -> Dict[str, torch.Tensor]:
    return {
        "ego": torch.as_tensor(np.stack([s.ego_history for s in samples])).to(dtype),
        "neighbors": torch.as_tensor(np.stack([s.neighbor_histories for s in samples])).to(dtype),
        "mask": torch.as_tensor(np.stack([s.neighbor_mask for s in samples])),
        "future": torch.as_tensor(np.stack([s.future for s in samples])).to(dtype),
        "lat": torch.tensor([int(s.label.lateral) for s in samples]),
        "lon": torch.tensor([int(s.label.longitudinal) for s in samples]),
    }


def predict(model: MIAT, samples: Sequence[TrajectorySample]) -> List[PredictionOutput]:
    """Full 9-mode predictions as plain value objects."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(collate(samples, dtype))
    traj = out["traj"].double().numpy()
    p_lat, p_lon = out["p_lat"].double().numpy(), out["p_lon"].double().numpy()
    return [
        PredictionOutput(
            modes=[GaussianTrajectory.from_array(traj[i, m]) for m in range(N_MODES)],
            maneuvers=ManeuverDistribution(p_lat[i], p_lon[i]),
        )
        for i in range(len(samples))
    ]


def vanilla_predict(model: VanillaTransformer, samples: Sequence[TrajectorySample]) -> List[GaussianTrajectory]:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        traj = model(collate(samples, dtype))["traj"].double().numpy()
    return [GaussianTrajectory.from_array(traj[i, 0]) for i in range(len(samples))]
