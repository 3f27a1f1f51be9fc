"""Toy MM-DiT denoiser with mask-gated face and audio cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .conditioning import attend
from .router_net import default_rope_split, rope3d_apply
from .tensor_store import TokenGridDims, token_positions


@dataclass
class DiTConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    patch: int = 2
    latent_channels: int = 3
    frames: int = 8
    height: int = 8
    width: int = 8
    text_len: int = 4
    n_chars: int = 2
    face_queries: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0
    mlp_ratio: int = 4
    # "v": audio step adds onto the pre-face residual, as the source equation reads;
    # "v_prime": adds onto the face-updated tokens.
    audio_residual: str = "v"
    # visual tokens of frame t see audio rows t - w .. t + w
    audio_window: int = 1
    # axial rotary positions on visual tokens in self-attention (text stays unrotated)
    rope: bool = True
    # "eps": the head predicts the noise directly; "v": the head predicts
    # v = sqrt(abar) eps - sqrt(1 - abar) z0 and forward converts it to eps
    prediction: str = "v"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("latent height/width must be divisible by the patch size")
        if self.audio_residual not in ("v", "v_prime"):
            raise ValueError(f"audio_residual must be 'v' or 'v_prime', got {self.audio_residual!r}")
        if self.prediction not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")

    @property
    def grid(self) -> TokenGridDims:
        return TokenGridDims(self.frames, self.height // self.patch, self.width // self.patch)

    @property
    def tokens(self) -> int:
        return self.grid.size

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


class NoiseSchedule:
    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(np.linspace(beta_start, beta_end, steps))

    def __len__(self):
        return len(self.betas)


# pixel-range toy latents are centred and stretched to [-1, 1] for diffusion,
# the role a VAE scaling factor plays for real latents
LATENT_SHIFT = 0.5
LATENT_SCALE = 2.0


def to_diffusion(x):
    return (x - LATENT_SHIFT) * LATENT_SCALE


def from_diffusion(z):
    return z / LATENT_SCALE + LATENT_SHIFT


def v_loss_weight(t, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample ``1 / abar_t``: scales squared noise error to squared v error."""
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    return torch.as_tensor(1.0 / schedule.alpha_bars[t_arr])


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-sample tensor."""
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= len(schedule)):
        raise IndexError(f"timestep out of range [0, {len(schedule)})")
    abar = torch.as_tensor(schedule.alpha_bars[t_arr], dtype=z0.dtype, device=z0.device)
    abar = abar.reshape(abar.shape + (1,) * (z0.dim() - abar.dim()))
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def diffusion_loss(eps_hat, eps, dynamic_mask=None, apply_dynamic=False, kappa: float = 1.0, sample_weight=None) -> torch.Tensor:
    """Weighted MSE; weights are ``1 + kappa * mask`` where dynamic weighting applies.

    ``dynamic_mask`` is the union of character masks at latent resolution,
    ``(..., T, H, W)``, broadcast over channels. ``apply_dynamic`` may be a
    bool or a per-sample boolean tensor. ``sample_weight`` (one value per
    leading-axis sample) scales each sample's squared error.
    """
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    sq = (eps_hat - eps) ** 2
    if sample_weight is not None:
        sw = torch.as_tensor(sample_weight, dtype=sq.dtype, device=sq.device)
        sq = sq * sw.reshape(sw.shape + (1,) * (sq.dim() - sw.dim()))
    if dynamic_mask is None:
        return sq.mean()
    flag = torch.as_tensor(apply_dynamic, dtype=sq.dtype, device=sq.device)
    flag = flag.reshape(flag.shape + (1,) * (dynamic_mask.dim() - flag.dim()))
    w = 1.0 + kappa * dynamic_mask.to(sq.dtype) * flag
    return (sq * w.unsqueeze(-3)).mean()


class LoRALinear(nn.Module):
    """Frozen-able base linear map plus a low-rank update ``(alpha / r) B A``."""

    def __init__(self, d_in: int, d_out: int, rank: int = 0, alpha: float = 1.0):
        super().__init__()
        self.base = nn.Linear(d_in, d_out)
        self.rank = rank
        self.alpha = alpha
        if rank > 0:
            self.lora_A = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
            self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        out = self.base(x)
        if self.rank > 0:
            out = out + (self.alpha / self.rank) * (x @ self.lora_A.T) @ self.lora_B.T
        return out


def lora_apply(W: torch.Tensor, adapter: LoRALinear | None, x: torch.Tensor) -> torch.Tensor:
    """``(W + (alpha/r) B A) x`` for column-vector ``x``; plain ``W x`` if rank is 0."""
    if adapter is None or adapter.rank == 0:
        return W @ x
    if adapter.lora_A.shape[1] != W.shape[1] or adapter.lora_B.shape[0] != W.shape[0]:
        raise ValueError("adapter rank matrices do not match the base weight")
    return (W + (adapter.alpha / adapter.rank) * adapter.lora_B @ adapter.lora_A) @ x


def patchify(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """``(..., T, C, H, W)`` to ``(..., S, C*patch*patch)`` in t-major token order."""
    *lead, T, C, H, W = latent.shape
    if H % patch or W % patch:
        raise ValueError(f"latent {H}x{W} not divisible by patch {patch}")
    x = latent.reshape(*lead, T, C, H // patch, patch, W // patch, patch)
    x = x.movedim(-4, -5).movedim(-2, -4)  # ..., T, H/p, W/p, C, p, p
    return x.reshape(*lead, T * (H // patch) * (W // patch), C * patch * patch)


def unpatchify(tokens: torch.Tensor, grid: TokenGridDims, channels: int, patch: int) -> torch.Tensor:
    *lead, S, _ = tokens.shape
    if S != grid.size:
        raise ValueError(f"{S} tokens do not fill grid {grid}")
    x = tokens.reshape(*lead, grid.t_len, grid.h_len, grid.w_len, channels, patch, patch)
    n = len(lead)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5)  # ..., T, C, h, p, w, p
    return x.reshape(*lead, grid.t_len, channels, grid.h_len * patch, grid.w_len * patch)


def sinusoid(x: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    angle = x.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)


def grid_embedding(grid: TokenGridDims, dim: int) -> torch.Tensor:
    dh = (dim // 3) // 2 * 2
    dt = dim - 2 * dh
    t, h, w = torch.meshgrid(
        torch.arange(grid.t_len), torch.arange(grid.h_len), torch.arange(grid.w_len), indexing="ij"
    )
    emb = torch.cat([sinusoid(t.flatten(), dt), sinusoid(h.flatten(), dh), sinusoid(w.flatten(), dh)], dim=-1)
    return emb.float()


class MaskedCrossAttention(nn.Module):
    """Per-character cross-attention whose outputs are gated token-wise."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(d_model, d_model)
        self.to_k = nn.Linear(d_model, d_model)
        self.to_v = nn.Linear(d_model, d_model)
        self.to_out = nn.Linear(d_model, d_model)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, -1).movedim(-2, -3)

    def forward(self, v, embeds, gate, kv_mask=None, key_embeds=None):
        """Return ``sum_i gate[i] * attn(v, embeds[i])`` and the (q, k) taps.

        ``v``: ``(..., S, d)``; ``embeds``: ``(..., n, m, d)``; ``gate``:
        ``(..., n, S)``; ``kv_mask``: optional ``(S, m)`` boolean. ``key_embeds``
        replaces ``embeds`` on the key side only (positional keys).
        """
        n, m = embeds.shape[-3], embeds.shape[-2]
        if gate.shape[-2:] != (n, v.shape[-2]):
            raise ValueError(f"gate shape {tuple(gate.shape)} does not match n={n}, S={v.shape[-2]}")
        q = self._split(self.to_q(v)).unsqueeze(-4)  # ..., 1, h, S, dh
        k = self._split(self.to_k(embeds if key_embeds is None else key_embeds))  # ..., n, h, m, dh
        val = self._split(self.to_v(embeds))
        out = attend(q, k, val, kv_mask)  # ..., n, h, S, dh
        out = self.to_out(out.movedim(-3, -2).flatten(-2))  # ..., n, S, d
        increment = (gate.unsqueeze(-1).to(out.dtype) * out).sum(dim=-3)
        k_tap = k.movedim(-4, -3).flatten(-3, -2)  # ..., h, n*m, dh
        return increment, (q.squeeze(-4), k_tap)


def masked_cross_attention(v, embeds, gate, attn: MaskedCrossAttention, kv_mask=None):
    return attn(v, embeds, gate, kv_mask)[0]


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, rank: int, alpha: float):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(d_model, d_model, rank, alpha)
        self.k = LoRALinear(d_model, d_model, rank, alpha)
        self.v = LoRALinear(d_model, d_model, rank, alpha)
        self.o = LoRALinear(d_model, d_model, rank, alpha)

    def forward(self, x, rope=None):
        def split(t):
            return t.reshape(*t.shape[:-1], self.heads, -1).movedim(-2, -3)

        q, k = split(self.q(x)), split(self.k(x))
        if rope is not None:
            positions, chunks = rope
            q, k = rope3d_apply(q, positions, chunks), rope3d_apply(k, positions, chunks)
        h = attend(q, k, split(self.v(x)))
        return self.o(h.movedim(-3, -2).flatten(-2))


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, cfg.heads, cfg.lora_rank, cfg.lora_alpha)
        self.norm2 = nn.LayerNorm(d)
        hidden = cfg.mlp_ratio * d
        self.mlp = nn.Sequential(
            LoRALinear(d, hidden, cfg.lora_rank, cfg.lora_alpha),
            nn.GELU(),
            LoRALinear(hidden, d, cfg.lora_rank, cfg.lora_alpha),
        )
        self.norm_face = nn.LayerNorm(d)
        self.face_xattn = MaskedCrossAttention(d, cfg.heads)
        self.norm_audio = nn.LayerNorm(d)
        self.audio_xattn = MaskedCrossAttention(d, cfg.heads)


class DiT(nn.Module):
    """Visual tokens (plus time embedding) follow text tokens through ``L`` blocks.

    Each block: self-attention and MLP over all tokens, then face and audio
    masked cross-attention on the visual tokens only. When ``e_a`` is None
    the audio step is skipped and the face-updated tokens pass through.
    """

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        p = cfg.patch
        self.patch_embed = nn.Linear(3 * cfg.latent_channels * p * p, d)
        self.register_buffer("pos_embed", grid_embedding(cfg.grid, d), persistent=False)
        self.register_buffer("audio_pos", sinusoid(torch.arange(cfg.frames), d).float(), persistent=False)
        self.register_buffer("audio_window_mask", self._window_mask(), persistent=False)
        text_pos = torch.zeros(cfg.text_len, 3)
        visual_pos = torch.as_tensor(token_positions(cfg.grid), dtype=torch.float32)
        self.register_buffer("rope_pos", torch.cat([text_pos, visual_pos]), persistent=False)
        self.rope_split = default_rope_split(cfg.head_dim, cfg.grid.shape)
        self.register_buffer("alpha_bars", torch.as_tensor(NoiseSchedule.linear().alpha_bars), persistent=False)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.latent_channels * p * p)

    def check_schedule(self, schedule: NoiseSchedule) -> None:
        """v-prediction converts with the built-in linear schedule; others are rejected."""
        if self.cfg.prediction == "v" and not np.allclose(schedule.alpha_bars, self.alpha_bars.numpy()):
            raise ValueError("v-prediction model needs the default linear noise schedule")

    def _window_mask(self):
        g = self.cfg.grid
        frame_of_token = torch.arange(g.size) // (g.h_len * g.w_len)
        rows = torch.arange(self.cfg.frames)
        return (frame_of_token[:, None] - rows[None, :]).abs() <= self.cfg.audio_window

    def forward(self, z_t, t, text, e_c, e_a=None, face_gates=None, audio_gates=None, gate_fn=None):
        """Predict noise for the video channels of ``z_t``.

        ``z_t``: ``(B, T', 3C', H', W')``; ``t``: ``(B,)``; ``text``: ``(B, k, d)``;
        ``e_c``: ``(B, n, q, d)``; ``e_a``: ``(B, n, T', d)`` or None.
        Gates are ``(B, L, n, S)``. ``gate_fn(layer, q_tap, k_tap)`` may
        instead return ``(face_gate, audio_gate)`` per layer from that layer's
        taps. Returns ``(eps_hat, (q_taps, k_taps))`` with taps stacked over
        layers on dim 1.
        """
        cfg = self.cfg
        if gate_fn is None and (face_gates is None or (e_a is not None and audio_gates is None)):
            raise ValueError("gates must be provided for every layer")
        x = self.patch_embed(patchify(z_t, cfg.patch)) + self.pos_embed.to(z_t.dtype)
        temb = self.time_mlp(sinusoid(torch.as_tensor(t).reshape(-1), cfg.d_model).to(z_t.dtype))
        x = x + temb[:, None, :]
        k = text.shape[-2]
        x = torch.cat([text.to(x.dtype), x], dim=-2)
        audio_keys = None if e_a is None else e_a + self.audio_pos.to(e_a.dtype)
        q_taps, k_taps = [], []
        for layer, block in enumerate(self.blocks):
            rope = (self.rope_pos[-x.shape[-2] :].to(x.dtype), self.rope_split) if cfg.rope else None
            x = x + block.attn(block.norm1(x), rope)
            x = x + block.mlp(block.norm2(x))
            txt, v = x[..., :k, :], x[..., k:, :]
            if gate_fn is None:
                face_increment, (q_tap, k_tap) = block.face_xattn(block.norm_face(v), e_c, face_gates[:, layer])
                audio_gate = None if audio_gates is None else audio_gates[:, layer]
            else:
                zeros = torch.zeros(v.shape[0], e_c.shape[-3], v.shape[-2], dtype=v.dtype, device=v.device)
                _, (q_tap, k_tap) = block.face_xattn(block.norm_face(v), e_c, zeros)
                face_gate, audio_gate = gate_fn(layer, q_tap, k_tap)
                face_increment, _ = block.face_xattn(block.norm_face(v), e_c, face_gate)
            q_taps.append(q_tap)
            k_taps.append(k_tap)
            v_face = v + face_increment
            if e_a is None:
                v_out = v_face
            else:
                base = v if cfg.audio_residual == "v" else v_face
                audio_increment, _ = block.audio_xattn(
                    block.norm_audio(v_face), e_a, audio_gate, self.audio_window_mask, key_embeds=audio_keys
                )
                v_out = base + audio_increment
            x = torch.cat([txt, v_out], dim=-2)
        out = self.head(self.final_norm(x[..., k:, :]))
        eps_hat = unpatchify(out, cfg.grid, cfg.latent_channels, cfg.patch)
        if cfg.prediction == "v":
            abar = self.alpha_bars[torch.as_tensor(t).reshape(-1)].to(z_t.dtype).reshape(-1, 1, 1, 1, 1)
            z_video = z_t[:, :, : cfg.latent_channels]
            eps_hat = abar.sqrt() * eps_hat + (1 - abar).sqrt() * z_video
        return eps_hat, (torch.stack(q_taps, dim=1), torch.stack(k_taps, dim=1))
