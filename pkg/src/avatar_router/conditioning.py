"""Condition encoders and the audio router.

The pretrained encoders of a full-size system are replaced by small
trainable stand-ins with the same interfaces: a projector plus strided
(time x feature) convolution for audio, a statistics/grid Q-Former for
reference faces, and an embedding table for prompt classes.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthgen import SPATIAL_FACTOR, ClipRecord


def attend(q, k, v, mask=None):
    """Softmax attention over the key axis; ``mask`` is True where allowed."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class AudioProjector(nn.Module):
    def __init__(self, d_audio: int, d_model: int, stride: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Linear(d_audio, d_model)
        # (time x feature) plane, one channel; stride only along time
        self.conv = nn.Conv2d(1, 1, kernel_size=3, stride=(stride, 1), padding=1)
        self.null = nn.Parameter(torch.randn(d_model) * 0.02)

    def forward(self, feats: torch.Tensor, frames: int) -> torch.Tensor:
        """``(..., n, T_a, d_a)`` audio features to ``(..., n, frames, d)``."""
        t_a = feats.shape[-2]
        if t_a % frames or t_a // frames != self.stride:
            raise ValueError(f"audio length {t_a} is not {self.stride} x {frames}")
        x = self.proj(feats)
        lead = x.shape[:-2]
        y = self.conv(x.reshape(-1, 1, t_a, x.shape[-1]))
        return y.reshape(*lead, frames, x.shape[-1])


def audio_project(audio_feats, projector: AudioProjector, frames: int) -> torch.Tensor:
    return projector(audio_feats, frames)


class FaceEncoder(nn.Module):
    """Fuses a global colour descriptor and grid-pooled local patches with learned queries."""

    def __init__(self, d_model: int, queries: int = 4, grid: int = 2, heads: int = 4):
        super().__init__()
        self.grid = grid
        self.heads = heads
        self.global_proj = nn.Linear(6, d_model)
        self.local_proj = nn.Linear(4, d_model)
        self.slots = nn.Parameter(torch.randn(1 + grid * grid, d_model) * 0.02)
        self.queries = nn.Parameter(torch.randn(queries, d_model))
        self.to_q = nn.Linear(d_model, d_model)
        self.to_k = nn.Linear(d_model, d_model)
        self.to_v = nn.Linear(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.GELU(), nn.Linear(2 * d_model, d_model))
        self.null = nn.Parameter(torch.randn(queries, d_model) * 0.02)

    def descriptors(self, refs: torch.Tensor, masks: torch.Tensor | None = None) -> torch.Tensor:
        if masks is None:
            masks = (refs.amax(dim=-3) > 0).to(refs.dtype)
        m = masks.unsqueeze(-3)
        area = m.sum(dim=(-1, -2)).clamp_min(1.0)
        mean = (refs * m).sum(dim=(-1, -2)) / area
        var = (((refs - mean[..., None, None]) ** 2) * m).sum(dim=(-1, -2)) / area
        glob = torch.cat([mean, torch.sqrt(var + 1e-8)], dim=-1)

        lead = refs.shape[:-3]
        flat = refs.reshape(-1, *refs.shape[-3:])
        fm = masks.reshape(-1, 1, *masks.shape[-2:])
        local = torch.cat([F.adaptive_avg_pool2d(flat, self.grid), F.adaptive_avg_pool2d(fm, self.grid)], dim=1)
        local = local.flatten(2).transpose(1, 2).reshape(*lead, self.grid * self.grid, 4)
        tokens = torch.cat([self.global_proj(glob).unsqueeze(-2), self.local_proj(local)], dim=-2)
        return tokens + self.slots

    def forward(self, refs: torch.Tensor, masks: torch.Tensor | None = None) -> torch.Tensor:
        """``(..., n, 3, R, R)`` references to ``(..., n, q, d)`` embeddings."""
        tokens = self.descriptors(refs, masks)
        q = self.to_q(self.queries).expand(*tokens.shape[:-2], -1, -1)
        k, v = self.to_k(tokens), self.to_v(tokens)
        out = _split_heads_attend(q, k, v, self.heads)
        return out + self.mlp(self.norm(out))


def _split_heads_attend(q, k, v, heads):
    d = q.shape[-1]
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-2, -3)

    out = attend(split(q), split(k), split(v))
    return out.transpose(-2, -3).reshape(*q.shape[:-1], d)


def face_encode(refs, gt_ref_masks, encoder: FaceEncoder) -> torch.Tensor:
    return encoder(refs, gt_ref_masks)


class TextEmbedding(nn.Module):
    """Prompt-class lookup standing in for a text encoder."""

    def __init__(self, num_prompts: int, tokens: int, d_model: int):
        super().__init__()
        self.num_prompts = num_prompts
        self.tokens = tokens
        self.table = nn.Embedding(num_prompts, tokens * d_model)
        nn.init.normal_(self.table.weight, std=0.5)
        self.null = nn.Parameter(torch.randn(tokens, d_model) * 0.02)

    def forward(self, prompt_ids) -> torch.Tensor:
        ids = torch.as_tensor(prompt_ids, dtype=torch.long, device=self.table.weight.device)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.num_prompts):
            raise ValueError(f"prompt id out of range [0, {self.num_prompts}): {ids.tolist()}")
        return self.table(ids).reshape(*ids.shape, self.tokens, -1)


def text_embed(prompt_id: int, table: TextEmbedding) -> torch.Tensor:
    return table(prompt_id)


def pool_latent(x: np.ndarray, factor: int = SPATIAL_FACTOR) -> np.ndarray:
    """Average-pool the last two axes by ``factor`` (the identity-VAE latent)."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by spatial factor {factor}")
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-1, -3))


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * img.shape[-2]) // h
    cols = (np.arange(w) * img.shape[-1]) // w
    return img[..., rows[:, None], cols[None, :]]


def face_regions(boxes_frame0, h: int, w: int, dilate: int = 2) -> np.ndarray:
    region = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in boxes_frame0:
        region[max(0, y0 - dilate) : min(h, y1 + dilate), max(0, x0 - dilate) : min(w, x1 + dilate)] = True
    return region


def prep_visual_conditions(
    clip: ClipRecord,
    rng: np.random.Generator,
    sigma_face: float = 0.3,
    spatial_factor: int = SPATIAL_FACTOR,
    drop_inpaint: bool = False,
) -> dict:
    """Latents for the video, the face-noised inpainting frame and the reference strip.

    Inpainting and reference latents occupy frame 0 and are zero elsewhere;
    the caller concatenates the three along channels.
    """
    video_latent = pool_latent(clip.video.astype(np.float64), spatial_factor)
    t, c, h, w = video_latent.shape
    H, W = clip.video.shape[-2:]

    inpaint_latent = np.zeros_like(video_latent)
    dropped = drop_inpaint or clip.inpaint is None
    if not dropped:
        frame = clip.inpaint.astype(np.float64).copy()
        region = face_regions([boxes[0] for boxes in clip.mouth_boxes], H, W)
        noise = rng.standard_normal(frame.shape)
        if sigma_face > 0:
            frame = frame + sigma_face * noise * region[None]
        inpaint_latent[0] = pool_latent(frame, spatial_factor)

    strip = np.concatenate(list(clip.refs.astype(np.float64)), axis=-1)
    ref_latent = np.zeros_like(video_latent)
    ref_latent[0] = pool_latent(_resize_nearest(strip, H, W), spatial_factor)
    return {
        "video_latent": video_latent.astype(np.float32),
        "inpaint_latent": inpaint_latent.astype(np.float32),
        "ref_latent": ref_latent.astype(np.float32),
        "inpaint_dropped": dropped,
    }


def mouth_tracks(video: np.ndarray, mouth_boxes, scale: int = 1) -> np.ndarray:
    """Mean brightness inside each character's mouth box per frame (n x T).

    ``scale`` divides the pixel boxes when ``video`` is a pooled latent.
    """
    tracks = np.zeros((len(mouth_boxes), video.shape[0]))
    for i, boxes in enumerate(mouth_boxes):
        for t, (x0, y0, x1, y1) in enumerate(boxes):
            x0, y0 = x0 // scale, y0 // scale
            x1, y1 = max(x0 + 1, -(-x1 // scale)), max(y0 + 1, -(-y1 // scale))
            tracks[i, t] = video[t, :, y0:y1, x0:x1].mean()
    return tracks


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / denom) if denom > 1e-12 else 0.0


def envelope_mouth_scores(frame_envelopes: np.ndarray, tracks: np.ndarray, chunks: int = 2) -> np.ndarray:
    """Relevance scores ``chunks x n_audio x n_char`` by per-chunk correlation."""
    T = tracks.shape[-1]
    edges = np.linspace(0, T, chunks + 1).round().astype(int)
    scores = np.zeros((chunks, frame_envelopes.shape[0], tracks.shape[0]))
    for c in range(chunks):
        sl = slice(edges[c], edges[c + 1])
        for a in range(frame_envelopes.shape[0]):
            for ch in range(tracks.shape[0]):
                scores[c, a, ch] = pearson(frame_envelopes[a, sl], tracks[ch, sl])
    return scores


MAX_PERMUTATION_CHARS = 4


def predict_audio_character_matrix(scores) -> np.ndarray:
    """Vote per chunk, then pick the permutation with most votes.

    Ties prefer the identity, then the lexicographically smallest permutation
    (the order :func:`itertools.permutations` yields them).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ValueError(f"scores must be chunks x n x n, got {s.shape}")
    n = s.shape[1]
    if n > MAX_PERMUTATION_CHARS:
        raise ValueError(f"permutation search supports n <= {MAX_PERMUTATION_CHARS}, got {n}")
    votes = np.zeros((n, n))
    for chunk in s:
        votes[np.arange(n), chunk.argmax(axis=1)] += 1
    best, best_votes = None, -1.0
    for perm in itertools.permutations(range(n)):
        total = votes[np.arange(n), list(perm)].sum()
        if total > best_votes:
            best, best_votes = perm, total
    out = np.zeros((n, n), dtype=np.uint8)
    out[np.arange(n), list(best)] = 1
    return out


def score_clip(clip: ClipRecord, chunks: int = 2) -> np.ndarray:
    """Default synthetic scorer: audio envelopes against ground-truth mouth tracks."""
    return envelope_mouth_scores(clip.frame_envelopes(), mouth_tracks(clip.video, clip.mouth_boxes), chunks)
