"""Proxy metrics: routing-mask IoU, audio routing accuracy, mouth-sync
margin and held-out noise-prediction error."""

from __future__ import annotations

import numpy as np
import torch

from .conditioning import mouth_tracks, pearson, predict_audio_character_matrix, score_clip
from .denoiser import NoiseSchedule, add_noise, to_diffusion
from .mask_algebra import argmax_labels, class_iou
from .model import AvatarModel
from .sampler import SampleRequest, sample
from .synthgen import SPATIAL_FACTOR, ClipRecord
from .trainer import collate, drop_conditions, encode_conditions, gates_from_mask, prepare_clip

METRICS = ("mask_iou", "routing_accuracy", "sync_proxy_margin", "eps_mse")


def mask_iou(mask, gt) -> list[float]:
    """Per-character IoU of the layer-mean mask's argmax against GT token labels.

    ``mask`` is ``L x (n+1) x T x h x w`` (or without the layer axis);
    ``gt`` is ``(n+1) x T x h x w``.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 5:
        mask = mask.mean(axis=0)
    pred = argmax_labels(mask)
    target = argmax_labels(gt)
    return [class_iou(pred, target, c) for c in range(mask.shape[0] - 1)]


def routing_correct(clip: ClipRecord, scorer=score_clip) -> bool:
    return bool(np.array_equal(predict_audio_character_matrix(scorer(clip)), clip.a_ac))


def sync_margin(video_latent: np.ndarray, clip: ClipRecord) -> float:
    """Mean over characters of corr(mouth, own envelope) - corr(mouth, other envelope).

    ``video_latent`` may be the pixel video (scale 1) or its pooled latent.
    """
    scale = clip.video.shape[-1] // video_latent.shape[-1]
    tracks = mouth_tracks(np.asarray(video_latent), clip.mouth_boxes, scale)
    env = clip.character_envelopes()
    n = len(tracks)
    if n < 2:
        return 0.0
    margins = []
    for c in range(n):
        other = (c + 1) % n
        margins.append(pearson(tracks[c], env[c]) - pearson(tracks[c], env[other]))
    return float(np.mean(margins))


def eps_mse(model: AvatarModel, clip: ClipRecord, seed: int = 0, pairs: int = 4) -> float:
    """Noise-prediction MSE with GT gates on fixed held-out (t, eps) draws."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    prepared = prepare_clip(clip, model.cfg.n_chars, model.cfg.patch)
    batch = collate([prepared] * pairs, rng, sigma_face=0.3)
    batch = drop_conditions(batch, {}, rng)
    schedule = NoiseSchedule.linear()
    t = torch.linspace(0, len(schedule) - 1, pairs).round().long()
    eps = torch.randn(batch.video.shape, generator=gen)
    with torch.no_grad():
        text, e_c, e_a = encode_conditions(model, batch)
        mask = batch.gt.unsqueeze(1).expand(pairs, model.cfg.layers, *batch.gt.shape[1:])
        face, audio = gates_from_mask(mask, batch.a_ac, inflate=True)
        z_in = torch.cat([add_noise(to_diffusion(batch.video), t, eps, schedule), batch.inpaint, batch.ref_latent], dim=2)
        eps_hat, _ = model.dit(z_in, t, text, e_c, e_a, face, audio)
    return float(((eps_hat - eps) ** 2).mean())


def clip_report(model: AvatarModel, clip: ClipRecord, mode: str = "intra", steps: int = 50, cfg_scale: float = 7.0, seed: int = 0):
    req = SampleRequest.from_clip(clip, mode=mode, steps=steps, cfg_scale=cfg_scale, seed=seed)
    result = sample(req, model)
    gt = prepare_clip(clip, model.cfg.n_chars, model.cfg.patch).gt
    return {
        "seed": clip.seed,
        "kind": clip.kind,
        "mask_iou": mask_iou(result.masks[-1], gt),
        "routing_accuracy": float(routing_correct(clip)),
        "sync_proxy_margin": sync_margin(result.video_latent, clip),
        "eps_mse": eps_mse(model, clip, seed),
        "nfe": result.nfe,
    }


def aggregate(per_clip: list[dict]) -> dict:
    if not per_clip:
        raise ValueError("no clips to aggregate")
    n = len(per_clip[0]["mask_iou"])
    return {
        "mask_iou": [float(np.mean([c["mask_iou"][i] for c in per_clip])) for i in range(n)],
        "routing_accuracy": float(np.mean([c["routing_accuracy"] for c in per_clip])),
        "sync_proxy_margin": float(np.mean([c["sync_proxy_margin"] for c in per_clip])),
        "eps_mse": float(np.mean([c["eps_mse"] for c in per_clip])),
        "clips": len(per_clip),
    }


def evaluate(model: AvatarModel, clips: list[ClipRecord], mode: str = "intra", steps: int = 50, cfg_scale: float = 7.0, seed: int = 0) -> dict:
    if not clips:
        raise ValueError("evaluation split is empty")
    per_clip = [clip_report(model, c, mode, steps, cfg_scale, seed) for c in clips]
    return {"mode": mode, "aggregate": aggregate(per_clip), "clips": per_clip}


def pooled_video(clip: ClipRecord) -> np.ndarray:
    v = clip.video.astype(np.float64)
    t, c, h, w = v.shape
    f = SPATIAL_FACTOR
    return v.reshape(t, c, h // f, f, w // f, f).mean(axis=(3, 5))
