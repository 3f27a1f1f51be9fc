"""Guided ancestral sampling with pre-, post- and intra-denoise routing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import prep_visual_conditions
from .denoiser import NoiseSchedule, from_diffusion, to_diffusion
from .mask_algebra import inference_audio_gates, pre_denoise_mask, router_gate_fn, segment_coarse_video
from .model import AvatarModel
from .synthgen import SPATIAL_FACTOR, ClipRecord
from .tensor_store import write_tensor

MODES = ("pre", "post", "intra")


class SampleInputError(ValueError):
    pass


@dataclass
class SampleRequest:
    refs: np.ndarray  # n x 3 x R x R
    audio: np.ndarray  # n x T_a x d_a
    prompt_id: int
    inpaint: np.ndarray | None = None  # 3 x H x W
    face_boxes: list | None = None  # per character [x0, y0, x1, y1] in the inpainting frame
    a_ac: np.ndarray | None = None
    mode: str = "intra"
    steps: int = 50
    cfg_scale: float = 7.0
    seed: int = 0
    sigma_face: float = 0.3
    theta: float = 0.6
    max_iters: int = 16
    unconditional: bool = False  # drop every condition, as in training-time dropout

    def __post_init__(self):
        if self.mode not in MODES:
            raise SampleInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise SampleInputError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise SampleInputError("cfg_scale must be >= 0")

    @classmethod
    def from_clip(cls, clip: ClipRecord, **kw) -> "SampleRequest":
        """Conditions of a dataset clip, with replication for single-character clips."""
        refs, audio, a_ac = clip.refs, clip.audio_feats, clip.a_ac
        boxes = [b[0] for b in clip.mouth_boxes]
        if clip.n_chars == 1:
            refs, audio = np.repeat(refs, 2, axis=0), np.repeat(audio, 2, axis=0)
            a_ac, boxes = np.eye(2, dtype=np.uint8), boxes * 2
        kw.setdefault("a_ac", a_ac)
        return cls(refs=refs, audio=audio, prompt_id=clip.prompt_id, inpaint=clip.inpaint, face_boxes=boxes, **kw)


@dataclass
class SampleResult:
    video_latent: np.ndarray  # T' x C' x H' x W'
    view: np.ndarray  # T x 3 x H x W, u8
    masks: list  # per step: L x (n+1) x T' x h x w
    nfe: int
    a_ac: np.ndarray
    mode: str
    seed: int
    coarse_latent: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def decode_for_view(video_latent, factor: int = SPATIAL_FACTOR) -> np.ndarray:
    """Clamp, nearest-upsample by ``factor`` and quantise (round half up) to u8."""
    x = np.clip(np.asarray(video_latent, dtype=np.float64), 0.0, 1.0)
    x = x.repeat(factor, axis=-2).repeat(factor, axis=-1)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def timesteps(steps: int, t_diff: int) -> list[int]:
    """Uniformly strided schedule times, highest first, ending at 0."""
    return sorted({int(k * t_diff // steps) for k in range(steps)}, reverse=True)


class _Counted:
    """Denoiser wrapper counting forward evaluations."""

    def __init__(self, dit):
        self.dit = dit
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.dit(*args, **kwargs)


def _ancestral_update(z, eps, t, t_prev, schedule: NoiseSchedule, gen):
    abar = float(schedule.alpha_bars[t])
    abar_prev = float(schedule.alpha_bars[t_prev]) if t_prev >= 0 else 1.0
    x0 = ((z - (1 - abar) ** 0.5 * eps) / abar**0.5).clamp(to_diffusion(0.0), to_diffusion(1.0))
    if t_prev < 0:
        return x0
    alpha = abar / abar_prev
    beta = 1 - alpha
    mean = (abar_prev**0.5 * beta / (1 - abar)) * x0 + (alpha**0.5 * (1 - abar_prev) / (1 - abar)) * z
    var = beta * (1 - abar_prev) / (1 - abar)
    return mean + var**0.5 * torch.randn(z.shape, generator=gen, dtype=z.dtype)


class _Conditions:
    def __init__(self, model: AvatarModel, req: SampleRequest, gen_np: np.random.Generator):
        cfg = model.cfg
        dtype = next(model.parameters()).dtype
        T, H, W = cfg.frames, cfg.height * SPATIAL_FACTOR, cfg.width * SPATIAL_FACTOR
        if req.refs.shape[0] != cfg.n_chars or req.audio.shape[0] != cfg.n_chars:
            raise SampleInputError(f"expected {cfg.n_chars} references and audio tracks")
        video_stub = np.zeros((T, 3, H, W), dtype=np.float32)
        boxes = [[b] for b in (req.face_boxes or [])]
        stub = ClipRecord(video_stub, None, None, None, None, req.refs, req.inpaint, req.prompt_id, boxes, 0, cfg.n_chars)
        lat = prep_visual_conditions(stub, gen_np, sigma_face=req.sigma_face)
        self.latents = torch.cat(
            [torch.from_numpy(lat["inpaint_latent"]), torch.from_numpy(lat["ref_latent"])], dim=1
        ).to(dtype)[None]
        with torch.no_grad():
            self.text = model.text_encoder(torch.tensor([req.prompt_id])).to(dtype)
            self.text_null = model.text_encoder.null.to(dtype)[None]
            self.e_c = model.face_encoder(torch.from_numpy(np.asarray(req.refs, dtype=np.float32))[None]).to(dtype)
            self.e_c_null = model.face_encoder.null.to(dtype).expand_as(self.e_c)
            feats = torch.from_numpy(np.asarray(req.audio, dtype=np.float32))[None]
            self.e_a = model.audio_encoder(feats, T).to(dtype)
            self.e_a_null = model.audio_encoder.null.to(dtype).expand_as(self.e_a)
        if req.unconditional:
            self.latents = torch.zeros_like(self.latents)
            self.text, self.e_c, self.e_a = self.text_null, self.e_c_null, self.e_a_null


def sample(req: SampleRequest, model: AvatarModel, schedule: NoiseSchedule | None = None) -> SampleResult:
    """Generate one clip; every step runs a conditional and an unconditional pass.

    The unconditional pass nulls the guided conditions (text and audio) and
    reuses the conditional pass's gates.
    """
    cfg = model.cfg
    schedule = schedule or NoiseSchedule.linear()
    model.dit.check_schedule(schedule)
    dims = cfg.dit().grid
    if req.a_ac is None:
        raise SampleInputError("an audio-character matrix is required (pass one or predict it with the audio router)")
    if req.mode == "pre" and req.inpaint is None:
        raise SampleInputError("pre-denoise routing needs an inpainting frame")
    model.eval()
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng(req.seed)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    cond = _Conditions(model, req, rng)
    a_ac = torch.as_tensor(np.asarray(req.a_ac), dtype=dtype)[None]
    counted = _Counted(model.dit)
    shape = (1, cfg.frames, cfg.latent_channels, cfg.height, cfg.width)
    L = cfg.layers

    def run(gate_source, use_embeds: bool = True):
        """Full guided denoising pass; returns the final latent and per-step masks."""
        z = torch.randn(shape, generator=gen, dtype=dtype)
        ts = timesteps(req.steps, len(schedule))
        step_masks = []
        e_c = cond.e_c if use_embeds else cond.e_c_null
        e_a = cond.e_a if use_embeds else cond.e_a_null
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            z_in = torch.cat([z, cond.latents], dim=2)
            tt = torch.tensor([t])
            with torch.no_grad():
                if gate_source == "router":
                    used = []
                    gate_fn = router_gate_fn(model.router, a_ac, req.theta, req.max_iters, used)
                    eps_c, _ = counted(z_in, tt, cond.text, e_c, e_a, gate_fn=gate_fn)
                    mask = torch.stack(used, dim=1)
                else:
                    mask = gate_source
                face = mask[:, :, :-1].flatten(-3)
                # coarse pass: no face or audio routing at all
                audio = inference_audio_gates(mask, a_ac.unsqueeze(1)) if use_embeds else torch.zeros_like(face)
                if gate_source != "router":
                    eps_c, _ = counted(z_in, tt, cond.text, e_c, e_a, face, audio)
                eps_u, _ = counted(z_in, tt, cond.text_null, e_c, cond.e_a_null, face, audio)
            eps = cfg_combine(eps_u, eps_c, req.cfg_scale)
            z = _ancestral_update(z, eps, t, t_prev, schedule, gen)
            step_masks.append(mask[0].cpu().numpy().astype(np.float32))
        return from_diffusion(z[0]), step_masks

    coarse = None
    if req.mode == "intra":
        z, masks = run("router")
    elif req.mode == "pre":
        static = pre_denoise_mask(req.inpaint, req.refs, dims, L)
        z, masks = run(torch.from_numpy(static).to(dtype)[None])
    else:
        zero = torch.zeros((1, L, cfg.n_chars + 1) + dims.shape, dtype=dtype)
        zero[:, :, -1] = 1.0  # everything background: all gates zero
        coarse, _ = run(zero, use_embeds=False)
        seg = segment_coarse_video(coarse.cpu().numpy(), req.refs, dims, L)
        z, masks = run(torch.from_numpy(seg).to(dtype)[None])
        coarse = coarse.cpu().numpy().astype(np.float32)

    video = z.cpu().numpy().astype(np.float32)
    return SampleResult(
        video_latent=video,
        view=decode_for_view(video),
        masks=masks,
        nfe=counted.calls,
        a_ac=np.asarray(req.a_ac).astype(np.uint8),
        mode=req.mode,
        seed=req.seed,
        coarse_latent=coarse,
    )


def write_result(result: SampleResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(result.video_latent, out / "video.byat")
    write_tensor(result.view, out / "view.u8.byat")
    for k, m in enumerate(result.masks):
        write_tensor(m, out / f"masks_step{k}.byat")
    meta = {"nfe": result.nfe, "a_ac": result.a_ac.astype(int).tolist(), "mode": result.mode, "seed": result.seed}
    (out / "result.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
