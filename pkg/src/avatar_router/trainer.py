"""Three-stage training: freeze schedules, condition dropout, Dynamic Mask
Loss and router teacher forcing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import prep_visual_conditions
from .denoiser import NoiseSchedule, add_noise, diffusion_loss, to_diffusion, v_loss_weight
from .mask_algebra import compose_av, cv_gates, inflated_audio_gates, router_gate_fn
from .model import AvatarModel, save_checkpoint
from .router_net import RouterLossWeights, loss_router
from .synthgen import SPATIAL_FACTOR, ClipRecord
from .tensor_store import downsample_mask, hard_labels

STAGE_GROUPS = {
    1: ("dit", "face_xattn", "face_encoder", "text_encoder"),
    2: ("audio_encoder", "audio_xattn", "face_encoder", "face_xattn", "lora"),
    3: ("router", "audio_xattn", "face_xattn", "lora"),
}
CONDITIONS = ("inpaint", "ref", "audio", "text")


@dataclass
class TeacherForcingConfig:
    p_drop: float = 0.1
    sigma_noise: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.sigma_noise < 0:
            raise ValueError(f"sigma_noise must be >= 0, got {self.sigma_noise}")


@dataclass
class StagePlan:
    stage: int
    steps: int
    lr: float = 1e-5
    batch_size: int = 16
    cond_drop: float = 0.05
    inpaint_drop: float = 0.5  # stage 1 only
    # text and audio dropped together: the combination classifier-free guidance removes
    guidance_drop: float = 0.05
    dynamic_rate: float = 0.5
    kappa: float = 1.0
    sigma_face: float = 0.3
    teacher: TeacherForcingConfig = field(default_factory=TeacherForcingConfig)
    router_weights: RouterLossWeights = field(default_factory=RouterLossWeights)
    router_mean: bool = False
    router_loss_weight: float = 1.0
    # stage 3: fraction of samples gated by the router's own refined masks
    self_forcing: float = 0.5
    theta: float = 0.6
    max_iters: int = 16
    # train the audio step on inflated gates, the form it receives when sampling
    inflate_audio: bool = True
    t_diff: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.self_forcing <= 1.0:
            raise ValueError("self_forcing must be in [0, 1]")

    @property
    def trainable(self) -> tuple[str, ...]:
        return STAGE_GROUPS[self.stage]

    @property
    def uses_audio(self) -> bool:
        return self.stage >= 2

    @property
    def teacher_forcing(self) -> bool:
        return self.stage == 3

    @property
    def dropout(self) -> dict:
        rates = {c: self.cond_drop for c in CONDITIONS}
        if self.stage == 1:
            rates["inpaint"] = self.inpaint_drop
            rates["audio"] = 0.0
        else:
            rates["guidance"] = self.guidance_drop
        return rates

    @property
    def dynamic_loss_rate(self) -> float:
        return self.dynamic_rate if self.stage == 1 else 0.0


@dataclass
class PreparedClip:
    clip: ClipRecord
    video_latent: np.ndarray  # T x C x H' x W'
    ref_latent: np.ndarray
    refs: np.ndarray  # n x 3 x R x R
    audio: np.ndarray  # n x T_a x d_a
    a_ac: np.ndarray  # n x n
    gt: np.ndarray  # (n+1) x T x h x w, rows on the simplex
    union: np.ndarray  # T x H' x W'


def gt_token_mask(gt_masks: np.ndarray, patch: int, spatial_factor: int = SPATIAL_FACTOR) -> np.ndarray:
    """Hard ``(n+1) x T x h x w`` one-hot from pixel masks."""
    labels = hard_labels(downsample_mask(gt_masks, spatial_factor, patch))
    return np.moveaxis(np.eye(len(gt_masks) + 1, dtype=np.float32)[labels], -1, 0)


def prepare_clip(clip: ClipRecord, n_chars: int = 2, patch: int = 2) -> PreparedClip:
    """Tensors for one clip; single-character clips are replicated to ``n_chars`` slots."""
    base = prep_visual_conditions(clip, np.random.default_rng(0), sigma_face=0.0)
    gt = gt_token_mask(clip.gt_masks, patch)
    refs, audio, a_ac = clip.refs, clip.audio_feats, clip.a_ac.astype(np.float32)
    if clip.n_chars != n_chars:
        if clip.n_chars != 1:
            raise ValueError(f"cannot fit a {clip.n_chars}-character clip into {n_chars} slots")
        refs = np.repeat(refs, n_chars, axis=0)
        audio = np.repeat(audio, n_chars, axis=0)
        a_ac = np.eye(n_chars, dtype=np.float32)
        gt = np.concatenate([np.repeat(gt[:1] / n_chars, n_chars, axis=0), gt[1:]], axis=0)
    union = clip.gt_masks.max(axis=0).astype(np.float64)
    t, h, w = union.shape
    f = SPATIAL_FACTOR
    union = union.reshape(t, h // f, f, w // f, f).mean(axis=(2, 4))
    return PreparedClip(
        clip=clip,
        video_latent=base["video_latent"],
        ref_latent=base["ref_latent"],
        refs=refs.astype(np.float32),
        audio=audio.astype(np.float32),
        a_ac=a_ac,
        gt=gt.astype(np.float32),
        union=union.astype(np.float32),
    )


@dataclass
class Batch:
    video: torch.Tensor
    inpaint: torch.Tensor
    ref_latent: torch.Tensor
    refs: torch.Tensor
    audio: torch.Tensor
    prompt: torch.Tensor
    a_ac: torch.Tensor
    gt: torch.Tensor
    union: torch.Tensor
    dropped: dict = field(default_factory=dict)  # condition -> bool tensor (B,)

    @property
    def size(self) -> int:
        return self.video.shape[0]

    def to(self, dtype) -> "Batch":
        conv = {k: v.to(dtype) for k, v in vars(self).items() if isinstance(v, torch.Tensor) and v.is_floating_point()}
        return Batch(**{**vars(self), **conv})


def collate(items: list[PreparedClip], rng: np.random.Generator, sigma_face: float = 0.3) -> Batch:
    inpaint = [prep_visual_conditions(p.clip, rng, sigma_face=sigma_face)["inpaint_latent"] for p in items]

    def stack(xs):
        return torch.from_numpy(np.stack(xs))

    B = len(items)
    return Batch(
        video=stack([p.video_latent for p in items]),
        inpaint=stack(inpaint),
        ref_latent=stack([p.ref_latent for p in items]),
        refs=stack([p.refs for p in items]),
        audio=stack([p.audio for p in items]),
        prompt=torch.tensor([p.clip.prompt_id for p in items]),
        a_ac=stack([p.a_ac for p in items]),
        gt=stack([p.gt for p in items]),
        union=stack([p.union for p in items]),
        dropped={c: torch.zeros(B, dtype=torch.bool) for c in CONDITIONS},
    )


def drop_conditions(batch: Batch, rates: dict, rng: np.random.Generator) -> Batch:
    """Per-sample independent drops; dropped latents are zeroed, dropped
    embeddings are swapped for null embeddings at encode time.

    ``rates`` maps each of inpaint/ref/audio/text to a probability; an
    optional ``guidance`` rate drops text and audio together.
    """
    for k, r in rates.items():
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"drop rate for {k} must be in [0, 1], got {r}")
    B = batch.size
    dropped = {}
    for c in CONDITIONS:
        draw = rng.random(B) < rates.get(c, 0.0)
        dropped[c] = batch.dropped.get(c, torch.zeros(B, dtype=torch.bool)) | torch.from_numpy(draw)
    if "guidance" in rates:
        joint = torch.from_numpy(rng.random(B) < rates["guidance"])
        dropped["text"] = dropped["text"] | joint
        dropped["audio"] = dropped["audio"] | joint
    keep_inpaint = (~dropped["inpaint"]).to(batch.inpaint.dtype).reshape(B, 1, 1, 1, 1)
    keep_ref = (~dropped["ref"]).to(batch.ref_latent.dtype).reshape(B, 1, 1, 1, 1)
    out = Batch(**{**vars(batch), "dropped": dropped})
    out.inpaint = batch.inpaint * keep_inpaint
    out.ref_latent = batch.ref_latent * keep_ref
    return out


def encode_conditions(model: AvatarModel, batch: Batch, use_audio: bool = True):
    """Text, face and audio embeddings with null substitution for dropped samples."""
    B = batch.size
    frames = batch.video.shape[1]

    def pick(flag, cond, null):
        f = flag.reshape(B, *([1] * (cond.dim() - 1)))
        return torch.where(f, null.to(cond.dtype).expand_as(cond), cond)

    text = pick(batch.dropped["text"], model.text_encoder(batch.prompt), model.text_encoder.null)
    e_c = model.face_encoder(batch.refs)
    e_c = pick(batch.dropped["ref"], e_c, model.face_encoder.null)
    e_a = None
    if use_audio:
        e_a = model.audio_encoder(batch.audio, frames)
        e_a = pick(batch.dropped["audio"], e_a, model.audio_encoder.null)
    return text, e_c, e_a


def teacher_force_mask(gt, cfg: TeacherForcingConfig, rng: np.random.Generator, layers: int | None = None):
    """Augmented ground-truth gates on the class simplex.

    Cells are reset to background with probability ``p_drop``, Gaussian
    noise is added, values clamped to [0, 1] and renormalised. With
    ``layers`` set, each layer gets its own augmentation (new axis before
    the class axis).
    """
    gt = torch.as_tensor(gt)
    if layers is not None:
        gt = gt.unsqueeze(-5).expand(*gt.shape[:-4], layers, *gt.shape[-4:])
    cells = gt.shape[:-4] + gt.shape[-3:]
    drop = torch.from_numpy(rng.random(cells) < cfg.p_drop).unsqueeze(-4)
    background = torch.zeros_like(gt)
    background[..., -1, :, :, :] = 1.0
    forced = torch.where(drop, background, gt)
    if cfg.sigma_noise > 0:
        forced = forced + cfg.sigma_noise * torch.from_numpy(rng.standard_normal(gt.shape)).to(gt.dtype)
    forced = forced.clamp(0.0, 1.0)
    total = forced.sum(dim=-4, keepdim=True)
    forced = torch.where(total > 0, forced / total.clamp_min(1e-12), background)
    return forced


def gates_from_mask(mask: torch.Tensor, a_ac: torch.Tensor, inflate: bool = False):
    """Face gates ``(B, L, n, S)`` from a ``(B, L, n+1, T, h, w)`` mask; audio gates via A^ac,
    inflated as at sampling time when ``inflate`` is set."""
    face = cv_gates(mask)
    audio = compose_av(a_ac.unsqueeze(1), inflated_audio_gates(face) if inflate else face)
    return face, audio


def self_forced_mask(model: AvatarModel, plan: StagePlan, batch: Batch, z_in, t, text, e_c, e_a) -> torch.Tensor:
    """Hard masks the router itself produces layer by layer, as at sampling time."""
    used = []
    with torch.no_grad():
        gate_fn = router_gate_fn(model.router, batch.a_ac.to(z_in.dtype), plan.theta, plan.max_iters, used)
        model.dit(z_in, t, text, e_c, e_a, gate_fn=gate_fn)
    return torch.stack(used, dim=1).to(z_in.dtype)


def denoise_step(model: AvatarModel, batch: Batch, plan: StagePlan, schedule: NoiseSchedule, rng, gen):
    """One forward pass; returns (total loss, log terms)."""
    cfg = model.cfg
    B = batch.size
    dtype = batch.video.dtype
    text, e_c, e_a = encode_conditions(model, batch, plan.uses_audio)
    t = torch.randint(0, plan.t_diff, (B,), generator=gen)
    eps = torch.randn(batch.video.shape, generator=gen, dtype=dtype)
    z_t = add_noise(to_diffusion(batch.video), t, eps, schedule)
    z_in = torch.cat([z_t, batch.inpaint, batch.ref_latent], dim=2)
    if plan.teacher_forcing:
        mask = teacher_force_mask(batch.gt, plan.teacher, rng, cfg.layers).to(dtype)
        own = torch.from_numpy(rng.random(B) < plan.self_forcing)
        if own.any():
            mask = torch.where(own.view(B, 1, 1, 1, 1, 1), self_forced_mask(model, plan, batch, z_in, t, text, e_c, e_a), mask)
    else:
        mask = batch.gt.unsqueeze(1).expand(B, cfg.layers, *batch.gt.shape[1:])
    face_gates, audio_gates = gates_from_mask(mask, batch.a_ac, plan.inflate_audio)
    eps_hat, (q_tap, k_tap) = model.dit(z_in, t, text, e_c, e_a, face_gates, audio_gates if e_a is not None else None)

    apply_dynamic = torch.from_numpy(rng.random(B) < plan.dynamic_loss_rate)
    # v-prediction trains on the v error, i.e. the noise error scaled by 1 / abar_t
    weight = v_loss_weight(t, schedule).to(dtype) if cfg.prediction == "v" else None
    l_d = diffusion_loss(eps_hat, eps, batch.union, apply_dynamic, plan.kappa, weight)
    terms = {"L_d": l_d, "L_r": 0.0, "L_st": 0.0, "L_layer": 0.0, "L_router": 0.0}
    total = l_d
    if plan.teacher_forcing:
        # router sees detached taps, so its loss never reaches the denoiser
        # and the denoising loss never reaches the router
        probs = model.router(q_tap.detach(), k_tap.detach()).probs
        target = batch.gt.unsqueeze(1).expand_as(probs)
        l_router, parts = loss_router(probs, target, plan.router_weights, mean=plan.router_mean)
        terms.update(L_r=parts["ce"], L_st=parts["st"], L_layer=parts["layer"], L_router=l_router)
        total = total + plan.router_loss_weight * l_router
    return total, terms


class FrozenParameterUpdated(AssertionError):
    pass


def run_stage(
    plan: StagePlan,
    dataset: list,
    model: AvatarModel,
    seed: int = 0,
    out_dir=None,
    log_path=None,
) -> dict:
    """Train ``model`` in place for one stage and return a report.

    ``dataset`` holds :class:`PreparedClip` (or raw clips, prepared here).
    Writes ``log.jsonl`` and a checkpoint when ``out_dir`` is given.
    """
    items = [d if isinstance(d, PreparedClip) else prepare_clip(d, model.cfg.n_chars, model.cfg.patch) for d in dataset]
    if not items:
        raise ValueError("empty training set")
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng([seed, plan.stage])
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    torch.manual_seed(int(rng.integers(2**31)))
    schedule = NoiseSchedule.linear(plan.t_diff, plan.beta_start, plan.beta_end)
    model.dit.check_schedule(schedule)

    model.set_trainable(plan.trainable)
    model.train()
    trainable = [p for p in model.parameters() if p.requires_grad]
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    opt = torch.optim.Adam(trainable, lr=plan.lr)

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "log.jsonl"
    if log_path is not None:
        log_fh = open(log_path, "w")
    history = []
    try:
        for step in range(plan.steps):
            idx = rng.choice(len(items), size=plan.batch_size, replace=len(items) < plan.batch_size)
            batch = collate([items[i] for i in idx], rng, plan.sigma_face)
            batch = drop_conditions(batch, plan.dropout, rng).to(dtype)
            loss, terms = denoise_step(model, batch, plan, schedule, rng, gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for n, p in model.named_parameters():
                if n in frozen and not torch.equal(p.detach(), frozen[n]):
                    raise FrozenParameterUpdated(f"frozen parameter {n} changed in stage {plan.stage}")
            row = {"step": step, "stage": plan.stage}
            row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()})
            history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    report = {"stage": plan.stage, "steps": plan.steps, "history": history}
    if out_dir is not None:
        report["checkpoint"] = str(save_checkpoint(model, out_dir / "checkpoint", plan.stage, plan.trainable))
    return report
