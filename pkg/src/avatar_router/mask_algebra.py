"""Routing-mask algebra: matrix views, composition, refinement and the
detector/segmenter paths used by the pre- and post-denoise routers.

Routing masks are tensors shaped ``(..., n + 1, T', h, w)`` whose last
class is background.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

from .tensor_store import TIE_MARGIN, TokenGridDims


class DetectionError(RuntimeError):
    pass


def mask_to_cv_matrix(mask: torch.Tensor, layer: int) -> torch.Tensor:
    """Character rows of layer ``layer`` flattened t-major to ``n x S``."""
    if not 0 <= layer < mask.shape[0]:
        raise IndexError(f"layer {layer} out of range for {mask.shape[0]} layers")
    chars = mask[layer, :-1]
    return chars.reshape(chars.shape[0], -1)


def cv_gates(mask: torch.Tensor) -> torch.Tensor:
    """All layers at once: ``(..., n+1, T, h, w)`` to ``(..., n, S)``."""
    chars = mask[..., :-1, :, :, :]
    return chars.flatten(-3)


def compose_av(a_ac, a_cv):
    """Audio-visual matrix: audio-character matrix times character-visual matrix."""
    a_ac = torch.as_tensor(a_ac)
    a_cv = torch.as_tensor(a_cv)
    if a_ac.shape[-1] != a_cv.shape[-2] or a_ac.shape[-2] != a_ac.shape[-1]:
        raise ValueError(f"cannot compose {tuple(a_ac.shape)} with {tuple(a_cv.shape)}")
    return a_ac.to(a_cv.dtype) @ a_cv


def _neighbour_counts(onehot: torch.Tensor) -> torch.Tensor:
    """Sum of labelled one-hots over the 6-neighbourhood; onehot is (..., T, H, W, C)."""
    counts = torch.zeros_like(onehot)
    for axis in (-4, -3, -2):
        size = onehot.shape[axis]
        if size < 2:
            continue
        lo = onehot.narrow(axis, 0, size - 1)
        hi = onehot.narrow(axis, 1, size - 1)
        counts.narrow(axis, 1, size - 1).add_(lo)
        counts.narrow(axis, 0, size - 1).add_(hi)
    return counts


def refine_mask(mask: torch.Tensor, theta: float = 0.6, max_iters: int = 16) -> torch.Tensor:
    """Confidence-seeded label propagation to a one-hot mask.

    Tokens with max probability >= ``theta`` keep their argmax. Each sweep
    assigns every unlabelled token the majority label of its labelled
    6-neighbours (ties: highest own probability, then lowest class index).
    Sweeps are synchronous. Leftover tokens become background.
    """
    probs = mask.detach()
    n_cls = probs.shape[-4]
    classes_last = probs.movedim(-4, -1)
    conf, arg = classes_last.max(dim=-1)
    labels = torch.where(conf >= theta, arg, torch.full_like(arg, -1))
    for _ in range(max_iters):
        unlabeled = labels < 0
        if not unlabeled.any():
            break
        onehot = torch.nn.functional.one_hot(labels.clamp_min(0), n_cls).to(torch.int64)
        onehot = onehot * (~unlabeled).unsqueeze(-1)
        counts = _neighbour_counts(onehot)
        best = counts.max(dim=-1, keepdim=True).values
        tied = (counts == best) & (best > 0)
        choice = torch.where(tied, classes_last, torch.full_like(classes_last, -float("inf"))).argmax(dim=-1)
        update = unlabeled & tied.any(dim=-1)
        if not update.any():
            break
        labels = torch.where(update, choice, labels)
    labels = torch.where(labels < 0, torch.full_like(labels, n_cls - 1), labels)
    return torch.nn.functional.one_hot(labels, n_cls).movedim(-1, -4).to(mask.dtype)


def inflate_audio_matrix(a_cv_hard: torch.Tensor) -> torch.Tensor:
    """Row ``i`` becomes ``1 - row(other)``; defined for two characters only."""
    if a_cv_hard.shape[-2] != 2:
        raise NotImplementedError("audio-mask inflation is defined for n = 2 only")
    return 1.0 - a_cv_hard.flip(-2)


def _ref_colors(refs: np.ndarray) -> np.ndarray:
    colors = []
    for ref in refs:
        px = ref.reshape(3, -1).T
        sat = px.max(1) - px.min(1)
        keep = px[(px.max(1) > 0.05) & (sat > 0.15)]
        colors.append(np.median(keep, axis=0) if len(keep) else px.mean(0))
    return np.asarray(colors)


def segment_characters(
    frame: np.ndarray,
    ref_colors: np.ndarray,
    fg_thresh: float = 0.3,
    sat_thresh: float = 0.15,
) -> np.ndarray:
    """Exclusive per-character boolean masks ``n x h x w`` for one RGB frame.

    Saturated foreground pixels go to the reference with the closest
    chromaticity; each character keeps its largest 8-connected component
    with holes filled. Overlaps go to the nearer component centroid.
    """
    n = len(ref_colors)
    h, w = frame.shape[-2:]
    px = frame.reshape(3, -1).T
    colored = (px.max(1) > fg_thresh) & (px.max(1) - px.min(1) > sat_thresh)
    unit = px / np.maximum(np.linalg.norm(px, axis=1, keepdims=True), 1e-8)
    refs = ref_colors / np.maximum(np.linalg.norm(ref_colors, axis=1, keepdims=True), 1e-8)
    assign = (unit @ refs.T).argmax(1)
    masks = np.zeros((n, h, w), dtype=bool)
    for i in range(n):
        m = (colored & (assign == i)).reshape(h, w)
        lab, count = ndimage.label(m, structure=np.ones((3, 3)))
        if count == 0:
            continue
        sizes = ndimage.sum(m, lab, index=np.arange(1, count + 1))
        masks[i] = ndimage.binary_fill_holes(lab == (1 + int(np.argmax(sizes))))
    return resolve_overlap(masks)


def resolve_overlap(masks: np.ndarray) -> np.ndarray:
    """Give pixels claimed by several characters to the nearest centroid."""
    overlap = masks.sum(0) > 1
    if not overlap.any():
        return masks
    yy, xx = np.mgrid[0 : masks.shape[1], 0 : masks.shape[2]]
    dists = []
    for m in masks:
        if m.any():
            cy, cx = yy[m].mean(), xx[m].mean()
            dists.append((yy - cy) ** 2 + (xx - cx) ** 2)
        else:
            dists.append(np.full(m.shape, np.inf))
    dists = np.where(masks, np.stack(dists), np.inf)
    nearest = dists.argmin(0)
    out = masks.copy()
    for i in range(len(masks)):
        out[i][overlap] = nearest[overlap] == i
    return out


def character_coverage(frame: np.ndarray, ref_colors: np.ndarray) -> np.ndarray:
    """Soft per-pixel coverage ``n x h x w`` for a pooled (anti-aliased) frame.

    Each character's support is its segment grown by one pixel. Inside the
    support, coverage is the projection of ``pixel - background`` onto
    ``colour - background``; filled holes (the mouth) count as fully covered.
    """
    hard = segment_characters(frame, ref_colors)
    support = np.stack([ndimage.binary_dilation(m, structure=np.ones((3, 3))) if m.any() else m for m in hard])
    support = resolve_overlap(support)
    outside = ~support.any(0)
    px = frame.reshape(3, -1)
    bg = np.median(px[:, outside.ravel()], axis=1) if outside.any() else px.min(axis=1)
    cov = np.zeros(hard.shape)
    colored = (frame.max(0) - frame.min(0)) > 0.15
    for i, color in enumerate(ref_colors):
        if not hard[i].any():
            continue
        direction = color - bg
        proj = np.tensordot(direction, frame - bg[:, None, None], axes=1) / max(direction @ direction, 1e-8)
        c = np.clip(proj, 0.0, 1.0) * support[i]
        c[hard[i] & ~colored] = 1.0
        cov[i] = c
    return cov


def pixel_to_token_onehot(masks: np.ndarray, dims: TokenGridDims) -> np.ndarray:
    """Exclusive (or soft) ``n x T x H x W`` masks to a hard one-hot
    ``(n+1) x ...`` token field by area mean and argmax (background last)."""
    m = masks.astype(np.float64)
    h, w = m.shape[-2:]
    if h % dims.h_len or w % dims.w_len:
        raise ValueError(f"{h}x{w} pixels do not tile a {dims.h_len}x{dims.w_len} token grid")
    bh, bw = h // dims.h_len, w // dims.w_len
    pooled = m.reshape(*m.shape[:-2], dims.h_len, bh, dims.w_len, bw).mean(axis=(-1, -3))
    bg = 1.0 - pooled.sum(axis=0, keepdims=True) - TIE_MARGIN
    labels = np.concatenate([pooled, bg], axis=0).argmax(axis=0)
    return np.moveaxis(np.eye(len(masks) + 1, dtype=np.float32)[labels], -1, 0)


def pre_denoise_mask(inpaint: np.ndarray, refs: np.ndarray, dims: TokenGridDims, layers: int = 1) -> np.ndarray:
    """Static box mask from the inpainting frame, shaped ``L x (n+1) x T' x h x w``."""
    colors = _ref_colors(np.asarray(refs))
    chars = segment_characters(np.asarray(inpaint, dtype=np.float64), colors)
    n, h, w = chars.shape
    # a replicated single-character reference stays empty; its first copy holds the face
    dup = [any(np.allclose(colors[i], colors[j]) for j in range(i)) for i in range(n)]
    expected = n - sum(dup)
    if any(not m.any() for m, d in zip(chars, dup) if not d):
        raise DetectionError(f"found {sum(m.any() for m in chars)} characters, expected {expected}")
    boxes = np.zeros_like(chars)
    for i, m in enumerate(chars):
        if not m.any():
            continue
        ys, xs = np.nonzero(m)
        boxes[i, ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = True
    boxes = resolve_overlap(boxes)
    frame = pixel_to_token_onehot(boxes, dims)
    video = np.repeat(frame[:, None], dims.t_len, axis=1)
    return np.repeat(video[None], layers, axis=0)


def segment_coarse_video(latent: np.ndarray, refs: np.ndarray, dims: TokenGridDims, layers: int = 1) -> np.ndarray:
    """Per-frame colour segmentation of a decoded latent, ``L x (n+1) x T' x h x w``."""
    latent = np.asarray(latent, dtype=np.float64)
    colors = _ref_colors(np.asarray(refs))
    per_frame = np.stack([character_coverage(f, colors) for f in latent], axis=1)
    mask = pixel_to_token_onehot(per_frame, dims)
    return np.repeat(mask[None], layers, axis=0)


def inflated_audio_gates(face_gates: torch.Tensor) -> torch.Tensor:
    """Inflate ``(..., 2, S)`` character gates; a replicated single character
    (identical rows) keeps its own gate, since 1 - other would be its complement."""
    same = (face_gates[..., 0, :] == face_gates[..., 1, :]).all(-1)[..., None, None]
    return torch.where(same, face_gates, inflate_audio_matrix(face_gates))


def inference_audio_gates(mask: torch.Tensor, a_ac: torch.Tensor) -> torch.Tensor:
    """Inflated, A^ac-composed audio gates from a ``(..., n+1, T, h, w)`` mask."""
    return compose_av(a_ac, inflated_audio_gates(cv_gates(mask)))


def router_gate_fn(router, a_ac: torch.Tensor, theta: float = 0.6, max_iters: int = 16, store=None):
    """Per-layer ``gate_fn`` for the denoiser: route the layer's taps, refine,
    return (face gates, audio gates). Hard masks are appended to ``store``."""

    def gate_fn(layer, q_tap, k_tap):
        probs = router(q_tap[:, None], k_tap[:, None], layers=[layer]).probs[:, 0]
        hard = refine_mask(probs, theta, max_iters)
        if store is not None:
            store.append(hard)
        return cv_gates(hard), inference_audio_gates(hard, a_ac)

    return gate_fn


def argmax_labels(mask) -> np.ndarray:
    """Class index per token of a ``(n+1) x ...`` field (torch or numpy)."""
    arr = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    return arr.argmax(axis=0)


def class_iou(pred_labels: np.ndarray, gt_labels: np.ndarray, cls: int) -> float:
    p, g = pred_labels == cls, gt_labels == cls
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)
