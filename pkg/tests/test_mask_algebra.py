import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avatar_router.conditioning import pool_latent
from avatar_router.mask_algebra import (
    DetectionError,
    class_iou,
    compose_av,
    inflate_audio_matrix,
    inflated_audio_gates,
    mask_to_cv_matrix,
    pre_denoise_mask,
    refine_mask,
    resolve_overlap,
    segment_coarse_video,
)
from avatar_router.synthgen import ClipDims, gen_clip, sample_trajectory
from avatar_router.tensor_store import TokenGridDims, token_flatten
from avatar_router.trainer import gt_token_mask

GRID = TokenGridDims(8, 4, 4)


def make_clip(kind, seed):
    dims = ClipDims()
    return gen_clip(sample_trajectory(kind, dims, np.random.default_rng(seed)), dims, seed)


def random_mask(rng, shape):
    logits = rng.standard_normal(shape) * 2
    e = np.exp(logits)
    return torch.from_numpy(e / e.sum(axis=-4, keepdims=True))


def test_cv_matrix_examples():
    m = torch.zeros(2, 3, *GRID.shape)
    m[:, 0] = 1
    cv = mask_to_cv_matrix(m, 1)
    assert torch.equal(cv[0], torch.ones(GRID.size)) and torch.equal(cv[1], torch.zeros(GRID.size))
    bg = torch.zeros(2, 3, *GRID.shape)
    bg[:, 2] = 1
    assert not mask_to_cv_matrix(bg, 0).any()
    r = random_mask(np.random.default_rng(0), (2, 3, *GRID.shape))
    assert r[1, 0, 1, 2, 3] == mask_to_cv_matrix(r, 1)[0, token_flatten(1, 2, 3, GRID)]
    with pytest.raises(IndexError):
        mask_to_cv_matrix(r, 2)


def brute_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_compose_av():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.random((2, 6)))
    eye, swap = torch.eye(2, dtype=torch.float64), torch.eye(2, dtype=torch.float64).flip(0)
    assert torch.equal(compose_av(eye, x), x)
    assert torch.equal(compose_av(swap, x), x.flip(0))
    for _ in range(20):
        a, b = rng.random((2, 2)), rng.random((2, 6))
        assert np.abs(compose_av(a, b).numpy() - brute_matmul(a, b)).max() < 1e-6
    perms = [torch.from_numpy(np.eye(3)[list(p)]) for p in itertools.permutations(range(3))]
    y = torch.from_numpy(rng.random((3, 5)))
    for p, q in itertools.product(perms, perms):
        assert torch.allclose(compose_av(p, compose_av(q, y)), compose_av(p @ q, y))
    with pytest.raises(ValueError):
        compose_av(torch.eye(3), torch.zeros(2, 4))


def brute_refine(probs, theta, max_iters):
    """Loop-based reference: probs is C x T x H x W."""
    C, T, H, W = probs.shape
    labels = -np.ones((T, H, W), dtype=int)
    for t, h, w in itertools.product(range(T), range(H), range(W)):
        if probs[:, t, h, w].max() >= theta:
            labels[t, h, w] = int(np.argmax(probs[:, t, h, w]))
    for _ in range(max_iters):
        new = labels.copy()
        changed = False
        for t, h, w in itertools.product(range(T), range(H), range(W)):
            if labels[t, h, w] >= 0:
                continue
            counts = np.zeros(C, dtype=int)
            for dt, dh, dw in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                a, b, c = t + dt, h + dh, w + dw
                if 0 <= a < T and 0 <= b < H and 0 <= c < W and labels[a, b, c] >= 0:
                    counts[labels[a, b, c]] += 1
            if counts.max() == 0:
                continue
            tied = [k for k in range(C) if counts[k] == counts.max()]
            new[t, h, w] = max(tied, key=lambda k: (probs[k, t, h, w], -k))
            changed = True
        labels = new
        if not changed:
            break
    labels[labels < 0] = C - 1
    return np.moveaxis(np.eye(C)[labels], -1, 0)


def test_refine_all_confident_is_argmax():
    rng = np.random.default_rng(1)
    p = random_mask(rng, (3, 3, 4, 4)) * 0.0
    idx = torch.from_numpy(rng.integers(0, 3, (3, 4, 4)))
    p = torch.nn.functional.one_hot(idx, 3).movedim(-1, 0).double() * 0.9 + 0.05
    out = refine_mask(p, 0.6)
    assert torch.equal(out.argmax(0), idx)


def test_refine_single_hole_takes_neighbours():
    p = torch.zeros(3, 3, 3, 3, dtype=torch.float64)
    p[0] = 1.0
    p[:, 1, 1, 1] = torch.tensor([0.3, 0.4, 0.3], dtype=torch.float64)
    out = refine_mask(p, 0.6)
    assert out[0, 1, 1, 1] == 1


def test_refine_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        p = random_mask(rng, (3, 3, 4, 4))
        theta = float(rng.uniform(0.5, 0.9))
        got = refine_mask(p, theta, 16).numpy()
        assert np.array_equal(got, brute_refine(p.numpy(), theta, 16))


def test_refine_batched_layers_and_idempotent():
    rng = np.random.default_rng(3)
    p = random_mask(rng, (2, 4, 3, *GRID.shape))
    out = refine_mask(p)
    for b, l in itertools.product(range(2), range(4)):
        assert torch.equal(out[b, l], refine_mask(p[b, l]))
    assert torch.equal(refine_mask(out), out)
    assert torch.equal(out.sum(-4), torch.ones_like(out.sum(-4)))


def test_inflate_examples():
    x = torch.tensor([[1.0, 0, 0], [0, 0, 1]])
    assert torch.equal(inflate_audio_matrix(x), torch.tensor([[1.0, 1, 0], [0, 1, 1]]))
    part = torch.tensor([[1.0, 0, 1], [0, 1, 0]])
    assert torch.equal(inflate_audio_matrix(part), part)
    assert torch.equal(inflate_audio_matrix(torch.zeros(2, 4)), torch.ones(2, 4))
    with pytest.raises(NotImplementedError):
        inflate_audio_matrix(torch.zeros(3, 4))


def test_inflated_gates_keep_replicated_character():
    two = torch.tensor([[[1.0, 0, 0], [0, 0, 1]], [[0.0, 1, 0], [0, 1, 0]]])
    got = inflated_audio_gates(two)
    assert torch.equal(got[0], torch.tensor([[1.0, 1, 0], [0, 1, 1]]))
    # identical rows: a single character copied into both slots
    assert torch.equal(got[1], two[1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=2, max_size=12))
def test_inflate_twice_matches_brute_force(labels):
    x = np.zeros((2, len(labels)))
    for s, c in enumerate(labels):
        if c < 2:
            x[c, s] = 1
    once = np.stack([1 - x[1], 1 - x[0]])
    twice = np.stack([1 - once[1], 1 - once[0]])
    got = inflate_audio_matrix(inflate_audio_matrix(torch.from_numpy(x)))
    assert np.array_equal(got.numpy(), twice)


def test_pre_denoise_mask_static_clip():
    clip = make_clip("static", 4)
    m = pre_denoise_mask(clip.inpaint, clip.refs, GRID, layers=2)
    assert m.shape == (2, 3, *GRID.shape)
    assert np.array_equal(m[:, :, 0], m[:, :, -1])
    gt = gt_token_mask(clip.gt_masks, 2)
    pred, target = m[0, :, 0].argmax(0), gt[:, 0].argmax(0)
    for c in range(2):
        assert class_iou(pred, target, c) >= 0.5
    assert not np.logical_and(m[0, 0] > 0, m[0, 1] > 0).any()


def test_pre_denoise_mask_detection_error():
    clip = make_clip("static", 4)
    blank = np.full_like(clip.inpaint, 0.05)
    with pytest.raises(DetectionError):
        pre_denoise_mask(blank, clip.refs, GRID)


def test_overlap_goes_to_nearer_centroid():
    a = np.zeros((2, 6, 6), dtype=bool)
    a[0, 0:4, 0:4] = True
    a[1, 2:6, 2:6] = True
    out = resolve_overlap(a)
    assert not np.logical_and(out[0], out[1]).any()
    assert out[0, 2, 2] and out[1, 3, 3]


def test_segmenter_on_pooled_gt():
    for seed in range(12):
        clip = make_clip(("static", "parallel", "crossing")[seed % 3], seed)
        latent = pool_latent(clip.video.astype(np.float64))
        m = segment_coarse_video(latent, clip.refs, GRID)
        gt = gt_token_mask(clip.gt_masks, 2)
        pred, target = m[0].argmax(0), gt.argmax(0)
        for c in range(2):
            assert class_iou(pred, target, c) >= 0.9


def test_segmenter_monochrome_is_background():
    clip = make_clip("static", 0)
    m = segment_coarse_video(np.full((8, 3, 8, 8), 0.4), clip.refs, GRID)
    assert (m[0].argmax(0) == 2).all()


def test_segmenter_crossing_centroid_monotone():
    clip = make_clip("crossing", 5)
    m = segment_coarse_video(pool_latent(clip.video.astype(np.float64)), clip.refs, GRID)
    labels = m[0].argmax(0)
    cols = [np.nonzero(labels[t] == 0)[1].mean() for t in range(8)]
    assert all(b >= a for a, b in zip(cols, cols[1:])) and cols[-1] > cols[0]
