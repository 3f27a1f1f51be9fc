import numpy as np
import pytest
import torch

from avatar_router.conditioning import (
    AudioProjector,
    FaceEncoder,
    TextEmbedding,
    audio_project,
    envelope_mouth_scores,
    face_encode,
    predict_audio_character_matrix,
    prep_visual_conditions,
    score_clip,
    text_embed,
)
from avatar_router.synthgen import ClipDims, gen_clip, sample_trajectory

from .helpers import finite_difference_check

DIMS = ClipDims()


def make_clip(kind="static", seed=0):
    return gen_clip(sample_trajectory(kind, DIMS, np.random.default_rng(seed)), DIMS, seed)


def test_audio_project_shape_and_zero():
    proj = AudioProjector(8, 64, 4)
    assert audio_project(torch.randn(2, 32, 8), proj, 8).shape == (2, 8, 64)
    with torch.no_grad():
        proj.proj.bias.zero_()
        proj.conv.bias.zero_()
    assert torch.equal(proj(torch.zeros(2, 32, 8), 8), torch.zeros(2, 8, 64))


def test_audio_project_rejects_bad_length():
    with pytest.raises(ValueError):
        AudioProjector(8, 16, 4)(torch.randn(2, 30, 8), 8)


def test_audio_project_gradient():
    torch.manual_seed(0)
    proj = AudioProjector(3, 4, 2).double()
    feats = torch.randn(2, 6, 3, dtype=torch.float64)
    err = finite_difference_check(lambda: proj(feats, 3).sum(), [proj.proj.weight, proj.conv.weight])
    assert err < 1e-4


def test_face_encode_permutation_equivariant():
    torch.manual_seed(0)
    enc = FaceEncoder(64, 4)
    refs = torch.from_numpy(make_clip().refs)
    out = face_encode(refs, None, enc)
    swapped = face_encode(refs.flip(0), None, enc)
    assert out.shape == (2, 4, 64)
    assert torch.allclose(swapped, out.flip(0), atol=0, rtol=0)


def test_face_encode_distinct_characters():
    torch.manual_seed(0)
    enc = FaceEncoder(64, 4)
    out = enc(torch.from_numpy(make_clip(seed=3).refs))
    cos = torch.nn.functional.cosine_similarity(out[0], out[1], dim=-1)
    assert cos.max() < 0.99


def test_text_embed():
    torch.manual_seed(0)
    table = TextEmbedding(4, 4, 64)
    assert torch.equal(text_embed(1, table), text_embed(1, table))
    assert text_embed(0, table).shape == (4, 64)
    assert not torch.allclose(text_embed(0, table), text_embed(1, table))
    with pytest.raises(ValueError):
        text_embed(4, table)


def test_prep_visual_conditions():
    clip = make_clip("crossing", 2)
    out = prep_visual_conditions(clip, np.random.default_rng(0), sigma_face=0.0)
    pooled = clip.inpaint.astype(np.float64).reshape(3, 8, 4, 8, 4).mean(axis=(2, 4))
    assert np.allclose(out["inpaint_latent"][0], pooled, atol=1e-7)
    assert not out["inpaint_latent"][1:].any() and not out["ref_latent"][1:].any()
    z = np.concatenate([out["video_latent"], out["inpaint_latent"], out["ref_latent"]], axis=1)
    assert z.shape == (8, 9, 8, 8)

    noisy = prep_visual_conditions(clip, np.random.default_rng(0), sigma_face=0.3)
    again = prep_visual_conditions(clip, np.random.default_rng(0), sigma_face=0.3)
    assert np.array_equal(noisy["inpaint_latent"], again["inpaint_latent"])
    assert not np.array_equal(noisy["inpaint_latent"], out["inpaint_latent"])

    dropped = prep_visual_conditions(clip, np.random.default_rng(0), drop_inpaint=True)
    assert dropped["inpaint_dropped"] and not dropped["inpaint_latent"].any()


def test_predict_audio_character_matrix_examples():
    ident = np.tile(np.array([[0.9, 0.1], [0.2, 0.8]]), (3, 1, 1))
    swap = np.tile(np.array([[0.1, 0.9], [0.8, 0.2]]), (3, 1, 1))
    assert np.array_equal(predict_audio_character_matrix(ident), np.eye(2))
    assert np.array_equal(predict_audio_character_matrix(swap), np.eye(2)[::-1])
    tie = np.stack([ident[0], swap[0]])
    assert np.array_equal(predict_audio_character_matrix(tie), np.eye(2))
    with pytest.raises(ValueError):
        predict_audio_character_matrix(np.zeros((1, 5, 5)))


def test_predict_is_permutation():
    rng = np.random.default_rng(0)
    for n in (2, 3, 4):
        for _ in range(20):
            m = predict_audio_character_matrix(rng.random((3, n, n)))
            assert (m.sum(0) == 1).all() and (m.sum(1) == 1).all()


def test_gt_scorer_recovers_assignment():
    for seed in range(20):
        clip = make_clip(("static", "parallel", "crossing")[seed % 3], seed)
        assert np.array_equal(predict_audio_character_matrix(score_clip(clip)), clip.a_ac)
        assert envelope_mouth_scores(clip.frame_envelopes(), np.zeros((2, 8))).shape == (2, 2, 2)
