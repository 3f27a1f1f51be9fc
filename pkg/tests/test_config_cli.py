import json

import numpy as np
import pytest
import torch
from PIL import Image

from avatar_router.cli import MASK_PALETTE, main, mask_image
from avatar_router.config import Config, ConfigError, dump_config, load_config, parse_config
from avatar_router.evaluate import mask_iou, pooled_video, routing_correct, sync_margin
from avatar_router.model import AvatarModel, load_checkpoint, save_checkpoint
from avatar_router.tensor_store import write_tensor
from avatar_router.trainer import prepare_clip

from .conftest import tiny_model_config

TINY = """
# tiny model so the command tests run in seconds
[model]
layers = 2
d_model = 16
heads = 2
face_queries = 2
router_width = 8
router_heads = 2
router_blocks = 1

[train]
batch_size = 2
lr = 1e-3  # inline comments are allowed
"""


def test_config_defaults_match_constants():
    cfg = Config()
    w = cfg.router_weights()
    assert (w.ce, w.st, w.layer) == (1.0, 0.001, 8.0)
    assert cfg.sampler.steps == 50 and cfg.sampler.cfg_scale == 7.0
    assert cfg.train.cond_drop == 0.05
    plan = cfg.stage_plan(3)
    assert plan.teacher.p_drop == 0.1 and plan.teacher.sigma_noise == 0.05
    with pytest.raises(ConfigError):
        cfg.stage_plan(0)


def test_config_parse_and_roundtrip(tmp_path):
    cfg = parse_config(TINY + "[router]\nmean = true\n")
    assert cfg.model.layers == 2 and cfg.train.lr == 1e-3 and cfg.router.mean is True
    again = parse_config(dump_config(cfg))
    assert again == cfg
    path = tmp_path / "c.cfg"
    path.write_text(TINY)
    assert load_config(path).model.d_model == 16
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nlrr = 1",
        "[bogus]\nx = 1",
        "lr = 1",
        "[train]\nlr 1",
        "[train]\nlr = 1\nlr = 2",
        "[train]\nsteps_stage1 = many",
        "[router]\nmean = maybe",
        "[router]\nst = -1",
    ],
)
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "16", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_gen_data(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["clips"]) == 16
    again = tmp_path / "again"
    assert main(["gen-data", "--count", "16", "--seed", "7", "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == (dataset / "manifest.json").read_bytes()
    assert main(["gen-data", "--mix", "2.0", "--out", str(tmp_path / "bad")]) == 2
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "bad")]) == 2


def test_train_stage_chain(dataset, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    base = ["train", "--config", str(cfg), "--data", str(dataset), "--steps", "3"]
    assert main(base + ["--stage", "2", "--out", str(tmp_path / "s2")]) == 2
    assert main(base + ["--stage", "1", "--out", str(tmp_path / "s1")]) == 0
    assert len((tmp_path / "s1" / "log.jsonl").read_text().splitlines()) == 3
    ck1 = tmp_path / "s1" / "checkpoint"
    assert load_checkpoint(ck1)[1]["stage"] == 1
    # stage 3 cannot resume from stage 1
    assert main(base + ["--stage", "3", "--resume", str(ck1), "--out", str(tmp_path / "s3")]) == 2
    assert main(base + ["--stage", "2", "--resume", str(ck1), "--out", str(tmp_path / "s2")]) == 0
    ck2 = tmp_path / "s2" / "checkpoint"
    assert main(base + ["--stage", "3", "--resume", str(ck2), "--out", str(tmp_path / "s3")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "s3" / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 3 and all(r["L_router"] > 0 for r in rows)
    assert main(["train", "--stage", "1", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x")]) == 2


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    torch.manual_seed(0)
    model = AvatarModel(tiny_model_config())
    return {s: save_checkpoint(model, out / f"stage{s}", stage=s) for s in (2, 3)}


def clip_dir(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    entry = next(c for c in manifest["clips"] if c["n_chars"] == 2)
    return dataset / entry["path"]


def test_sample_command(dataset, checkpoints, tmp_path, capsys):
    clip = str(clip_dir(dataset))
    post = ["sample", "--mode", "post", "--steps", "50", "--ckpt", str(checkpoints[3]), "--clip", clip]
    assert main(post + ["--out", str(tmp_path / "post")]) == 0
    assert capsys.readouterr().out.strip().endswith("nfe 200")
    intra = ["sample", "--mode", "intra", "--steps", "3", "--seed", "5", "--ckpt", str(checkpoints[3]), "--clip", clip]
    assert main(intra + ["--out", str(tmp_path / "a")]) == 0
    assert main(intra + ["--out", str(tmp_path / "b")]) == 0
    for name in ("video.byat", "view.u8.byat", "masks_step2.byat", "result.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["sample", "--mode", "pre", "--clip", clip, "--out", str(tmp_path / "c")]) == 2
    pre = ["sample", "--mode", "pre", "--steps", "2", "--ckpt", str(checkpoints[3]), "--clip", clip]
    assert main(pre + ["--no-inpaint", "--out", str(tmp_path / "c")]) == 2
    # intra needs a trained router
    assert main(["sample", "--mode", "intra", "--ckpt", str(checkpoints[2]), "--clip", clip, "--out", str(tmp_path / "d")]) == 2
    assert main(["sample", "--mode", "pre", "--ckpt", str(tmp_path / "none"), "--clip", clip, "--out", str(tmp_path / "e")]) == 2


def test_sample_from_conditions_dir(dataset, checkpoints, tmp_path, capsys):
    from avatar_router.synthgen import load_clip

    clip = load_clip(clip_dir(dataset))
    cond = tmp_path / "cond"
    cond.mkdir()
    write_tensor(clip.refs, cond / "refs.byat")
    write_tensor(clip.audio_feats, cond / "audio.byat")
    write_tensor(clip.inpaint, cond / "inpaint.byat")
    meta = {"prompt_id": clip.prompt_id, "a_ac": clip.a_ac.tolist(), "face_boxes": [b[0] for b in clip.mouth_boxes]}
    (cond / "conditions.json").write_text(json.dumps(meta))
    args = ["sample", "--mode", "pre", "--steps", "2", "--ckpt", str(checkpoints[3]), "--conditions", str(cond)]
    assert main(args + ["--out", str(tmp_path / "out")]) == 0
    assert "nfe 4" in capsys.readouterr().out


def test_eval_ground_truth_paths(toy_clips):
    for clip in toy_clips:
        gt = prepare_clip(clip).gt
        assert mask_iou(gt, gt) == [1.0, 1.0]
        assert mask_iou(np.stack([gt, gt]), gt) == [1.0, 1.0]
        assert routing_correct(clip)
        if clip.n_chars == 2:
            assert sync_margin(pooled_video(clip), clip) >= 0.3
            assert sync_margin(clip.video, clip) >= 0.3


def test_eval_command(dataset, checkpoints, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    args = ["eval", "--ckpt", str(checkpoints[3]), "--data", str(dataset), "--split", "train", "--mode", "pre"]
    assert main(args + ["--steps", "2", "--limit", "3", "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    clips, agg = report["clips"], report["aggregate"]
    assert agg["clips"] == len(clips) == 3
    for key in ("routing_accuracy", "sync_proxy_margin", "eps_mse"):
        assert abs(agg[key] - np.mean([c[key] for c in clips])) < 1e-9
    for i in range(2):
        assert abs(agg["mask_iou"][i] - np.mean([c["mask_iou"][i] for c in clips])) < 1e-9
    assert all(0 <= v <= 1 for c in clips for v in c["mask_iou"])
    assert 0 <= agg["routing_accuracy"] <= 1
    assert main(args + ["--split", "nosuch"]) == 2


def synthetic_sample_dir(tmp_path):
    labels = np.zeros((8, 4, 4), dtype=int)
    labels[:, :2, :] = 0
    labels[:, 2:, :2] = 1
    labels[:, 2:, 2:] = 2
    labels[0, 0, 0] = 2
    mask = np.moveaxis(np.eye(3, dtype=np.float32)[labels], -1, 0)[None]
    d = tmp_path / "sample"
    d.mkdir()
    write_tensor(mask, d / "masks_step0.byat")
    return d, labels


def test_inspect_mask_png(tmp_path, capsys):
    d, labels = synthetic_sample_dir(tmp_path)
    assert main(["inspect-mask", "--sample-dir", str(d), "--out", str(tmp_path / "a")]) == 0
    path = tmp_path / "a" / "mask_layer0_step0.png"
    img = np.asarray(Image.open(path).convert("RGB"))
    assert img.shape == (4 * 8, 8 * 4 * 8, 3)
    colours, counts = np.unique(img.reshape(-1, 3), axis=0, return_counts=True)
    found = {tuple(c): n for c, n in zip(colours, counts)}
    assert len(found) == 3
    for cls in range(3):
        assert found[tuple(MASK_PALETTE[cls])] == int((labels == cls).sum()) * 64
    # one panel per frame
    panels = np.split(img, 8, axis=1)
    assert len(panels) == 8 and not np.array_equal(panels[0], panels[1])
    assert main(["inspect-mask", "--sample-dir", str(d), "--out", str(tmp_path / "b")]) == 0
    assert path.read_bytes() == (tmp_path / "b" / "mask_layer0_step0.png").read_bytes()


def test_inspect_mask_gif_and_errors(tmp_path):
    d, _ = synthetic_sample_dir(tmp_path)
    assert main(["inspect-mask", "--sample-dir", str(d), "--format", "gif"]) == 0
    gif = Image.open(d / "mask_layer0_step0.gif")
    # identical consecutive frames are merged by the encoder, durations add up
    total = 0
    for k in range(gif.n_frames):
        gif.seek(k)
        total += gif.info["duration"]
    assert total == 8 * 250
    assert main(["inspect-mask", "--sample-dir", str(tmp_path / "empty")]) == 2
    assert main(["inspect-mask", "--sample-dir", str(d), "--layer", "3"]) == 2
    assert main(["inspect-mask", "--sample-dir", str(d), "--step", "4"]) == 2


def test_mask_image_known_counts():
    m = np.zeros((3, 2, 1, 2))
    m[0, :, 0, 0] = 1
    m[2, :, 0, 1] = 1
    img = mask_image(m, cell=2)
    assert img.shape == (2, 8, 3)
    assert (img[:, :2] == MASK_PALETTE[0]).all() and (img[:, 2:4] == MASK_PALETTE[2]).all()
