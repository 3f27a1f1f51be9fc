"""Synthetic talking-disc clips with exact ground truth.

Each character is a colored disc whose mouth (one latent-cell-aligned square
at the disc center) brightens with that character's audio envelope.
Trajectories come in four kinds, each fully determined by its first frame,
so a conditional model can in principle reproduce the motion.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .tensor_store import read_tensor, write_tensor

KINDS = ("static", "parallel", "crossing", "single")
PROMPT_IDS = {k: i for i, k in enumerate(KINDS)}

# Projection used by every clip; the audio encoder must see one fixed mapping.
FEATURE_SEED = 1234
SPATIAL_FACTOR = 4
BACKGROUND = (0.05, 0.05, 0.10)
PALETTE = (
    (0.90, 0.15, 0.10),
    (0.10, 0.80, 0.20),
    (0.15, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.15, 0.85),
    (0.10, 0.85, 0.90),
)
MAX_ENVELOPE_CORR = 0.5


@dataclass(frozen=True)
class ClipDims:
    T: int = 8
    H: int = 32
    W: int = 32
    T_a: int = 32
    d_a: int = 8

    def __post_init__(self):
        if min(self.T, self.H, self.W, self.T_a, self.d_a) <= 0:
            raise ValueError(f"dims must be positive: {self}")
        if self.T_a % self.T:
            raise ValueError(f"T_a={self.T_a} must be a multiple of T={self.T}")

    @property
    def ref_size(self) -> int:
        return min(self.H, self.W) // 2


@dataclass
class TrajectorySpec:
    kind: str
    starts: list  # per character (x, y) in pixels
    velocities: list  # per character (vx, vy) in pixels per frame
    radii: list
    colors: list

    def centers(self, t: float) -> list[tuple[float, float]]:
        return [(x + vx * t, y + vy * t) for (x, y), (vx, vy) in zip(self.starts, self.velocities)]

    @property
    def n_chars(self) -> int:
        return len(self.starts)


@dataclass
class ClipRecord:
    video: np.ndarray  # T x 3 x H x W
    gt_masks: np.ndarray  # n x T x H x W, u8
    audio_feats: np.ndarray  # n x T_a x d_a
    envelopes: np.ndarray  # n x T_a
    a_ac: np.ndarray  # n x n, u8
    refs: np.ndarray  # n x 3 x R x R
    inpaint: np.ndarray  # 3 x H x W
    prompt_id: int
    mouth_boxes: list  # [char][frame] -> [x0, y0, x1, y1]
    seed: int
    n_chars: int
    kind: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def frame_envelopes(self) -> np.ndarray:
        """Audio envelopes block-averaged to the video frame rate (n x T)."""
        return frame_rate(self.envelopes, self.video.shape[0])

    def character_envelopes(self) -> np.ndarray:
        """Frame-rate envelope driving each character (character order)."""
        return self.a_ac.T.astype(np.float64) @ self.frame_envelopes()


def frame_rate(envelopes: np.ndarray, frames: int) -> np.ndarray:
    env = np.asarray(envelopes, dtype=np.float64)
    stride = env.shape[-1] // frames
    return env.reshape(*env.shape[:-1], frames, stride).mean(axis=-1)


def _projection(seed: int, d_a: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    p = rng.standard_normal(d_a)
    p /= np.linalg.norm(p)
    b = 0.1 * rng.standard_normal(d_a)
    return p, b


def envelope_to_features(envelope, seed: int, d_a: int) -> np.ndarray:
    """Affine lift ``env[t] * p + b`` with seed-derived unit ``p``."""
    env = np.asarray(envelope, dtype=np.float64)
    p, b = _projection(seed, d_a)
    return (env[:, None] * p[None, :] + b[None, :]).astype(np.float32)


def features_to_envelope(feats, seed: int) -> np.ndarray:
    """Least-squares inverse of :func:`envelope_to_features`."""
    f = np.asarray(feats, dtype=np.float64)
    p, b = _projection(seed, f.shape[-1])
    return (f - b) @ p / (p @ p)


def sample_trajectory(kind: str, dims: ClipDims, rng: np.random.Generator) -> TrajectorySpec:
    if kind not in KINDS:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    H, W, T = dims.H, dims.W, dims.T
    span = max(T - 1, 1)
    s = min(H, W)
    n = 1 if kind == "single" else 2
    radii = [float(rng.uniform(0.2125, 0.2375) * s) for _ in range(n)]
    picks = rng.choice(len(PALETTE), size=n, replace=False)
    colors = [tuple(float(c) for c in PALETTE[i]) for i in picks]

    if kind == "static":
        ys = rng.uniform(0.25 * H, 0.75 * H, size=2)
        starts = [(rng.uniform(0.2375, 0.2563) * W, ys[0]), (rng.uniform(0.7437, 0.7625) * W, ys[1])]
        vel = [(0.0, 0.0), (0.0, 0.0)]
    elif kind == "parallel":
        down = bool(rng.integers(2))
        y0 = rng.uniform(0.25, 0.3125) * H if down else rng.uniform(0.6875, 0.75) * H
        vy = (0.4375 * H / span) * (1 if down else -1)
        starts = [(0.25 * W, y0), (0.75 * W, y0)]
        vel = [(0.0, vy), (0.0, vy)]
    elif kind == "crossing":
        top_first = bool(rng.integers(2))
        rows = (0.25 * H, 0.75 * H) if top_first else (0.75 * H, 0.25 * H)
        vx = 0.5 * W / span
        starts = [(0.25 * W, rows[0]), (0.75 * W, rows[1])]
        vel = [(vx, 0.0), (-vx, 0.0)]
    else:
        right = bool(rng.integers(2))
        x0 = rng.uniform(0.25, 0.3) * W if right else rng.uniform(0.7, 0.75) * W
        vx = (0.375 * W / span) * (1 if right else -1)
        starts = [(x0, rng.uniform(0.25 * H, 0.75 * H))]
        vel = [(vx, 0.0)]
    starts = [(float(x), float(y)) for x, y in starts]
    return TrajectorySpec(kind=kind, starts=starts, velocities=vel, radii=radii, colors=colors)


def _check_inside(spec: TrajectorySpec, dims: ClipDims) -> None:
    for t in range(dims.T):
        for (x, y), r in zip(spec.centers(t), spec.radii):
            if x - r < 0 or y - r < 0 or x + r > dims.W or y + r > dims.H:
                raise ValueError(f"disc at ({x:.2f},{y:.2f}) r={r:.2f} leaves the frame at t={t}")


def _disc(cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def _mouth_box(cx: float, cy: float, cell: int, h: int, w: int) -> list[int]:
    x0 = min(int(cx // cell) * cell, w - cell)
    y0 = min(int(cy // cell) * cell, h - cell)
    return [x0, y0, x0 + cell, y0 + cell]


def _envelopes(n: int, dims: ClipDims, rng: np.random.Generator) -> np.ndarray:
    out = []
    while len(out) < n:
        raw = gaussian_filter1d(rng.random(dims.T_a), sigma=2.0, mode="nearest")
        env = (raw - raw.min()) / max(raw.max() - raw.min(), 1e-12)
        fr = frame_rate(env, dims.T)
        if fr.std() < 0.1:
            continue
        # rejection keeps the other character's envelope weakly correlated
        if out and abs(np.corrcoef(frame_rate(out[0], dims.T), fr)[0, 1]) >= MAX_ENVELOPE_CORR:
            continue
        out.append(env)
    return np.stack(out)


def gen_clip(spec: TrajectorySpec, dims: ClipDims, seed: int) -> ClipRecord:
    _check_inside(spec, dims)
    n = spec.n_chars
    T, H, W = dims.T, dims.H, dims.W
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))

    envelopes = _envelopes(n, dims, rng)
    a_ac = np.eye(n, dtype=np.uint8)[rng.permutation(n)] if n > 1 else np.ones((1, 1), np.uint8)
    char_env = a_ac.T.astype(np.float64) @ frame_rate(envelopes, T)  # env driving each character

    video = np.empty((T, 3, H, W), dtype=np.float64)
    video[:] = np.asarray(BACKGROUND)[None, :, None, None]
    masks = np.zeros((n, T, H, W), dtype=np.uint8)
    boxes = [[None] * T for _ in range(n)]
    for t in range(T):
        centers = spec.centers(t)
        # character 0 is painted last, so it occludes the others
        for i in reversed(range(n)):
            cx, cy = centers[i]
            disc = _disc(cx, cy, spec.radii[i], H, W)
            masks[:, t][:, disc] = 0
            masks[i, t][disc] = 1
            video[t][:, disc] = np.asarray(spec.colors[i])[:, None]
            x0, y0, x1, y1 = _mouth_box(cx, cy, SPATIAL_FACTOR, H, W)
            boxes[i][t] = [x0, y0, x1, y1]
            video[t, :, y0:y1, x0:x1] = 0.5 + 0.5 * char_env[i, t]
            masks[:, t, y0:y1, x0:x1] = 0
            masks[i, t, y0:y1, x0:x1] = 1

    R = dims.ref_size
    refs = np.zeros((n, 3, R, R), dtype=np.float64)
    for i in range(n):
        disc = _disc(R / 2, R / 2, min(spec.radii[i], R / 2), R, R)
        refs[i][:, disc] = np.asarray(spec.colors[i])[:, None]
        x0, y0, x1, y1 = _mouth_box(R / 2, R / 2, SPATIAL_FACTOR, R, R)
        refs[i, :, y0:y1, x0:x1] = 0.5 + 0.5 * char_env[i, 0]

    feats = np.stack([envelope_to_features(e, FEATURE_SEED, dims.d_a) for e in envelopes])
    return ClipRecord(
        video=video.astype(np.float32),
        gt_masks=masks,
        audio_feats=feats,
        envelopes=envelopes.astype(np.float32),
        a_ac=a_ac,
        refs=refs.astype(np.float32),
        inpaint=video[0].astype(np.float32),
        prompt_id=PROMPT_IDS[spec.kind],
        mouth_boxes=boxes,
        seed=int(seed),
        n_chars=n,
        kind=spec.kind,
    )


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def _seed_hash(s: int) -> int:
    return int.from_bytes(hashlib.sha256(str(s).encode()).digest()[:8], "little")


def plan_dataset(count: int, mix: float, seed: int, test_fraction: float = 0.1) -> list[dict]:
    """Decide seed, split and kind for every clip without rendering anything.

    The ``round(test_fraction * count)`` clips with the smallest seed hash form
    the test split. Single-character clips (``round(mix * count)``, half up)
    are taken from the train split first so the test split stays two-character
    whenever possible.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1], got {mix}")
    if count < 0:
        raise ValueError("count must be nonnegative")
    seeds = [clip_seed(seed, i) for i in range(count)]
    n_test = int(math.floor(test_fraction * count + 0.5))
    order = sorted(range(count), key=lambda i: (_seed_hash(seeds[i]), i))
    test = set(order[:n_test])
    n_single = int(math.floor(mix * count + 0.5))
    candidates = [i for i in range(count) if i not in test] + [i for i in range(count) if i in test]
    singles = set(candidates[:n_single])
    plan, k = [], 0
    for i in range(count):
        if i in singles:
            kind = "single"
        else:
            kind = KINDS[k % 3]
            k += 1
        plan.append({"index": i, "seed": seeds[i], "split": "test" if i in test else "train", "kind": kind})
    return plan


def save_clip(clip: ClipRecord, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(clip.video, d / "video.byat")
    write_tensor(clip.gt_masks, d / "masks.byat")
    write_tensor(clip.audio_feats, d / "audio.byat")
    write_tensor(clip.refs, d / "refs.byat")
    write_tensor(clip.inpaint, d / "inpaint.byat")
    meta = {
        "seed": clip.seed,
        "kind": clip.kind,
        "prompt_id": clip.prompt_id,
        "n_chars": clip.n_chars,
        "a_ac": clip.a_ac.astype(int).tolist(),
        "mouth_boxes": clip.mouth_boxes,
        "split": clip.split,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_clip(directory) -> ClipRecord:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    feats = read_tensor(d / "audio.byat")
    envelopes = np.stack([features_to_envelope(f, FEATURE_SEED) for f in feats]).astype(np.float32)
    return ClipRecord(
        video=read_tensor(d / "video.byat"),
        gt_masks=read_tensor(d / "masks.byat"),
        audio_feats=feats,
        envelopes=envelopes,
        a_ac=np.asarray(meta["a_ac"], dtype=np.uint8),
        refs=read_tensor(d / "refs.byat"),
        inpaint=read_tensor(d / "inpaint.byat"),
        prompt_id=int(meta["prompt_id"]),
        mouth_boxes=meta["mouth_boxes"],
        seed=int(meta["seed"]),
        n_chars=int(meta["n_chars"]),
        kind=meta["kind"],
        split=meta["split"],
        meta=meta,
    )


def gen_dataset(
    count: int,
    mix: float,
    out_dir,
    seed: int,
    dims: ClipDims = ClipDims(),
    test_fraction: float = 0.1,
) -> dict:
    """Render ``count`` clips under ``out_dir`` and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in plan_dataset(count, mix, seed, test_fraction):
        rng = np.random.default_rng(np.random.SeedSequence([item["seed"], 0]))
        spec = sample_trajectory(item["kind"], dims, rng)
        clip = gen_clip(spec, dims, item["seed"])
        clip.split = item["split"]
        name = f"clip_{item['index']:05d}"
        save_clip(clip, out / name)
        entries.append(
            {
                "path": name,
                "seed": item["seed"],
                "split": item["split"],
                "kind": item["kind"],
                "prompt_id": clip.prompt_id,
                "n_chars": clip.n_chars,
                "a_ac": clip.a_ac.astype(int).tolist(),
            }
        )
    manifest = {
        "seed": int(seed),
        "count": int(count),
        "mix": float(mix),
        "test_fraction": float(test_fraction),
        "dims": {"T": dims.T, "H": dims.H, "W": dims.W, "T_a": dims.T_a, "d_a": dims.d_a},
        "clips": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    manifest = json.loads(p.read_text(encoding="utf-8"))
    manifest["root"] = str(p.parent)
    return manifest


def load_split(manifest: dict, split: str | None = None) -> list[ClipRecord]:
    root = Path(manifest["root"])
    return [load_clip(root / e["path"]) for e in manifest["clips"] if split is None or e["split"] == split]
