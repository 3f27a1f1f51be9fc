"""Bundle of denoiser, condition encoders and router, with parameter groups
and a BYAT-directory checkpoint format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .conditioning import AudioProjector, FaceEncoder, TextEmbedding
from .denoiser import DiT, DiTConfig
from .router_net import RouterNet
from .synthgen import KINDS
from .tensor_store import read_tensor, write_tensor

GROUPS = ("dit", "lora", "face_xattn", "audio_xattn", "face_encoder", "audio_encoder", "text_encoder", "router")


@dataclass
class ModelConfig:
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
    audio_residual: str = "v"
    audio_window: int = 1
    d_audio: int = 8
    audio_stride: int = 4
    num_prompts: int = len(KINDS)
    prediction: str = "v"
    router_width: int = 64
    router_blocks: int = 2
    router_heads: int = 4

    def dit(self) -> DiTConfig:
        names = {f.name for f in fields(DiTConfig)}
        return DiTConfig(**{k: v for k, v in asdict(self).items() if k in names})


class AvatarModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dit_cfg = cfg.dit()
        self.dit = DiT(dit_cfg)
        self.face_encoder = FaceEncoder(cfg.d_model, cfg.face_queries, heads=cfg.heads)
        self.audio_encoder = AudioProjector(cfg.d_audio, cfg.d_model, cfg.audio_stride)
        self.text_encoder = TextEmbedding(cfg.num_prompts, cfg.text_len, cfg.d_model)
        self.router = RouterNet(
            cfg.layers,
            cfg.heads,
            dit_cfg.head_dim,
            cfg.n_chars,
            cfg.face_queries,
            dit_cfg.grid,
            width=cfg.router_width,
            blocks=cfg.router_blocks,
            block_heads=cfg.router_heads,
        )

    @staticmethod
    def group_of(name: str) -> str:
        top = name.split(".", 1)[0]
        if top != "dit":
            return top
        if ".lora_" in name:
            return "lora"
        if ".face_xattn." in name or ".norm_face." in name:
            return "face_xattn"
        if ".audio_xattn." in name or ".norm_audio." in name:
            return "audio_xattn"
        return "dit"

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append((name, p))
        return out

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad_(self.group_of(name) in groups)


def save_checkpoint(model: AvatarModel, path, stage: int, trainable=()) -> Path:
    """Directory of ``<param>.byat`` tensors, ``params.json`` and ``model.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    trainable = set(trainable)
    manifest = {}
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype(np.float32)
        write_tensor(arr.reshape(-1) if arr.ndim == 0 else arr, path / f"{name}.byat", shape=arr.shape or (1,))
        group = AvatarModel.group_of(name)
        manifest[name] = {"shape": list(arr.shape), "role": group, "frozen": group not in trainable}
    (path / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    meta = {"stage": stage, "model": asdict(model.cfg)}
    (path / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[AvatarModel, dict]:
    path = Path(path)
    meta_file, params_file = path / "model.json", path / "params.json"
    if not meta_file.is_file() or not params_file.is_file():
        raise CheckpointError(f"{path} is not a checkpoint directory")
    meta = json.loads(meta_file.read_text())
    manifest = json.loads(params_file.read_text())
    model = AvatarModel(ModelConfig(**meta["model"]))
    own = dict(model.named_parameters())
    if set(own) != set(manifest):
        missing, extra = set(own) - set(manifest), set(manifest) - set(own)
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    with torch.no_grad():
        for name, p in own.items():
            arr = read_tensor(path / f"{name}.byat").reshape(manifest[name]["shape"])
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, meta
