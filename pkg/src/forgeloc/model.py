"""Multi-resolution backbone, contrast projections, localization head, checkpoints."""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import derive_seed

STRIDES = (4, 8, 16, 32)
PARTS = ("backbone", "projections", "head")
CHECKPOINT_FORMAT = "forgeloc-checkpoint"
CHECKPOINT_VERSION = 1

SIZES = {
    # channels, fusion stages, residual blocks per stream per stage
    "small": ((32, 64, 128, 256), 2, 1),
    "base": ((48, 96, 192, 384), 3, 2),
}


class HeadUninitializedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    size: str = "small"
    channels: tuple[int, int, int, int] | None = None
    dropout_rate: float = 0.1
    contrast_dim: int = 128
    head_hidden: int = 256

    def __post_init__(self):
        if self.size not in SIZES:
            raise ValueError(f"backbone size must be one of {sorted(SIZES)}, got {self.size!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.contrast_dim < 1:
            raise ValueError("contrast_dim must be >= 1")
        if self.channels is not None and len(self.channels) != 4:
            raise ValueError("channels must list four values")

    @property
    def stream_channels(self) -> tuple[int, ...]:
        return tuple(self.channels) if self.channels else SIZES[self.size][0]


def _norm(c: int) -> nn.GroupNorm:
    # at least two channels per group so a 1x1 grid still normalizes
    groups = 8 if c % 8 == 0 and c >= 16 else 1
    return nn.GroupNorm(groups, c)


def _conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False), _norm(cout), nn.ReLU(inplace=True)
    )


class SpatialDropout(nn.Module):
    """Channel dropout whose mask comes from an explicit generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, generator=None):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.empty(x.shape[0], x.shape[1], 1, 1, dtype=x.dtype, device=x.device)
        keep.bernoulli_(1.0 - self.p, generator=generator)
        return x * keep / (1.0 - self.p)


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1, bias=False)
        self.n1 = _norm(c)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1, bias=False)
        self.n2 = _norm(c)

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + x)


class Fusion(nn.Module):
    """Exchange across resolution streams, then per-stream spatial dropout."""

    def __init__(self, channels, dropout):
        super().__init__()
        n = len(channels)
        self.links = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j == i:
                    row.append(nn.Identity())
                elif j > i:
                    row.append(nn.Sequential(nn.Conv2d(channels[j], channels[i], 1, bias=False), _norm(channels[i])))
                else:
                    steps = []
                    c = channels[j]
                    for k in range(i - j):
                        last = k == i - j - 1
                        cout = channels[i] if last else c
                        steps += [nn.Conv2d(c, cout, 3, 2, 1, bias=False), _norm(cout)]
                        if not last:
                            steps.append(nn.ReLU(inplace=True))
                    row.append(nn.Sequential(*steps))
            self.links.append(row)
        self.drops = nn.ModuleList(SpatialDropout(dropout) for _ in channels)

    def forward(self, xs, generator=None):
        out = []
        for i, row in enumerate(self.links):
            acc = xs[i]
            for j, link in enumerate(row):
                if j == i:
                    continue
                y = link(xs[j])
                if j > i:
                    y = F.interpolate(y, size=xs[i].shape[-2:], mode="bilinear", align_corners=False)
                acc = acc + y
            out.append(self.drops[i](F.relu(acc), generator))
        return out


class PyramidBackbone(nn.Module):
    """Four parallel streams at strides 4/8/16/32 with repeated cross-stream fusion."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        ch = cfg.stream_channels
        _, n_stages, n_blocks = SIZES[cfg.size]
        self.channels = ch
        self.stem = nn.Sequential(
            _conv_bn_relu(3, 16), _conv_bn_relu(16, 32, 2), _conv_bn_relu(32, ch[0], 2)
        )
        self.transitions = nn.ModuleList(
            _conv_bn_relu(ch[i], ch[i + 1], 2) for i in range(3)
        )
        self.stages = nn.ModuleList()
        self.fusions = nn.ModuleList()
        for _ in range(n_stages):
            self.stages.append(
                nn.ModuleList(nn.Sequential(*[ResBlock(c) for _ in range(n_blocks)]) for c in ch)
            )
            self.fusions.append(Fusion(ch, cfg.dropout_rate))

    def forward(self, x, generator=None):
        xs = [self.stem(x)]
        for t in self.transitions:
            xs.append(t(xs[-1]))
        for blocks, fuse in zip(self.stages, self.fusions):
            xs = [b(v) for b, v in zip(blocks, xs)]
            xs = fuse(xs, generator)
        return xs


class LocalizationHead(nn.Module):
    """Upsample coarse grids to stride 4, concatenate, two 1x1 convs, sigmoid."""

    def __init__(self, in_channels: int, hidden: int = 256):
        super().__init__()
        self.fc1 = nn.Conv2d(in_channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, 1, 1)

    def logits(self, pyramid):
        size = pyramid[0].shape[-2:]
        up = [pyramid[0]] + [
            F.interpolate(g, size=size, mode="bilinear", align_corners=False) for g in pyramid[1:]
        ]
        return self.fc2(F.relu(self.fc1(torch.cat(up, dim=1))))

    def forward(self, pyramid, out_size=None):
        logits = self.logits(pyramid)
        if out_size is None:
            out_size = tuple(4 * s for s in pyramid[0].shape[-2:])
        logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)[:, 0]


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        t = t.permute(2, 0, 1)[None] if t.dim() == 3 else t.permute(0, 3, 1, 2)
        return t.contiguous()
    return image if image.dim() == 4 else image[None]


@contextlib.contextmanager
def _mode(module: nn.Module, training: bool):
    prev = module.training
    module.train(training)
    try:
        yield
    finally:
        module.train(prev)


class LocalizationNet(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = PyramidBackbone(cfg)
        ch = self.backbone.channels
        self.projections = nn.ModuleList(nn.Conv2d(c, cfg.contrast_dim, 1, bias=False) for c in ch)
        self.head = LocalizationHead(sum(ch), cfg.head_hidden)
        self.head_ready = True

    def forward_backbone(self, image, mode: str = "eval", rng_seed: int | None = None):
        """Pyramid of four ``(B, C_i, H/s, W/s)`` grids; dropout only in train mode."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = _as_batch(image)
        h, w = x.shape[-2:]
        if h != w or h % 32:
            raise ValueError(f"input must be square with side divisible by 32, got {h}x{w}")
        gen = None
        if mode == "train":
            gen = torch.Generator(device=x.device)
            gen.manual_seed(int(rng_seed if rng_seed is not None else 0))
        with _mode(self.backbone, mode == "train"):
            return self.backbone(x, gen)

    def forward_dual(
        self,
        image,
        rng_seed: int,
        sub_seeds: tuple[int, int] | None = None,
        allow_identical: bool = False,
    ):
        """Two train-mode passes with independent dropout draws and shared weights.

        Without dropout both passes are the same, so this refuses unless
        ``allow_identical`` is set.
        """
        if self.cfg.dropout_rate == 0.0 and not allow_identical:
            raise ValueError("dropout_rate is 0: the two passes would be identical")
        s1, s2 = sub_seeds if sub_seeds is not None else (derive_seed(rng_seed, 0), derive_seed(rng_seed, 1))
        return self.forward_backbone(image, "train", s1), self.forward_backbone(image, "train", s2)

    def project_for_contrast(self, pyramid):
        return [proj(g) for proj, g in zip(self.projections, pyramid)]

    def forward_head(self, pyramid, out_size=None):
        if not self.head_ready:
            raise HeadUninitializedError("head uninitialized: load a stage-2 checkpoint")
        return self.head(pyramid, out_size)

    def part(self, name: str) -> nn.Module:
        if name not in PARTS:
            raise ValueError(f"unknown part {name!r}; expected one of {PARTS}")
        return getattr(self, name)

    def set_trainable(self, part: str, trainable: bool) -> None:
        for p in self.part(part).parameters():
            p.requires_grad_(trainable)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def checksums(self) -> dict[str, str]:
        return {name: module_checksum(self.part(name)) for name in PARTS}


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(cfg: BackboneConfig = BackboneConfig(), seed: int = 0) -> LocalizationNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LocalizationNet(cfg)
    return model


def identity_projections(model: LocalizationNet) -> None:
    """Set each projection to the identity (requires C_i == contrast_dim)."""
    with torch.no_grad():
        for proj in model.projections:
            cout, cin = proj.weight.shape[:2]
            if cout != cin:
                raise ValueError(f"identity projection needs C == D, got {cin} vs {cout}")
            proj.weight.copy_(torch.eye(cout).reshape(cout, cin, 1, 1))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: LocalizationNet, stage: int, meta: dict | None = None) -> Path:
    """Write weights grouped by part plus a metadata record.

    Stage-1 checkpoints carry no head weights.
    """
    path = Path(path)
    groups = {name: {k: v.detach().clone() for k, v in model.part(name).state_dict().items()}
              for name in PARTS if not (name == "head" and stage == 1)}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": int(stage),
        "backbone_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(model.cfg).items()},
        "weights": groups,
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    stage: int
    model: LocalizationNet
    meta: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    bcfg = dict(payload["backbone_config"])
    if bcfg.get("channels") is not None:
        bcfg["channels"] = tuple(bcfg["channels"])
    model = LocalizationNet(BackboneConfig(**bcfg))
    for name, state in payload["weights"].items():
        model.part(name).load_state_dict(state)
    model.head_ready = "head" in payload["weights"]
    model.eval()
    return Checkpoint(int(payload["stage"]), model, payload.get("meta", {}))


def pyramid_shapes(pyramid: Sequence[torch.Tensor]) -> list[tuple[int, ...]]:
    return [tuple(g.shape) for g in pyramid]
