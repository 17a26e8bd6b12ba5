"""Segmentation network: strided conv pyramid (1/4..1/32), channel reduction,
upsample-concat fusion into a sigmoid prediction map, plus the small cascaded
predictor network used by the contrastive branch."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import PredictionMap

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    base_width: int = 16
    stage_channels: Optional[tuple[int, int, int, int]] = None  # default: derived
    reduced_channels: int = 32
    seed: int = 0
    # recorded explicitly so checkpoints are self-describing
    norm: str = "group"
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.stage_channels is not None and len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list exactly 4 stages")
        if self.reduced_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts must be positive")

    @property
    def channels(self) -> tuple[int, int, int, int]:
        if self.stage_channels is not None:
            return tuple(self.stage_channels)
        bw = self.base_width
        return (bw, 2 * bw, 4 * bw, 8 * bw)


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


def _stage(cin: int, cout: int, down: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    stride_steps = {2: [2], 4: [2, 2]}[down]
    for i, s in enumerate(stride_steps):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, stride=s, padding=1),
                   _norm(cout), nn.ReLU(inplace=True)]
    layers += [nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class PredictorHead(nn.Module):
    """g: two 3x3 convs with a ReLU between, over the fused logit map.

    Initialized as an exact identity (relu(x) - relu(-x) == x) so the
    contrastive branch starts consistent and learns its deviation; a random
    g needs far more steps than a desk schedule has.
    """

    def __init__(self, hidden: int, identity_init: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        if identity_init and hidden >= 2:
            self.init_identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(x)))

    @torch.no_grad()
    def init_identity(self) -> None:
        # relu(x) - relu(-x) == x, so two delta kernels give an exact identity
        if self.conv1.out_channels < 2:
            raise ValueError("identity init needs hidden width >= 2")
        self.conv1.weight.zero_()
        self.conv1.bias.zero_()
        self.conv2.weight.zero_()
        self.conv2.bias.zero_()
        self.conv1.weight[0, 0, 1, 1] = 1.0
        self.conv1.weight[1, 0, 1, 1] = -1.0
        self.conv2.weight[0, 0, 1, 1] = 1.0
        self.conv2.weight[0, 1, 1, 1] = -1.0


class SegmentationNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        rc = cfg.reduced_channels
        self.stage1 = _stage(3, c1, down=4)
        self.stage2 = _stage(c1, c2, down=2)
        self.stage3 = _stage(c2, c3, down=2)
        self.stage4 = _stage(c3, c4, down=2)
        self.reduce = nn.ModuleList([
            nn.Sequential(nn.Conv2d(c, rc, 3, padding=1), _norm(rc), nn.ReLU(inplace=True))
            for c in (c1, c2, c3, c4)
        ])
        self.fuse = nn.Sequential(
            nn.Conv2d(4 * rc, rc, 3, padding=1), _norm(rc), nn.ReLU(inplace=True),
            nn.Conv2d(rc, 1, 3, padding=1))
        self.predictor = PredictorHead(rc)

    @staticmethod
    def _check_size(x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"spatial size {h}x{w} not divisible by 32 (caller pads)")

    def pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_size(x)
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return [f1, f2, f3, f4]

    def fused_logit(self, x: torch.Tensor) -> torch.Tensor:
        """Stride-4 single-channel logit map (the pre-squash fusion output)."""
        feats = self.pyramid(x)
        size = feats[0].shape[-2:]
        reduced = []
        for feat, red in zip(feats, self.reduce):
            r = red(feat)
            if r.shape[-2:] != size:
                r = F.interpolate(r, size=size, mode="bilinear", align_corners=False)
            reduced.append(r)
        return self.fuse(torch.cat(reduced, dim=1))

    @staticmethod
    def _expand(logit: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        up = F.interpolate(logit, size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(up)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, 1, H, W) probabilities."""
        return self._expand(self.fused_logit(x), x.shape[-2:])

    def forward_both(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Probabilities of the plain branch f and the predictor branch g(f)."""
        logit = self.fused_logit(x)
        size = x.shape[-2:]
        return self._expand(logit, size), self._expand(self.predictor(logit), size)

    def predictor_probs(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_both(x)[1]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_net(cfg: EncoderConfig) -> SegmentationNet:
    torch.manual_seed(cfg.seed)
    return SegmentationNet(cfg)


@dataclass
class ModelState:
    net: SegmentationNet
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    stage: str = "init"  # init -> warmup -> hints
    opt_params: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {
            "model": copy.deepcopy(self.net.state_dict()),
            "optimizer": copy.deepcopy(self.optimizer.state_dict()),
            "epoch": self.epoch,
            "stage": self.stage,
        }

    def restore(self, snap: dict) -> None:
        self.net.load_state_dict(snap["model"])
        self.optimizer.load_state_dict(snap["optimizer"])
        self.epoch = snap["epoch"]
        self.stage = snap["stage"]


def make_optimizer(net: SegmentationNet, lr: float, momentum: float,
                   weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum,
                           weight_decay=weight_decay)


def new_model_state(cfg: EncoderConfig, lr: float = 1e-3, momentum: float = 0.9,
                    weight_decay: float = 5e-4) -> ModelState:
    net = build_net(cfg)
    opt = make_optimizer(net, lr, momentum, weight_decay)
    return ModelState(net=net, optimizer=opt,
                      opt_params={"lr": lr, "momentum": momentum,
                                  "weight_decay": weight_decay})


def save_checkpoint(path, state: ModelState) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "encoder_config": asdict(state.net.cfg),
        "opt_params": state.opt_params,
        "epoch": state.epoch,
        "stage": state.stage,
        "model": state.net.state_dict(),
        "optimizer": state.optimizer.state_dict(),
    }, path)


def load_checkpoint(path) -> ModelState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg_data = dict(blob["encoder_config"])
    if cfg_data.get("stage_channels") is not None:
        cfg_data["stage_channels"] = tuple(cfg_data["stage_channels"])
    cfg = EncoderConfig(**cfg_data)
    net = SegmentationNet(cfg)
    net.load_state_dict(blob["model"])
    opt = make_optimizer(net, **blob["opt_params"])
    opt.load_state_dict(blob["optimizer"])
    return ModelState(net=net, optimizer=opt, epoch=blob["epoch"],
                      stage=blob["stage"], opt_params=dict(blob["opt_params"]))


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (0, 0)
    mode = "reflect" if (ph < h and pw < w) else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (ph, pw)


@torch.no_grad()
def predict_map(net: SegmentationNet, image: np.ndarray) -> PredictionMap:
    """Run the encoder on one (3, H, W) image, padding/cropping as needed."""
    was_training = net.training
    net.eval()
    x = torch.from_numpy(np.ascontiguousarray(image)).float().unsqueeze(0)
    x, (ph, pw) = pad_to_multiple(x)
    probs = net(x)[0, 0]
    if ph or pw:
        probs = probs[: probs.shape[0] - ph, : probs.shape[1] - pw]
    if was_training:
        net.train()
    return PredictionMap(probs.numpy().astype(np.float64))
