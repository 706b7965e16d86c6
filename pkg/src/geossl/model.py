"""Encoder f, projection head g, regression head h, and BYOL target machinery."""
from __future__ import annotations

import copy
from typing import Iterable, Sequence

import torch
from torch import nn


class ShapeError(ValueError):
    pass


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    """Two affine layers with a single ReLU between them."""
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class SmallConvEncoder(nn.Module):
    """Four conv blocks and global average pooling; the desk-scale encoder."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), in_channels: int = 3):
        super().__init__()
        blocks = []
        c = in_channels
        for w in widths:
            blocks.append(_conv_block(c, w))
            c = w
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = c

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def resnet50_encoder() -> nn.Module:
    """ResNet50 trunk with a 3x3 stem for 32x32 inputs; output dim 2048."""
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    net.out_dim = 2048
    return net


class ModelBundle(nn.Module):
    """f, g, optional h (or two of them), and for BYOL a predictor plus EMA target.

    ``regressor_input`` selects how the two latents are combined before h:
    ``"diff"`` feeds ``l1 - l1'``, ``"concat"`` feeds ``[l1 ; l1']``.
    ``placement="on_g"`` attaches h to the projector output instead of f.
    """

    def __init__(
        self,
        encoder: nn.Module,
        proj_hidden: int,
        proj_dim: int,
        reg_dim: int | None = None,
        reg_hidden: int = 256,
        regressor_input: str = "diff",
        placement: str = "on_f",
        two_modules: bool = False,
        byol: bool = False,
        pred_hidden: int = 256,
        mean: Sequence[float] = (0.5, 0.5, 0.5),
        std: Sequence[float] = (0.5, 0.5, 0.5),
        reg_seed: int | None = None,
    ):
        super().__init__()
        if regressor_input not in ("diff", "concat"):
            raise ValueError(f"unknown regressor input {regressor_input!r}")
        if placement not in ("on_f", "on_g"):
            raise ValueError(f"unknown placement {placement!r}")
        self.encoder = encoder
        self.p = encoder.out_dim
        self.k = proj_dim
        self.m = reg_dim
        self.regressor_input = regressor_input
        self.placement = placement
        self.projector = mlp(self.p, proj_hidden, proj_dim)
        self.predictor = mlp(proj_dim, pred_hidden, proj_dim) if byol else None
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

        self.regressor = self.regressor2 = None
        if reg_dim is not None:
            # h gets its own seed so adding it leaves the init of f and g untouched
            with torch.random.fork_rng(enabled=reg_seed is not None):
                if reg_seed is not None:
                    torch.manual_seed(reg_seed)
                base = self.p if placement == "on_f" else proj_dim
                in_dim = base * (2 if regressor_input == "concat" else 1)
                self.regressor = mlp(in_dim, reg_hidden, reg_dim)
                if two_modules:
                    self.regressor2 = mlp(in_dim, reg_hidden, reg_dim)

        self.target_encoder = self.target_projector = None
        if byol:
            self.target_encoder = copy.deepcopy(self.encoder)
            self.target_projector = copy.deepcopy(self.projector)
            for param in self.target_parameters():
                param.requires_grad_(False)

    # --- parameter groups ---

    def online_parameters(self) -> list[nn.Parameter]:
        mods = [self.encoder, self.projector, self.predictor, self.regressor, self.regressor2]
        return [p for mod in mods if mod is not None for p in mod.parameters()]

    def target_parameters(self) -> list[nn.Parameter]:
        if self.target_encoder is None:
            return []
        return list(self.target_encoder.parameters()) + list(self.target_projector.parameters())

    def target_source_parameters(self) -> list[nn.Parameter]:
        """Online counterparts of :meth:`target_parameters`, in the same order."""
        return list(self.encoder.parameters()) + list(self.projector.parameters())

    # --- forward pieces ---

    def _prep(self, images):
        if images.ndim != 4 or images.shape[1] != self.mean.shape[1]:
            raise ShapeError(f"expected Nx{self.mean.shape[1]}xHxW images, got {tuple(images.shape)}")
        return (images - self.mean) / self.std

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(self._prep(images))

    def encode_target(self, images: torch.Tensor) -> torch.Tensor:
        return self.target_encoder(self._prep(images))

    def project(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[-1] != self.p:
            raise ShapeError(f"projector expects dim {self.p}, got {latents.shape[-1]}")
        return self.projector(latents)

    def regression_input(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return a - b if self.regressor_input == "diff" else torch.cat([a, b], dim=1)

    def regress(self, a: torch.Tensor, b: torch.Tensor, second: bool = False) -> torch.Tensor:
        """Estimate transform parameters from a latent pair (``l1``, ``l1'``)."""
        head = self.regressor2 if second else self.regressor
        if head is None:
            raise ValueError("bundle has no regression head")
        return head(self.regression_input(a, b))


def build_bundle(
    preset: str = "desk",
    reg_dim: int | None = None,
    *,
    proj_hidden: int = 256,
    proj_dim: int = 64,
    reg_hidden: int = 256,
    regressor_input: str = "diff",
    placement: str = "on_f",
    two_modules: bool = False,
    byol: bool = False,
    widths: Sequence[int] = (16, 32, 64, 128),
    mean=(0.5, 0.5, 0.5),
    std=(0.5, 0.5, 0.5),
    seed: int = 0,
) -> ModelBundle:
    torch.manual_seed(seed)
    if preset == "desk":
        encoder = SmallConvEncoder(widths, in_channels=len(mean))
    elif preset == "paper":
        encoder = resnet50_encoder()
    else:
        raise ValueError(f"unknown preset {preset!r}")
    return ModelBundle(
        encoder,
        proj_hidden,
        proj_dim,
        reg_dim=reg_dim,
        reg_hidden=reg_hidden,
        regressor_input=regressor_input,
        placement=placement,
        two_modules=two_modules,
        byol=byol,
        pred_hidden=proj_hidden,
        mean=mean,
        std=std,
        reg_seed=seed + 7919,
    )


@torch.no_grad()
def ema_update(target_params: Iterable[torch.Tensor], online_params: Iterable[torch.Tensor], tau: float):
    """In place: ``target <- tau * target + (1 - tau) * online``."""
    target_params = list(target_params)
    online_params = list(online_params)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    if len(target_params) != len(online_params):
        raise ShapeError(f"{len(target_params)} target tensors vs {len(online_params)} online tensors")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ShapeError(f"parameter shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
    for t, o in zip(target_params, online_params):
        if tau == 1.0:
            continue
        if tau == 0.0:
            t.copy_(o)
        else:
            t.mul_(tau).add_(o, alpha=1.0 - tau)
    return target_params
