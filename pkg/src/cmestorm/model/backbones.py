"""Feature-extractor adapters that turn one preprocessed image into an 8x8xC map.

``StubAdapter`` is a seeded fixed random projection and needs no weights.
``TorchBackbone`` wraps an ImageNet-pretrained network (ResNet152 for ``RN``,
InceptionResNetV2 for ``IRN``); its final pre-pooling feature map is
bilinearly resampled to 8x8.  Pretrained weights are looked up in
``$CMESTORM_WEIGHTS_DIR/<name>.pt`` unless a path is given.
"""

from __future__ import annotations

import os
import zlib
from pathlib import Path

import numpy as np

from .. import kernels
from ..errors import MissingWeightsError, ShapeError
from .head import GRID

WEIGHTS_ENV = "CMESTORM_WEIGHTS_DIR"
BACKBONE_ORDER = ("RN", "IRN", "STUB")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def resample_to_grid(fmap: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Bilinear (half-pixel) resample of an (H, W, C) map to (grid, grid, C)."""
    if fmap.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, C), got {fmap.shape}")
    if fmap.shape[:2] == (grid, grid):
        return fmap
    return kernels.resize_bilinear(np.ascontiguousarray(fmap), grid, grid)


def downsample(image: np.ndarray, size: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got {img.shape}")
    return kernels.resize_bilinear(img, size, size)


class StubAdapter:
    """Fixed random linear projection of 4x4 pixel patches of a 32x32 downsample."""

    patch = 4

    def __init__(self, name: str = "STUB", feature_channels: int = 8, seed: int = 0):
        self.name = name
        self.feature_channels = int(feature_channels)
        self.required_input_shape = (GRID * self.patch, GRID * self.patch)
        key = seed * 1_000_003 + zlib.crc32(name.encode())
        rng = np.random.default_rng(key)
        k = self.patch * self.patch
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, self.feature_channels))

    def extract(self, image: np.ndarray) -> np.ndarray:
        small = downsample(image, self.required_input_shape[0])
        p = self.patch
        patches = small.reshape(GRID, p, GRID, p).transpose(0, 2, 1, 3).reshape(GRID, GRID, p * p)
        return (patches @ self.projection).astype(np.float32)


class TorchBackbone:
    """ImageNet backbone via torchvision (RN) or timm (IRN), frozen by default."""

    SPECS = {
        "RN": {"channels": 2048, "input": 224},
        "IRN": {"channels": 1536, "input": 299},
    }

    def __init__(self, name: str, weights_path: str | Path | None = None, allow_random_init: bool = False):
        if name not in self.SPECS:
            raise ValueError(f"unknown backbone {name!r}")
        self.name = name
        self.feature_channels = self.SPECS[name]["channels"]
        size = self.SPECS[name]["input"]
        self.required_input_shape = (size, size)
        self.weights_path = self._locate(weights_path)
        if self.weights_path is None and not allow_random_init:
            raise MissingWeightsError(name, f"no {name}.pt in ${WEIGHTS_ENV} and no explicit path")
        self.net = self._build()
        self.net.eval()
        for param in self.net.parameters():
            param.requires_grad_(False)

    def _locate(self, weights_path):
        if weights_path is not None:
            path = Path(weights_path)
            if not path.exists():
                raise MissingWeightsError(self.name, f"{path} does not exist")
            return path
        root = os.environ.get(WEIGHTS_ENV)
        if root and (Path(root) / f"{self.name}.pt").exists():
            return Path(root) / f"{self.name}.pt"
        return None

    def _build(self):
        try:
            import torch
        except ImportError as exc:
            raise MissingWeightsError(self.name, "torch is not installed") from exc
        if self.name == "RN":
            import torchvision

            full = torchvision.models.resnet152(weights=None)
            net = torch.nn.Sequential(*list(full.children())[:-2])
            self._top = net[-1]
        else:
            try:
                import timm
            except ImportError as exc:
                raise MissingWeightsError(self.name, "timm is required for InceptionResNetV2") from exc
            net = timm.create_model("inception_resnet_v2", pretrained=False, num_classes=0, global_pool="")
            self._top = torch.nn.ModuleList([net.block8, net.conv2d_7b])
        if self.weights_path is not None:
            state = torch.load(self.weights_path, map_location="cpu")
            if self.name == "RN":
                state = _renumber_resnet(state)
            wanted = net.state_dict().keys()
            missing = [k for k in wanted if k not in state]
            if missing:
                raise MissingWeightsError(self.name, f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")
            net.load_state_dict({k: state[k] for k in wanted})
        return net

    def top_stage_parameters(self):
        return list(self._top.parameters())

    def set_finetune(self, enabled: bool) -> None:
        for param in self.top_stage_parameters():
            param.requires_grad_(enabled)

    def to_input(self, images: np.ndarray):
        """(N, H, W) preprocessed images -> normalised (N, 3, S, S) torch tensor."""
        import torch
        import torch.nn.functional as F

        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if x.ndim == 2:
            x = x[None]
        if float(x.min()) < 0:
            x = (x + 1.0) / 2.0
        x = x[:, None].repeat(1, 3, 1, 1)
        x = F.interpolate(x, size=self.required_input_shape, mode="bilinear", align_corners=False)
        mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)
        return (x - mean) / std

    def forward_torch(self, images: np.ndarray):
        """Differentiable (N, 8, 8, C) features; used when fine-tuning."""
        import torch.nn.functional as F

        fmap = self.net(self.to_input(images))
        if self.name == "IRN" and fmap.ndim == 2:
            raise ShapeError("IRN model returned pooled features; expected a spatial map")
        fmap = F.interpolate(fmap, size=(GRID, GRID), mode="bilinear", align_corners=False)
        return fmap.permute(0, 2, 3, 1)

    def extract(self, image: np.ndarray) -> np.ndarray:
        import torch

        with torch.no_grad():
            fmap = self.net(self.to_input(image))[0].permute(1, 2, 0).numpy()
        return resample_to_grid(fmap.astype(np.float32))


def _renumber_resnet(state: dict) -> dict:
    """Map torchvision ResNet keys (conv1, bn1, layer1..4) onto Sequential indices."""
    names = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    out = {}
    for k, v in state.items():
        head, _, rest = k.partition(".")
        if head in names:
            out[f"{names.index(head)}.{rest}"] = v
        else:
            out[k] = v
    return out


def make_adapter(name: str, *, stub: bool = False, stub_channels: int = 8, seed: int = 0,
                 weights_dir: str | Path | None = None, allow_random_init: bool = False):
    """Adapter for a backbone slot.

    With ``stub=True`` the RN and IRN slots are filled by distinct seeded stub
    projections, so backbone ablations run without pretrained weights.
    """
    if name == "STUB" or stub:
        return StubAdapter(name, stub_channels, seed)
    path = Path(weights_dir) / f"{name}.pt" if weights_dir is not None else None
    return TorchBackbone(name, path, allow_random_init=allow_random_init)


def extract_features(image: np.ndarray, adapter) -> np.ndarray:
    fmap = adapter.extract(image)
    if fmap.shape != (GRID, GRID, adapter.feature_channels):
        raise ShapeError(f"{adapter.name} produced {fmap.shape}, expected {(GRID, GRID, adapter.feature_channels)}")
    if not np.all(np.isfinite(fmap)):
        raise ShapeError(f"{adapter.name} produced non-finite features")
    return fmap


def fuse(features: list[np.ndarray]) -> np.ndarray:
    """Concatenate 8x8 feature maps along channels, in the order given."""
    if not features:
        raise ShapeError("fuse needs at least one feature map")
    spatial = {f.shape[-3:-1] for f in features}
    if len(spatial) != 1 or spatial.pop() != (GRID, GRID):
        raise ShapeError(f"feature maps must all be {GRID}x{GRID}: {[f.shape for f in features]}")
    if len(features) == 1:
        return features[0]
    return np.concatenate(features, axis=-1)
