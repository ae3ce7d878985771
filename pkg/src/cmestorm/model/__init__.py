"""Per-image model: backbone adapters, feature fusion and the fusion head."""

from .backbones import StubAdapter, TorchBackbone, extract_features, fuse, make_adapter, resample_to_grid
from .head import GRID, FusionHead, HeadConfig, sigmoid
from .network import ModelSpec, Network, build_adapters, image_features, predict_image


def head_forward(fused, head: FusionHead, mode: str = "infer", rng=None):
    """Probabilities for a fused (N, 8, 8, C) batch; ``mode`` is ``train`` or ``infer``."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    prob, _ = head.forward(fused, train=(mode == "train"), rng=rng)
    return prob


__all__ = [
    "GRID", "FusionHead", "HeadConfig", "ModelSpec", "Network", "StubAdapter", "TorchBackbone",
    "build_adapters", "extract_features", "fuse", "head_forward", "image_features", "make_adapter",
    "predict_image", "resample_to_grid", "sigmoid",
]
