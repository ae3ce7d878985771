"""Per-instrument pipelines (adapters -> fuse -> head) and checkpoint I/O.

Checkpoint layout (one directory)::

    spec.json                              ModelSpec
    <instrument>/<param name>.npy          head parameters, e.g. C2/conv1.kernel.npy
    <instrument>/state/<name>.npy          batch-norm moving statistics

Kernels are stored as (9*C_in, C_out) matrices whose rows run over
(ky, kx, c_in); dense kernels as (in, out).  Feature maps are NHWC.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import UsageError
from ..instruments import INSTRUMENTS, canonical_order, check_instrument
from .backbones import BACKBONE_ORDER, downsample, extract_features, fuse, make_adapter
from .head import GRID, FusionHead, HeadConfig


@dataclass(frozen=True)
class ModelSpec:
    active_backbones: tuple[str, ...] = ("RN", "IRN")
    active_instruments: tuple[str, ...] = INSTRUMENTS
    threshold: float = 0.6
    leaky_relu_slope: float = 0.01
    seed: int = 0
    conv_channels: tuple[int, ...] = (64, 128, 256)
    dense_units: int = 1024
    dropout: float = 0.3
    stem_channels: int = 16
    stub_backbones: bool = False
    stub_channels: int = 8
    finetune_backbone: bool = False
    dtype: str = "float32"
    name: str = "model"

    def __post_init__(self):
        backbones = tuple(b.upper() for b in self.active_backbones)
        unknown = set(backbones) - set(BACKBONE_ORDER)
        if unknown:
            raise UsageError(f"unknown backbones {sorted(unknown)}")
        if "STUB" in backbones and len(backbones) > 1:
            raise UsageError("STUB cannot be combined with other backbones")
        object.__setattr__(self, "active_backbones", tuple(b for b in BACKBONE_ORDER if b in backbones))
        if not self.active_instruments:
            raise UsageError("at least one instrument must be active")
        object.__setattr__(self, "active_instruments", canonical_order(self.active_instruments))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if not 0.0 < self.threshold < 1.0:
            raise UsageError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def uses_backbones(self) -> bool:
        return bool(self.active_backbones)

    def feature_channels(self, adapters) -> int:
        if not self.uses_backbones:
            return 1
        return sum(a.feature_channels for a in adapters)

    def head_config(self, in_channels: int) -> HeadConfig:
        return HeadConfig(
            in_channels=in_channels,
            conv_channels=self.conv_channels,
            dense_units=self.dense_units,
            dropout=self.dropout,
            leaky_slope=self.leaky_relu_slope,
            stem_channels=0 if self.uses_backbones else self.stem_channels,
            dtype=self.dtype,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("active_backbones", "active_instruments", "conv_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)


def build_adapters(spec: ModelSpec, weights_dir=None, allow_random_init: bool = False) -> list:
    return [
        make_adapter(b, stub=spec.stub_backbones, stub_channels=spec.stub_channels, seed=spec.seed,
                     weights_dir=weights_dir, allow_random_init=allow_random_init)
        for b in spec.active_backbones
    ]


def image_features(image: np.ndarray, spec: ModelSpec, adapters: list) -> np.ndarray:
    """The 8x8xC head input for one image.

    Without backbones this is the raw image downsampled to 8x8x1, fed to the
    head's learnable stem.
    """
    if not spec.uses_backbones:
        return downsample(image, GRID)[:, :, None].astype(np.float32)
    return fuse([extract_features(image, a) for a in adapters])


@dataclass
class Network:
    """One head per active instrument; adapters are shared (they are frozen)."""

    spec: ModelSpec
    adapters: list
    heads: dict[str, FusionHead] = field(default_factory=dict)

    @classmethod
    def create(cls, spec: ModelSpec, adapters: list | None = None, weights_dir=None,
               allow_random_init: bool = False) -> "Network":
        if adapters is None:
            adapters = build_adapters(spec, weights_dir, allow_random_init)
        cin = spec.feature_channels(adapters)
        heads = {}
        for k, inst in enumerate(spec.active_instruments):
            seed = spec.seed * 101 + INSTRUMENTS.index(inst) + 1
            heads[inst] = FusionHead(spec.head_config(cin), seed=seed)
        return cls(spec, adapters, heads)

    def features(self, image: np.ndarray) -> np.ndarray:
        return image_features(image, self.spec, self.adapters)

    def head(self, instrument: str) -> FusionHead:
        inst = check_instrument(instrument)
        if inst not in self.heads:
            raise UsageError(f"instrument {inst} is not active in model {self.spec.name!r}")
        return self.heads[inst]

    def predict_features(self, feats: np.ndarray, instrument: str, batch: int = 64) -> np.ndarray:
        head = self.head(instrument)
        out = []
        for s in range(0, len(feats), batch):
            prob, _ = head.forward(feats[s:s + batch], train=False)
            out.append(prob)
        return np.concatenate(out) if out else np.zeros(0)

    def predict_image(self, image: np.ndarray, instrument: str) -> float:
        """Probability for one preprocessed image through ``instrument``'s pipeline."""
        head = self.head(instrument)
        prob, _ = head.forward(self.features(image)[None], train=False)
        return float(prob[0])

    # -- checkpoints -----------------------------------------------------------

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "spec.json").write_text(json.dumps(self.spec.to_json(), indent=2, sort_keys=True))
        for inst, head in self.heads.items():
            (d / inst / "state").mkdir(parents=True, exist_ok=True)
            for name, arr in head.params.items():
                np.save(d / inst / f"{name}.npy", arr)
            for name, arr in head.state.items():
                np.save(d / inst / "state" / f"{name}.npy", arr)
        return d

    @classmethod
    def load(cls, directory: str | Path, adapters: list | None = None, weights_dir=None,
             allow_random_init: bool = False) -> "Network":
        d = Path(directory)
        spec = ModelSpec.from_json(json.loads((d / "spec.json").read_text()))
        net = cls.create(spec, adapters, weights_dir, allow_random_init)
        for inst, head in net.heads.items():
            for name in head.params:
                head.params[name] = np.load(d / inst / f"{name}.npy")
            for name in head.state:
                head.state[name] = np.load(d / inst / "state" / f"{name}.npy")
        return net

    def snapshot(self) -> dict:
        return {inst: ({k: v.copy() for k, v in h.params.items()}, {k: v.copy() for k, v in h.state.items()})
                for inst, h in self.heads.items()}

    def restore(self, snap: dict) -> None:
        for inst, (params, state) in snap.items():
            h = self.heads[inst]
            for k, v in params.items():
                h.params[k][...] = v
            for k, v in state.items():
                h.state[k] = v.copy()


def predict_image(image: np.ndarray, instrument: str, spec: ModelSpec, weights: Network) -> float:
    if check_instrument(instrument) not in spec.active_instruments:
        raise UsageError(f"instrument {instrument} is not active in this spec")
    return weights.predict_image(image, instrument)
