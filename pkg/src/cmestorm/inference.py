"""Feature caching and event-level prediction over a dataset manifest."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .ensemble import EventPrediction
from .imaging import DatasetManifest, ManifestEntry
from .model import Network, image_features


class FeatureCache:
    """Memoises head inputs per (frame path, backbone configuration).

    Only valid while backbones are frozen, which is the default.
    """

    def __init__(self):
        self._store: dict[tuple, np.ndarray] = {}

    @staticmethod
    def signature(spec) -> tuple:
        return (spec.active_backbones, spec.stub_backbones, spec.stub_channels,
                spec.seed if spec.stub_backbones or "STUB" in spec.active_backbones else None)

    def get(self, manifest: DatasetManifest, rel_path: str, spec, adapters) -> np.ndarray:
        key = (str(manifest.root), rel_path, self.signature(spec))
        hit = self._store.get(key)
        if hit is None:
            hit = image_features(manifest.load(rel_path), spec, adapters)
            self._store[key] = hit
        return hit

    def __len__(self):
        return len(self._store)


def entry_features(network: Network, manifest: DatasetManifest, entry: ManifestEntry,
                   cache: FeatureCache | None = None) -> dict[str, tuple[list, np.ndarray]]:
    """Per active instrument: (timestamps, stacked head inputs)."""
    out = {}
    for inst in network.spec.active_instruments:
        refs = entry.frames.get(inst, [])
        if not refs:
            continue
        if cache is not None:
            feats = [cache.get(manifest, p, network.spec, network.adapters) for _, p in refs]
        else:
            feats = [network.features(manifest.load(p)) for _, p in refs]
        out[inst] = ([t for t, _ in refs], np.stack(feats))
    return out


def predict_entry(network: Network, manifest: DatasetManifest, entry: ManifestEntry,
                  threshold: float | None, cache: FeatureCache | None = None) -> EventPrediction | None:
    """Event prediction, or ``None`` when no active instrument has frames for the event."""
    per_image = {}
    for inst, (times, feats) in entry_features(network, manifest, entry, cache).items():
        probs = network.predict_features(feats, inst)
        per_image[inst] = list(zip(times, (float(p) for p in probs)))
    if not per_image:
        return None
    return EventPrediction.from_images(entry.event_id, per_image, threshold)


def predict_events(network: Network, manifest: DatasetManifest, event_ids: Iterable[str],
                   threshold: float | None = None, cache: FeatureCache | None = None) -> list[EventPrediction]:
    by_id = manifest.by_id()
    out = []
    for eid in event_ids:
        pred = predict_entry(network, manifest, by_id[eid], threshold, cache)
        if pred is not None:
            out.append(pred)
    return out
