"""Deterministic synthetic multi-camera dataset.

Each image is a smooth low-frequency scene plus a model-specific
high-frequency additive signature, a much weaker device-specific
multiplicative pattern, and white noise. Signatures are 32-periodic, so
every tile origin on the 32-pixel extraction grid sees the same phase.
Generation is keyed entirely by (spec, image index): output bytes do not
depend on scheduling or generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .manifest import ImageRecord, Manifest

SIGNATURE_PERIOD = 32
WHITE_NOISE_SIGMA = 0.006
SCENE_AMP_MAX = 0.08
SCENE_COMPONENTS = 4
DEVICE_ATTENUATION = 0.1   # device patterns are 10x weaker than signatures

# rng stream tags so image, signature, and device draws never collide
_STREAM_SIGNATURE = 1
_STREAM_DEVICE = 2
_STREAM_IMAGE = 3


@dataclass
class SynthSpec:
    brands: list = field(default_factory=lambda: [
        ("BrandA", 1), ("BrandB", 2), ("BrandC", 2), ("BrandD", 2)])
    devices_per_model: int = 2
    images_per_device: int = 40
    image_size: int = 256
    scene_smoothness: float = 0.9
    signature_strength: float = 0.010
    seed: int = 7

    def validate(self):
        if not self.brands:
            raise ConfigError("synth spec needs at least one brand")
        for name, count in self.brands:
            if count < 1:
                raise ConfigError(f"brand {name} needs at least one model")
        if self.devices_per_model < 1 or self.images_per_device < 1:
            raise ConfigError("device and image counts must be >= 1")
        if self.image_size % SIGNATURE_PERIOD != 0:
            raise ConfigError(
                f"image_size must be a multiple of {SIGNATURE_PERIOD}")
        if not 0.0 <= self.scene_smoothness <= 1.0:
            raise ConfigError("scene_smoothness must lie in [0, 1]")
        if self.signature_strength < 0.0:
            raise ConfigError("signature_strength must be >= 0")

    def pairs(self):
        """(brand, model) pairs in generation order."""
        return [(brand, f"M{j + 1}")
                for brand, count in self.brands for j in range(count)]

    def to_dict(self):
        return {
            "brands": [[b, c] for b, c in self.brands],
            "devices_per_model": self.devices_per_model,
            "images_per_device": self.images_per_device,
            "image_size": self.image_size,
            "scene_smoothness": self.scene_smoothness,
            "signature_strength": self.signature_strength,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        merged = dict(d)
        if "brands" in merged:
            merged["brands"] = [(b, int(c)) for b, c in merged["brands"]]
        spec = cls(**merged)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load synth spec {path}: {e}") from e

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _high_pass_unit(raw):
    """Remove the wrap-around 3x3 box mean, then scale each leading plane
    to unit standard deviation. Wrap-around keeps tiled copies seamless."""
    box = np.zeros_like(raw)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            box += np.roll(raw, (dr, dc), axis=(-2, -1))
    hp = raw - box / 9.0
    std = hp.std(axis=(-2, -1), keepdims=True)
    return hp / std


def model_signature(spec: SynthSpec, brand, model):
    """The 3 x 32 x 32 unit-std additive pattern of one (brand, model).
    Distinct pair index per pair; deterministic in the spec seed."""
    pairs = spec.pairs()
    if (brand, model) not in pairs:
        raise DataError(f"unknown synthetic pair {brand}/{model}")
    idx = pairs.index((brand, model))
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _STREAM_SIGNATURE, idx]))
    raw = rng.standard_normal((3, SIGNATURE_PERIOD, SIGNATURE_PERIOD))
    return _high_pass_unit(raw)


def device_pattern(spec: SynthSpec, brand, model, device_index):
    """Per-device unit-std multiplicative pattern (PRNU-like), full size."""
    pairs = spec.pairs()
    idx = pairs.index((brand, model)) * spec.devices_per_model + device_index
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _STREAM_DEVICE, idx]))
    raw = rng.standard_normal((spec.image_size, spec.image_size))
    return _high_pass_unit(raw)


def _scene(rng, size, smoothness):
    """Mixture of low-frequency cosine gradients around mid-gray."""
    amp_max = SCENE_AMP_MAX * (1.0 - smoothness)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scene = np.zeros((size, size))
    for _ in range(SCENE_COMPONENTS):
        freq = rng.uniform(0.25, 1.5) / size
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.0, amp_max)
        scene += amp * np.cos(
            2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
            + phase)
    return scene


def render_image(spec: SynthSpec, brand, model, device_index, global_index):
    """One uint8 HxWx3 image; pure function of (spec, identifiers)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _STREAM_IMAGE, global_index]))
    size = spec.image_size
    scene = _scene(rng, size, spec.scene_smoothness)
    offsets = rng.uniform(-0.02, 0.02, size=3)
    base = 0.5 + offsets[None, None, :] + scene[:, :, None]

    reps = size // SIGNATURE_PERIOD
    sig = np.tile(model_signature(spec, brand, model).transpose(1, 2, 0),
                  (reps, reps, 1))
    dev = device_pattern(spec, brand, model, device_index)[:, :, None]
    noise = rng.standard_normal((size, size, 3)) * WHITE_NOISE_SIGMA

    img = base * (1.0 + DEVICE_ATTENUATION * spec.signature_strength * dev) \
        + spec.signature_strength * sig + noise
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def iter_items(spec: SynthSpec):
    """(brand, model, device, image_index, global_index, filename) tuples."""
    gi = 0
    for brand, model in spec.pairs():
        for d in range(spec.devices_per_model):
            for i in range(spec.images_per_device):
                name = f"{brand}_{model}_{d}_{i + 1:04d}.png"
                yield brand, model, d, i, gi, name
                gi += 1


def generate(spec: SynthSpec, out_dir) -> Manifest:
    """Write the whole dataset as 8-bit PNGs and return its manifest.
    Byte-identical output for a fixed spec."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DataError(f"cannot write to {out_dir}: {e}") from e

    records = []
    for brand, model, d, i, gi, name in iter_items(spec):
        arr = render_image(spec, brand, model, d, gi)
        path = out_dir / name
        Image.fromarray(arr, "RGB").save(path, format="PNG")
        records.append(ImageRecord(
            path=str(path), brand=brand, model=model, device_index=d,
            image_id=f"{i + 1:04d}", width=spec.image_size,
            height=spec.image_size))
    return Manifest(records)
