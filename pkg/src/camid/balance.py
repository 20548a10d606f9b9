"""Hierarchical data balancing: divide a global patch budget k evenly down
brand -> model -> device -> image, rounding at each level.

"Standard rounding" is round-half-up evaluated on the exact rational value,
so quotas are identical across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import DataError


def round_half_up(x: Fraction) -> int:
    """[x] on the exact rational: floor(x + 1/2)."""
    num = 2 * x.numerator + x.denominator
    den = 2 * x.denominator
    return num // den


@dataclass
class SamplingPlan:
    k: int
    k_brand: int                       # shared by every brand
    k_model: dict                      # brand -> k_m
    k_device: dict                     # (brand, model) -> k_d
    k_image: dict                      # (brand, model, device) -> k_i
    image_quotas: dict                 # image path -> quota

    @property
    def total_quota(self):
        return sum(self.image_quotas.values())

    def to_dict(self):
        return {
            "k": self.k,
            "k_brand": self.k_brand,
            "k_model": {b: v for b, v in sorted(self.k_model.items())},
            "k_device": {f"{b}/{m}": v
                         for (b, m), v in sorted(self.k_device.items())},
            "k_image": {f"{b}/{m}/{d}": v
                        for (b, m, d), v in sorted(self.k_image.items())},
            "image_quotas": {p: v for p, v in sorted(self.image_quotas.items())},
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def plan_counts(records, k: int) -> SamplingPlan:
    """Evaluate the four quota formulas over the hierarchy of `records`.

    k_b = [k/n_b]; k_m = [k/(n_m*n_b)]; k_d = [k/(n_d*n_m*n_b)];
    k_i = [k/(n_i*n_d*n_m*n_b)], all round-half-up on exact rationals.
    `records` is any iterable of objects with brand/model/device_index/path.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    tree = {}
    for r in records:
        tree.setdefault(r.brand, {}).setdefault(r.model, {}).setdefault(
            r.device_index, []).append(r.path)
    if not tree:
        raise DataError("hierarchy has zero brands")

    n_b = len(tree)
    k_brand = round_half_up(Fraction(k, n_b))
    k_model, k_device, k_image, image_quotas = {}, {}, {}, {}
    for brand in sorted(tree):
        models = tree[brand]
        n_m = len(models)
        if n_m == 0:
            raise DataError(f"brand {brand} has zero models")
        k_model[brand] = round_half_up(Fraction(k, n_m * n_b))
        for model in sorted(models):
            devices = models[model]
            n_d = len(devices)
            if n_d == 0:
                raise DataError(f"model {brand}/{model} has zero devices")
            k_device[(brand, model)] = round_half_up(
                Fraction(k, n_d * n_m * n_b))
            for device in sorted(devices):
                paths = devices[device]
                n_i = len(paths)
                if n_i == 0:
                    raise DataError(
                        f"device {brand}/{model}/{device} has zero images")
                k_i = round_half_up(Fraction(k, n_i * n_d * n_m * n_b))
                k_image[(brand, model, device)] = k_i
                for p in paths:
                    image_quotas[p] = k_i
    return SamplingPlan(k=k, k_brand=k_brand, k_model=k_model,
                        k_device=k_device, k_image=k_image,
                        image_quotas=image_quotas)


@dataclass
class RealizedSample:
    entries: dict       # image path -> list of patch rank indices
    deficits: dict      # image path -> shortfall (only images short of quota)

    @property
    def total(self):
        return sum(len(v) for v in self.entries.values())


def realize_plan(plan: SamplingPlan, cache, seed=0) -> RealizedSample:
    """Take the first k_i patches (homogeneity rank) per image from the cache.

    Images with fewer cached patches than their quota contribute everything
    they have; the shortfall is recorded, never reassigned to siblings.
    `seed` is unused by the rank-order strategy but kept in the signature.
    """
    del seed
    entries, deficits = {}, {}
    for path in sorted(plan.image_quotas):
        if path not in cache:
            raise DataError(f"image {path} missing from patch cache")
        quota = plan.image_quotas[path]
        available = cache.n_patches(path)
        take = min(quota, available)
        entries[path] = list(range(take))
        if take < quota:
            deficits[path] = quota - take
    return RealizedSample(entries=entries, deficits=deficits)
