"""Dataset manifest: ingest an image collection into the brand/model/device
hierarchy, filter it, and plan leave-one-device-out cross-validation folds.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

# Dresden-style names: Brand_Model_device_image.ext, where the model part may
# itself contain underscores (e.g. Olympus_mju_1050SW_2_123.JPG).
DEFAULT_NAME_PATTERN = (
    r"^(?P<brand>[^_]+)_(?P<model>.+)_(?P<device>\d+)_(?P<image_id>\d+)"
    r"\.(?:jpg|jpeg|png)$"
)

MIN_IMAGE_SIDE = 128


@dataclass(frozen=True)
class ImageRecord:
    path: str
    brand: str
    model: str
    device_index: int
    image_id: str
    width: int
    height: int

    @property
    def key(self):
        return (self.brand, self.model, self.device_index, self.image_id)


@dataclass
class SkipReport:
    unmatched: list = field(default_factory=list)
    unreadable: list = field(default_factory=list)
    too_small: list = field(default_factory=list)

    @property
    def total(self):
        return len(self.unmatched) + len(self.unreadable) + len(self.too_small)

    def to_dict(self):
        return {
            "unmatched": list(self.unmatched),
            "unreadable": list(self.unreadable),
            "too_small": list(self.too_small),
        }


class Manifest:
    """Immutable view over a list of ImageRecords plus the derived
    brand -> model -> device -> image hierarchy."""

    def __init__(self, records, filters_applied=False):
        records = list(records)
        seen = set()
        for r in records:
            if r.key in seen:
                raise DataError(f"duplicate record key {r.key}")
            seen.add(r.key)
        self.records = sorted(records, key=lambda r: r.key)
        self.filters_applied = filters_applied
        self._tree = _build_tree(self.records)

    # -- hierarchy accessors -------------------------------------------------

    def brands(self):
        return sorted(self._tree)

    def models(self, brand=None):
        """(brand, model) pairs, or model names of one brand."""
        if brand is not None:
            return sorted(self._tree[brand])
        return [(b, m) for b in self.brands() for m in sorted(self._tree[b])]

    def devices(self, brand, model):
        return sorted(self._tree[brand][model])

    def images(self, brand, model, device_index):
        return self._tree[brand][model][device_index]

    @property
    def n_brands(self):
        return len(self._tree)

    def __len__(self):
        return len(self.records)

    def hierarchy_counts(self):
        """Nested counts: brand -> model -> device -> n_images."""
        return {
            b: {m: {d: len(self.images(b, m, d)) for d in self.devices(b, m)}
                for m in self.models(b)}
            for b in self.brands()
        }

    # -- persistence ---------------------------------------------------------

    def to_dict(self):
        return {
            "records": [
                {
                    "path": r.path,
                    "brand": r.brand,
                    "model": r.model,
                    "device": r.device_index,
                    "image_id": r.image_id,
                    "w": r.width,
                    "h": r.height,
                }
                for r in self.records
            ],
            "filters_applied": self.filters_applied,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d):
        records = [
            ImageRecord(
                path=e["path"], brand=e["brand"], model=e["model"],
                device_index=int(e["device"]), image_id=str(e["image_id"]),
                width=int(e["w"]), height=int(e["h"]),
            )
            for e in d["records"]
        ]
        return cls(records, filters_applied=bool(d.get("filters_applied", False)))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load manifest {path}: {e}") from e


def _build_tree(records):
    tree = {}
    for r in records:
        tree.setdefault(r.brand, {}).setdefault(r.model, {}).setdefault(
            r.device_index, []).append(r)
    return tree


def ingest_dataset(root, name_pattern=DEFAULT_NAME_PATTERN):
    """Scan `root` recursively for images matching `name_pattern`.

    Dimensions come from the image header (no full decode). Files that do
    not match the pattern, cannot be opened, or are smaller than 128x128
    on either side are skipped and counted in the returned SkipReport.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    pattern = re.compile(name_pattern, re.IGNORECASE)

    records = []
    report = SkipReport()
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        m = pattern.match(path.name)
        if m is None:
            report.unmatched.append(str(path))
            continue
        try:
            with Image.open(path) as img:
                width, height = img.size
        except OSError:
            report.unreadable.append(str(path))
            continue
        if width < MIN_IMAGE_SIDE or height < MIN_IMAGE_SIDE:
            report.too_small.append(str(path))
            continue
        records.append(ImageRecord(
            path=str(path),
            brand=m.group("brand"),
            model=m.group("model"),
            device_index=int(m.group("device")),
            image_id=m.group("image_id"),
            width=width,
            height=height,
        ))
    return Manifest(records), report


def load_image(path):
    """Decode an image to float64 HxWx3 in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return arr / 255.0


# -- paper filtering rules ----------------------------------------------------

NIKON_MERGE_FROM = ("Nikon", "D70s")
NIKON_MERGE_INTO = ("Nikon", "D70")


def apply_paper_filters(m: Manifest) -> Manifest:
    """Merge Nikon_D70s into Nikon_D70, then drop every model that has
    fewer than two devices. Idempotent."""
    records = list(m.records)

    from_b, from_m = NIKON_MERGE_FROM
    into_b, into_m = NIKON_MERGE_INTO
    target_devices = {r.device_index for r in records
                      if (r.brand, r.model) == (into_b, into_m)}
    offset = (max(target_devices) + 1) if target_devices else 0
    merged = []
    for r in records:
        if (r.brand, r.model) == (from_b, from_m):
            # re-key devices past the D70 range so instances stay distinct
            r = replace(r, model=into_m, device_index=r.device_index + offset)
        merged.append(r)

    by_model = {}
    for r in merged:
        by_model.setdefault((r.brand, r.model), set()).add(r.device_index)
    kept = [r for r in merged if len(by_model[(r.brand, r.model)]) >= 2]
    return Manifest(kept, filters_applied=True)


def hierarchy_stats(m: Manifest):
    """Per-model device/image counts plus totals, in brand/model order."""
    rows = []
    for brand, model in m.models():
        devices = m.devices(brand, model)
        n_images = sum(len(m.images(brand, model, d)) for d in devices)
        rows.append({
            "brand": brand,
            "model": model,
            "n_devices": len(devices),
            "n_images": n_images,
        })
    return {
        "models": rows,
        "totals": {
            "n_brands": m.n_brands,
            "n_models": len(rows),
            "n_devices": sum(r["n_devices"] for r in rows),
            "n_images": sum(r["n_images"] for r in rows),
        },
    }


# -- cross-validation folds ----------------------------------------------------


@dataclass
class FoldPlan:
    n_folds: int
    # per fold: list of (brand, model, device_index) held out for test
    assignments: list
    val_fraction: float
    seed: int

    def held_out(self, fold):
        return self.assignments[fold]

    def to_dict(self):
        return {
            "n_folds": self.n_folds,
            "validation_rule": {"fraction": self.val_fraction, "seed": self.seed},
            "folds": {
                str(f): [list(t) for t in self.assignments[f]]
                for f in range(self.n_folds)
            },
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d):
        n_folds = int(d["n_folds"])
        assignments = [
            [tuple([t[0], t[1], int(t[2])]) for t in d["folds"][str(f)]]
            for f in range(n_folds)
        ]
        rule = d["validation_rule"]
        return cls(n_folds=n_folds, assignments=assignments,
                   val_fraction=float(rule["fraction"]), seed=int(rule["seed"]))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot load fold plan {path}: {e}") from e


def make_folds(m: Manifest, n_folds: int, val_fraction=0.15, seed=0) -> FoldPlan:
    """Rotate the held-out device per model: fold f holds out the device of
    rank (f mod n_d) in the model's sorted device list."""
    if not 0 < val_fraction < 0.5:
        raise DataError(f"val_fraction must be in (0, 0.5), got {val_fraction}")
    if n_folds < 1:
        raise DataError(f"n_folds must be >= 1, got {n_folds}")
    for brand, model in m.models():
        if len(m.devices(brand, model)) < 2:
            raise DataError(
                f"model {brand}_{model} has a single device; "
                "apply_paper_filters first")
    assignments = []
    for f in range(n_folds):
        held = []
        for brand, model in m.models():
            devices = m.devices(brand, model)
            held.append((brand, model, devices[f % len(devices)]))
        assignments.append(held)
    return FoldPlan(n_folds=n_folds, assignments=assignments,
                    val_fraction=val_fraction, seed=seed)


def split_fold(m: Manifest, plan: FoldPlan, fold: int):
    """Materialize (train, val, test) record lists for one fold.

    Test = all images of the held-out devices. Validation is a stratified
    per-model holdout of `val_fraction` of the remaining images, drawn
    deterministically from the plan seed.
    """
    if not 0 <= fold < plan.n_folds:
        raise DataError(f"fold {fold} out of range (n_folds={plan.n_folds})")
    held = set(plan.held_out(fold))
    test, pool = [], []
    for r in m.records:
        (test if (r.brand, r.model, r.device_index) in held else pool).append(r)

    train, val = [], []
    pool_by_model = {}
    for r in pool:
        pool_by_model.setdefault((r.brand, r.model), []).append(r)
    for mi, key in enumerate(sorted(pool_by_model)):
        rs = sorted(pool_by_model[key], key=lambda r: r.key)
        n_val = int(round(plan.val_fraction * len(rs)))
        n_val = min(n_val, len(rs) - 1)
        rng = np.random.default_rng([plan.seed, fold, mi])
        order = rng.permutation(len(rs))
        chosen = set(order[:n_val].tolist())
        for i, r in enumerate(rs):
            (val if i in chosen else train).append(r)
    return train, val, test
