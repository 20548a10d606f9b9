"""Patch extraction: tile images into 128x128 blocks, rate homogeneity from
per-channel standard deviations, select patches homogeneous-first, and
mean-subtract each channel.

Standard deviations use the population (divide-by-N) convention on
[0, 1]-scaled pixels; the 0.005/0.02 thresholds only make sense on that
scale. The homogeneous interval is closed at both ends.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

PATCH_SIZE = 128
PATCH_STRIDE = 32
STD_SATURATED = 0.005
STD_HOMOGENEOUS = 0.02


class PatchClass(enum.Enum):
    HOMOGENEOUS = "homogeneous"
    NONHOMOGENEOUS = "nonhomogeneous"
    SATURATED = "saturated"


@dataclass
class Patch:
    values: np.ndarray          # 3 x size x size, float32
    origin: tuple               # (row, col) pixel offset in the source image
    channel_stds: np.ndarray | None = None
    channel_means: np.ndarray | None = None
    klass: PatchClass | None = None


@dataclass
class PatchSelection:
    patches: list
    counts: tuple               # (n_homogeneous, n_nonhomogeneous, n_saturated) used
    requested: int


def tile_grid(height, width, size=PATCH_SIZE, stride=PATCH_STRIDE):
    """Row-major (row, col) origins of every full tile."""
    if height < size or width < size:
        raise DataError(
            f"image {height}x{width} is smaller than the {size}x{size} tile")
    rows = range(0, height - size + 1, stride)
    cols = range(0, width - size + 1, stride)
    return [(r, c) for r in rows for c in cols]


def tile_image(img, size=PATCH_SIZE, stride=PATCH_STRIDE):
    """Cut an HxWx3 array into unclassified patches, row-major by origin."""
    img = _as_image(img)
    out = []
    for r, c in tile_grid(img.shape[0], img.shape[1], size, stride):
        values = img[r:r + size, c:c + size, :].transpose(2, 0, 1)
        out.append(Patch(values=np.ascontiguousarray(values, dtype=np.float32),
                         origin=(r, c)))
    return out


def classify_stds(stds, lo=STD_SATURATED, hi=STD_HOMOGENEOUS):
    """Class from the three per-channel stds. Saturated strictly below `lo`
    on every channel; homogeneous when all lie in [lo, hi]; nonhomogeneous
    otherwise."""
    stds = np.asarray(stds, dtype=np.float64)
    if np.max(stds) < lo:
        return PatchClass.SATURATED
    if np.min(stds) >= lo and np.max(stds) <= hi:
        return PatchClass.HOMOGENEOUS
    return PatchClass.NONHOMOGENEOUS


def classify_patch(p: Patch, lo=STD_SATURATED, hi=STD_HOMOGENEOUS) -> Patch:
    """Return a copy of the patch with stds, means, and class filled in."""
    values = p.values.astype(np.float64)
    stds = values.std(axis=(1, 2))
    means = values.mean(axis=(1, 2))
    return replace(p, channel_stds=stds, channel_means=means,
                   klass=classify_stds(stds, lo, hi))


def preprocess_patch(p: Patch) -> Patch:
    """Subtract the per-channel mean from each channel."""
    values = p.values.astype(np.float64)
    means = values.mean(axis=(1, 2))
    out = (values - means[:, None, None]).astype(np.float32)
    return replace(p, values=out, channel_means=means)


def tile_statistics(img, size=PATCH_SIZE, stride=PATCH_STRIDE):
    """Per-tile channel means and stds on the full tiling grid.

    Returns (origins, means, stds) with means/stds shaped (n_tiles, 3).
    Computed one tile-row at a time so large images never materialize the
    full window expansion.
    """
    img = _as_image(img)
    h, w = img.shape[:2]
    origins = tile_grid(h, w, size, stride)
    rows = range(0, h - size + 1, stride)
    means, stds = [], []
    for r in rows:
        strip = img[r:r + size, :, :]
        win = sliding_window_view(strip, (size, size), axis=(0, 1))[0, ::stride]
        means.append(win.mean(axis=(-2, -1)))  # (n_cols, 3)
        stds.append(win.std(axis=(-2, -1)))
    return origins, np.concatenate(means, axis=0), np.concatenate(stds, axis=0)


def select_patches(img, p, seed=0, size=PATCH_SIZE, stride=PATCH_STRIDE,
                   lo=STD_SATURATED, hi=STD_HOMOGENEOUS) -> PatchSelection:
    """Pick `p` preprocessed patches, homogeneous tiles first.

    Homogeneous tiles are ranked by ascending max-channel std with row-major
    origin as the tie-break. If they run out, nonhomogeneous tiles follow
    (ascending std), then saturated ones (descending std, i.e. the least
    blank first). Deterministic; `seed` is accepted for forward
    compatibility with randomized strategies.
    """
    del seed  # current ranking is fully deterministic
    if p < 1:
        raise DataError(f"patch count must be >= 1, got {p}")
    img = _as_image(img)
    origins, means, stds = tile_statistics(img, size, stride)
    max_std = stds.max(axis=1)
    min_std = stds.min(axis=1)

    saturated = max_std < lo
    homogeneous = ~saturated & (min_std >= lo) & (max_std <= hi)
    ranked = []
    for mask, sign in ((homogeneous, 1.0), (~homogeneous & ~saturated, 1.0),
                       (saturated, -1.0)):
        idx = np.flatnonzero(mask)
        idx = sorted(idx, key=lambda i: (sign * max_std[i], origins[i]))
        ranked.append(idx)

    take = min(p, len(origins))
    chosen = (ranked[0] + ranked[1] + ranked[2])[:take]
    counts = [0, 0, 0]
    patches = []
    classes = (PatchClass.HOMOGENEOUS, PatchClass.NONHOMOGENEOUS,
               PatchClass.SATURATED)
    bounds = np.cumsum([len(r) for r in ranked])
    for pos, i in enumerate(chosen):
        tier = int(np.searchsorted(bounds, pos, side="right"))
        counts[tier] += 1
        r, c = origins[i]
        values = img[r:r + size, c:c + size, :].transpose(2, 0, 1)
        values = (values - means[i][:, None, None]).astype(np.float32)
        patches.append(Patch(values=values, origin=(r, c),
                             channel_stds=stds[i], channel_means=means[i],
                             klass=classes[tier]))
    return PatchSelection(patches=patches, counts=tuple(counts), requested=p)


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an HxWx3 image, got shape {img.shape}")
    return img


# -- patch cache ---------------------------------------------------------------
#
# Binary container: magic, version byte, u32 index length, JSON index, then
# raw little-endian float32 planes (3 * size * size per patch) in index order.

CACHE_MAGIC = b"CAMPATCH"
CACHE_VERSION = 1


def write_cache(path, entries, size=PATCH_SIZE):
    """Write {image_path: PatchSelection} to a cache file.

    The per-image patch order (the homogeneity rank) is preserved.
    """
    index = {"patch_size": size, "images": []}
    payload = []
    for image_path in sorted(entries):
        sel = entries[image_path]
        rows = []
        for patch in sel.patches:
            if patch.values.shape != (3, size, size):
                raise DataError(
                    f"patch shape {patch.values.shape} does not match cache "
                    f"size {size}")
            rows.append({
                "origin": [int(patch.origin[0]), int(patch.origin[1])],
                "class": patch.klass.value,
                "stds": [float(s) for s in patch.channel_stds],
                "means": [float(m) for m in patch.channel_means],
            })
            payload.append(np.ascontiguousarray(
                patch.values, dtype="<f4").tobytes())
        index["images"].append({
            "image_path": str(image_path),
            "counts": list(sel.counts),
            "requested": sel.requested,
            "patches": rows,
        })
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(bytes([CACHE_VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payload:
            f.write(chunk)


class PatchCache:
    """Read-only view of a patch cache file; pixel planes load lazily."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            magic = f.read(len(CACHE_MAGIC))
            if magic != CACHE_MAGIC:
                raise DataError(f"{path} is not a patch cache")
            version = f.read(1)[0]
            if version != CACHE_VERSION:
                raise DataError(f"unsupported cache version {version}")
            (index_len,) = struct.unpack("<I", f.read(4))
            index = json.loads(f.read(index_len).decode("utf-8"))
            self._payload_start = f.tell()
        self.patch_size = int(index["patch_size"])
        self._plane_bytes = 3 * self.patch_size * self.patch_size * 4
        self._images = {}
        slot = 0
        for entry in index["images"]:
            self._images[entry["image_path"]] = (slot, entry)
            slot += len(entry["patches"])

    def __contains__(self, image_path):
        return str(image_path) in self._images

    def image_paths(self):
        return sorted(self._images)

    def n_patches(self, image_path):
        return len(self._meta(image_path)[1]["patches"])

    def _meta(self, image_path):
        key = str(image_path)
        if key not in self._images:
            raise DataError(f"image {key} missing from cache {self.path}")
        return self._images[key]

    def counts(self, image_path):
        return tuple(self._meta(image_path)[1]["counts"])

    def load(self, image_path, indices=None):
        """Patches of one image, optionally only the given rank indices."""
        slot, entry = self._meta(image_path)
        n = len(entry["patches"])
        if indices is None:
            indices = range(n)
        size = self.patch_size
        out = []
        with open(self.path, "rb") as f:
            for i in indices:
                if not 0 <= i < n:
                    raise DataError(
                        f"patch index {i} out of range for {image_path}")
                f.seek(self._payload_start + (slot + i) * self._plane_bytes)
                raw = f.read(self._plane_bytes)
                values = np.frombuffer(raw, dtype="<f4").reshape(3, size, size)
                meta = entry["patches"][i]
                out.append(Patch(
                    values=values.copy(),
                    origin=tuple(meta["origin"]),
                    channel_stds=np.array(meta["stds"]),
                    channel_means=np.array(meta["means"]),
                    klass=PatchClass(meta["class"]),
                ))
        return out


def extract_to_cache(manifest_records, out_path, p, seed=0,
                     size=PATCH_SIZE, stride=PATCH_STRIDE,
                     lo=STD_SATURATED, hi=STD_HOMOGENEOUS, threads=1):
    """Run select_patches over every record and write one cache file.

    Worker count never changes the output: per-image extraction is pure and
    results are keyed by path.
    """
    from .manifest import load_image

    def one(record):
        img = load_image(record.path)
        return record.path, select_patches(img, p, seed=seed, size=size,
                                           stride=stride, lo=lo, hi=hi)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = dict(pool.map(one, manifest_records))
    else:
        entries = dict(one(r) for r in manifest_records)
    write_cache(out_path, entries, size=size)
    return entries
