"""Synthetic phantoms, aligned crop pairs, augmentation, patchification and masking.

Phantoms stand in for CT scans.  An *anatomy seed* fixes which organs exist
and roughly where; a *deformation seed* perturbs positions, sizes, contrast
and texture the way two patients differ.  Since the generator knows every
organ centroid, two crops of the same body part can be cut from two
"patients" with exact ground-truth correspondence.

Axis order is (x, y, z) throughout, arrays are C-ordered.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

Extents = tuple[int, int, int]

AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass
class Volume:
    intensity: np.ndarray
    labels: np.ndarray | None = None
    phantom_id: int = 0
    organ_centroids: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.intensity.ndim != 3:
            raise ValueError("intensity must be 3D")
        if self.labels is not None and self.labels.shape != self.intensity.shape:
            raise ValueError("labels and intensity extents differ")

    @property
    def extents(self) -> Extents:
        return tuple(int(n) for n in self.intensity.shape)

    def present_labels(self) -> set[int]:
        if self.labels is None:
            return set()
        return {int(v) for v in np.unique(self.labels) if v > 0}


def label_centroids(labels: np.ndarray) -> dict[int, np.ndarray]:
    """Mean voxel coordinate of every non-zero label."""
    flat = labels.reshape(-1).astype(np.intp)
    counts = np.bincount(flat)
    coords = np.indices(labels.shape).reshape(3, -1)
    sums = np.stack([np.bincount(flat, weights=c, minlength=counts.size) for c in coords], axis=1)
    return {lab: sums[lab] / counts[lab] for lab in range(1, counts.size) if counts[lab]}


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------
class PlacementError(RuntimeError):
    pass


def _place_organs(rng: np.random.Generator, extents: Extents, n_organs: int, retries: int = 500):
    ext = np.asarray(extents, dtype=float)
    centres: list[np.ndarray] = []
    radii: list[np.ndarray] = []
    for _ in range(n_organs):
        for _attempt in range(retries):
            c = rng.uniform(0.3, 0.7, size=3) * ext
            r = np.maximum(rng.uniform(0.06, 0.11, size=3) * ext, 2.5)
            ok = all(
                np.linalg.norm((c - c2) / ((r + r2) / 2)) >= 1.6 for c2, r2 in zip(centres, radii)
            )
            if ok:
                centres.append(c)
                radii.append(r)
                break
        else:
            raise PlacementError(f"could not place {n_organs} organs in {extents} without full overlap")
    return np.array(centres), np.array(radii)


def generate_phantom(
    seed: int,
    extents: Sequence[int] = (64, 64, 32),
    n_organs: int = 4,
    deform_seed: int | None = None,
) -> Volume:
    """Procedural labelled phantom: a body ellipsoid holding ``n_organs`` organs.

    Each organ is a rotated ellipsoid with its own intensity band.  The same
    ``seed`` with different ``deform_seed`` values yields the same organs at
    smoothly perturbed positions, sizes and contrasts.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ValueError("extents must be three values >= 16")
    if not 1 <= n_organs <= 8:
        raise ValueError("n_organs must be in 1..8")

    arng = np.random.default_rng([int(seed), 7001])
    centres, radii = _place_organs(arng, extents, n_organs)
    angles = arng.uniform(0, np.pi, size=n_organs)
    bands = np.linspace(0.4, 0.9, n_organs) if n_organs > 1 else np.array([0.65])
    base_int = arng.permutation(bands)
    body_r = np.asarray(extents, dtype=float) * arng.uniform(0.42, 0.48, size=3)

    if deform_seed is None:
        drng = np.random.default_rng([int(seed), 7002])
        shift = np.zeros((n_organs, 3))
        scale = np.ones((n_organs, 3))
        dint = np.zeros(n_organs)
        dang = np.zeros(n_organs)
    else:
        drng = np.random.default_rng([int(seed), int(deform_seed), 7003])
        shift = np.clip(drng.normal(0.0, 1.0, size=(n_organs, 3)), -2.0, 2.0)
        scale = drng.uniform(0.9, 1.1, size=(n_organs, 3))
        dint = drng.normal(0.0, 0.02, size=n_organs)
        dang = drng.normal(0.0, 0.1, size=n_organs)

    grid = np.stack(np.meshgrid(*[np.arange(e, dtype=float) for e in extents], indexing="ij"), axis=-1)
    mid = (np.asarray(extents) - 1) / 2.0
    body = (((grid - mid) / body_r) ** 2).sum(-1) <= 1.0

    intensity = np.where(body, 0.15, 0.0)
    labels = np.zeros(extents, dtype=np.uint8)
    for k in range(n_organs):
        c = centres[k] + shift[k]
        r = radii[k] * scale[k]
        a = angles[k] + dang[k]
        d = grid - c
        ca, sa = np.cos(a), np.sin(a)
        u = ca * d[..., 0] + sa * d[..., 1]
        v = -sa * d[..., 0] + ca * d[..., 1]
        inside = (u / r[0]) ** 2 + (v / r[1]) ** 2 + (d[..., 2] / r[2]) ** 2 <= 1.0
        labels[inside] = k + 1
        intensity = np.where(inside, base_int[k] + dint[k], intensity)

    texture = ndimage.gaussian_filter(drng.normal(0.0, 1.0, size=extents), sigma=1.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    intensity = intensity + 0.05 * texture + drng.normal(0.0, 0.015, size=extents)
    intensity = np.clip(intensity, 0.0, 1.0)

    missing = set(range(1, n_organs + 1)) - {int(v) for v in np.unique(labels)}
    if missing:
        raise PlacementError(f"organs {sorted(missing)} fully overlapped")
    pid = int(seed) if deform_seed is None else int(seed) * 1_000_003 + int(deform_seed)
    return Volume(intensity, labels, pid, label_centroids(labels))


@functools.lru_cache(maxsize=512)
def _cached_phantom(seed: int, extents: tuple, n_organs: int, deform_seed: int | None) -> Volume:
    vol = generate_phantom(seed, extents, n_organs, deform_seed)
    vol.intensity.flags.writeable = False
    vol.labels.flags.writeable = False
    return vol


# ---------------------------------------------------------------------------
# aligned crops
# ---------------------------------------------------------------------------
@dataclass
class CropPair:
    Q: Volume
    K: Volume
    correspondence_offset: np.ndarray
    organ: int


def crop(volume: Volume, start: Sequence[int], extents: Sequence[int]) -> Volume:
    sl = tuple(slice(int(s), int(s) + int(e)) for s, e in zip(start, extents))
    labels = None if volume.labels is None else volume.labels[sl].copy()
    out = Volume(volume.intensity[sl].copy(), labels, volume.phantom_id)
    if labels is not None:
        out.organ_centroids = label_centroids(labels)
    return out


def _window_start(centre: np.ndarray, crop_extents: np.ndarray) -> np.ndarray:
    return np.round(centre).astype(int) - crop_extents // 2


def sample_aligned_crops(
    anatomy_seed: int,
    deform_seeds: tuple[int, int],
    crop_extents: Sequence[int] = (32, 32, 16),
    jitter: int = 0,
    phantom_extents: Sequence[int] = (64, 64, 32),
    n_organs: int = 4,
    organ: int | None = None,
    rng: np.random.Generator | None = None,
    max_retries: int = 16,
) -> CropPair:
    """Cut crops Q and K around the same organ of two deformed instances.

    Q is centred on the organ centroid of instance one.  K is centred on the
    same organ in instance two, displaced by a random integer offset of at
    most ``jitter`` voxels per axis (a stand-in for landmark error).
    ``correspondence_offset`` is the negated displacement: where the organ
    moved to inside K relative to Q, up to centroid rounding.
    """
    crop_ext = np.asarray(crop_extents, dtype=int)
    ph_ext = np.asarray(phantom_extents, dtype=int)
    if np.any(crop_ext > ph_ext):
        raise ValueError("crop extents exceed phantom extents")
    ext = tuple(int(e) for e in phantom_extents)
    va = _cached_phantom(int(anatomy_seed), ext, int(n_organs), int(deform_seeds[0]))
    vb = _cached_phantom(int(anatomy_seed), ext, int(n_organs), int(deform_seeds[1]))
    if rng is None:
        rng = np.random.default_rng([int(anatomy_seed), int(deform_seeds[0]), int(deform_seeds[1]), 7004])

    candidates = [organ] if organ is not None else list(rng.permutation(np.arange(1, n_organs + 1)))
    for _ in range(max_retries):
        d = rng.integers(-jitter, jitter + 1, size=3) if jitter > 0 else np.zeros(3, dtype=int)
        for lab in candidates:
            lab = int(lab)
            if lab not in va.organ_centroids or lab not in vb.organ_centroids:
                continue
            sq = _window_start(va.organ_centroids[lab], crop_ext)
            sk = _window_start(vb.organ_centroids[lab], crop_ext) + d
            if np.any(sq < 0) or np.any(sq + crop_ext > ph_ext) or np.any(sk < 0) or np.any(sk + crop_ext > ph_ext):
                continue
            q = crop(va, sq, crop_ext)
            k = crop(vb, sk, crop_ext)
            if lab in q.present_labels() and lab in k.present_labels():
                return CropPair(q, k, -d, lab)
    raise PlacementError("no organ admits an in-bounds aligned crop pair")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentationSpec:
    kind: str  # "mask" or "strong"
    mask_ratio: float = 0.0
    flips: tuple[bool, bool, bool] = (False, False, False)
    rotations: tuple[int, int, int] = (0, 0, 0)  # quarter turns in planes (0,1), (0,2), (1,2)
    zoom: float = 1.0
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "mask":
            if not 0.0 <= self.mask_ratio < 1.0:
                raise ValueError("mask_ratio must be in [0, 1)")
            if (
                any(self.flips)
                or any(self.rotations)
                or self.zoom != 1.0
                or self.intensity_scale != 1.0
                or self.intensity_shift != 0.0
            ):
                raise ValueError("mask augmentation carries mask_ratio only")
        elif self.kind == "strong":
            if self.mask_ratio != 0.0:
                raise ValueError("strong augmentation carries no mask_ratio")
        else:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")


def random_strong_spec(seed: int, extents: Sequence[int], zoom_range: float = 0.1) -> AugmentationSpec:
    """Draw flips, shape-preserving quarter turns, a +-10% zoom and intensity jitter."""
    rng = np.random.default_rng([int(seed), 7005])
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
    rots = []
    for a, b in AXIS_PAIRS:
        # a quarter turn swaps the two extents; only half turns keep unequal ones
        choices = (0, 1, 2, 3) if extents[a] == extents[b] else (0, 2)
        rots.append(int(rng.choice(choices)))
    return AugmentationSpec(
        kind="strong",
        flips=flips,
        rotations=tuple(rots),
        zoom=float(rng.uniform(1 - zoom_range, 1 + zoom_range)),
        intensity_scale=float(rng.uniform(0.8, 1.2)),
        intensity_shift=float(rng.uniform(-0.1, 0.1)),
        seed=int(seed),
    )


def _zoom_nearest(arr: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour rescale about the centre, keeping the extents."""
    if factor == 1.0:
        return arr
    idx = []
    for n in arr.shape:
        c = (n - 1) / 2.0
        src = np.floor((np.arange(n) - c) / factor + c + 0.5).astype(int)
        idx.append(np.clip(src, 0, n - 1))
    return arr[np.ix_(*idx)]


def _geometric(arr: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    for axis, flip in enumerate(spec.flips):
        if flip:
            arr = np.flip(arr, axis=axis)
    for (a, b), k in zip(AXIS_PAIRS, spec.rotations):
        if k % 4:
            arr = np.rot90(arr, k=k, axes=(a, b))
    arr = _zoom_nearest(arr, spec.zoom)
    return np.ascontiguousarray(arr)


def augment_strong(volume: Volume, spec: AugmentationSpec) -> Volume:
    """Flips, quarter-turn rotations, zoom, then ``clip(scale * x + shift, 0, 1)``."""
    if spec.kind != "strong":
        raise ValueError("augment_strong needs a strong spec")
    img = _geometric(volume.intensity, spec)
    if img.shape != volume.intensity.shape:
        raise ValueError("rotation changed the volume extents")
    img = np.clip(spec.intensity_scale * img + spec.intensity_shift, 0.0, 1.0)
    labels = None if volume.labels is None else _geometric(volume.labels, spec)
    out = Volume(img, labels, volume.phantom_id)
    if labels is not None:
        out.organ_centroids = label_centroids(labels)
    return out


# ---------------------------------------------------------------------------
# patches and masks
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PatchGrid:
    volume_extents: Extents
    patch_extents: Extents

    def __post_init__(self):
        for v, p in zip(self.volume_extents, self.patch_extents):
            if p <= 0 or v % p:
                raise ValueError(f"patch extents {self.patch_extents} do not divide {self.volume_extents}")

    @property
    def counts(self) -> Extents:
        return tuple(v // p for v, p in zip(self.volume_extents, self.patch_extents))

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.counts))

    @property
    def patch_voxels(self) -> int:
        return int(np.prod(self.patch_extents))

    def token_ranges(self, i: int) -> tuple[slice, slice, slice]:
        """Voxel slices covered by token ``i`` (row-major over patch counts)."""
        pos = np.unravel_index(i, self.counts)
        return tuple(slice(int(q) * p, (int(q) + 1) * p) for q, p in zip(pos, self.patch_extents))


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray
    visible: np.ndarray
    n_tokens: int

    @property
    def n_masked(self) -> int:
        return int(self.masked.size)

    @property
    def n_visible(self) -> int:
        return int(self.visible.size)

    def masked_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_tokens, dtype=bool)
        flags[self.masked] = True
        return flags

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskSpec)
            and self.n_tokens == other.n_tokens
            and np.array_equal(self.masked, other.masked)
            and np.array_equal(self.visible, other.visible)
        )

    __hash__ = None


def masked_count(n_tokens: int, ratio: float) -> int:
    # round half up
    return int(np.floor(ratio * n_tokens + 0.5))


def mask_random(grid: PatchGrid | int, ratio: float, seed: int) -> MaskSpec:
    """Mask a uniformly random subset of ``round(ratio * N)`` tokens."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must be in [0, 1)")
    n = grid if isinstance(grid, int) else grid.n_tokens
    n_m = masked_count(n, ratio)
    perm = np.random.default_rng([int(seed), 7006]).permutation(n)
    return MaskSpec(np.sort(perm[:n_m]), np.sort(perm[n_m:]), n)


def patchify(volume: Volume | np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(X, Y, Z) volume -> (N, patch voxels); rows row-major over patches, voxels row-major within."""
    arr = volume.intensity if isinstance(volume, Volume) else np.asarray(volume)
    if tuple(arr.shape) != tuple(grid.volume_extents):
        raise ValueError(f"volume extents {arr.shape} do not match grid {grid.volume_extents}")
    (cx, cy, cz), (px, py, pz) = grid.counts, grid.patch_extents
    t = arr.reshape(cx, px, cy, py, cz, pz).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(grid.n_tokens, grid.patch_voxels)


def unpatchify(tokens: np.ndarray, grid: PatchGrid) -> np.ndarray:
    (cx, cy, cz), (px, py, pz) = grid.counts, grid.patch_extents
    t = np.asarray(tokens).reshape(cx, cy, cz, px, py, pz).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(grid.volume_extents)


def normalize_targets(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardise each patch row (population variance)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------
VOLUME_MAGIC = b"AVOL"
VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sHBB3Iq")
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


class VolumeFormatError(ValueError):
    pass


def save_volume(volume: Volume, path: str | Path, dtype: str = "f8") -> None:
    """Write the 28-byte header, the intensity payload and optional uint8 labels.

    Header (little-endian): magic ``AVOL``, u16 version, u8 dtype tag
    (1 = float64, 2 = float32), u8 label flag, 3 x u32 extents, i64 phantom id.
    """
    tag = 1 if dtype == "f8" else 2
    x, y, z = volume.extents
    has_labels = volume.labels is not None
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, tag, int(has_labels), x, y, z, volume.phantom_id)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(volume.intensity, dtype=_DTYPE_TAGS[tag]).tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(volume.labels, dtype="u1").tobytes())


def load_volume(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _VOLUME_HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, tag, has_labels, x, y, z, pid = _VOLUME_HEADER.unpack_from(raw, 0)
    if magic != VOLUME_MAGIC or version != VOLUME_VERSION or tag not in _DTYPE_TAGS:
        raise VolumeFormatError(f"{path}: not a version-{VOLUME_VERSION} volume file")
    dt = _DTYPE_TAGS[tag]
    n = x * y * z
    off = _VOLUME_HEADER.size
    if len(raw) != off + n * dt.itemsize + (n if has_labels else 0):
        raise VolumeFormatError(f"{path}: payload size does not match the header")
    intensity = np.frombuffer(raw, dtype=dt, count=n, offset=off).astype(np.float64).reshape(x, y, z)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="u1", count=n, offset=off + n * dt.itemsize).reshape(x, y, z).copy()
    vol = Volume(intensity, labels, pid)
    if labels is not None:
        vol.organ_centroids = label_centroids(labels)
    return vol
