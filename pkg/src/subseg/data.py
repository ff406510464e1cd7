"""Synthetic hierarchical segmentation data.

Each image holds 1-3 nested "lesion" objects. An object is a set of
concentric regions, one per foreground subclass (outer ring = subclass 1,
core = subclass k_fg), so subclasses partition the foreground superclass the
way tumour compartments do. Each object has its own contrast gain, so
absolute intensity says little about the subclass. Optional decoy blobs use
the same ring intensities in a shuffled order and are labelled background;
telling them apart is what the abundant superclass labels teach.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import tsr
from .core.rng import Rng, derive


class PlacementError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class HierarchySpec:
    """Superclass/subclass bookkeeping. ``k[r]`` subclasses belong to superclass ``r``.

    Subclass indices are laid out superclass by superclass, so with
    ``k = (1, 3)`` subclass 0 is background and 1..3 are foreground.
    """

    k: tuple[int, ...] = (1, 3)

    def __post_init__(self):
        if len(self.k) != 2:
            raise ValueError(f"only R=2 (background, foreground) is supported, got k={self.k}")
        if self.k[0] != 1 or self.k[1] < 2:
            raise ValueError(f"need k_bg=1 and k_fg>=2, got k={self.k}")

    @classmethod
    def foreground(cls, k_fg: int) -> "HierarchySpec":
        return cls((1, k_fg))

    @property
    def R(self) -> int:
        return len(self.k)

    @property
    def K(self) -> int:
        return sum(self.k)

    @property
    def k_fg(self) -> int:
        return self.k[1]

    @property
    def parent_map(self) -> np.ndarray:
        return np.repeat(np.arange(self.R), self.k)

    def parent(self, sub: int) -> int:
        return int(self.parent_map[sub])

    def collapse(self, z: np.ndarray) -> np.ndarray:
        """Map a subclass label map to its superclass map."""
        return self.parent_map[z]


@dataclass(frozen=True)
class SyntheticSpec:
    hierarchy: HierarchySpec = HierarchySpec()
    size: tuple[int, int] = (64, 64)
    channels: int = 1
    noise: float = 0.1
    max_objects: int = 3
    max_decoys: int = 2
    radius: tuple[float, float] = (5.0, 12.0)
    decoy_radius: tuple[float, float] = (5.0, 12.0)
    gain: tuple[float, float] = (0.6, 1.4)
    retries: int = 500

    def __post_init__(self):
        if self.hierarchy.k_fg not in (2, 3):
            raise ValueError(f"generator supports k_fg in {{2, 3}}, got {self.hierarchy.k_fg}")


# Subclass contrast above the local background, outer ring first. Deliberately not monotone in depth.
_SUBCLASS_CONTRAST = {2: (0.3, 0.55), 3: (0.3, 0.55, 0.15)}
# Ring boundaries (normalized radius) between consecutive subclasses, outer first.
_RING_CUTS = {2: ((0.35, 0.7),), 3: ((0.55, 0.8), (0.2, 0.45))}


@dataclass
class Sample:
    image: np.ndarray            # (C, H, W) float32 in [0, 1]
    y: np.ndarray                # (H, W) superclass map
    z: np.ndarray | None         # (H, W) subclass map, None for coarse samples
    seed: int
    id: str = ""

    def check(self, hierarchy: HierarchySpec) -> None:
        if self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError(f"{self.id}: image values outside [0, 1]")
        if self.z is not None and not np.array_equal(hierarchy.collapse(self.z), self.y):
            raise DatasetError(f"{self.id}: subclass map disagrees with superclass map")


@dataclass
class DatasetSplit:
    fine: list[Sample]
    coarse: list[Sample]
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    hierarchy: HierarchySpec = HierarchySpec()
    # subclass maps removed from coarse samples; diagnostics only
    oracle: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def _smooth_field(rng: Rng, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W]).reshape(2, 1, 1)
    out = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)
        ph = rng.uniform(0, 2 * math.pi)
        out += 0.04 * np.cos(2 * math.pi * (fy * yy + fx * xx) + ph)
    return out


def _blob_radius(rng: Rng, H: int, W: int, cy: float, cx: float, r: float, wobble: bool) -> np.ndarray:
    """Normalized radius field: <= 1 inside the (irregular, elliptical) blob."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ratio = rng.uniform(0.75, 1.0)
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / ratio
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if wobble:
        amp, freq, ph = rng.uniform(0.0, 0.1), 2 + rng.integers(3), rng.uniform(0, 2 * math.pi)
        scale = r * (1.0 + amp * np.sin(freq * phi + ph))
    else:
        scale = r
    return rho / scale


def _place(rng: Rng, H: int, W: int, r: float, placed: list, retries: int):
    margin = r + 1
    for _ in range(retries):
        cy, cx = rng.uniform(margin, H - 1 - margin), rng.uniform(margin, W - 1 - margin)
        if all(math.hypot(cy - py, cx - px) > r + pr + 2 for py, px, pr in placed):
            return cy, cx
    return None


def _rings(rho: np.ndarray, cuts: list[float]) -> list[np.ndarray]:
    """Masks of the concentric regions, outermost first."""
    bounds = [1.0] + cuts + [-1.0]
    return [(rho <= bounds[i]) & (rho > bounds[i + 1]) for i in range(len(cuts) + 1)]


def generate_sample(seed: int, spec: SyntheticSpec = SyntheticSpec()) -> Sample:
    """Render one image with its full subclass map; a pure function of (seed, spec).

    Objects and decoys draw from the same contrast levels, scaled by a random
    per-blob gain, so only the ring arrangement tells them apart.
    """
    rng = Rng(derive(seed, "sample"))
    H, W = spec.size
    k_fg = spec.hierarchy.k_fg
    contrast = _SUBCLASS_CONTRAST[k_fg]
    scale = min(H, W) / 64.0

    background = rng.uniform(0.1, 0.3)
    intensity = np.full((H, W), background) + _smooth_field(rng, H, W)
    z = np.zeros((H, W), dtype=np.int64)
    placed: list[tuple[float, float, float]] = []

    n_obj = 1 + rng.integers(spec.max_objects)
    for _ in range(n_obj):
        r = rng.uniform(*spec.radius) * scale
        # wobble can push the outline up to 10% past r
        spot = _place(rng, H, W, 1.1 * r, placed, spec.retries)
        if spot is None:
            raise PlacementError(f"seed {seed}: could not place object of radius {r:.1f} "
                                 f"after {spec.retries} tries")
        placed.append((spot[0], spot[1], 1.1 * r))
        rho = _blob_radius(rng, H, W, spot[0], spot[1], r, wobble=True)
        cuts = [rng.uniform(lo, hi) for lo, hi in _RING_CUTS[k_fg]]
        gain = rng.uniform(*spec.gain)
        for sub, region in enumerate(_rings(rho, cuts)):
            z[region] = sub + 1
            intensity[region] = background + gain * contrast[sub]

    for _ in range(rng.integers(spec.max_decoys + 1)):
        r = rng.uniform(*spec.decoy_radius) * scale
        spot = _place(rng, H, W, 1.1 * r, placed, spec.retries)
        if spot is None:
            continue
        placed.append((spot[0], spot[1], 1.1 * r))
        rho = _blob_radius(rng, H, W, spot[0], spot[1], r, wobble=True)
        cuts = [rng.uniform(lo, hi) for lo, hi in _RING_CUTS[k_fg]]
        gain = rng.uniform(*spec.gain)
        # any ring order except the object order (a constant order gives a plain blob)
        order = rng.permutation(k_fg)
        while order == list(range(k_fg)):
            order = rng.permutation(k_fg)
        for sub, region in zip(order, _rings(rho, cuts)):
            intensity[region] = background + gain * contrast[sub]

    image = np.empty((spec.channels, H, W), dtype=np.float32)
    for c in range(spec.channels):
        noisy = intensity + spec.noise * rng.normal((H, W))
        image[c] = np.clip(noisy, 0.0, 1.0)
    y = spec.hierarchy.collapse(z)
    return Sample(image=image, y=y, z=z, seed=seed)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image)
    if not np.isfinite(image).all():
        raise ValueError("normalize_intensity: image contains non-finite values")
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image, dtype=np.float32)
    return ((image - lo) / (hi - lo)).astype(np.float32)


def split_dataset(samples: list[Sample], n_sub: int, seed: int, val: list[Sample] = (),
                  test: list[Sample] = (), hierarchy: HierarchySpec = HierarchySpec()) -> DatasetSplit:
    """Keep subclass maps on ``n_sub`` uniformly chosen training samples; strip the rest."""
    if n_sub > len(samples):
        raise DatasetError(f"n_sub={n_sub} exceeds training set size {len(samples)}")
    if n_sub < 0:
        raise DatasetError(f"n_sub must be non-negative, got {n_sub}")
    rng = Rng(derive(seed, "split"))
    chosen = set(rng.sample_without_replacement(len(samples), n_sub))
    fine, coarse, oracle = [], [], {}
    for i, s in enumerate(samples):
        if i in chosen:
            fine.append(s)
        else:
            oracle[s.id] = s.z
            coarse.append(dataclasses.replace(s, z=None))
    return DatasetSplit(fine=fine, coarse=coarse, val=list(val), test=list(test),
                        hierarchy=hierarchy, oracle=oracle)


def random_crop(sample: Sample, patch_hw: tuple[int, int], rng: Rng) -> Sample:
    """Crop image, y and z with one window drawn uniformly over valid offsets."""
    H, W = sample.y.shape
    ph, pw = patch_hw
    if ph > H or pw > W:
        raise ValueError(f"patch {patch_hw} larger than image {(H, W)}")
    top = rng.integers(H - ph + 1)
    left = rng.integers(W - pw + 1)
    win = (slice(top, top + ph), slice(left, left + pw))
    return Sample(
        image=np.ascontiguousarray(sample.image[(slice(None),) + win]),
        y=np.ascontiguousarray(sample.y[win]),
        z=None if sample.z is None else np.ascontiguousarray(sample.z[win]),
        seed=sample.seed,
        id=sample.id,
    )


def make_samples(seeds: list[int], spec: SyntheticSpec, prefix: int = 0) -> list[Sample]:
    """Generate and normalize; a seed whose layout cannot be placed is re-derived."""
    out = []
    for i, s in enumerate(seeds):
        for attempt in range(100):
            try:
                smp = generate_sample(s if attempt == 0 else derive(s, "retry", attempt), spec)
                break
            except PlacementError:
                continue
        else:
            raise PlacementError(f"seed {s}: no placeable layout after 100 re-derivations")
        smp.image = normalize_intensity(smp.image)
        smp.id = f"s{prefix + i:05d}"
        out.append(smp)
    return out


def make_dataset(n: int, n_sub: int, seed: int, n_val: int = 20, n_test: int = 40,
                 spec: SyntheticSpec = SyntheticSpec()) -> DatasetSplit:
    """Generate train/val/test samples and split the training set into fine and coarse."""
    if n_sub > n:
        raise DatasetError(f"n_sub={n_sub} exceeds training set size {n}")
    total = n + n_val + n_test
    seeds = [derive(seed, "item", i) for i in range(total)]
    samples = make_samples(seeds, spec)
    return split_dataset(samples[:n], n_sub, seed, val=samples[n:n + n_val],
                         test=samples[n + n_val:], hierarchy=spec.hierarchy)


# ---------------------------------------------------------------- on-disk layout

_ROLES = ("fine", "coarse", "val", "test")


def write_dataset(split: DatasetSplit, root: str | os.PathLike, force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"{root} already exists; pass force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"# hierarchy k={','.join(map(str, split.hierarchy.k))}"]
    for role in _ROLES:
        for s in getattr(split, role):
            lines.append(f"{s.id} {role} {s.seed}")
            d = root / s.id
            d.mkdir(exist_ok=True)
            tsr.save(d / "image.tsr1", s.image)
            tsr.save(d / "y.tsr1", s.y.astype(np.float32))
            if s.z is not None:
                tsr.save(d / "z.tsr1", s.z.astype(np.float32))
            elif (d / "z.tsr1").exists():
                (d / "z.tsr1").unlink()
    for sid, z in split.oracle.items():
        d = root / "oracle" / sid
        d.mkdir(parents=True, exist_ok=True)
        tsr.save(d / "z.tsr1", z.astype(np.float32))
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return root


def _labels(path: Path) -> np.ndarray:
    arr = tsr.load(path)
    if not np.array_equal(arr, np.round(arr)):
        raise DatasetError(f"{path}: label tensor holds non-integer values")
    return arr.astype(np.int64)


def read_manifest(root: str | os.PathLike) -> tuple[HierarchySpec, list[tuple[str, str, int]]]:
    path = Path(root) / "manifest"
    if not path.is_file():
        raise DatasetError(f"no dataset manifest at {path}")
    hierarchy = HierarchySpec()
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if line.startswith("# hierarchy k="):
            hierarchy = HierarchySpec(tuple(int(v) for v in line.split("=", 1)[1].split(",")))
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[1] not in _ROLES:
            raise DatasetError(f"{path}:{lineno}: expected 'id role seed', got {line!r}")
        entries.append((parts[0], parts[1], int(parts[2])))
    return hierarchy, entries


def read_dataset(root: str | os.PathLike, with_oracle: bool = False) -> DatasetSplit:
    """Load a dataset directory. Coarse samples never get their subclass maps back."""
    root = Path(root)
    hierarchy, entries = read_manifest(root)
    split = DatasetSplit([], [], [], [], hierarchy=hierarchy)
    for sid, role, seed in entries:
        d = root / sid
        z = _labels(d / "z.tsr1") if role != "coarse" else None
        s = Sample(image=tsr.load(d / "image.tsr1"), y=_labels(d / "y.tsr1"), z=z, seed=seed, id=sid)
        s.check(hierarchy)
        getattr(split, role).append(s)
        if with_oracle and role == "coarse":
            split.oracle[sid] = _labels(root / "oracle" / sid / "z.tsr1")
    return split
