"""Hyperspectral cubes, band partitions, file formats and the synthetic generator."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"HSC1"
REFLECTANCE_MAX = 1.5

# nm cut points between VIS | red-edge | NIR | SWIR; SWIR is open above.
REGION_CUTS = (700.0, 750.0, 1100.0)
REGION_NAMES = ("VIS", "red-edge", "NIR", "SWIR")


class HsiFormatError(ValueError):
    """Malformed HSC1 / PGM / dataset file."""


@dataclass(frozen=True, eq=False)
class HsiCube:
    wavelengths: np.ndarray  # (C,) nm
    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"cube data must be C×H×W, got shape {data.shape}")
        if wl.shape != (data.shape[0],):
            raise ValueError("one wavelength per band required")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > REFLECTANCE_MAX):
            raise ValueError(f"reflectance outside [0, {REFLECTANCE_MAX}]")
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, HsiCube):
            return NotImplemented
        return (np.array_equal(self.wavelengths, other.wavelengths)
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class BandPartition:
    groups: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...]
    boundaries: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.groups:
            raise ValueError("partition needs at least one group")
        flat = [b for g in self.groups for b in g]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty band group")
        if flat != list(range(len(flat))):
            raise ValueError("groups must be disjoint, contiguous and cover every band in order")
        if len(self.labels) != len(self.groups):
            raise ValueError("one label per group")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_bands(self) -> int:
        return self.groups[-1][-1] + 1

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def group_of(self) -> np.ndarray:
        """Band index -> group index."""
        out = np.empty(self.n_bands, dtype=np.intp)
        for g, members in enumerate(self.groups):
            out[list(members)] = g
        return out

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], labels: Sequence[str] | None = None) -> "BandPartition":
        groups, start = [], 0
        for n in sizes:
            groups.append(tuple(range(start, start + n)))
            start += n
        if labels is None:
            labels = [f"g{i}" for i in range(len(groups))]
        return cls(tuple(groups), tuple(labels))


def _split_even(n: int, pieces: int) -> list[int]:
    base, extra = divmod(n, pieces)
    return [base + 1] * extra + [base] * (pieces - extra)


def default_partition(wavelengths, n_groups: int | None = None) -> BandPartition:
    """VIS / red-edge / NIR / SWIR partition, subdivided up to ``n_groups``.

    Extra cuts go to the region whose current piece size is largest (lower
    region index on ties); each region is then cut into near-equal pieces.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    if wl.ndim != 1 or wl.size == 0:
        raise ValueError("need a non-empty 1-D wavelength axis")
    if np.any(np.diff(wl) <= 0):
        raise ValueError("wavelengths must be strictly increasing")
    C = wl.size
    if n_groups is not None and not 1 <= n_groups <= C:
        raise ValueError(f"requested G={n_groups} but only C={C} bands")

    region = np.searchsorted(np.asarray(REGION_CUTS), wl, side="right")
    sizes, names = [], []
    for r, name in enumerate(REGION_NAMES):
        n = int(np.sum(region == r))
        if n:
            sizes.append(n)
            names.append(name)

    if n_groups is not None and n_groups < len(sizes):
        # fewer groups than regions: even split by band count
        return BandPartition.from_sizes(_split_even(C, n_groups),
                                        ["all"] if n_groups == 1 else None)

    pieces = [1] * len(sizes)
    target = n_groups if n_groups is not None else len(sizes)
    while sum(pieces) < target:
        per = [s / p if p < s else 0.0 for s, p in zip(sizes, pieces)]
        pieces[int(np.argmax(per))] += 1

    out_sizes, labels = [], []
    for n, p, name in zip(sizes, pieces, names):
        parts = _split_even(n, p)
        out_sizes.extend(parts)
        labels.extend([name] if p == 1 else [f"{name}-{i + 1}" for i in range(p)])
    part = BandPartition.from_sizes(out_sizes, labels)
    bounds = tuple(float(wl[g[0]]) for g in part.groups[1:])
    return BandPartition(part.groups, part.labels, bounds)


# ---------------------------------------------------------------- HSC1


def save_cube(cube: HsiCube, path) -> None:
    save_array(cube.wavelengths, cube.data, path)


def save_array(wavelengths: np.ndarray, data: np.ndarray, path) -> None:
    """HSC1 writer without the reflectance-range check (used for saliency cubes)."""
    C, H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", C, H, W))
        fh.write(np.asarray(wavelengths).astype("<f4").tobytes())
        fh.write(np.ascontiguousarray(data).astype("<f4").tobytes(order="C"))


def load_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise HsiFormatError("truncated header")
    if raw[:4] != MAGIC:
        raise HsiFormatError("bad magic")
    C, H, W = struct.unpack("<3I", raw[4:16])
    expected = 16 + 4 * C + 4 * C * H * W
    if len(raw) != expected:
        raise HsiFormatError(
            f"payload length mismatch: header declares {C}x{H}x{W} "
            f"({expected} bytes) but file has {len(raw)}")
    wl = np.frombuffer(raw, dtype="<f4", count=C, offset=16).astype(np.float64)
    if np.any(np.diff(wl) <= 0):
        raise HsiFormatError("non-increasing wavelengths")
    data = np.frombuffer(raw, dtype="<f4", count=C * H * W, offset=16 + 4 * C)
    return HsiCube(wl, data.astype(np.float64).reshape(C, H, W))


# ---------------------------------------------------------------- PGM / labels


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if img.dtype != np.uint8:
        raise ValueError("PGM writer expects uint8 pixels")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise HsiFormatError("truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise HsiFormatError("bad magic")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise HsiFormatError("only maxval 255 supported")
    body = raw[pos:]
    if len(body) != w * h:
        raise HsiFormatError("PGM payload length mismatch")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def mask_to_pgm(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)


def write_labels(path, rows: Sequence[tuple[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"])
        for sid, label in rows:
            w.writerow([sid, label])


def read_labels(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "label"]:
            raise HsiFormatError(f"unexpected labels header {header}")
        return [(r[0], r[1]) for r in reader if r]


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    bands: int = 20
    height: int = 32
    width: int = 32
    wl_min: float = 400.0
    wl_max: float = 2400.0
    n_groups: int | None = None
    # discriminative group per class; None picks the largest groups first
    disc_groups: tuple[int, ...] | None = None
    amplitude: float = 0.2
    lesion_radius: tuple[float, float] = (0.15, 0.3)  # semi-axes as fraction of size
    noise: float = 0.0
    samples_per_class: int = 20
    task: str = "cls"
    seed: int = 0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.classes < 1 or self.bands < 1:
            raise ValueError("need at least one class and one band")
        if self.task not in ("cls", "reg"):
            raise ValueError("task must be 'cls' or 'reg'")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi < 0.5:
            raise ValueError("lesion radius fractions must satisfy 0 < lo <= hi < 0.5")

    def wavelengths(self) -> np.ndarray:
        if self.bands == 1:
            return np.array([self.wl_min])
        return np.linspace(self.wl_min, self.wl_max, self.bands)

    def partition(self) -> BandPartition:
        return default_partition(self.wavelengths(), self.n_groups)

    def planted_groups(self) -> tuple[int, ...]:
        part = self.partition()
        n_classes = 1 if self.task == "reg" else self.classes
        if self.disc_groups is not None:
            groups = tuple(self.disc_groups)
            if len(groups) != n_classes:
                raise ValueError("need one discriminative group per class")
        else:
            order = sorted(range(part.n_groups), key=lambda g: (-part.sizes[g], g))
            groups = tuple(order[c % len(order)] for c in range(n_classes))
        if any(not 0 <= g < part.n_groups for g in groups):
            raise ValueError("discriminative group index out of range")
        return groups


@dataclass(eq=False)
class Sample:
    sample_id: str
    cube: HsiCube
    label: float | int
    lesion_mask: np.ndarray
    true_bands: tuple[int, ...] = field(default=())

    def lesion_bbox(self) -> list[int]:
        """[x0, y0, x1, y1], upper bounds exclusive."""
        ys, xs = np.nonzero(self.lesion_mask)
        return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def base_spectrum(wl: np.ndarray) -> np.ndarray:
    """Smooth leaf-like reflectance: low VIS, red-edge rise, water dips."""
    rise = 1.0 / (1.0 + np.exp(-(wl - 715.0) / 20.0))
    water = 0.12 * np.exp(-((wl - 1450.0) / 90.0) ** 2) + 0.15 * np.exp(-((wl - 1940.0) / 110.0) ** 2)
    return 0.06 + 0.38 * rise - water - 0.05 * (wl > 1100) * (wl - 1100.0) / 1300.0


def _ellipse(rng: np.random.Generator, h: int, w: int, lo: float, hi: float) -> np.ndarray:
    ry = max(1.0, rng.uniform(lo, hi) * h)
    rx = max(1.0, rng.uniform(lo, hi) * w)
    cy = rng.uniform(ry, h - ry)
    cx = rng.uniform(rx, w - rx)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    if not mask.any():
        mask[min(int(cy), h - 1), min(int(cx), w - 1)] = True
    return mask


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """Deterministic samples with a planted band group and lesion per class.

    Each sample: base spectrum times a per-sample brightness, plus
    ``amplitude`` on the planted bands inside an elliptical lesion, plus i.i.d.
    Gaussian noise, clipped to the valid reflectance range. In regression mode
    a single planted group is used and the label is the per-sample bump scale
    in [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    wl = spec.wavelengths()
    part = spec.partition()
    planted = spec.planted_groups()
    base = base_spectrum(wl)
    H, W = spec.height, spec.width
    n_labels = 1 if spec.task == "reg" else spec.classes

    samples = []
    idx = 0
    for _ in range(spec.samples_per_class):
        for c in range(n_labels):
            bright = rng.uniform(0.9, 1.1)
            mask = _ellipse(rng, H, W, *spec.lesion_radius)
            if spec.task == "reg":
                level = float(rng.uniform(0.0, 1.0))
                label: float | int = level
            else:
                level = 1.0
                label = c
            bands = part.groups[planted[c]]
            data = np.broadcast_to((base * bright)[:, None, None], (spec.bands, H, W)).copy()
            data[list(bands)] += np.where(mask, spec.amplitude * level, 0.0)[None]
            if spec.noise > 0:
                data += rng.normal(0.0, spec.noise, size=data.shape)
            np.clip(data, 0.0, REFLECTANCE_MAX, out=data)
            samples.append(Sample(f"s{idx:05d}", HsiCube(wl, data), label, mask, tuple(bands)))
            idx += 1
    return samples


def planted_contrast(sample: Sample) -> np.ndarray:
    """Per-band mean inside the lesion minus mean outside."""
    m = sample.lesion_mask
    d = sample.cube.data
    inside = d[:, m].mean(axis=1)
    outside = d[:, ~m].mean(axis=1) if (~m).any() else np.zeros(d.shape[0])
    return inside - outside


def ranked_truth(sample: Sample) -> list[int]:
    """Planted bands ordered by decreasing lesion contrast; ties keep band order."""
    c = planted_contrast(sample)
    return sorted(sample.true_bands, key=lambda b: (-c[b], b))


def downscale_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Cell is positive when at least half of its pixels are positive."""
    mask = np.asarray(mask, dtype=bool)
    gh, gw = grid
    h, w = mask.shape
    if (h, w) == (gh, gw):
        return mask.copy()
    if h % gh or w % gw:
        raise ValueError(f"mask {mask.shape} does not tile grid {grid}")
    cells = mask.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
    return cells >= 0.5

