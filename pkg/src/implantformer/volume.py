"""CBCT volumes, axial slices, keypoint tracks and synthetic phantoms.

Volumes are stored slice-major, ``voxels[z, y, x]`` as int16 in HU-like units.
Slices ``z >= crown_boundary`` are crown, ``z < crown_boundary`` are root.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BoundaryError,
    ConfigError,
    TrackError,
    VolumeHeaderError,
    VolumeSizeError,
)

MAGIC = b"IVOLv001"
_HEADER = struct.Struct("<8s4I3f")
HEADER_SIZE = _HEADER.size  # 36 bytes

DEFAULT_WINDOW = (-1000.0, 3100.0)

AIR = -1000.0
GUM = 80.0
BONE = 650.0
DENTIN = 1700.0
ENAMEL = 2600.0
ROOT = 1350.0


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    crown_boundary: int
    voxel_spacing: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        vox = np.array(self.voxels, dtype="<i2", copy=True)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be (depth, height, width), got {vox.shape}")
        depth, height, width = vox.shape
        if height != width:
            raise ValueError(f"axial slices must be square, got {height}x{width}")
        if not 0 < self.crown_boundary < depth:
            raise BoundaryError(
                f"crown_boundary {self.crown_boundary} outside (0, {depth})")
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "crown_boundary", int(self.crown_boundary))
        object.__setattr__(self, "voxel_spacing",
                           tuple(float(np.float32(s)) for s in self.voxel_spacing))

    @property
    def depth(self):
        return self.voxels.shape[0]

    @property
    def height(self):
        return self.voxels.shape[1]

    @property
    def width(self):
        return self.voxels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.crown_boundary == other.crown_boundary
                and self.voxel_spacing == other.voxel_spacing
                and np.array_equal(self.voxels, other.voxels))

    __hash__ = None

    def with_voxels(self, voxels):
        return Volume(voxels, self.crown_boundary, self.voxel_spacing)


@dataclass(frozen=True)
class SliceImage:
    """One axial slice windowed to [0, 1] and replicated to 3 channels (H, W, 3)."""

    values: np.ndarray
    z: int = -1

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(eq=False)
class KeypointTrack:
    """Per-slice implant positions; ``points`` is an (n, 3) array of (x, y, z)."""

    points: np.ndarray
    region: str = "root"
    patient: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.region not in ("root", "crown"):
            raise TrackError(f"region must be 'root' or 'crown', got {self.region!r}")
        if len(pts) > 1 and np.any(np.diff(pts[:, 2]) <= 0):
            raise TrackError("track z values must be strictly increasing")
        if not np.all(np.isfinite(pts)):
            raise TrackError("track contains non-finite coordinates")
        self.points = pts

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]

    @property
    def z(self):
        return self.points[:, 2]

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, KeypointTrack):
            return NotImplemented
        return (self.region == other.region and self.patient == other.patient
                and np.array_equal(self.points, other.points))

    def check_bounds(self, width, height):
        if np.any((self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)):
            raise TrackError(f"track leaves the {width}x{height} slice")

    def to_json(self):
        return {
            "patient": self.patient,
            "region": self.region,
            "points": [{"x": float(x), "y": float(y), "z": int(z)}
                       for x, y, z in self.points],
        }

    @classmethod
    def from_json(cls, obj):
        try:
            pts = [(p["x"], p["y"], p["z"]) for p in obj["points"]]
            return cls(np.array(pts, dtype=np.float64).reshape(-1, 3),
                       region=obj["region"], patient=str(obj.get("patient", "")))
        except (KeyError, TypeError) as exc:
            raise TrackError(f"malformed keypoint track: {exc}") from exc


def save_track(track, path):
    Path(path).write_text(json.dumps(track.to_json(), indent=1) + "\n")


def load_track(path):
    return KeypointTrack.from_json(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ file IO


def save_volume(volume: Volume, path) -> None:
    if not 0 < volume.crown_boundary < volume.depth:
        raise BoundaryError(f"crown_boundary {volume.crown_boundary} outside (0, {volume.depth})")
    header = _HEADER.pack(MAGIC, volume.width, volume.height, volume.depth,
                          volume.crown_boundary, *volume.voxel_spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(volume.voxels.astype("<i2").tobytes(order="C"))


def load_volume(path) -> Volume:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise VolumeHeaderError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, width, height, depth, boundary, *spacing = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise VolumeHeaderError(f"{path}: bad magic {magic!r}")
    if width != height or width == 0 or depth == 0:
        raise VolumeHeaderError(f"{path}: invalid dimensions {width}x{height}x{depth}")
    expected = width * height * depth * 2
    if len(data) - HEADER_SIZE != expected:
        raise VolumeSizeError(
            f"{path}: payload is {len(data) - HEADER_SIZE} bytes, header implies {expected}")
    if not 0 < boundary < depth:
        raise BoundaryError(f"{path}: crown_boundary {boundary} outside (0, {depth})")
    vox = np.frombuffer(data, dtype="<i2", offset=HEADER_SIZE).reshape(depth, height, width)
    return Volume(vox, boundary, tuple(spacing))


# ------------------------------------------------------------ slicing


def window(values, lo=DEFAULT_WINDOW[0], hi=DEFAULT_WINDOW[1]):
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def slice_at(volume: Volume, z: int, window_range=DEFAULT_WINDOW) -> SliceImage:
    if not 0 <= z < volume.depth:
        raise IndexError(f"slice {z} outside [0, {volume.depth})")
    gray = window(volume.voxels[z], *window_range).astype(np.float32)
    return SliceImage(np.repeat(gray[:, :, None], 3, axis=2), z=int(z))


def partition(volume: Volume):
    """Return (crown z list, root z list)."""
    return (list(range(volume.crown_boundary, volume.depth)),
            list(range(0, volume.crown_boundary)))


# ------------------------------------------------------------ phantoms


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    depth: int = 40
    crown_boundary: int = 20
    tooth_count: int = 8
    gap_index: int = 3
    tilt: tuple = (0.0, 0.0)
    root_blur: float = 1.2
    noise: float = 25.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tilt", tuple(float(t) for t in self.tilt))
        if self.image_size < 16 or self.depth < 2:
            raise ConfigError("image_size must be >= 16 and depth >= 2")
        if not 0 < self.crown_boundary < self.depth:
            raise ConfigError("crown_boundary must lie in (0, depth)")
        if self.tooth_count < 2:
            raise ConfigError("tooth_count must be >= 2")
        if not 0 <= self.gap_index < self.tooth_count:
            raise ConfigError("gap_index must lie within tooth_count")
        if len(self.tilt) != 2 or not all(np.isfinite(self.tilt)):
            raise ConfigError("tilt must be two finite numbers")
        if self.root_blur < 0 or self.noise < 0:
            raise ConfigError("root_blur and noise must be non-negative")

    def to_json(self):
        d = asdict(self)
        d["tilt"] = list(self.tilt)
        return d

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def random_phantom_config(seed, patient, **overrides):
    """Per-patient config drawn deterministically from (seed, patient)."""
    rng = np.random.default_rng([int(seed), int(patient)])
    count = int(rng.integers(7, 10))
    params = dict(
        tooth_count=count,
        gap_index=int(rng.integers(1, count - 1)),
        tilt=tuple(float(t) for t in rng.uniform(-0.1, 0.1, size=2)),
        seed=int(rng.integers(2**31 - 1)),
    )
    params.update(overrides)
    return PhantomConfig(**params)


@dataclass(frozen=True)
class PhantomGeometry:
    """Arch layout at the reference slice ``z_ref`` (= crown_boundary)."""

    centers: np.ndarray      # (n, 2) tooth centers, gap included
    angles: np.ndarray       # tangent angle per tooth
    semi_axes: tuple         # (along tangent, along normal)
    arch: tuple              # (x0, y_front, half_width, depth)
    z_ref: int
    tilt: tuple
    gap_index: int
    jitter: np.ndarray = field(repr=False)   # (depth, n, 3) root wobble: dx, dy, scale

    @property
    def gap_center(self):
        return self.centers[self.gap_index]

    def shift(self, z):
        return np.array([self.tilt[0], self.tilt[1]]) * (z - self.z_ref)

    def line(self, z):
        return self.gap_center + self.shift(z)

    def gap_ellipse(self, z):
        """(center, semi_axes, angle) of the missing tooth's footprint in slice z."""
        return self.line(z), self.semi_axes, float(self.angles[self.gap_index])


def phantom_geometry(config: PhantomConfig) -> PhantomGeometry:
    geo_rng = np.random.default_rng([config.seed, 1])
    s = config.image_size
    half_width = s * geo_rng.uniform(0.25, 0.30)
    depth = s * geo_rng.uniform(0.30, 0.38)
    x0 = s / 2 + s * geo_rng.uniform(-0.04, 0.04)
    y_front = s / 2 - depth / 2 + s * geo_rng.uniform(-0.04, 0.04)

    t = np.linspace(-1.0, 1.0, 2001)
    px = x0 + half_width * t
    py = y_front + depth * t * t
    seg = np.hypot(np.diff(px), np.diff(py))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    n = config.tooth_count
    targets = arc[-1] * (np.arange(n) + 0.5) / n
    tt = np.interp(targets, arc, t)
    centers = np.stack([x0 + half_width * tt, y_front + depth * tt * tt], axis=1)
    angles = np.arctan2(2 * depth * tt, np.full_like(tt, half_width))
    spacing = arc[-1] / n
    jitter = np.concatenate([
        geo_rng.normal(0.0, 0.5, size=(config.depth, n, 2)),
        geo_rng.uniform(0.85, 1.15, size=(config.depth, n, 1)),
    ], axis=2)
    return PhantomGeometry(
        centers=centers, angles=angles,
        semi_axes=(0.36 * spacing, 0.44 * spacing),
        arch=(x0, y_front, half_width, depth),
        z_ref=config.crown_boundary, tilt=config.tilt,
        gap_index=config.gap_index, jitter=jitter,
    )


def _soft_inside(r, scale):
    # ~1 px linear ramp across the ellipse boundary
    return np.clip(0.5 + (1.0 - r) * scale, 0.0, 1.0)


def _render_slice(geo: PhantomGeometry, config: PhantomConfig, z: int) -> np.ndarray:
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dx, dy = geo.shift(z)
    x0, y_front, half_width, depth = geo.arch
    a, b = geo.semi_axes
    crown = z >= config.crown_boundary

    # band around the arch: first-order distance to the parabola
    u = (xx - dx - x0) / half_width
    resid = (yy - dy) - (y_front + depth * u * u)
    slope = 2 * depth * u / half_width
    dist = np.abs(resid) / np.sqrt(1 + slope * slope)
    band_half = (1.5 if crown else 2.1) * b
    img = np.full((s, s), AIR)
    band = _soft_inside(dist / band_half, band_half)
    img += band * ((GUM if crown else BONE) - AIR)

    if crown:
        top = config.depth - 1 - config.crown_boundary
        frac = (z - config.crown_boundary) / max(top, 1)
        size = 1.0 - 0.2 * frac * frac
    else:
        size = 0.45 + 0.45 * z / config.crown_boundary

    for i, ((cx, cy), ang) in enumerate(zip(geo.centers, geo.angles)):
        if i == geo.gap_index:
            continue
        jx, jy, js = geo.jitter[z, i]
        if crown:
            jx = jy = 0.0
            js = 1.0
        ex, ey = xx - (cx + dx + jx), yy - (cy + dy + jy)
        c, sn = np.cos(ang), np.sin(ang)
        along = (ex * c + ey * sn) / (a * size * js)
        normal = (-ex * sn + ey * c) / (b * size * js)
        r = np.sqrt(along * along + normal * normal)
        inside = _soft_inside(r, a * size * js)
        if crown:
            tooth = DENTIN + (ENAMEL - DENTIN) * np.clip((r - 0.55) / 0.3, 0.0, 1.0)
        else:
            tooth = np.full_like(r, ROOT)
        img = img * (1 - inside) + tooth * inside
    return img


def generate_phantom(config: PhantomConfig):
    """Synthetic CBCT volume plus the root-region implant track.

    The arch is translated slice by slice along the configured tilt so the gap
    center traces the implant centerline.  Root slices get thinner, wobbling
    roots inside bone, extra blur and doubled noise.
    """
    geo = phantom_geometry(config)
    noise_rng = np.random.default_rng([config.seed, 2])
    slices = []
    for z in range(config.depth):
        img = _render_slice(geo, config, z)
        if z < config.crown_boundary:
            if config.root_blur > 0:
                img = ndimage.gaussian_filter(img, config.root_blur, mode="nearest")
            img = img + noise_rng.normal(0.0, 2.0 * config.noise, img.shape)
        else:
            img = img + noise_rng.normal(0.0, config.noise, img.shape)
        slices.append(np.clip(np.rint(img), -32768, 32767))
    volume = Volume(np.stack(slices).astype(np.int16), config.crown_boundary)
    zs = np.arange(config.crown_boundary)
    pts = np.array([[*geo.line(z), z] for z in zs], dtype=np.float64)
    track = KeypointTrack(pts, region="root", patient=f"phantom-{config.seed}")
    return volume, track
