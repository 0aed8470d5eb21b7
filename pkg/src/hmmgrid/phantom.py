"""Synthetic sphere phantoms and the raw+JSON volume file format.

Volumes hold their voxels as a ``(nz, ny, nx)`` C-ordered array, so the
flattened buffer is x-fastest, then y, then z, which is also the on-disk
order of the ``.raw`` file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, GeometryError, ResolutionError

BACKGROUND_INTENSITY = 10000
LESION_INTENSITY = 40000
NEMA_DIAMETERS_MM = (10.0, 13.0, 17.0, 22.0, 28.0, 37.0)
NEMA_FOV_MM = (128.0, 128.0, 64.0)
NEMA_RING_RADIUS_MM = 40.0
MIN_VOXELS_ACROSS = 3

_DTYPES = {"u16": np.dtype("<u2"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class VoxelSpacing:
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz) <= 0:
            raise GeometryError(f"voxel spacing must be positive, got {self.as_tuple()}")

    @classmethod
    def isotropic(cls, mm: float) -> "VoxelSpacing":
        return cls(mm, mm, mm)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass(eq=False)
class Volume:
    data: np.ndarray
    spacing: VoxelSpacing

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GeometryError(f"volume needs three non-empty axes, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def slab(self, z0: int, z1: int) -> "Volume":
        return Volume(self.data[z0:z1], self.spacing)


@dataclass(frozen=True)
class SphereSpec:
    center: tuple[float, float, float]
    diameter: float
    intensity: float = LESION_INTENSITY
    group_id: int = 0

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    def to_json(self) -> dict:
        return {
            "center_mm": list(self.center),
            "diameter_mm": self.diameter,
            "intensity": self.intensity,
            "group_id": self.group_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SphereSpec":
        return cls(
            center=tuple(float(c) for c in obj["center_mm"]),
            diameter=float(obj["diameter_mm"]),
            intensity=float(obj.get("intensity", LESION_INTENSITY)),
            group_id=int(obj.get("group_id", 0)),
        )


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: VoxelSpacing
    background_intensity: float = BACKGROUND_INTENSITY
    spheres: tuple[SphereSpec, ...] = field(default_factory=tuple)
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GeometryError(f"dims must be three positive counts, got {self.dims}")
        if self.noise_sigma < 0:
            raise GeometryError("noise_sigma must be >= 0")
        extent = [n * d for n, d in zip(self.dims, self.spacing.as_tuple())]
        for s in self.spheres:
            if s.diameter <= 0:
                raise GeometryError(f"sphere diameter must be positive: {s}")
            for c, e in zip(s.center, extent):
                if c - s.radius < 0 or c + s.radius > e:
                    raise GeometryError(f"sphere {s} leaves the volume bounds {extent}")
        for a, b in combinations(self.spheres, 2):
            if math.dist(a.center, b.center) <= a.radius + b.radius:
                raise GeometryError(f"spheres overlap: {a} / {b}")


def _axis_grid(n: int, d: float, lo_mm: float, hi_mm: float):
    """Voxel index range covering [lo_mm, hi_mm]: centers and two subsample coordinates."""
    i0 = max(0, int(math.floor(lo_mm / d)))
    i1 = min(n, int(math.ceil(hi_mm / d)) + 1)
    idx = np.arange(i0, i1)
    sub = np.stack([(idx + 0.25) * d, (idx + 0.75) * d], axis=1)
    return i0, i1, (idx + 0.5) * d, sub


def sphere_fraction(spec: PhantomSpec, sphere: SphereSpec):
    """Coverage of one sphere on its bounding box.

    Voxels whose center is inside count as fully covered; the rest get the
    fraction of their 2x2x2 subsample points that fall inside.  Returns
    ``(slices, fraction)`` with ``fraction`` indexed (z, y, x).
    """
    nx, ny, nz = spec.dims
    cx, cy, cz = sphere.center
    r2 = sphere.radius ** 2
    r = sphere.radius
    x0, x1, xc, xs = _axis_grid(nx, spec.spacing.dx, cx - r, cx + r)
    y0, y1, yc, ys = _axis_grid(ny, spec.spacing.dy, cy - r, cy + r)
    z0, z1, zc, zs = _axis_grid(nz, spec.spacing.dz, cz - r, cz + r)
    # (z, sz, y, sy, x, sx) squared distance of subsample points
    d2 = (
        ((zs - cz) ** 2)[:, :, None, None, None, None]
        + ((ys - cy) ** 2)[None, None, :, :, None, None]
        + ((xs - cx) ** 2)[None, None, None, None, :, :]
    )
    frac = (d2 <= r2).sum(axis=(1, 3, 5)) / 8.0
    center_d2 = (
        ((zc - cz) ** 2)[:, None, None]
        + ((yc - cy) ** 2)[None, :, None]
        + ((xc - cx) ** 2)[None, None, :]
    )
    frac[center_d2 <= r2] = 1.0
    return (slice(z0, z1), slice(y0, y1), slice(x0, x1)), frac


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, list[SphereSpec]]:
    spec.validate()
    nx, ny, nz = spec.dims
    img = np.full((nz, ny, nx), float(spec.background_intensity))
    for sphere in spec.spheres:
        box, frac = sphere_fraction(spec, sphere)
        img[box] += frac * (sphere.intensity - spec.background_intensity)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    data = np.rint(np.clip(img, 0, 65535)).astype("<u2")
    return Volume(data, spec.spacing), list(spec.spheres)


def _check_resolution(min_diameter: float, spacing_mm: float) -> None:
    if spacing_mm <= 0:
        raise GeometryError("spacing_mm must be positive")
    if min_diameter / spacing_mm < MIN_VOXELS_ACROSS:
        raise ResolutionError(
            f"{spacing_mm} mm voxels give {min_diameter / spacing_mm:.2f} voxels across the "
            f"{min_diameter} mm sphere; need at least {MIN_VOXELS_ACROSS}"
        )


def _dims_for(fov_mm: Sequence[float], spacing_mm: float) -> tuple[int, int, int]:
    return tuple(max(1, int(round(f / spacing_mm))) for f in fov_mm)


def nema_spec(spacing_mm: float = 1.0, noise_sigma: float = 0.0, seed: int = 0) -> PhantomSpec:
    """Six NEMA IEC body-phantom spheres on a ring in the central axial plane."""
    _check_resolution(min(NEMA_DIAMETERS_MM), spacing_mm)
    dims = _dims_for(NEMA_FOV_MM, spacing_mm)
    spacing = VoxelSpacing.isotropic(spacing_mm)
    ex, ey, ez = (n * spacing_mm for n in dims)
    spheres = []
    for i, d in enumerate(NEMA_DIAMETERS_MM):
        theta = 2 * math.pi * i / len(NEMA_DIAMETERS_MM)
        center = (
            ex / 2 + NEMA_RING_RADIUS_MM * math.cos(theta),
            ey / 2 + NEMA_RING_RADIUS_MM * math.sin(theta),
            ez / 2,
        )
        spheres.append(SphereSpec(center, d, LESION_INTENSITY, group_id=0))
    spec = PhantomSpec(dims, spacing, BACKGROUND_INTENSITY, tuple(spheres), noise_sigma, seed)
    spec.validate()
    return spec


def load_cirs_defaults() -> dict:
    text = resources.files("hmmgrid.data").joinpath("cirs_defaults.json").read_text()
    return json.loads(text)


def cirs_spec(
    spacing_mm: float = 1.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    config: dict | None = None,
) -> PhantomSpec:
    """Ten lesions in four groups, one row of spheres per group.

    ``config`` overrides the packaged defaults (same schema as
    ``data/cirs_defaults.json``).
    """
    config = config or load_cirs_defaults()
    groups = config["groups"]
    _check_resolution(min(d for g in groups for d in g["diameters_mm"]), spacing_mm)
    dims = _dims_for(config["fov_mm"], spacing_mm)
    ex, ey, ez = (n * spacing_mm for n in dims)
    spheres = []
    for g in groups:
        diams = g["diameters_mm"]
        for j, d in enumerate(diams):
            x = ex * (j + 1) / (len(diams) + 1)
            spheres.append(SphereSpec((x, float(g["row_y_mm"]), ez / 2), float(d),
                                      LESION_INTENSITY, int(g["group_id"])))
    spec = PhantomSpec(dims, VoxelSpacing.isotropic(spacing_mm), BACKGROUND_INTENSITY,
                       tuple(spheres), noise_sigma, seed)
    spec.validate()
    return spec


# --- file format -----------------------------------------------------------

def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p


def dtype_name(dtype: np.dtype) -> str:
    for name, dt in _DTYPES.items():
        if np.dtype(dtype).kind == dt.kind and np.dtype(dtype).itemsize == dt.itemsize:
            return name
    raise FormatError(f"unsupported voxel dtype {dtype}")


def write_volume(volume: Volume, path, extra: dict | None = None) -> tuple[Path, Path]:
    base = _base(path)
    name = dtype_name(volume.data.dtype)
    raw = base.with_name(base.name + ".raw")
    side = base.with_name(base.name + ".json")
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing.as_tuple()),
        "dtype": name,
        "endian": "little",
    }
    if extra:
        header.update(extra)
    raw.write_bytes(np.ascontiguousarray(volume.data, dtype=_DTYPES[name]).tobytes())
    side.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return raw, side


def read_header(path) -> dict:
    base = _base(path)
    side = base.with_name(base.name + ".json")
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{side}: sidecar is not valid JSON ({exc})") from exc
    return header


def read_volume(path) -> Volume:
    base = _base(path)
    header = read_header(base)
    try:
        nx, ny, nz = (int(v) for v in header["dims"])
        spacing = VoxelSpacing(*(float(v) for v in header["spacing_mm"]))
        dtype = _DTYPES[header["dtype"]]
    except KeyError as exc:
        raise FormatError(f"sidecar missing or unknown field: {exc}") from exc
    except (TypeError, ValueError, GeometryError) as exc:
        raise FormatError(f"bad sidecar header: {exc}") from exc
    if header.get("endian", "little") != "little":
        raise FormatError(f"unsupported endianness {header.get('endian')!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"dims must be positive, got {header['dims']}")
    payload = base.with_name(base.name + ".raw").read_bytes()
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"raw payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).copy()
    return Volume(data, spacing)


def write_truth(spheres: Sequence[SphereSpec], path, extra: dict | None = None) -> Path:
    base = _base(path)
    out = base.with_name(base.name + ".truth.json")
    doc = {"spheres": [s.to_json() for s in spheres]}
    if extra:
        doc.update(extra)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def read_truth(path) -> list[SphereSpec]:
    p = Path(path)
    if not p.name.endswith(".truth.json"):
        p = _base(p)
        p = p.with_name(p.name + ".truth.json")
    try:
        doc = json.loads(p.read_text())
        return [SphereSpec.from_json(s) for s in doc["spheres"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{p}: bad truth file ({exc})") from exc


def with_noise(spec: PhantomSpec, noise_sigma: float, seed: int | None = None) -> PhantomSpec:
    return replace(spec, noise_sigma=noise_sigma,
                   rng_seed=spec.rng_seed if seed is None else seed)
