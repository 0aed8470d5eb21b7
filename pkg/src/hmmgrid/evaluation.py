"""Lesion diameter measurement, signed error percentages and run reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .errors import ArgumentError
from .phantom import SphereSpec, Volume

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
THRESHOLD_TOL = 0.5


def error_percent(measured: float, actual: float) -> float:
    if not actual > 0:
        raise ArgumentError(f"actual diameter must be positive, got {actual}")
    return (measured - actual) / actual * 100.0


@dataclass
class LesionMeasurement:
    truth: SphereSpec
    detected: bool
    voxel_count: int = 0
    measured_diameter_eq: float = 0.0
    measured_diameter_ed: float = 0.0
    error_percent_eq: float | None = None
    error_percent_ed: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["truth"] = self.truth.to_json()
        d["miss"] = not self.detected
        return d


@dataclass
class DiameterReport:
    layout: str
    per_lesion: list[LesionMeasurement]
    groups: list[dict] = field(default_factory=list)
    accuracy: float | None = None
    config_digest: str | None = None

    @property
    def misses(self) -> list[int]:
        return [i for i, m in enumerate(self.per_lesion) if not m.detected]

    def to_json(self) -> dict:
        doc = {
            "layout": self.layout,
            "config_digest": self.config_digest,
            "per_lesion": [m.to_json() for m in self.per_lesion],
            "groups": self.groups,
            "misses": self.misses,
        }
        if self.accuracy is not None:
            doc["accuracy"] = self.accuracy
        return doc

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_table(self) -> str:
        """Aligned text table: one column per lesion, diameter-ordered for NEMA."""
        if self.layout == "cirs":
            heads, cells = [], []
            for g in self.groups:
                members = [m for m in self.per_lesion if m.truth.group_id == g["group_id"]]
                for j, m in enumerate(members, 1):
                    heads.append(f"G{g['group_id']}S{j}")
                    cells.append(m)
        else:
            cells = sorted(self.per_lesion, key=lambda m: m.truth.diameter)
            heads = [f"{m.truth.diameter:g} mm" for m in cells]
        fmt = lambda v: "miss" if v is None else f"{v:.2f}"
        rows = [
            ["", *heads],
            ["error % (eq)", *(fmt(m.error_percent_eq) for m in cells)],
            ["error % (ED)", *(fmt(m.error_percent_ed) for m in cells)],
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        acc = "n/a" if self.accuracy is None else f"{self.accuracy:.3f}%"
        lines.append(f"accuracy: {acc}")
        return "\n".join(lines)


def _voxel_centers_mm(idx_zyx: np.ndarray, spacing) -> np.ndarray:
    """(z, y, x) voxel indices -> (x, y, z) millimetre centers."""
    s = np.array(spacing.as_tuple())
    return (idx_zyx[:, ::-1] + 0.5) * s


def _max_extent(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            pass
    best = 0.0
    for i in range(0, len(points), 512):
        block = points[i:i + 512]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def measure_lesion(labels: Volume, truth: SphereSpec, lesion_label: int,
                   components: tuple[np.ndarray, int] | None = None) -> LesionMeasurement:
    """Measure the lesion-label component at (or within d/2 of) the true center.

    ``components`` may carry a precomputed ``ndimage.label`` result for the
    lesion mask, shared across lesions of one volume.
    """
    sp = labels.spacing
    center = np.array(truth.center)
    nx, ny, nz = labels.dims
    ci = np.floor(center / np.array(sp.as_tuple())).astype(int)
    if np.any(ci < 0) or np.any(ci >= (nx, ny, nz)):
        raise ArgumentError(f"truth center {truth.center} is outside the label volume")
    if components is None:
        components = ndimage.label(labels.data == lesion_label, structure=CONNECTIVITY_26)
    comp, _ = components

    target = comp[ci[2], ci[1], ci[0]]
    if target == 0:
        # nearest lesion voxel inside the detection radius
        r = truth.radius
        lo = np.maximum(np.floor((center - r) / sp.as_tuple()).astype(int), 0)
        hi = np.minimum(np.ceil((center + r) / sp.as_tuple()).astype(int) + 1, (nx, ny, nz))
        sub = comp[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
        idx = np.argwhere(sub > 0)
        if idx.size:
            pts = _voxel_centers_mm(idx + lo[::-1], sp)
            dist = np.linalg.norm(pts - center, axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= r:
                z, y, x = idx[j] + lo[::-1]
                target = comp[z, y, x]
    if target == 0:
        return LesionMeasurement(truth, detected=False)

    mask = comp == target
    count = int(mask.sum())
    volume_mm3 = count * sp.voxel_volume
    d_eq = 2.0 * (3.0 * volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)
    boundary = mask & ~ndimage.binary_erosion(mask, structure=CONNECTIVITY_26)
    pts = _voxel_centers_mm(np.argwhere(boundary), sp)
    diag = math.sqrt(sp.dx ** 2 + sp.dy ** 2 + sp.dz ** 2)
    d_ed = _max_extent(pts) + diag
    return LesionMeasurement(
        truth, True, count, d_eq, d_ed,
        error_percent(d_eq, truth.diameter), error_percent(d_ed, truth.diameter),
    )


def accuracy_from(measurements: Sequence[LesionMeasurement]) -> float | None:
    errs = [abs(m.error_percent_eq) for m in measurements if m.detected]
    if not errs:
        return None
    return 100.0 - float(np.mean(errs))


def _group_rows(measurements: Sequence[LesionMeasurement], layout: str) -> list[dict]:
    keyfn = (lambda m: m.truth.group_id) if layout == "cirs" else (lambda m: m.truth.diameter)
    name = "group_id" if layout == "cirs" else "diameter_mm"
    rows = []
    for key in sorted({keyfn(m) for m in measurements}):
        members = [m for m in measurements if keyfn(m) == key]
        hit = [m for m in members if m.detected]
        row = {name: key, "count": len(members), "detected": len(hit)}
        if hit:
            row["mean_error_percent_eq"] = float(np.mean([m.error_percent_eq for m in hit]))
            row["mean_abs_error_percent_eq"] = float(np.mean([abs(m.error_percent_eq) for m in hit]))
            row["mean_error_percent_ed"] = float(np.mean([m.error_percent_ed for m in hit]))
        rows.append(row)
    return rows


def evaluate_run(labels: Volume, truths: Sequence[SphereSpec], lesion_label: int,
                 layout: str | None = None, config_digest: str | None = None) -> DiameterReport:
    if not truths:
        raise ArgumentError("evaluation needs at least one ground-truth sphere")
    if layout is None:
        layout = "cirs" if len({t.group_id for t in truths}) > 1 else "nema"
    components = ndimage.label(labels.data == lesion_label, structure=CONNECTIVITY_26)
    per = [measure_lesion(labels, t, lesion_label, components) for t in truths]
    return DiameterReport(layout, per, _group_rows(per, layout), accuracy_from(per), config_digest)


def iterative_threshold(data: np.ndarray, tol: float = THRESHOLD_TOL) -> float | None:
    """Mean-split threshold: start at the global mean, move to the midpoint of
    the two class means until it settles.  ``None`` for constant input."""
    v = np.asarray(data, dtype=np.float64).ravel()
    if v.size == 0:
        raise ArgumentError("empty volume")
    if v.min() == v.max():
        return None
    t = float(v.mean())
    while True:
        low, high = v[v <= t], v[v > t]
        if low.size == 0 or high.size == 0:
            return t
        nt = 0.5 * (float(low.mean()) + float(high.mean()))
        if abs(nt - t) < tol:
            return nt
        t = nt


def iterative_threshold_baseline(volume: Volume) -> Volume:
    t = iterative_threshold(volume.data)
    if t is None:
        out = np.zeros(volume.data.shape, dtype=np.uint8)
    else:
        out = (volume.data > t).astype(np.uint8)
    return Volume(out, volume.spacing)
