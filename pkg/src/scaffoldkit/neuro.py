"""Region volumes from labeled grids, their text rendering, the three-slice
render plan and the swap-image pick for the out-of-domain ablation.

Native fixture volume format: ``<name>.json`` sidecar with ``dims``,
``voxel_size``, ``origin``, ``dtype`` and ``endianness``, next to
``<name>.raw`` holding the C-ordered array. A 4D array is a region
probability stack with the region axis last.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_REGIONS = 48

# Harvard-Oxford cortical atlas, label order 1..48
HARVARD_OXFORD_CORTICAL = (
    "Frontal Pole",
    "Insular Cortex",
    "Superior Frontal Gyrus",
    "Middle Frontal Gyrus",
    "Inferior Frontal Gyrus, pars triangularis",
    "Inferior Frontal Gyrus, pars opercularis",
    "Precentral Gyrus",
    "Temporal Pole",
    "Superior Temporal Gyrus, anterior division",
    "Superior Temporal Gyrus, posterior division",
    "Middle Temporal Gyrus, anterior division",
    "Middle Temporal Gyrus, posterior division",
    "Middle Temporal Gyrus, temporooccipital part",
    "Inferior Temporal Gyrus, anterior division",
    "Inferior Temporal Gyrus, posterior division",
    "Inferior Temporal Gyrus, temporooccipital part",
    "Postcentral Gyrus",
    "Superior Parietal Lobule",
    "Supramarginal Gyrus, anterior division",
    "Supramarginal Gyrus, posterior division",
    "Angular Gyrus",
    "Lateral Occipital Cortex, superior division",
    "Lateral Occipital Cortex, inferior division",
    "Intracalcarine Cortex",
    "Frontal Medial Cortex",
    "Juxtapositional Lobule Cortex (formerly Supplementary Motor Cortex)",
    "Subcallosal Cortex",
    "Paracingulate Gyrus",
    "Cingulate Gyrus, anterior division",
    "Cingulate Gyrus, posterior division",
    "Precuneous Cortex",
    "Cuneal Cortex",
    "Frontal Orbital Cortex",
    "Parahippocampal Gyrus, anterior division",
    "Parahippocampal Gyrus, posterior division",
    "Lingual Gyrus",
    "Temporal Fusiform Cortex, anterior division",
    "Temporal Fusiform Cortex, posterior division",
    "Temporal Occipital Fusiform Cortex",
    "Occipital Fusiform Gyrus",
    "Frontal Operculum Cortex",
    "Central Opercular Cortex",
    "Parietal Operculum Cortex",
    "Planum Polare",
    "Heschl's Gyrus (includes H1 and H2)",
    "Planum Temporale",
    "Supracalcarine Cortex",
    "Occipital Pole",
)

BACKGROUND = -1
DEFAULT_THRESHOLD = 0.25
AXIS_PLANES = ("sagittal", "coronal", "axial")


class NeuroError(ValueError):
    pass


class DimensionMismatchError(NeuroError):
    pass


class OutOfBoundsError(NeuroError):
    def __init__(self, axis: int, value: float, lo: float, hi: float):
        self.axis = axis
        self.plane = AXIS_PLANES[axis]
        super().__init__(f"{self.plane} cut {'xyz'[axis]}={value} outside [{lo}, {hi}] mm")


@dataclass
class VolumeGrid:
    values: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim not in (3, 4) or min(self.values.shape[:3]) < 1:
            raise NeuroError(f"grid must be 3D (or 4D stack) with dims >= 1, got {self.values.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise NeuroError(f"voxel sizes must be three positive numbers, got {self.voxel_size}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def voxel_volume(self) -> float:
        dx, dy, dz = self.voxel_size
        return dx * dy * dz

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.dims) * np.asarray(self.voxel_size)

    @property
    def center(self) -> tuple[float, float, float]:
        lo, hi = self.bounds
        return tuple(float(v) for v in (lo + hi) / 2.0)


@dataclass
class AtlasLabelMap:
    """Hard atlas: per-voxel region index, ``-1`` for background."""

    assignment: np.ndarray
    region_names: Sequence[str] = HARVARD_OXFORD_CORTICAL

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        _check_regions(self.region_names)
        if self.assignment.ndim != 3:
            raise NeuroError("label map must be 3D")
        if self.assignment.size and (self.assignment.max() >= len(self.region_names) or self.assignment.min() < BACKGROUND):
            raise NeuroError("label index out of range")

    @property
    def dims(self):
        return self.assignment.shape


@dataclass
class ProbabilisticAtlas:
    """Region probability stack of shape ``(nx, ny, nz, n_regions)``."""

    probs: np.ndarray
    region_names: Sequence[str] = HARVARD_OXFORD_CORTICAL

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        _check_regions(self.region_names)
        if self.probs.ndim != 4 or self.probs.shape[3] != len(self.region_names):
            raise NeuroError(f"probability stack must be (nx, ny, nz, {len(self.region_names)}), got {self.probs.shape}")
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise NeuroError("probabilities must lie in [0, 1]")

    @property
    def dims(self):
        return self.probs.shape[:3]


def _check_regions(names):
    if len(names) != N_REGIONS:
        raise NeuroError(f"atlas must name exactly {N_REGIONS} regions, got {len(names)}")
    if len(set(names)) != len(names):
        raise NeuroError("region names must be unique")


@dataclass
class RegionVolumeReport:
    region_names: tuple[str, ...]
    voxel_counts: tuple[int, ...]
    voxel_volume: float
    background_count: int
    all_background: bool = False

    @property
    def volumes(self) -> tuple[float, ...]:
        return tuple(c * self.voxel_volume for c in self.voxel_counts)

    @property
    def total_volume(self) -> float:
        """Volume of all assigned (non-background) voxels, mm^3."""
        return sum(self.voxel_counts) * self.voxel_volume

    @property
    def background_volume(self) -> float:
        return self.background_count * self.voxel_volume

    @property
    def grid_volume(self) -> float:
        return (sum(self.voxel_counts) + self.background_count) * self.voxel_volume

    def volume_of(self, region: str) -> float:
        return self.volumes[self.region_names.index(region)]


def resample_nearest(arr: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resampling of the first three axes onto ``dims``,
    assuming both grids span the same field of view."""
    idx = []
    for src, dst in zip(arr.shape[:3], dims):
        centers = (np.arange(dst) + 0.5) * src / dst
        idx.append(np.minimum(np.floor(centers).astype(np.int64), src - 1))
    return arr[np.ix_(*idx)]


def parcellate(grid: VolumeGrid, atlas, threshold: float = DEFAULT_THRESHOLD, resample: bool = False) -> RegionVolumeReport:
    """Assign each voxel to its max-probability region and sum volumes.

    A voxel is background when its max probability is zero or below
    ``threshold``. Hard label maps behave as one-hot stacks. When atlas and
    grid dims differ the atlas is resampled (nearest neighbour) only if
    ``resample`` is set.
    """
    if not 0.0 <= threshold <= 1.0:
        raise NeuroError(f"threshold must lie in [0, 1], got {threshold}")
    names = tuple(atlas.region_names)
    if tuple(atlas.dims) != grid.dims:
        if not resample:
            raise DimensionMismatchError(f"atlas dims {tuple(atlas.dims)} differ from grid dims {grid.dims}")
        atlas = _resampled(atlas, grid.dims)

    if isinstance(atlas, AtlasLabelMap):
        # one-hot: max probability is 1 inside a region, 0 outside, so any
        # threshold in [0, 1] keeps the labels as they are
        assigned = atlas.assignment
    elif isinstance(atlas, ProbabilisticAtlas):
        best = atlas.probs.argmax(axis=3)
        pmax = atlas.probs.max(axis=3)
        keep = (pmax > 0.0) & (pmax >= threshold)
        assigned = np.where(keep, best, BACKGROUND)
    else:
        raise NeuroError(f"unsupported atlas type {type(atlas).__name__}")

    counts = np.bincount(assigned[assigned >= 0].ravel(), minlength=len(names))
    background = int((assigned == BACKGROUND).sum())
    report = RegionVolumeReport(
        region_names=names,
        voxel_counts=tuple(int(c) for c in counts),
        voxel_volume=grid.voxel_volume,
        background_count=background,
        all_background=background == assigned.size,
    )
    if report.all_background:
        warnings.warn("parcellation assigned every voxel to background", RuntimeWarning, stacklevel=2)
    return report


def _resampled(atlas, dims):
    if isinstance(atlas, AtlasLabelMap):
        return AtlasLabelMap(resample_nearest(atlas.assignment, dims), atlas.region_names)
    return ProbabilisticAtlas(resample_nearest(atlas.probs, dims), atlas.region_names)


def serialize_parcellation(report: RegionVolumeReport, atlas=None) -> str:
    names = tuple(atlas.region_names) if atlas is not None else report.region_names
    if len(names) != len(report.voxel_counts):
        raise NeuroError("report region count does not match the atlas")
    return "\n".join(f"{name}: {vol:.1f} mm³" for name, vol in zip(names, report.volumes))


def parcellation_rows(report: RegionVolumeReport) -> str:
    """Delimiter-separated export: ``region,volume_mm3``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["region", "volume_mm3"])
    for name, vol in zip(report.region_names, report.volumes):
        writer.writerow([name, f"{vol:.1f}"])
    return buf.getvalue()


@dataclass(frozen=True)
class SliceSpec:
    plane: str
    axis: int
    cut_mm: float
    hemisphere_labels: bool = True
    contours: bool = True


@dataclass(frozen=True)
class SliceRenderPlan:
    slices: tuple[SliceSpec, SliceSpec, SliceSpec]
    crosshairs: bool = True
    zero_anchored_colormap: bool = True

    @property
    def cut_coords(self) -> tuple[float, float, float]:
        return tuple(s.cut_mm for s in self.slices)


def plan_slice_render(grid: VolumeGrid, cut_coords: Sequence[float] | None = None) -> SliceRenderPlan:
    """Three orthogonal slices through ``cut_coords`` (world mm); defaults to
    the grid's world-space center."""
    coords = grid.center if cut_coords is None else tuple(float(c) for c in cut_coords)
    if len(coords) != 3:
        raise NeuroError("cut coordinates must be (x, y, z)")
    lo, hi = grid.bounds
    for axis, value in enumerate(coords):
        if not lo[axis] <= value <= hi[axis]:
            raise OutOfBoundsError(axis, value, float(lo[axis]), float(hi[axis]))
    return SliceRenderPlan(slices=tuple(SliceSpec(AXIS_PLANES[i], i, coords[i]) for i in range(3)))


def render_slices(grid: VolumeGrid, plan: SliceRenderPlan, path, atlas: AtlasLabelMap | None = None) -> Path:
    """Matplotlib renderer for a plan. Output is illustrative only; tests
    assert on the plan, never on pixels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vol = np.asarray(grid.values, dtype=np.float64)
    if vol.ndim == 4:
        vol = vol.max(axis=3)
    lo = np.asarray(grid.origin)
    vs = np.asarray(grid.voxel_size)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    vmax = float(np.abs(vol).max()) or 1.0
    for ax, spec in zip(axes, plan.slices):
        idx = int(np.clip((spec.cut_mm - lo[spec.axis]) // vs[spec.axis], 0, grid.dims[spec.axis] - 1))
        img = np.take(vol, idx, axis=spec.axis).T
        kwargs = {"vmin": -vmax, "vmax": vmax} if plan.zero_anchored_colormap else {}
        ax.imshow(img, origin="lower", cmap="gray", **kwargs)
        if spec.contours and atlas is not None:
            ax.contour(np.take(atlas.assignment, idx, axis=spec.axis).T >= 0, levels=[0.5], linewidths=0.5)
        if spec.hemisphere_labels and spec.plane != "sagittal":
            ax.text(0.02, 0.5, "L", transform=ax.transAxes, color="w")
            ax.text(0.95, 0.5, "R", transform=ax.transAxes, color="w")
        if plan.crosshairs:
            ax.axhline(img.shape[0] / 2, lw=0.5, color="y")
            ax.axvline(img.shape[1] / 2, lw=0.5, color="y")
        ax.set_title(f"{spec.plane} {'xyz'[spec.axis]}={spec.cut_mm:g}")
        ax.axis("off")
    path = Path(path)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def pick_swap_image(seed: int, pool: Sequence[str]) -> str:
    """Out-of-domain image for the swap condition: ``pool[seed mod len(pool)]``."""
    if not pool:
        raise NeuroError("swap-image pool is empty")
    return pool[seed % len(pool)]


def save_volume(path, values: np.ndarray, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Path:
    """Write ``<path>.raw`` (little-endian) plus the ``<path>.json`` sidecar."""
    path = Path(path)
    arr = np.asarray(values)
    dtype = arr.dtype.newbyteorder("<")
    header = {
        "dims": list(arr.shape),
        "voxel_size": [float(v) for v in voxel_size],
        "origin": [float(v) for v in origin],
        "dtype": dtype.name,
        "endianness": "little",
    }
    path.with_suffix(".raw").write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    path.with_suffix(".json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    return path.with_suffix(".json")


def load_volume(path) -> VolumeGrid:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    order = "<" if header.get("endianness", "little") == "little" else ">"
    dtype = np.dtype(header["dtype"]).newbyteorder(order)
    data = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=dtype)
    dims = tuple(header["dims"])
    if data.size != int(np.prod(dims)):
        raise NeuroError(f"{path}: raw size {data.size} does not match dims {dims}")
    return VolumeGrid(data.reshape(dims).astype(dtype.newbyteorder("=")), tuple(header["voxel_size"]), tuple(header.get("origin", (0, 0, 0))))
