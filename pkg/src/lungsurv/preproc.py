"""CT volume preparation: lung-field extraction and intensity normalization.

The pipeline runs smooth -> binarize -> components -> filter -> complete ->
window/fill -> resample. Smoothing only feeds mask detection; the intensity
stage reads the original volume, so output grey values never depend on the
smoothing sigma. No stage uses randomness.

Axis order is (D, H, W): axial slices are indexed by the first axis.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, PipelineError

HU_THRESHOLD_DEFAULT = -600.0
HU_WINDOW_DEFAULT = (-1200.0, 600.0)
FILL_VALUE_DEFAULT = 170
VOLUME_RANGE_L_DEFAULT = (0.68, 7.5)
MM3_PER_LITRE = 1.0e6


@dataclass
class CtVolume:
    voxels: np.ndarray            # (D, H, W) Hounsfield units
    spacing: tuple                # (dz, dy, dx) mm per voxel

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 8:
            raise ConfigurationError(
                f"volume must be 3-d with every dim >= 8, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape

    def voxel_volume_mm3(self) -> float:
        dz, dy, dx = self.spacing
        return dz * dy * dx


@dataclass
class PipelineConfig:
    sigma: float = 1.0
    threshold: float = HU_THRESHOLD_DEFAULT
    vol_range_l: tuple = VOLUME_RANGE_L_DEFAULT
    max_center_frac: float = 0.35          # of the half-diagonal
    window: tuple = HU_WINDOW_DEFAULT
    fill: int = FILL_VALUE_DEFAULT
    target_shape: tuple = (128, 256, 256)  # (D, H, W)

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError("sigma must be >= 0")
        lo, hi = self.vol_range_l
        if not 0 < lo < hi:
            raise ConfigurationError("volume range must satisfy 0 < lo < hi")
        if self.window[0] >= self.window[1]:
            raise ConfigurationError("window must be (low, high) with low < high")
        if not 0 <= self.fill <= 255:
            raise ConfigurationError("fill value must be a byte")


def gaussian_smooth(v: CtVolume, sigma: float) -> CtVolume:
    """Per-axial-slice 2D Gaussian; sigma 0 is the identity."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    if sigma == 0:
        return CtVolume(v.voxels.copy(), v.spacing)
    out = ndimage.gaussian_filter(v.voxels, sigma=(0.0, sigma, sigma), mode="nearest")
    return CtVolume(out, v.spacing)


def binarize(v: CtVolume, threshold: float = HU_THRESHOLD_DEFAULT) -> np.ndarray:
    return v.voxels < threshold


@dataclass
class Component:
    label: int
    count: int
    centroid: tuple  # voxel coordinates (z, y, x)


class ComponentSet:
    """Labeled 6-connected components, largest first."""

    def __init__(self, labels: np.ndarray, components: list[Component]):
        self.labels = labels
        self.components = components

    def __len__(self):
        return len(self.components)


def connected_components_3d(mask: np.ndarray) -> ComponentSet:
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, 1)   # faces only
    labels, n = ndimage.label(mask, structure=structure)
    comps = []
    if n:
        counts = np.bincount(labels.ravel())[1:]
        centroids = ndimage.center_of_mass(mask, labels, np.arange(1, n + 1))
        for lab in range(1, n + 1):
            comps.append(Component(lab, int(counts[lab - 1]),
                                   tuple(float(c) for c in centroids[lab - 1])))
        comps.sort(key=lambda c: (-c.count, c.label))
    return ComponentSet(labels, comps)


def filter_components(comp_set: ComponentSet, spacing, vol_range_l=VOLUME_RANGE_L_DEFAULT,
                      max_center_frac: float = 0.35) -> np.ndarray:
    """Union of components inside the physical size range and near the center.

    The distance test compares the centroid's physical offset from the scan
    center against max_center_frac * half-diagonal.
    """
    dz, dy, dx = spacing
    shape = comp_set.labels.shape
    center = np.array([(s - 1) / 2.0 for s in shape])
    phys = np.array([dz, dy, dx])
    half_diag = 0.5 * np.linalg.norm((np.array(shape) - 1) * phys)
    lo, hi = vol_range_l
    keep = []
    for comp in comp_set.components:
        litres = comp.count * dz * dy * dx / MM3_PER_LITRE
        if not lo <= litres <= hi:
            continue
        dist = np.linalg.norm((np.array(comp.centroid) - center) * phys)
        if dist > max_center_frac * half_diag:
            continue
        keep.append(comp.label)
    if not keep:
        return np.zeros(shape, dtype=bool)
    return np.isin(comp_set.labels, keep)


def _hull_vertices(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, of (x, y) points."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def convex_hull_2d_mask(mask2d: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Pixels whose centers lie inside-or-on the hull of the true pixels.

    Inclusive boundary handling makes the result a superset of the input.
    """
    mask2d = np.asarray(mask2d, dtype=bool)
    out = np.zeros_like(mask2d)
    rows, cols = np.nonzero(mask2d)
    if rows.size == 0:
        return out
    hull = _hull_vertices(np.column_stack([cols, rows]).astype(np.float64))
    rmin, rmax = rows.min(), rows.max()
    cmin, cmax = cols.min(), cols.max()
    rr, cc = np.meshgrid(np.arange(rmin, rmax + 1), np.arange(cmin, cmax + 1),
                         indexing="ij")
    px = cc.ravel().astype(np.float64)
    py = rr.ravel().astype(np.float64)
    if len(hull) == 1:
        inside = np.ones(px.shape, dtype=bool)
    elif len(hull) == 2:
        a, b = hull
        d = b - a
        cross = d[0] * (py - a[1]) - d[1] * (px - a[0])
        t = (px - a[0]) * d[0] + (py - a[1]) * d[1]
        inside = (np.abs(cross) <= eps) & (t >= -eps) & (t <= d @ d + eps)
    else:
        inside = np.ones(px.shape, dtype=bool)
        for i in range(len(hull)):
            a = hull[i]
            b = hull[(i + 1) % len(hull)]
            cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
            inside &= cross >= -eps
    out[rr.ravel()[inside], cc.ravel()[inside]] = True
    return out


def complete_mask(mask: np.ndarray) -> np.ndarray:
    """Close then hull each axial slice; always a superset of the input."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        warnings.warn("complete_mask received an empty mask; passing through")
        return mask.copy()
    structure = np.ones((3, 3), dtype=bool)
    out = np.zeros_like(mask)
    for z in range(mask.shape[0]):
        sl = mask[z]
        if not sl.any():
            continue
        closed = ndimage.binary_closing(sl, structure=structure) | sl
        out[z] = convex_hull_2d_mask(closed)
    return out


def window_normalize_fill(v: CtVolume, mask: np.ndarray,
                          window=HU_WINDOW_DEFAULT, fill: int = FILL_VALUE_DEFAULT) -> np.ndarray:
    """Clip to the HU window, map to 0..255, blank out-of-mask voxels.

    Quantization rounds half away from zero, so the window midpoint -300 HU
    maps to 128.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ConfigurationError("mask shape must match the volume")
    lo, hi = window
    scaled = (np.clip(v.voxels, lo, hi) - lo) / (hi - lo) * 255.0
    quantized = np.floor(scaled + 0.5)     # all values >= 0 here
    out = np.where(mask, quantized, float(fill))
    return out.astype(np.uint8)


def resample(volume: np.ndarray, target_shape) -> np.ndarray:
    """Trilinear resample onto the target grid, corners aligned."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ConfigurationError("resample expects a 3-d volume")
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != 3 or any(t < 2 for t in target_shape):
        raise ConfigurationError(f"target dims must all be >= 2, got {target_shape}")
    axes = [np.arange(t) * ((s - 1) / (t - 1))
            for s, t in zip(volume.shape, target_shape)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    out = ndimage.map_coordinates(volume, coords, order=1, mode="nearest")
    return out.reshape(target_shape)


@dataclass
class PipelineResult:
    tensor: np.ndarray            # resampled grey volume, float in [0, 255]
    byte_volume: np.ndarray       # windowed uint8 volume at source resolution
    mask: np.ndarray              # completed lung-field mask at source resolution
    diagnostics: dict = field(default_factory=dict)


def preprocess_pipeline(v: CtVolume, cfg: PipelineConfig | None = None) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    diag = {}

    smoothed = gaussian_smooth(v, cfg.sigma)
    diag["smooth"] = {"sigma": cfg.sigma}

    raw_mask = binarize(smoothed, cfg.threshold)
    diag["binarize"] = {"voxels": int(raw_mask.sum())}

    comp_set = connected_components_3d(raw_mask)
    vox_l = v.voxel_volume_mm3() / MM3_PER_LITRE
    diag["components"] = {
        "count": len(comp_set),
        "largest_l": [round(c.count * vox_l, 4) for c in comp_set.components[:5]],
    }
    if len(comp_set) == 0:
        raise PipelineError("components", "no candidate components below threshold")

    filtered = filter_components(comp_set, v.spacing, cfg.vol_range_l, cfg.max_center_frac)
    kept_l = float(filtered.sum()) * vox_l
    diag["filter"] = {"kept_voxels": int(filtered.sum()), "mask_litres": kept_l}
    if not filtered.any():
        raise PipelineError(
            "filter", "no component passed the size/position filter "
                      f"(candidates: {diag['components']['largest_l']} L)")

    completed = complete_mask(filtered)
    diag["complete"] = {"mask_litres": float(completed.sum()) * vox_l}

    byte_vol = window_normalize_fill(v, completed, cfg.window, cfg.fill)
    diag["window"] = {"window": list(cfg.window), "fill": cfg.fill}

    tensor = resample(byte_vol.astype(np.float64), cfg.target_shape)
    diag["resample"] = {"shape": list(cfg.target_shape)}

    return PipelineResult(tensor=tensor, byte_volume=byte_vol, mask=completed,
                          diagnostics=diag)


def make_thorax_phantom(shape=(48, 64, 64), spacing=(5.0, 3.0, 3.0),
                        radii=(16.0, 12.0, 20.0), lateral_offset=16.0,
                        ramp_gain: float = 150.0, tissue_hu: float = 40.0):
    """Two ellipsoidal air pockets in soft tissue, plus their exact masks.

    HU falls smoothly through the detection threshold exactly on the
    ellipsoid surfaces (the profile is locally antisymmetric about them), so
    slice smoothing does not move the recovered boundary. Background tissue
    is capped at ``tissue_hu``; no exterior air region exists.
    """
    D, H, W = shape
    zz, yy, xx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    centers = [((D - 1) / 2.0, (H - 1) / 2.0 - lateral_offset, (W - 1) / 2.0),
               ((D - 1) / 2.0, (H - 1) / 2.0 + lateral_offset, (W - 1) / 2.0)]
    rz, ry, rx = radii
    g = np.full(shape, -np.inf)
    exact = np.zeros(shape, dtype=bool)
    for cz, cy, cx in centers:
        q = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        g = np.maximum(g, 1.0 - q)
        exact |= q < 1.0
    hu = np.minimum(tissue_hu, HU_THRESHOLD_DEFAULT - ramp_gain * g)
    return CtVolume(hu, spacing), {"ellipsoids": exact}
