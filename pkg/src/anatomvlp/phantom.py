"""Synthetic 3D studies: organ ellipsoids, injected anomalies, masks and templated reports.

Everything is a pure function of (spec, case_index); regenerating with the same
seed is bit-identical.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .arrayio import read_array, write_array

ANATOMY_NAMES = [
    "liver", "spleen", "kidney", "pancreas", "stomach", "gallbladder",
    "bladder", "colon", "heart", "lung", "aorta", "esophagus",
]

NORMAL_TEMPLATE = "The {organ} is unremarkable."
ABNORMAL_TEMPLATE = "There is a {anomaly} in the {organ}."

DEFAULT_ANOMALY_TYPES = ("blob", "texture", "shrink")


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    """Recipe for one family of synthetic studies."""

    volume_shape: tuple = (64, 64, 32)
    anatomy_count: int = 5
    anomaly_types: tuple = DEFAULT_ANOMALY_TYPES
    anomaly_prevalence: object = 0.3  # scalar, {type: p}, or (M, T) array
    intensity_range: tuple = (-1000.0, 1000.0)
    seed: int = 0
    # generator knobs
    center_jitter: float = 0.05     # fraction of volume shape, per axis
    radius_jitter: float = 0.15     # relative radius variation
    background_level: float = -800.0
    noise_sigma: float = 20.0
    blob_fraction: tuple = (0.01, 0.05)  # anomaly volume as fraction of organ volume
    blob_contrast: float = 500.0
    organ_level_range: tuple = (0.35, 0.85)  # organ base intensity ladder, fractions of span
    texture_sigma: float = 200.0
    shrink_factor: tuple = (0.5, 0.7)

    prevalence: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.volume_shape = tuple(int(d) for d in self.volume_shape)
        if len(self.volume_shape) != 3:
            raise PhantomError("volume_shape must be a triple")
        if self.anatomy_count < 1:
            raise PhantomError("anatomy_count must be positive")
        if self.anatomy_count > len(ANATOMY_NAMES):
            raise PhantomError(f"at most {len(ANATOMY_NAMES)} anatomies supported")
        self.anomaly_types = tuple(self.anomaly_types)
        for t in self.anomaly_types:
            if t not in DEFAULT_ANOMALY_TYPES:
                raise PhantomError(f"unknown anomaly type {t!r}")
        self.prevalence = self._expand_prevalence(self.anomaly_prevalence)
        if np.any(self.prevalence < 0) or np.any(self.prevalence > 1):
            raise PhantomError("anomaly_prevalence entries must lie in [0, 1]")
        lo, hi = self.intensity_range
        if not lo < hi:
            raise PhantomError("intensity_range must be increasing")
        self.organ_level_range = tuple(float(v) for v in self.organ_level_range)
        l0, l1 = self.organ_level_range
        if not (0.0 <= l0 < l1 <= 1.0):
            raise PhantomError("organ_level_range must be increasing within [0, 1]")

    def _expand_prevalence(self, p) -> np.ndarray:
        M, T = self.anatomy_count, len(self.anomaly_types)
        if isinstance(p, dict):
            out = np.zeros((M, T))
            for t, name in enumerate(self.anomaly_types):
                out[:, t] = float(p.get(name, 0.0))
            return out
        arr = np.asarray(p, dtype=float)
        if arr.ndim == 0:
            return np.full((M, T), float(arr))
        if arr.shape == (T,):
            return np.tile(arr, (M, 1))
        if arr.shape == (M, T):
            return arr.copy()
        raise PhantomError(f"anomaly_prevalence shape {arr.shape} does not match ({M}, {T})")

    def anatomy_names(self):
        return ANATOMY_NAMES[: self.anatomy_count]

    def abnormal_probability(self, anatomy: int) -> float:
        """Marginal probability that the anatomy carries any anomaly."""
        return float(1.0 - np.prod(1.0 - self.prevalence[anatomy]))


@dataclass
class PhantomCase:
    """One generated study with ground truth."""

    case_id: str
    volume: np.ndarray            # (D, H, W) float32, raw intensity units
    masks: np.ndarray             # (M, D, H, W) uint8
    labels: np.ndarray            # (M,) uint8, 1 = abnormal
    report_sentences: list        # one per anatomy
    anomalies: list               # anomaly name or None per anatomy


def _base_layout(spec: PhantomSpec):
    """Fixed grid of organ centers/radii (fractions of the volume shape)."""
    M = spec.anatomy_count
    cols = int(np.ceil(np.sqrt(M)))
    rows = int(np.ceil(M / cols))
    centers, radii = [], []
    for j in range(M):
        r, c = divmod(j, cols)
        centers.append(((r + 0.5) / rows, (c + 0.5) / cols, 0.5))
        radii.append((0.25 / rows, 0.25 / cols, 0.25))
    return np.array(centers), np.array(radii)


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / max(r, 1e-6)) ** 2
    return (acc <= 1.0).astype(np.uint8)


def _sample_anomaly(rng, prevalence_row, types):
    """At most one anomaly per anatomy; first type whose draw fires wins."""
    draws = rng.random(len(types))
    for t, name in enumerate(types):
        if draws[t] < prevalence_row[t]:
            return name
    return None


def generate_case(spec: PhantomSpec, case_index: int) -> PhantomCase:
    if any(d < 8 for d in spec.volume_shape):
        raise PhantomError("every volume dimension must be >= 8")
    if case_index < 0:
        raise PhantomError("case_index must be nonnegative")

    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, int(case_index)])
    shape = np.array(spec.volume_shape, dtype=float)
    centers, radii = _base_layout(spec)
    M = spec.anatomy_count
    lo, hi = spec.intensity_range

    volume = spec.background_level + spec.noise_sigma * rng.standard_normal(spec.volume_shape)
    masks = np.zeros((M,) + spec.volume_shape, dtype=np.uint8)
    labels = np.zeros(M, dtype=np.uint8)
    anomalies = []
    occupied = np.zeros(spec.volume_shape, dtype=bool)

    for j in range(M):
        anomaly = _sample_anomaly(rng, spec.prevalence[j], spec.anomaly_types)
        center = centers[j] * shape + spec.center_jitter * shape * rng.uniform(-1, 1, 3)
        rad = radii[j] * shape * (1.0 + spec.radius_jitter * rng.uniform(-1, 1, 3))
        rad = np.maximum(rad, 2.0)
        if anomaly == "shrink":
            rad = rad * rng.uniform(*spec.shrink_factor)

        mask = _ellipsoid_mask(spec.volume_shape, center, rad).astype(bool)
        mask &= ~occupied  # sequential carve keeps masks pairwise disjoint
        occupied |= mask

        span = (hi - lo)
        l0, l1 = spec.organ_level_range
        base = lo + span * (l0 + (l1 - l0) * j / max(M - 1, 1))
        volume[mask] = base + spec.noise_sigma * rng.standard_normal(int(mask.sum()))

        if anomaly == "blob":
            frac = rng.uniform(*spec.blob_fraction)
            blob_r = rad * frac ** (1.0 / 3.0)
            offs = rng.uniform(-0.4, 0.4, 3) * rad
            blob = _ellipsoid_mask(spec.volume_shape, center + offs, np.maximum(blob_r, 1.0)).astype(bool)
            blob &= mask
            volume[blob] += spec.blob_contrast
        elif anomaly == "texture":
            volume[mask] += spec.texture_sigma * rng.standard_normal(int(mask.sum()))

        masks[j] = mask.astype(np.uint8)
        labels[j] = 1 if anomaly is not None else 0
        anomalies.append(anomaly)

    np.clip(volume, lo, hi, out=volume)

    names = spec.anatomy_names()
    sentences = [
        ABNORMAL_TEMPLATE.format(anomaly=a, organ=names[j]) if a is not None
        else NORMAL_TEMPLATE.format(organ=names[j])
        for j, a in enumerate(anomalies)
    ]
    return PhantomCase(
        case_id=f"case{case_index:06d}",
        volume=volume.astype(np.float32),
        masks=masks,
        labels=labels,
        report_sentences=sentences,
        anomalies=anomalies,
    )


def generate_split(spec: PhantomSpec, n_train: int, n_val: int, n_test: int):
    """Disjoint train/val/test case lists drawn from consecutive case indices."""
    if n_train <= 0 or n_val <= 0 or n_test <= 0:
        raise PhantomError("split sizes must be positive")
    train = [generate_case(spec, i) for i in range(n_train)]
    val = [generate_case(spec, n_train + i) for i in range(n_val)]
    test = [generate_case(spec, n_train + n_val + i) for i in range(n_test)]
    return train, val, test


def save_case(case: PhantomCase, root) -> str:
    """One directory per case: binary arrays plus a JSON manifest."""
    out = os.path.join(root, case.case_id)
    os.makedirs(out, exist_ok=True)
    write_array(os.path.join(out, "volume.bin"), case.volume)
    for j in range(case.masks.shape[0]):
        write_array(os.path.join(out, f"mask_{j:02d}.bin"), case.masks[j])
    manifest = {
        "case_id": case.case_id,
        "labels": case.labels.tolist(),
        "report_sentences": case.report_sentences,
        "anomalies": case.anomalies,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out


def load_case(case_dir) -> PhantomCase:
    with open(os.path.join(case_dir, "manifest.json")) as f:
        manifest = json.load(f)
    volume = read_array(os.path.join(case_dir, "volume.bin"))
    M = len(manifest["labels"])
    masks = np.stack([read_array(os.path.join(case_dir, f"mask_{j:02d}.bin")) for j in range(M)])
    return PhantomCase(
        case_id=manifest["case_id"],
        volume=volume,
        masks=masks,
        labels=np.asarray(manifest["labels"], dtype=np.uint8),
        report_sentences=list(manifest["report_sentences"]),
        anomalies=[a if a else None for a in manifest["anomalies"]],
    )
