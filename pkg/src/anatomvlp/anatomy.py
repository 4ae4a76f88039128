"""Volume preprocessing, organ-complete cropping, token extraction, report parsing."""

import re
from dataclasses import dataclass, field

import numpy as np
import torch

from .phantom import ANATOMY_NAMES, DEFAULT_ANOMALY_TYPES, PhantomCase


class AnatomyError(ValueError):
    pass


class ReportParseError(ValueError):
    pass


@dataclass
class CropPolicy:
    patch_shape: tuple = (48, 48, 24)
    complete_organs_only: bool = True

    def __post_init__(self):
        self.patch_shape = tuple(int(d) for d in self.patch_shape)
        if len(self.patch_shape) != 3:
            raise AnatomyError("patch_shape must be a triple")


@dataclass
class CroppedView:
    volume: np.ndarray           # (pd, ph, pw)
    masks: np.ndarray            # (M, pd, ph, pw)
    surviving_ids: list          # anatomies fully contained in the window
    offset: tuple


@dataclass
class AnatomyTokens:
    anatomy_id: int
    tokens: torch.Tensor         # (L, D)
    source_case: str = ""
    cell_coords: np.ndarray = field(default=None, repr=False)  # (L, 3) feature-grid coords


def preprocess(volume: np.ndarray, clip_low: float = -1000.0, clip_high: float = 1000.0) -> np.ndarray:
    """Clamp to [clip_low, clip_high] and rescale to [0, 1]."""
    if not clip_low < clip_high:
        raise AnatomyError("clip_low must be < clip_high")
    volume = np.asarray(volume, dtype=np.float32)
    if not np.all(np.isfinite(volume)):
        raise AnatomyError("volume contains non-finite voxels")
    out = np.clip(volume, clip_low, clip_high)
    return (out - clip_low) / (clip_high - clip_low)


def crop_and_filter(case: PhantomCase, policy: CropPolicy, rng: np.random.Generator,
                    offset: tuple = None) -> CroppedView:
    """Random crop; keep only anatomies whose mask lies entirely inside the window."""
    vshape = case.volume.shape
    pshape = policy.patch_shape
    if any(p > v for p, v in zip(pshape, vshape)):
        raise AnatomyError("patch_shape exceeds volume shape")
    if offset is None:
        offset = tuple(int(rng.integers(0, v - p + 1)) for v, p in zip(vshape, pshape))
    sl = tuple(slice(o, o + p) for o, p in zip(offset, pshape))
    volume = case.volume[sl]
    masks = case.masks[(slice(None),) + sl]
    surviving = []
    for j in range(case.masks.shape[0]):
        total = int(case.masks[j].sum())
        inside = int(masks[j].sum())
        if total > 0 and (inside == total or not policy.complete_organs_only and inside > 0):
            surviving.append(j)
    return CroppedView(volume=volume, masks=masks, surviving_ids=surviving, offset=offset)


def center_crop(case: PhantomCase, policy: CropPolicy) -> CroppedView:
    offset = tuple((v - p) // 2 for v, p in zip(case.volume.shape, policy.patch_shape))
    return crop_and_filter(case, policy, rng=None, offset=offset)


def flip_view(view: CroppedView, axis: int = 1) -> CroppedView:
    """Left-right flip applied consistently to volume and masks."""
    return CroppedView(
        volume=np.flip(view.volume, axis=axis).copy(),
        masks=np.flip(view.masks, axis=axis + 1).copy(),
        surviving_ids=list(view.surviving_ids),
        offset=view.offset,
    )


def pool_mask(mask: np.ndarray, stride) -> np.ndarray:
    """Max-pool a voxel mask to the feature grid: any overlap keeps the cell."""
    if np.isscalar(stride):
        stride = (stride,) * 3
    for d, s in zip(mask.shape, stride):
        if d % s != 0:
            raise AnatomyError(f"mask dim {d} not divisible by stride {s}")
    d, h, w = (mask.shape[i] // stride[i] for i in range(3))
    view = mask.reshape(d, stride[0], h, stride[1], w, stride[2])
    return view.max(axis=(1, 3, 5))


def extract_tokens(feature_map: torch.Tensor, mask: np.ndarray, anatomy_id: int,
                   source_case: str = "") -> AnatomyTokens:
    """Feature vectors at every grid cell the (max-pooled) mask touches, row-major."""
    if feature_map.ndim != 4:
        raise AnatomyError("feature_map must be (channels, d, h, w)")
    _, fd, fh, fw = feature_map.shape
    stride = tuple(m // f for m, f in zip(mask.shape, (fd, fh, fw)))
    if any(m != f * s for m, f, s in zip(mask.shape, (fd, fh, fw), stride)):
        raise AnatomyError("mask shape is not an integer multiple of the feature grid")
    pooled = pool_mask(np.asarray(mask, dtype=np.uint8), stride)
    coords = np.argwhere(pooled > 0)  # argwhere is row-major (C order)
    if coords.shape[0] == 0:
        raise AnatomyError("anatomy vanished at feature resolution")
    idx = torch.from_numpy(coords)
    tokens = feature_map[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.contiguous()
    return AnatomyTokens(anatomy_id=anatomy_id, tokens=tokens,
                         source_case=source_case, cell_coords=coords)


_ORGAN_ALT = "|".join(ANATOMY_NAMES)
_ANOMALY_ALT = "|".join(DEFAULT_ANOMALY_TYPES)
_NORMAL_RE = re.compile(rf"^The ({_ORGAN_ALT}) is unremarkable\.$")
_ABNORMAL_RE = re.compile(rf"^There is a ({_ANOMALY_ALT}) in the ({_ORGAN_ALT})\.$")


def parse_report(sentence: str):
    """Recover (normal_flag, anomaly_name) from a templated sentence.

    Returns (0, None) for the normal template, (1, name) for the abnormal one.
    Anything else is an error, never a silent default.
    """
    if _NORMAL_RE.match(sentence):
        return 0, None
    m = _ABNORMAL_RE.match(sentence)
    if m:
        return 1, m.group(1)
    raise ReportParseError(f"unrecognized report sentence: {sentence!r}")
