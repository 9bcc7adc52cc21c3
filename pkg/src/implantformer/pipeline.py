"""Full-volume inference with back-projection, and implant cylinder rendering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .centerline import project_crown_to_root
from .errors import DegenerateFitError, TrackError
from .heatmap import decode_topk
from .network import ImplantFormer
from .volume import DEFAULT_WINDOW, KeypointTrack, Volume, partition, slice_at

log = logging.getLogger(__name__)

IMPLANT_VALUE = 3100
IMPLANT_RADIUS = 10.0


@dataclass
class InferenceResult:
    detections: dict           # crown z -> list[Detection], native pixel coordinates
    crown_track: KeypointTrack  # top-1 per crown slice above the confidence floor
    root_track: KeypointTrack   # back-projected; empty when fewer than two crown hits


def resize_slice(image, size):
    """Resample an (H, W, C) slice to (size, size, C); pixel x maps to x * size / W."""
    h, w = image.shape[:2]
    if h == size and w == size:
        return image
    sy, sx = size / h, size / w
    return ndimage.affine_transform(
        image, np.diag([1 / sy, 1 / sx, 1.0]), output_shape=(size, size, image.shape[2]),
        order=1, mode="nearest").astype(image.dtype, copy=False)


def infer_volume(model: ImplantFormer, volume: Volume, min_confidence=0.0, k=1,
                 window_range=DEFAULT_WINDOW, batch_size=32):
    crown_zs, root_zs = partition(volume)
    if not crown_zs:
        raise TrackError("volume has no crown slices")
    size = model.config.image_size
    imgs = np.stack([resize_slice(slice_at(volume, z, window_range).values, size)
                     for z in crown_zs])
    heat, off = model.predict(imgs, batch_size)
    sx, sy = volume.width / size, volume.height / size
    g = model.config.stride
    detections, top = {}, []
    for z, hm, of in zip(crown_zs, heat, off):
        dets = [d.__class__(d.x * sx, d.y * sy, d.confidence)
                for d in decode_topk(hm[..., 0] if hm.ndim == 3 else hm, of, g, k)]
        dets = [d for d in dets if d.confidence >= min_confidence]
        detections[z] = dets
        if dets:
            top.append((dets[0].x, dets[0].y, z))
    crown = KeypointTrack(np.array(top, dtype=np.float64).reshape(-1, 3), "crown")
    try:
        root = project_crown_to_root(crown, root_zs)
    except DegenerateFitError:
        log.warning("only %d crown detections above %.3f; root track left empty",
                    len(top), min_confidence)
        root = KeypointTrack(np.zeros((0, 3)), "root")
    return InferenceResult(detections, crown, root)


def render_implant_cylinder(volume: Volume, track: KeypointTrack, radius=IMPLANT_RADIUS,
                            depth=None, value=IMPLANT_VALUE):
    """Burn a cylinder of ``radius`` px around ``track`` into ``depth`` root slices.

    Slices are taken downward from the crown boundary; ``depth=None`` uses
    every track slice.
    """
    if len(track) == 0:
        raise TrackError("cannot render an empty track")
    if radius <= 0:
        raise ValueError("radius must be positive")
    zs = np.rint(track.z).astype(int)
    if np.any(zs < 0) or np.any(zs >= volume.depth):
        raise TrackError("track slices fall outside the volume")
    order = np.argsort(-zs, kind="stable")
    if depth is not None:
        if depth < 1:
            raise ValueError("depth must be >= 1")
        order = order[:depth]
    vox = np.array(volume.voxels, copy=True)
    for i in order:
        mask = _kernels.disk_mask(volume.height, volume.width, track.x[i], track.y[i], radius)
        vox[zs[i]][mask] = value
    return volume.with_voxels(vox)
