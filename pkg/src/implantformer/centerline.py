"""Least-squares implant centerline and root <-> crown projection.

The centerline is parametrised per axis against slice index,
``x = k1*z + b1`` and ``y = k2*z + b2``, and fitted with the closed-form
normal equations.  Sums are accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, TrackError
from .volume import KeypointTrack


@dataclass(frozen=True)
class CenterlineFit:
    k1: float
    b1: float
    k2: float
    b2: float
    q1: float = 0.0
    q2: float = 0.0
    n: int = 0


def _fit_axis(v, z):
    n = len(z)
    sz, sv = z.sum(), v.sum()
    denom = n * (z * z).sum() - sz * sz
    if denom == 0:
        raise DegenerateFitError("all fitted points share one slice index")
    k = (n * (v * z).sum() - sv * sz) / denom
    b = (sv - k * sz) / n
    return float(k), float(b)


def fit_centerline(track: KeypointTrack) -> CenterlineFit:
    pts = np.asarray(track.points, dtype=np.float64)
    if len(pts) < 2:
        raise DegenerateFitError(f"need at least 2 points to fit a line, got {len(pts)}")
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    k1, b1 = _fit_axis(x, z)
    k2, b2 = _fit_axis(y, z)
    fit = CenterlineFit(k1, b1, k2, b2, n=len(pts))
    q1, q2 = residual_q(fit, track)
    return CenterlineFit(k1, b1, k2, b2, q1, q2, len(pts))


def eval_line(fit: CenterlineFit, z):
    z = np.asarray(z, dtype=np.float64)
    return fit.k1 * z + fit.b1, fit.k2 * z + fit.b2


def residual_q(fit: CenterlineFit, track: KeypointTrack):
    pts = np.asarray(track.points, dtype=np.float64)
    x, y = eval_line(fit, pts[:, 2])
    return float(((pts[:, 0] - x) ** 2).sum()), float(((pts[:, 1] - y) ** 2).sum())


def _project(track, zs, want_region, out_region):
    if track.region != want_region:
        raise TrackError(f"expected a {want_region} track, got {track.region}")
    zs = np.asarray(sorted(zs), dtype=np.float64)
    if zs.size == 0:
        raise TrackError(f"no {out_region} slices to project onto")
    fit = fit_centerline(track)
    x, y = eval_line(fit, zs)
    return KeypointTrack(np.stack([x, y, zs], axis=1), region=out_region,
                         patient=track.patient)


def project_root_to_crown(root_track: KeypointTrack, crown_zs) -> KeypointTrack:
    """Extend the root centerline into the crown slices (label generation)."""
    return _project(root_track, crown_zs, "root", "crown")


def project_crown_to_root(crown_track: KeypointTrack, root_zs) -> KeypointTrack:
    """Fit crown predictions and substitute root slice indices."""
    return _project(crown_track, root_zs, "crown", "root")
