"""Augmentation, Adam, the step learning-rate schedule and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, TrainingDivergedError
from .heatmap import LAMBDA_OFF, encode_target, focal_loss, gaussian_radius, offset_loss, total_loss
from .network import NetConfig, backward, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    lr: float = 5e-4
    epochs: int = 140
    lr_drops: tuple = (60, 100)
    drop_factor: float = 10.0
    crop_size: int = 512
    random_crop: bool = True
    random_scale: bool = True
    random_flip: bool = True
    scale_range: tuple = (0.8, 1.2)
    flip_prob: float = 0.5
    lambda_off: float = LAMBDA_OFF
    box_size: float = 21.0
    min_overlap: float = 0.7
    radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_drops", tuple(int(e) for e in self.lr_drops))
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("batch_size, epochs and lr must be positive")
        drops = self.lr_drops
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(d >= self.epochs or d < 0 for d in drops):
            raise ConfigError("lr drop epochs must be strictly increasing and < epochs")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError("scale_range must satisfy 0 < lo <= hi")

    @classmethod
    def desk(cls, epochs, **overrides):
        """Default 140-epoch schedule compressed to ``epochs`` (drops at 60/140 and 100/140)."""
        drops = sorted({max(1, round(epochs * 60 / 140)), max(1, round(epochs * 100 / 140))})
        drops = tuple(d for d in drops if d < epochs)
        return cls(epochs=epochs, lr_drops=drops, **overrides)

    def heat_radius(self, g):
        if self.radius is not None:
            return float(self.radius)
        return gaussian_radius(self.box_size / g, self.box_size / g, self.min_overlap)

    def to_json(self):
        d = asdict(self)
        d["lr_drops"], d["scale_range"] = list(self.lr_drops), list(self.scale_range)
        return d

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ----------------------------------------------------------- augmentation


def _warp(image, scale, ox, oy, size):
    """Crop of the ``scale``-resized image whose top-left is (ox, oy); zero padded."""
    return ndimage.affine_transform(
        image, np.diag([1 / scale, 1 / scale, 1.0]), offset=(oy / scale, ox / scale, 0.0),
        output_shape=(size, size, image.shape[2]), order=1, mode="constant", cval=0.0)


def augment(image, keypoint, rng, config: TrainConfig):
    """Random scale, keypoint-preserving random crop, horizontal flip."""
    h, w = image.shape[:2]
    kx, ky = float(keypoint[0]), float(keypoint[1])
    if not (0 <= kx < w and 0 <= ky < h):
        raise ValueError(f"keypoint ({kx}, {ky}) outside {w}x{h} image")
    size = config.crop_size
    s = rng.uniform(*config.scale_range) if config.random_scale else 1.0
    sw, sh = w * s, h * s
    sx, sy = kx * s, ky * s
    if config.random_crop:
        lo_x, hi_x = sorted((0, int(math.floor(sw - size))))
        lo_y, hi_y = sorted((0, int(math.floor(sh - size))))
        for _ in range(20):
            ox = int(rng.integers(lo_x, hi_x + 1))
            oy = int(rng.integers(lo_y, hi_y + 1))
            if 0 <= sx - ox < size and 0 <= sy - oy < size:
                break
        else:
            ox = int(math.floor(sx)) - size // 2
            oy = int(math.floor(sy)) - size // 2
    else:
        ox = int(math.floor((sw - size) / 2))
        oy = int(math.floor((sh - size) / 2))
        if not (0 <= sx - ox < size and 0 <= sy - oy < size):
            ox = int(math.floor(sx)) - size // 2
            oy = int(math.floor(sy)) - size // 2
    if s == 1.0 and 0 <= ox and 0 <= oy and ox + size <= w and oy + size <= h:
        out = image[oy:oy + size, ox:ox + size].copy()
    else:
        out = _warp(image, s, ox, oy, size).astype(image.dtype, copy=False)
    nx, ny = sx - ox, sy - oy
    # mirror about pixel centers; skipped if it would push x past the left edge
    if config.random_flip and rng.random() < config.flip_prob and size - 1 - nx >= 0:
        out = out[:, ::-1].copy()
        nx = size - 1 - nx
    return out, (nx, ny)


# ---------------------------------------------------------------- schedule


def lr_at(epoch, config: TrainConfig):
    drops = sum(1 for d in config.lr_drops if d <= epoch)
    return config.lr / config.drop_factor ** drops


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """In-place bias-corrected Adam update; returns (params, state)."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, g in grads.items():
        p = params[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state


# -------------------------------------------------------------- the loop


def batch_loss(params, net: NetConfig, images, keypoints, radius, lambda_off=LAMBDA_OFF):
    """Forward + losses + backward for one batch; returns (LossTerms-like dict, grads)."""
    g = net.stride
    targets = [encode_target(kp, net.image_size, net.image_size, g, radius) for kp in keypoints]
    heat_t = np.stack([t.heatmap for t in targets])
    off_t = np.stack([t.offsets for t in targets])
    mask = np.stack([t.mask for t in targets])
    heat, off, _, cache = forward(images, params, net)
    l_k, d_heat = focal_loss(heat, heat_t, int(mask.sum()))
    l_off, d_off = offset_loss(off, off_t, mask)
    l_total = total_loss(l_k, l_off, lambda_off)
    grads = backward(d_heat, lambda_off * d_off, cache, params, net)
    return {"l_k": l_k, "l_off": l_off, "l_total": l_total}, grads


def train(dataset, net: NetConfig, config: TrainConfig, params=None, on_step=None):
    """Train on ``dataset`` (images (N,H,W,3), keypoints (N,2)) -> (params, loss log).

    ``dataset`` may also be a sequence of (image, (x, y)) pairs.
    """
    images, keypoints = _as_arrays(dataset)
    if len(images) == 0:
        raise ValueError("empty training set")
    if config.crop_size > images.shape[1] * config.scale_range[1] and config.random_crop:
        log.debug("crop larger than scaled source; crops will be zero padded")
    if config.crop_size != net.image_size:
        raise ConfigError(f"crop size {config.crop_size} must equal network input {net.image_size}")
    rng = np.random.default_rng(config.seed)
    params = init_params(net, config.seed) if params is None else params
    state = AdamState()
    radius = config.heat_radius(net.stride)
    history = []
    step = 0
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch, kps = [], []
            for i in idx:
                img, kp = augment(images[i], keypoints[i], rng, config)
                batch.append(img)
                kps.append(kp)
            terms, grads = batch_loss(params, net, np.stack(batch), kps, radius, config.lambda_off)
            if not np.isfinite(terms["l_total"]):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch} step {step}: {terms}")
            adam_step(params, grads, state, lr)
            row = {"epoch": epoch, "step": step, **terms, "lr": lr}
            history.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr,
                 np.mean([r["l_total"] for r in history if r["epoch"] == epoch]))
    return params, history


def _as_arrays(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray) \
            and dataset[0].ndim == 4:
        return np.asarray(dataset[0], dtype=np.float32), np.asarray(dataset[1], dtype=np.float64)
    imgs, kps = [], []
    for img, kp in dataset:
        imgs.append(getattr(img, "values", img))
        kps.append(kp[:2])
    if not imgs:
        return np.zeros((0, 0, 0, 3), np.float32), np.zeros((0, 2))
    return np.stack(imgs).astype(np.float32), np.asarray(kps, dtype=np.float64)


def write_loss_log(path, history):
    with open(path, "w") as fh:
        fh.write("epoch,step,l_k,l_off,l_total,lr\n")
        for r in history:
            fh.write(f"{r['epoch']},{r['step']},{r['l_k']:.8g},{r['l_off']:.8g},"
                     f"{r['l_total']:.8g},{r['lr']:.8g}\n")


def slice_dataset(cases, region="crown", window_range=None, max_per_volume=None):
    """Stack (image, keypoint) samples from ``cases`` of (Volume, root KeypointTrack).

    Crown labels come from projecting the root track along its fitted
    centerline; root samples use the track directly.  ``max_per_volume``
    keeps evenly spaced slices only.
    """
    from .centerline import project_root_to_crown
    from .volume import DEFAULT_WINDOW, partition, slice_at

    window_range = window_range or DEFAULT_WINDOW
    images, keypoints = [], []
    for volume, track in cases:
        crown_zs, root_zs = partition(volume)
        if region == "crown":
            labels = project_root_to_crown(track, crown_zs)
        elif region == "root":
            labels = track
        else:
            raise ValueError(f"unknown region {region!r}")
        pts = labels.points
        if max_per_volume is not None and len(pts) > max_per_volume:
            pick = np.unique(np.linspace(0, len(pts) - 1, max_per_volume).round().astype(int))
            pts = pts[pick]
        for x, y, z in pts:
            images.append(slice_at(volume, int(round(z)), window_range).values)
            keypoints.append((x, y))
    return np.stack(images), np.asarray(keypoints, dtype=np.float64)
