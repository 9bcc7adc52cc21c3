"""ImplantFormer forward and backward passes.

Pipeline: residual conv stem -> patch embedding (+ readout token and learned
positions) -> pre-norm transformer encoder with tapped layers -> reassemble
each tap to its own stride -> coarse-to-fine fusion -> heatmap / offset heads.

Parameters live in a flat ``dict[str, ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .layers import (
    attention_backward,
    attention_forward,
    conv_backward,
    conv_forward,
    conv_out_size,
    conv_transpose_backward,
    conv_transpose_forward,
    gelu_backward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    sigmoid,
    upsample2x_backward,
    upsample2x_forward,
)

HEAT_PRIOR_BIAS = -2.19


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    layers: int = 4
    taps: tuple = (1, 2, 3, 4)
    ratios: tuple = (4, 8, 16, 32)
    reassemble_dim: int = 32
    decoder_dim: int = 32
    stem_width: int = 4
    mlp_ratio: int = 2
    head_width: int = 16
    use_stem: bool = True
    fusion: str = "concat"
    read: str = "ignore"

    def __post_init__(self):
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        object.__setattr__(self, "ratios", tuple(int(r) for r in self.ratios))
        self.validate()

    @classmethod
    def full_size(cls, **overrides):
        """Full-size layout: 512 input, 16 px patches, 12 layers tapped at 3/6/9/12."""
        base = dict(image_size=512, patch_size=16, embed_dim=768, heads=12, layers=12,
                    taps=(3, 6, 9, 12), ratios=(4, 8, 16, 32), reassemble_dim=256,
                    decoder_dim=256, stem_width=64, head_width=256, mlp_ratio=4)
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def stride(self):
        return min(self.ratios)

    @property
    def heatmap_size(self):
        return self.image_size // self.stride

    @property
    def fused_dim(self):
        return self.decoder_dim if self.fusion == "concat" else self.reassemble_dim

    def validate(self):
        m, h = self.patch_size, self.image_size
        if m <= 0 or h % m:
            raise ConfigError(f"patch size {m} must divide image size {h}")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if len(self.taps) != len(self.ratios) or not self.taps:
            raise ConfigError("need one reassemble ratio per tap layer")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
            raise ConfigError("tap layers must be strictly increasing")
        if self.taps[0] < 1 or self.taps[-1] > self.layers:
            raise ConfigError(f"tap layers must lie in [1, {self.layers}]")
        srt = sorted(self.ratios)
        if any(b != 2 * a for a, b in zip(srt, srt[1:])):
            raise ConfigError("consecutive reassemble ratios must differ by exactly 2x")
        for s in self.ratios:
            if (s < m and m % s) or (s > m and s % m) or h % s:
                raise ConfigError(f"ratio {s} incompatible with patch {m} / image {h}")
        if self.fusion not in ("concat", "add"):
            raise ConfigError("fusion must be 'concat' or 'add'")
        if self.read not in ("ignore", "add"):
            raise ConfigError("read must be 'ignore' or 'add'")

    def to_json(self):
        d = asdict(self)
        d["taps"], d["ratios"] = list(self.taps), list(self.ratios)
        return d

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ init


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2
        if not bad.any():
            return x * std
        x[bad] = rng.standard_normal(int(bad.sum()))


def _conv_init(rng, k, cin, cout):
    fan_in = k * k * cin
    return rng.standard_normal((fan_in, cout)) * np.sqrt(2.0 / fan_in)


def init_params(config: NetConfig, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    c = config
    p = {}
    if c.use_stem:
        for i in range(2):
            p[f"stem.{i}.conv1.w"] = _conv_init(rng, 3, 3, c.stem_width)
            p[f"stem.{i}.conv1.b"] = np.zeros(c.stem_width)
            p[f"stem.{i}.conv2.w"] = _conv_init(rng, 3, c.stem_width, 3)
            p[f"stem.{i}.conv2.b"] = np.zeros(3)
    m, d = c.patch_size, c.embed_dim
    p["embed.patch.w"] = _trunc_normal(rng, (m * m * 3, d))
    p["embed.patch.b"] = np.zeros(d)
    p["embed.readout"] = _trunc_normal(rng, (1, d))
    p["embed.pos"] = _trunc_normal(rng, (c.num_patches + 1, d))
    hidden = d * c.mlp_ratio
    for i in range(c.layers):
        pre = f"enc.{i}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
        p[pre + "attn.qkv.w"] = _trunc_normal(rng, (d, 3 * d))
        p[pre + "attn.qkv.b"] = np.zeros(3 * d)
        p[pre + "attn.proj.w"] = _trunc_normal(rng, (d, d))
        p[pre + "attn.proj.b"] = np.zeros(d)
        p[pre + "mlp.fc1.w"] = _trunc_normal(rng, (d, hidden))
        p[pre + "mlp.fc1.b"] = np.zeros(hidden)
        p[pre + "mlp.fc2.w"] = _trunc_normal(rng, (hidden, d))
        p[pre + "mlp.fc2.b"] = np.zeros(d)
    rd = c.reassemble_dim
    for j, s in enumerate(c.ratios):
        p[f"reassemble.{j}.proj.w"] = _trunc_normal(rng, (d, rd))
        p[f"reassemble.{j}.proj.b"] = np.zeros(rd)
        if s < m:
            p[f"reassemble.{j}.resample.w"] = _conv_init(rng, 3, rd, rd).reshape(rd, 9 * rd)
            p[f"reassemble.{j}.resample.b"] = np.zeros(rd)
        elif s > m:
            p[f"reassemble.{j}.resample.w"] = _conv_init(rng, 3, rd, rd)
            p[f"reassemble.{j}.resample.b"] = np.zeros(rd)
    if c.fusion == "concat":
        n_fuse = max(1, len(c.ratios) - 1)
        cin = 2 * rd if len(c.ratios) > 1 else rd
        for j in range(n_fuse):
            p[f"fuse.{j}.w"] = _conv_init(rng, 3, cin, c.decoder_dim)
            p[f"fuse.{j}.b"] = np.zeros(c.decoder_dim)
            cin = c.decoder_dim + rd
    fd = c.fused_dim
    for name, out in (("heat", 1), ("off", 2)):
        p[f"head.{name}.conv.w"] = _conv_init(rng, 3, fd, c.head_width)
        p[f"head.{name}.conv.b"] = np.zeros(c.head_width)
        p[f"head.{name}.out.w"] = _trunc_normal(rng, (c.head_width, out), std=0.01)
        p[f"head.{name}.out.b"] = np.zeros(out)
    p["head.heat.out.b"][:] = HEAT_PRIOR_BIAS
    return {k: v.astype(dtype) for k, v in p.items()}


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _prefixed(grads, prefix):
    return {prefix + k: v for k, v in grads.items()}


# ------------------------------------------------------------------ stem


def conv_stem_forward(params, x):
    """Two residual blocks, 3 -> stem width -> 3 channels, spatial size kept."""
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"stem expects (B, H, W, 3), got {x.shape}")
    caches = []
    for i in range(2):
        pre = f"stem.{i}."
        h1, c1 = conv_forward(x, params[pre + "conv1.w"], params[pre + "conv1.b"])
        a, ca = gelu_forward(h1)
        h2, c2 = conv_forward(a, params[pre + "conv2.w"], params[pre + "conv2.b"])
        caches.append((c1, ca, c2))
        x = x + h2
    return x, caches


def conv_stem_backward(params, dx, caches):
    grads = {}
    for i in reversed(range(2)):
        pre = f"stem.{i}."
        c1, ca, c2 = caches[i]
        da, g2 = conv_backward(dx, c2, params[pre + "conv2.w"])
        dh1 = gelu_backward(da, ca)
        dskip, g1 = conv_backward(dh1, c1, params[pre + "conv1.w"])
        dx = dx + dskip
        grads.update(_prefixed(g1, pre + "conv1."))
        grads.update(_prefixed(g2, pre + "conv2."))
    return dx, grads


# ----------------------------------------------------------- embedding


def patchify(x, m):
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"patch size {m} does not divide {h}x{w}")
    nh, nw = h // m, w // m
    return x.reshape(b, nh, m, nw, m, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, nh * nw, m * m * c)


def unpatchify(p, m, h, w, c):
    b = p.shape[0]
    nh, nw = h // m, w // m
    return p.reshape(b, nh, nw, m, m, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def patch_embed(params, x, m, add_pos=True):
    """(B, H, W, 3) -> (B, I_m + 1, D); token 0 is the readout token."""
    patches = patchify(x, m)
    tok, _ = linear_forward(patches, params["embed.patch.w"], params["embed.patch.b"])
    b, _, d = tok.shape
    readout = np.broadcast_to(params["embed.readout"], (b, 1, d))
    tokens = np.concatenate([readout, tok], axis=1)
    if add_pos:
        if params["embed.pos"].shape[0] != tokens.shape[1]:
            raise ShapeError(f"positional table has {params['embed.pos'].shape[0]} rows, "
                             f"need {tokens.shape[1]}")
        tokens = tokens + params["embed.pos"]
    return tokens, (patches, x.shape, m, add_pos)


def patch_embed_backward(params, dtokens, cache):
    patches, xshape, m, add_pos = cache
    grads = {"embed.readout": dtokens[:, :1].sum(axis=0)}
    if add_pos:
        grads["embed.pos"] = dtokens.sum(axis=0)
    dpatch, g = linear_backward(dtokens[:, 1:], patches, params["embed.patch.w"])
    grads["embed.patch.w"], grads["embed.patch.b"] = g["w"], g["b"]
    b, h, w, c = xshape
    return unpatchify(dpatch, m, h, w, c), grads


# ------------------------------------------------------------- encoder


def mhsa_block(params, prefix, x, heads):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    p = _sub(params, prefix)
    h, cl1 = layernorm_forward(x, p["ln1.g"], p["ln1.b"])
    a, attn, cat = attention_forward(h, _sub(p, "attn."), heads)
    x1 = x + a
    h2, cl2 = layernorm_forward(x1, p["ln2.g"], p["ln2.b"])
    f1, _ = linear_forward(h2, p["mlp.fc1.w"], p["mlp.fc1.b"])
    g1, cg = gelu_forward(f1)
    f2, _ = linear_forward(g1, p["mlp.fc2.w"], p["mlp.fc2.b"])
    return x1 + f2, attn, (cl1, cat, cl2, h2, cg, g1)


def mhsa_block_backward(params, prefix, dout, cache):
    p = _sub(params, prefix)
    cl1, cat, cl2, h2, cg, g1 = cache
    grads = {}
    dg1, gf2 = linear_backward(dout, g1, p["mlp.fc2.w"])
    df1 = gelu_backward(dg1, cg)
    dh2, gf1 = linear_backward(df1, h2, p["mlp.fc1.w"])
    dx1, gl2 = layernorm_backward(dh2, cl2)
    dx1 = dx1 + dout
    dh, ga = attention_backward(dx1, cat, _sub(p, "attn."))
    dx, gl1 = layernorm_backward(dh, cl1)
    dx = dx + dx1
    grads.update(_prefixed(gf2, "mlp.fc2."))
    grads.update(_prefixed(gf1, "mlp.fc1."))
    grads.update(_prefixed(gl2, "ln2."))
    grads.update(_prefixed(gl1, "ln1."))
    grads.update(_prefixed(ga, "attn."))
    return dx, _prefixed(grads, prefix)


def encoder_forward(params, tokens, config: NetConfig, layers=None):
    """Run ``layers`` (default all) blocks; return tokens after each tap layer."""
    layers = config.layers if layers is None else layers
    taps, attns, caches = [], [], []
    x = tokens
    tapset = set(config.taps)
    for i in range(layers):
        x, attn, cache = mhsa_block(params, f"enc.{i}.", x, config.heads)
        attns.append(attn)
        caches.append(cache)
        if i + 1 in tapset:
            taps.append(x)
    return taps, attns, caches


def encoder_backward(params, dtaps, caches, config: NetConfig):
    """``dtaps`` aligned with config.taps (None entries allowed)."""
    grads = {}
    tap_grad = dict(zip(config.taps, dtaps))
    dx = None
    for i in reversed(range(len(caches))):
        g = tap_grad.get(i + 1)
        if g is not None:
            dx = g if dx is None else dx + g
        if dx is None:
            continue
        dx, gb = mhsa_block_backward(params, f"enc.{i}.", dx, caches[i])
        grads.update(gb)
    return dx, grads


# ---------------------------------------------------------- reassemble


def reassemble(params, j, tokens, config: NetConfig, s):
    """Read -> Concat -> Resample for tap ``j``: (B, I_m+1, D) -> (B, H/s, W/s, D_hat)."""
    b, t, d = tokens.shape
    n = t - 1
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ShapeError(f"{n} patch tokens do not form a square grid")
    m = config.patch_size
    if not (s == m or (s < m and m % s == 0) or (s > m and s % m == 0)):
        raise ShapeError(f"ratio {s} is not an integer multiple/fraction of patch {m}")
    if config.read == "ignore":
        body = tokens[:, 1:]
    else:
        body = tokens[:, 1:] + tokens[:, :1]
    grid = body.reshape(b, side, side, d)
    pre = f"reassemble.{j}."
    proj, _ = linear_forward(grid, params[pre + "proj.w"], params[pre + "proj.b"])
    cache = {"grid": grid, "s": s, "shape": tokens.shape}
    if s < m:
        out_side = side * (m // s)
        out, cache["conv"] = conv_transpose_forward(
            proj, params[pre + "resample.w"], params[pre + "resample.b"],
            out_side, out_side, k=3, stride=m // s, pad=1)
    elif s > m:
        out, cache["conv"] = conv_forward(proj, params[pre + "resample.w"],
                                          params[pre + "resample.b"], k=3, stride=s // m, pad=1)
    else:
        out = proj
    return out, cache


def reassemble_backward(params, j, dout, cache, config: NetConfig):
    pre = f"reassemble.{j}."
    s, m = cache["s"], config.patch_size
    grads = {}
    if s < m:
        dproj, g = conv_transpose_backward(dout, cache["conv"], params[pre + "resample.w"])
        grads.update(_prefixed(g, pre + "resample."))
    elif s > m:
        dproj, g = conv_backward(dout, cache["conv"], params[pre + "resample.w"])
        grads.update(_prefixed(g, pre + "resample."))
    else:
        dproj = dout
    dgrid, g = linear_backward(dproj, cache["grid"], params[pre + "proj.w"])
    grads.update(_prefixed(g, pre + "proj."))
    b, t, d = cache["shape"]
    dtok = np.zeros(cache["shape"], dtype=dout.dtype)
    dtok[:, 1:] = dgrid.reshape(b, t - 1, d)
    if config.read == "add":
        dtok[:, :1] = dtok[:, 1:].sum(axis=1, keepdims=True)
    return dtok, grads


# -------------------------------------------------------------- decoder


def decoder_fuse(params, maps, fusion="concat"):
    """Fuse feature maps ordered coarse -> fine, each exactly 2x the previous."""
    for a, b in zip(maps, maps[1:]):
        if b.shape[1] != 2 * a.shape[1] or b.shape[2] != 2 * a.shape[2]:
            raise ShapeError(f"cannot fuse {a.shape[1:3]} into {b.shape[1:3]}: need exactly 2x")
    f = maps[0]
    caches = []
    if fusion == "add":
        for m in maps[1:]:
            u, cu = upsample2x_forward(f)
            caches.append(cu)
            f = u + m
        return f, caches
    if len(maps) == 1:
        h, cc = conv_forward(f, params["fuse.0.w"], params["fuse.0.b"])
        f, cg = gelu_forward(h)
        return f, [(None, cc, cg, None)]
    for j, m in enumerate(maps[1:]):
        u, cu = upsample2x_forward(f)
        cat = np.concatenate([u, m], axis=-1)
        h, cc = conv_forward(cat, params[f"fuse.{j}.w"], params[f"fuse.{j}.b"])
        f, cg = gelu_forward(h)
        caches.append((cu, cc, cg, u.shape[-1]))
    return f, caches


def decoder_fuse_backward(params, dout, caches, fusion="concat"):
    """Return (per-map gradients ordered coarse -> fine, param grads)."""
    grads = {}
    if fusion == "add":
        dmaps = []
        df = dout
        for cu in reversed(caches):
            dmaps.append(df)
            df = upsample2x_backward(df, cu)
        dmaps.append(df)
        return dmaps[::-1], grads
    if caches[0][0] is None:
        _, cc, cg, _ = caches[0]
        dh = gelu_backward(dout, cg)
        dmap, g = conv_backward(dh, cc, params["fuse.0.w"])
        grads.update(_prefixed(g, "fuse.0."))
        return [dmap], grads
    dmaps = []
    df = dout
    for j in reversed(range(len(caches))):
        cu, cc, cg, nu = caches[j]
        dh = gelu_backward(df, cg)
        dcat, g = conv_backward(dh, cc, params[f"fuse.{j}.w"])
        grads.update(_prefixed(g, f"fuse.{j}."))
        dmaps.append(dcat[..., nu:])
        df = upsample2x_backward(np.ascontiguousarray(dcat[..., :nu]), cu)
    dmaps.append(df)
    return dmaps[::-1], grads


# ---------------------------------------------------------------- heads


def heads(params, f):
    """Return (heatmap in (0,1) (B, h, w), offsets (B, h, w, 2), cache)."""
    outs, cache = {}, {}
    for name in ("heat", "off"):
        pre = f"head.{name}."
        h, cc = conv_forward(f, params[pre + "conv.w"], params[pre + "conv.b"])
        a, cg = gelu_forward(h)
        o, _ = linear_forward(a, params[pre + "out.w"], params[pre + "out.b"])
        outs[name] = o
        cache[name] = (cc, cg, a)
    heat = sigmoid(outs["heat"][..., 0])
    cache["heat_prob"] = heat
    return heat, outs["off"], cache


def heads_backward(params, d_heat, d_off, cache):
    """``d_heat`` is w.r.t. the sigmoid output."""
    p = cache["heat_prob"]
    d_logit = (d_heat * p * (1 - p))[..., None]
    grads, df = {}, None
    for name, dout in (("heat", d_logit), ("off", d_off)):
        pre = f"head.{name}."
        cc, cg, a = cache[name]
        da, g = linear_backward(dout, a, params[pre + "out.w"])
        grads.update(_prefixed(g, pre + "out."))
        dh = gelu_backward(da, cg)
        dfi, g = conv_backward(dh, cc, params[pre + "conv.w"])
        grads.update(_prefixed(g, pre + "conv."))
        df = dfi if df is None else df + dfi
    return df, grads


# ---------------------------------------------------------- composition


@dataclass
class ForwardCache:
    stem: list = None
    embed: tuple = None
    encoder: list = field(default_factory=list)
    reassemble: list = field(default_factory=list)
    fuse: list = field(default_factory=list)
    heads: dict = None


def forward(images, params, config: NetConfig):
    """images (B, H, W, 3) or (H, W, 3) -> (heatmap, offsets, attention maps, cache)."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != (config.image_size, config.image_size, 3):
        raise ShapeError(f"expected {config.image_size}x{config.image_size}x3 input, "
                         f"got {x.shape[1:]}")
    x = x.astype(params["embed.patch.w"].dtype, copy=False)
    cache = ForwardCache()
    if config.use_stem:
        x, cache.stem = conv_stem_forward(params, x)
    tokens, cache.embed = patch_embed(params, x, config.patch_size)
    taps, attns, cache.encoder = encoder_forward(params, tokens, config)
    maps = []
    for j, (t, s) in enumerate(zip(taps, config.ratios)):
        fm, rc = reassemble(params, j, t, config, s)
        maps.append(fm)
        cache.reassemble.append(rc)
    order = np.argsort(config.ratios)[::-1]          # coarse -> fine
    fused, cache.fuse = decoder_fuse(params, [maps[i] for i in order], config.fusion)
    heat, off, cache.heads = heads(params, fused)
    return heat, off, attns, cache


def backward(d_heat, d_off, cache: ForwardCache, params, config: NetConfig):
    """Reverse-mode gradients of every parameter given dL/dheatmap and dL/doffsets."""
    if cache is None or cache.heads is None:
        raise ValueError("backward needs the cache from a forward pass")
    grads = {}
    df, g = heads_backward(params, d_heat, d_off, cache.heads)
    grads.update(g)
    dmaps_sorted, g = decoder_fuse_backward(params, df, cache.fuse, config.fusion)
    grads.update(g)
    order = np.argsort(config.ratios)[::-1]
    dmaps = [None] * len(order)
    for pos, i in enumerate(order):
        dmaps[i] = dmaps_sorted[pos]
    dtaps = []
    for j, rc in enumerate(cache.reassemble):
        dt, g = reassemble_backward(params, j, dmaps[j], rc, config)
        grads.update(g)
        dtaps.append(dt)
    dtokens, g = encoder_backward(params, dtaps, cache.encoder, config)
    grads.update(g)
    dx, g = patch_embed_backward(params, dtokens, cache.embed)
    grads.update(g)
    if config.use_stem:
        _, g = conv_stem_backward(params, dx, cache.stem)
        grads.update(g)
    for k, v in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return {k: np.asarray(grads[k], dtype=params[k].dtype).reshape(params[k].shape)
            for k in params}


class ImplantFormer:
    """Parameters plus config; thin stateful wrapper over ``forward``/``backward``."""

    def __init__(self, config: NetConfig, params=None, seed=0, dtype=np.float32):
        self.config = config
        self.params = init_params(config, seed, dtype) if params is None else params
        self._cache = None

    def forward(self, images, keep_cache=True):
        heat, off, attns, cache = forward(images, self.params, self.config)
        self._cache = cache if keep_cache else None
        return heat, off, attns

    def backward(self, d_heat, d_off):
        if self._cache is None:
            raise ValueError("backward called without a cached forward pass")
        return backward(d_heat, d_off, self._cache, self.params, self.config)

    def predict(self, images, batch_size=32):
        heats, offs = [], []
        for i in range(0, len(images), batch_size):
            h, o, _ = self.forward(images[i:i + batch_size], keep_cache=False)
            heats.append(h)
            offs.append(o)
        return np.concatenate(heats), np.concatenate(offs)


# ----------------------------------------------------------- checkpoint

CKPT_MAGIC = b"IMPF0001"


def save_checkpoint(path, config: NetConfig, params):
    blob = json.dumps(config.to_json(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", len(blob)), blob]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an IMPF0001 checkpoint")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = NetConfig.from_json(json.loads(data[pos:pos + n]))
        pos += n
        params = {}
        while pos < len(data):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    expected = set(init_params(config, 0).keys())
    if set(params) != expected:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return config, params
