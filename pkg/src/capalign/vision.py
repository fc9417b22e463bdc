"""Trainable image pathway: ViT backbone plus a 2-layer MLP projection head.

Pre-layer-norm transformer blocks, learned positional embeddings, class-token
readout. The projection head maps backbone width d to the shared embedding
dimension D with a GELU between its two affine layers; its hidden width
defaults to d and is a config knob.

Everything is plain numpy with hand-written reverse-mode gradients. forward
and forward_backward are pure functions of (params, images): no globals, no
mutation, so repeated calls are bit-identical and thread-safe on shared
read-only parameters. Arithmetic runs at the dtype of the parameter arrays
(float32 in training, float64 in gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, ndtri

from .errors import ConfigError, ShapeError

LN_EPS = 1e-6
INIT_STD = 0.02
TRUNC_BOUND = 2.0  # truncation at +/- 2 standard deviations

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    width: int = 768
    depth: int = 12
    heads: int = 12
    head_dim: int = 64
    ff_width: int = 3072
    embed_dim: int = 512
    head_hidden: int = 0  # projection-head hidden width; 0 means "use width"

    def __post_init__(self):
        for name, value in vars(self).items():
            if not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            floor = 0 if name == "head_hidden" else 1
            if value < floor:
                raise ConfigError(f"{name} must be >= {floor}, got {value}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width != self.heads * self.head_dim:
            raise ConfigError(
                f"width {self.width} must equal heads*head_dim = {self.heads * self.head_dim}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        # class token prepended to the patch grid
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def proj_hidden(self) -> int:
        return self.head_hidden if self.head_hidden else self.width


@dataclass
class EncoderParams:
    config: ViTConfig
    arrays: dict[str, np.ndarray] = field(repr=False)

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def param_shapes(config: ViTConfig) -> dict[str, tuple]:
    """Parameter names and shapes in their canonical (serialization) order."""
    d, pd = config.width, config.patch_dim
    shapes: dict[str, tuple] = {
        "patch_embed.weight": (pd, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.n_tokens, d),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.offset"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.out.weight"] = (d, d)
        shapes[p + "attn.out.bias"] = (d,)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.offset"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, config.ff_width)
        shapes[p + "mlp.fc1.bias"] = (config.ff_width,)
        shapes[p + "mlp.fc2.weight"] = (config.ff_width, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["ln_final.scale"] = (d,)
    shapes["ln_final.offset"] = (d,)
    shapes["head.fc1.weight"] = (d, config.proj_hidden)
    shapes["head.fc1.bias"] = (config.proj_hidden,)
    shapes["head.fc2.weight"] = (config.proj_hidden, config.embed_dim)
    shapes["head.fc2.bias"] = (config.embed_dim,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # inverse-CDF sampling restricted to +/- TRUNC_BOUND sigma
    lo = 0.5 * (1.0 + erf(-TRUNC_BOUND * _INV_SQRT2))
    hi = 0.5 * (1.0 + erf(TRUNC_BOUND * _INV_SQRT2))
    u = rng.uniform(lo, hi, size=shape)
    return (ndtri(u) * std).astype(np.float32)


def init_params(config: ViTConfig, seed: int) -> EncoderParams:
    """Deterministic initialization: truncated normal (std 0.02) for weights,
    class token, and positional embeddings; zero biases; unit LN scales."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".scale"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".offset")):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            arrays[name] = _truncated_normal(rng, shape, INIT_STD)
    return EncoderParams(config, arrays)


# --- primitives --------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _layer_norm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * scale + offset, (xhat, inv)

def _layer_norm_backward(dy, xhat, inv, scale):
    lead = tuple(range(dy.ndim - 1))
    dscale = np.sum(dy * xhat, axis=lead)
    doffset = np.sum(dy, axis=lead)
    dxhat = dy * scale
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dscale, doffset


def _linear(x, w, b):
    return x @ w + b


def _linear_backward(dy, x, w):
    # x: (..., in), dy: (..., out)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_x.T @ flat_dy
    db = flat_dy.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Single (C, H, W) image to an (n, patch_size^2 * C) matrix.

    Row k is patch (k // gw, k % gw) of the gh x gw grid, row-major. Within a
    row, values are ordered channel-major: channel 0's patch pixels row-major,
    then channel 1's, and so on.
    """
    if image.ndim != 3:
        raise ShapeError(expected="(C, H, W)", actual=str(image.shape), what="image")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            expected=f"sides divisible by {patch_size}", actual=f"{h}x{w}", what="image"
        )
    return _patchify_batch(image[None], patch_size)[0]


def _patchify_batch(images: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = images.shape
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (b, gh, gw, c, p, p)
    return x.reshape(b, gh * gw, c * p * p)


# --- forward / backward ------------------------------------------------------


def _check_images(config: ViTConfig, images: np.ndarray) -> None:
    want = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(expected=f"(B, {want[0]}, {want[1]}, {want[2]})",
                         actual=str(getattr(images, "shape", None)), what="image batch")


def _forward_cached(params: EncoderParams, images: np.ndarray):
    cfg = params.config
    _check_images(cfg, images)
    a = params.arrays
    dtype = a["patch_embed.weight"].dtype
    b = images.shape[0]
    nh, dk = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dk)

    patches = _patchify_batch(np.ascontiguousarray(images, dtype=dtype), cfg.patch_size)
    tok = _linear(patches, a["patch_embed.weight"], a["patch_embed.bias"])
    cls = np.broadcast_to(a["cls_token"], (b, 1, cfg.width))
    x = np.concatenate([cls, tok], axis=1) + a["pos_embed"]

    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        xn1, ln1_cache = _layer_norm(x, a[p + "ln1.scale"], a[p + "ln1.offset"])
        qkv = _linear(xn1, a[p + "attn.qkv.weight"], a[p + "attn.qkv.bias"])
        q, k, v = np.split(qkv, 3, axis=-1)
        n = q.shape[1]
        q = q.reshape(b, n, nh, dk).transpose(0, 2, 1, 3)
        k = k.reshape(b, n, nh, dk).transpose(0, 2, 1, 3)
        v = v.reshape(b, n, nh, dk).transpose(0, 2, 1, 3)
        att = _softmax_last((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, cfg.width)
        attn_out = _linear(ctx, a[p + "attn.out.weight"], a[p + "attn.out.bias"])
        x1 = x + attn_out

        xn2, ln2_cache = _layer_norm(x1, a[p + "ln2.scale"], a[p + "ln2.offset"])
        h1 = _linear(xn2, a[p + "mlp.fc1.weight"], a[p + "mlp.fc1.bias"])
        h1a = gelu(h1)
        mlp_out = _linear(h1a, a[p + "mlp.fc2.weight"], a[p + "mlp.fc2.bias"])
        x2 = x1 + mlp_out

        blocks.append((xn1, ln1_cache, q, k, v, att, ctx, xn2, ln2_cache, h1, h1a))
        x = x2

    xf, lnf_cache = _layer_norm(x, a["ln_final.scale"], a["ln_final.offset"])
    cls_repr = xf[:, 0, :]
    g1 = _linear(cls_repr, a["head.fc1.weight"], a["head.fc1.bias"])
    g1a = gelu(g1)
    out = _linear(g1a, a["head.fc2.weight"], a["head.fc2.bias"])

    cache = (patches, blocks, lnf_cache, cls_repr, g1, g1a)
    return out, cache


def forward(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    """Un-normalized image embeddings, one row per image: (B, embed_dim)."""
    out, _ = _forward_cached(params, images)
    return out


def _backward_from_cache(params: EncoderParams, cache, upstream: np.ndarray):
    cfg = params.config
    a = params.arrays
    patches, blocks, lnf_cache, cls_repr, g1, g1a = cache
    b = upstream.shape[0]
    nh, dk = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dk)
    n = cfg.n_tokens
    grads: dict[str, np.ndarray] = {}

    dg1a, grads["head.fc2.weight"], grads["head.fc2.bias"] = _linear_backward(
        upstream, g1a, a["head.fc2.weight"]
    )
    dg1 = dg1a * gelu_grad(g1)
    dcls, grads["head.fc1.weight"], grads["head.fc1.bias"] = _linear_backward(
        dg1, cls_repr, a["head.fc1.weight"]
    )
    dxf = np.zeros((b, n, cfg.width), dtype=upstream.dtype)
    dxf[:, 0, :] = dcls
    dx, grads["ln_final.scale"], grads["ln_final.offset"] = _layer_norm_backward(
        dxf, lnf_cache[0], lnf_cache[1], a["ln_final.scale"]
    )

    for i in reversed(range(cfg.depth)):
        p = f"blocks.{i}."
        xn1, ln1_cache, q, k, v, att, ctx, xn2, ln2_cache, h1, h1a = blocks[i]

        # mlp branch: x2 = x1 + fc2(gelu(fc1(ln2(x1))))
        dh1a, grads[p + "mlp.fc2.weight"], grads[p + "mlp.fc2.bias"] = _linear_backward(
            dx, h1a, a[p + "mlp.fc2.weight"]
        )
        dh1 = dh1a * gelu_grad(h1)
        dxn2, grads[p + "mlp.fc1.weight"], grads[p + "mlp.fc1.bias"] = _linear_backward(
            dh1, xn2, a[p + "mlp.fc1.weight"]
        )
        dres, grads[p + "ln2.scale"], grads[p + "ln2.offset"] = _layer_norm_backward(
            dxn2, ln2_cache[0], ln2_cache[1], a[p + "ln2.scale"]
        )
        dx1 = dx + dres

        # attention branch: x1 = x + out(merge(att @ v))
        dctx, grads[p + "attn.out.weight"], grads[p + "attn.out.bias"] = _linear_backward(
            dx1, ctx, a[p + "attn.out.weight"]
        )
        dctx = dctx.reshape(b, n, nh, dk).transpose(0, 2, 1, 3)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ k
        dk_ = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [
                g.transpose(0, 2, 1, 3).reshape(b, n, cfg.width)
                for g in (dq, dk_, dv)
            ],
            axis=-1,
        )
        dxn1, grads[p + "attn.qkv.weight"], grads[p + "attn.qkv.bias"] = _linear_backward(
            dqkv, xn1, a[p + "attn.qkv.weight"]
        )
        dres, grads[p + "ln1.scale"], grads[p + "ln1.offset"] = _layer_norm_backward(
            dxn1, ln1_cache[0], ln1_cache[1], a[p + "ln1.scale"]
        )
        dx = dx1 + dres

    grads["pos_embed"] = dx.sum(axis=0)
    grads["cls_token"] = dx[:, 0, :].sum(axis=0)
    dtok = dx[:, 1:, :]
    _, grads["patch_embed.weight"], grads["patch_embed.bias"] = _linear_backward(
        dtok, patches, a["patch_embed.weight"]
    )
    return {name: grads[name] for name in params.arrays}


def forward_backward(params: EncoderParams, images: np.ndarray, upstream_grad: np.ndarray):
    """Output plus d<upstream_grad, output>/d(params), computed analytically.

    Returns (output, grads) where grads has exactly the parameter names and
    shapes of params.arrays. Image pixels are leaves; no gradient for them.
    """
    out, cache = _forward_cached(params, images)
    if upstream_grad.shape != out.shape:
        raise ShapeError(expected=str(out.shape), actual=str(upstream_grad.shape),
                         what="upstream gradient")
    grads = _backward_from_cache(params, cache, upstream_grad.astype(out.dtype))
    return out, grads
