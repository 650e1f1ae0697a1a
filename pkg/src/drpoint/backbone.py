"""Point grouping, the shared transformer, both decoders, and image encoders.

The model is functional: parameters live in flat ``{name: array}`` dicts and
every forward pass takes a mapping from those names to autodiff tensors (or
constants for evaluation). Components:

  * farthest point sampling + kNN grouping into G groups of k points,
  * a mini-PointNet group embedder (shared pointwise MLP, max-pool) plus a
    learned positional MLP of each group center,
  * a pre-norm transformer encoder with per-sample stochastic depth,
  * a single-block token decoder (mask queries cross-attend to visible
    tokens, linear head to codebook logits),
  * a four-block point decoder (self-attention over visible tokens and mask
    queries, linear head to k center-relative points per masked group),
  * a k-means codebook standing in for a trained tokenizer,
  * small strided CNNs with projection heads for RGB and depth images, with
    an alternative head for externally computed features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, FormatError
from .geometry import PointCloud
from .rng import stream

Array = np.ndarray

TOKEN_DECODER_BLOCKS = 1
POINT_DECODER_BLOCKS = 4
IMAGE_CHANNELS = (16, 32, 64, 128)


def _embed_hidden(dim: int) -> tuple[int, int]:
    """Pointwise-MLP widths; capped so tiny test dims stay tiny."""
    return min(128, 2 * dim), min(256, 4 * dim)


def _pos_hidden(dim: int) -> int:
    return min(128, 2 * dim)


# -- domain types -----------------------------------------------------------------


@dataclass(frozen=True)
class GroupedTokens:
    """G groups of k center-relative points plus their world-frame centers."""

    centers: Array
    groups: Array

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        groups = np.asarray(self.groups, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 3:
            raise DomainError(f"centers must be (G, 3), got {centers.shape}")
        if groups.ndim != 3 or groups.shape[0] != centers.shape[0] or groups.shape[2] != 3:
            raise DomainError(f"groups must be (G, k, 3), got {groups.shape}")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "groups", groups)

    @property
    def group_count(self) -> int:
        return self.centers.shape[0]

    @property
    def group_size(self) -> int:
        return self.groups.shape[1]


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    dim: int = 384
    heads: int = 6
    ffn_ratio: int = 4
    droppath_rate: float = 0.1

    def __post_init__(self):
        if min(self.layers, self.dim, self.heads, self.ffn_ratio) < 1:
            raise DomainError("encoder dimensions must be positive")
        if self.dim % self.heads != 0:
            raise DomainError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise DomainError("droppath_rate must lie in [0, 1)")


@dataclass(frozen=True)
class ImageEncoderConfig:
    """CNN trunk settings; `external_dim` switches to the feature-file head."""

    input_size: int = 224
    channels: int = 3
    dim: int = 384
    external_dim: int | None = None

    def __post_init__(self):
        if self.input_size < 16 and self.external_dim is None:
            raise DomainError("input_size must be at least 16")
        if self.channels not in (1, 3):
            raise DomainError("channels must be 1 (depth) or 3 (rgb)")


@dataclass(frozen=True)
class Codebook:
    codewords: Array

    def __post_init__(self):
        words = np.asarray(self.codewords, dtype=np.float64)
        if words.ndim != 2 or words.shape[0] < 2:
            raise DomainError(f"codebook must be (V >= 2, E), got {words.shape}")
        if not np.all(np.isfinite(words)):
            raise DomainError("codewords must be finite")
        object.__setattr__(self, "codewords", words)

    @property
    def vocab(self) -> int:
        return self.codewords.shape[0]


# -- sampling and grouping -----------------------------------------------------------


def fps(cloud: PointCloud, m: int, seed: int) -> Array:
    """Farthest point sampling; the first index is drawn from the seed.

    Subsequent picks maximize the distance to the already selected set, with
    ties resolved toward the lowest index.
    """
    n = cloud.count
    if not 1 <= m <= n:
        raise DomainError(f"need 1 <= m <= {n}, got m={m}")
    pts = cloud.points
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = int(stream(seed, "fps").integers(n))
    best = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        best = np.minimum(best, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def knn_group(cloud: PointCloud, centers: Array, k: int) -> GroupedTokens:
    """For every center, gather its k nearest cloud points (ties to lowest
    index) expressed relative to the center."""
    centers = np.asarray(centers, dtype=np.float64)
    if k > cloud.count:
        raise DomainError(f"k={k} exceeds cloud size {cloud.count}")
    pts = cloud.points
    d2 = (
        np.sum(centers * centers, axis=1)[:, None]
        + np.sum(pts * pts, axis=1)[None, :]
        - 2.0 * centers @ pts.T
    )
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    groups = pts[order] - centers[:, None, :]
    return GroupedTokens(centers=centers, groups=groups)


# -- parameter construction -----------------------------------------------------------


def _init_linear(params: dict, rng, name: str, fan_in: int, fan_out: int):
    # fan-in-scaled uniform init; token features must carry O(1) signal
    # relative to the learned class/mask tokens or contrastive heads collapse
    bound = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, (fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)


def _init_norm(params: dict, name: str, dim: int):
    params[f"{name}.g"] = np.ones(dim)
    params[f"{name}.b"] = np.zeros(dim)


def _init_block(params: dict, rng, name: str, cfg: EncoderConfig):
    _init_norm(params, f"{name}.ln1", cfg.dim)
    _init_linear(params, rng, f"{name}.qkv", cfg.dim, 3 * cfg.dim)
    _init_linear(params, rng, f"{name}.proj", cfg.dim, cfg.dim)
    _init_norm(params, f"{name}.ln2", cfg.dim)
    _init_linear(params, rng, f"{name}.fc1", cfg.dim, cfg.ffn_ratio * cfg.dim)
    _init_linear(params, rng, f"{name}.fc2", cfg.ffn_ratio * cfg.dim, cfg.dim)


def _init_pos_mlp(params: dict, rng, name: str, dim: int):
    hidden = _pos_hidden(dim)
    _init_linear(params, rng, f"{name}.fc1", 3, hidden)
    _init_linear(params, rng, f"{name}.fc2", hidden, dim)


def init_group_embedder(dim: int, rng, prefix: str = "embed") -> dict[str, Array]:
    h1, h2 = _embed_hidden(dim)
    params: dict[str, Array] = {}
    _init_linear(params, rng, f"{prefix}.mlp1", 3, h1)
    _init_linear(params, rng, f"{prefix}.mlp2", h1, h2)
    _init_linear(params, rng, f"{prefix}.out", h2, dim)
    _init_pos_mlp(params, rng, f"{prefix}.pos", dim)
    return params


def init_encoder(cfg: EncoderConfig, rng, prefix: str = "enc") -> dict[str, Array]:
    params: dict[str, Array] = {f"{prefix}.cls": rng.normal(0.0, 0.02, (1, 1, cfg.dim))}
    for i in range(cfg.layers):
        _init_block(params, rng, f"{prefix}.L{i}", cfg)
    return params


def init_token_decoder(cfg: EncoderConfig, vocab: int, rng, prefix: str = "tta") -> dict[str, Array]:
    params: dict[str, Array] = {f"{prefix}.mask": rng.normal(0.0, 0.02, (1, 1, cfg.dim))}
    _init_pos_mlp(params, rng, f"{prefix}.pos", cfg.dim)
    _init_norm(params, f"{prefix}.lnq", cfg.dim)
    _init_norm(params, f"{prefix}.lnkv", cfg.dim)
    for nm in ("q", "k", "v"):
        _init_linear(params, rng, f"{prefix}.att{nm}", cfg.dim, cfg.dim)
    _init_linear(params, rng, f"{prefix}.proj", cfg.dim, cfg.dim)
    _init_norm(params, f"{prefix}.ln2", cfg.dim)
    _init_linear(params, rng, f"{prefix}.fc1", cfg.dim, cfg.ffn_ratio * cfg.dim)
    _init_linear(params, rng, f"{prefix}.fc2", cfg.ffn_ratio * cfg.dim, cfg.dim)
    _init_linear(params, rng, f"{prefix}.head", cfg.dim, vocab)
    return params


def init_point_decoder(cfg: EncoderConfig, group_size: int, rng, prefix: str = "pta") -> dict[str, Array]:
    params: dict[str, Array] = {f"{prefix}.mask": rng.normal(0.0, 0.02, (1, 1, cfg.dim))}
    _init_pos_mlp(params, rng, f"{prefix}.pos", cfg.dim)
    for i in range(POINT_DECODER_BLOCKS):
        _init_block(params, rng, f"{prefix}.L{i}", cfg)
    _init_linear(params, rng, f"{prefix}.head", cfg.dim, group_size * 3)
    return params


def init_projection_head(dim: int, rng, prefix: str) -> dict[str, Array]:
    params: dict[str, Array] = {}
    _init_linear(params, rng, f"{prefix}.fc1", dim, dim)
    _init_linear(params, rng, f"{prefix}.fc2", dim, dim)
    return params


def init_image_encoder(cfg: ImageEncoderConfig, rng, prefix: str) -> dict[str, Array]:
    params: dict[str, Array] = {}
    if cfg.external_dim is not None:
        _init_linear(params, rng, f"{prefix}.fc1", cfg.external_dim, cfg.dim)
        _init_linear(params, rng, f"{prefix}.fc2", cfg.dim, cfg.dim)
        return params
    cin = cfg.channels
    for i, cout in enumerate(IMAGE_CHANNELS):
        scale = float(np.sqrt(2.0 / (9 * cin)))
        params[f"{prefix}.c{i}.w"] = rng.normal(0.0, scale, (3, 3, cin, cout))
        params[f"{prefix}.c{i}.b"] = np.zeros(cout)
        cin = cout
    _init_linear(params, rng, f"{prefix}.fc1", IMAGE_CHANNELS[-1], cfg.dim)
    _init_linear(params, rng, f"{prefix}.fc2", cfg.dim, cfg.dim)
    return params


# -- functional building blocks ----------------------------------------------------------


def linear(x: Tensor, p: dict, name: str) -> Tensor:
    return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def layer_norm(x: Tensor, p: dict, name: str, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * p[f"{name}.g"] + p[f"{name}.b"]


def gelu(x: Tensor) -> Tensor:
    inner = 0.7978845608028654 * (x + 0.044715 * (x * x * x))
    return x * 0.5 * (1.0 + inner.tanh())


def relu(x: Tensor) -> Tensor:
    return x.clip(0.0, np.inf)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / ((x * x).sum(axis=-1, keepdims=True) + eps).sqrt()


def _heads_split(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _heads_merge(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    weights = ad.softmax(ad.matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
    return ad.matmul(weights, v)


def self_attention(x: Tensor, p: dict, name: str, heads: int) -> Tensor:
    b, t, d = x.shape
    qkv = linear(x, p, f"{name}.qkv").reshape(b, t, 3, heads, d // heads)
    qkv = qkv.transpose(2, 0, 3, 1, 4)
    out = _attention(qkv[0], qkv[1], qkv[2])
    return linear(_heads_merge(out), p, f"{name}.proj")


def _ffn(x: Tensor, p: dict, name: str) -> Tensor:
    return linear(gelu(linear(x, p, f"{name}.fc1")), p, f"{name}.fc2")


def encoder_block(x: Tensor, p: dict, name: str, cfg: EncoderConfig, keep_masks=None) -> Tensor:
    """Pre-norm block; `keep_masks` is a pair of (B, 1, 1) droppath scalers."""
    attn = self_attention(layer_norm(x, p, f"{name}.ln1"), p, name, cfg.heads)
    x = x + (attn if keep_masks is None else attn * keep_masks[0])
    ff = _ffn(layer_norm(x, p, f"{name}.ln2"), p, name)
    return x + (ff if keep_masks is None else ff * keep_masks[1])


def pos_embed(centers: Tensor, p: dict, name: str) -> Tensor:
    return linear(gelu(linear(centers, p, f"{name}.fc1")), p, f"{name}.fc2")


# -- group embedding ------------------------------------------------------------------


def embed_groups_t(p: dict, centers: Tensor, groups: Tensor, prefix: str = "embed") -> Tensor:
    """(B, G, k, 3) center-relative groups -> (B, G, dim) tokens.

    Shared pointwise MLP, max-pool over the k points (exactly permutation
    invariant), linear projection, plus the positional MLP of the center.
    """
    h = gelu(linear(groups, p, f"{prefix}.mlp1"))
    h = gelu(linear(h, p, f"{prefix}.mlp2"))
    pooled = h.max(axis=2)
    feats = linear(pooled, p, f"{prefix}.out")
    return feats + pos_embed(centers, p, f"{prefix}.pos")


def embed_groups(tokens: GroupedTokens, params: dict[str, Array], prefix: str = "embed") -> Array:
    """Array-level wrapper over a single unbatched group set."""
    p = {k: Tensor.const(v) for k, v in params.items()}
    out = embed_groups_t(
        p, Tensor.const(tokens.centers[None]), Tensor.const(tokens.groups[None]), prefix
    )
    return out.data[0]


# -- encoder ---------------------------------------------------------------------------


def prepend_cls(tokens: Tensor, p: dict, prefix: str = "enc") -> Tensor:
    b = tokens.shape[0]
    cls = ad.broadcast_to(p[f"{prefix}.cls"], (b, 1, tokens.shape[2]))
    return ad.concat([cls, tokens], axis=1)


def encode_t(
    x: Tensor,
    cfg: EncoderConfig,
    p: dict,
    mode: str = "eval",
    seed: int = 0,
    prefix: str = "enc",
) -> Tensor:
    """Pre-norm transformer stack over (B, T, dim) with stochastic depth.

    In train mode each residual branch is dropped per sample with the
    configured rate and scaled by 1/(1-rate) when kept; eval mode is
    deterministic. The stack applies no final norm, so zeroed output
    projections leave the input untouched.
    """
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[-1] != cfg.dim:
        raise DomainError(f"feature dim {x.shape[-1]} != configured dim {cfg.dim}")
    b = x.shape[0]
    rate = cfg.droppath_rate
    for i in range(cfg.layers):
        keep_masks = None
        if mode == "train" and rate > 0.0:
            rng = stream(seed, "droppath", i)
            keep = (rng.random((2, b)) >= rate).astype(np.float64) / (1.0 - rate)
            keep_masks = (
                Tensor.const(keep[0][:, None, None]),
                Tensor.const(keep[1][:, None, None]),
            )
        x = encoder_block(x, p, f"{prefix}.L{i}", cfg, keep_masks)
    return x


def encode(
    features: Array,
    cfg: EncoderConfig,
    params: dict[str, Array],
    mode: str = "eval",
    seed: int = 0,
    prefix: str = "enc",
) -> Array:
    """Array-level wrapper over a single (T, dim) sequence."""
    p = {k: Tensor.const(v) for k, v in params.items()}
    return encode_t(Tensor.const(features[None]), cfg, p, mode, seed, prefix).data[0]


# -- masking ----------------------------------------------------------------------------


def mask_tokens(group_count: int, ratio: float, seed: int) -> tuple[Array, Array]:
    """Partition 0..G-1 into (visible, masked) with floor(ratio * G) masked."""
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"ratio must lie in [0, 1), got {ratio}")
    m = int(np.floor(ratio * group_count))
    masked = np.sort(stream(seed, "mask").choice(group_count, size=m, replace=False))
    visible = np.setdiff1d(np.arange(group_count), masked)
    return visible.astype(np.int64), masked.astype(np.int64)


# -- codebook tokenizer --------------------------------------------------------------------


def fit_codebook(
    features: Array,
    vocab: int,
    seed: int,
    iterations: int = 10,
    initial: Array | None = None,
) -> Codebook:
    """Plain k-means with seeded initialization and a fixed iteration count.

    Empty clusters keep their previous codeword; `initial` overrides the
    seeded choice of starting codewords.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DomainError(f"features must be (N, E), got {feats.shape}")
    n = feats.shape[0]
    if n < vocab:
        raise DomainError(f"need at least {vocab} features to fit, got {n}")
    if initial is not None:
        words = np.asarray(initial, dtype=np.float64).copy()
        if words.shape != (vocab, feats.shape[1]):
            raise DomainError(f"initial codewords must be ({vocab}, {feats.shape[1]})")
    else:
        rng = stream(seed, "codebook")
        words = feats[np.sort(rng.choice(n, size=vocab, replace=False))].copy()
    for _ in range(iterations):
        assign = _nearest(feats, words)
        for v in range(vocab):
            members = feats[assign == v]
            if members.shape[0]:
                words[v] = members.mean(axis=0)
    return Codebook(codewords=words)


def _nearest(features: Array, words: Array) -> Array:
    d2 = (
        np.sum(features * features, axis=1)[:, None]
        + np.sum(words * words, axis=1)[None, :]
        - 2.0 * features @ words.T
    )
    return np.argmin(d2, axis=1)


def tokenize(features: Array, codebook: Codebook) -> Array:
    """Assign each feature its nearest codeword (ties to the lowest id)."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return _nearest(feats, codebook.codewords).astype(np.int64)


# -- decoders ---------------------------------------------------------------------------


def _mask_queries(p: dict, masked_centers: Tensor, prefix: str) -> Tensor:
    b, m, _ = masked_centers.shape
    tok = ad.broadcast_to(p[f"{prefix}.mask"], (b, m, p[f"{prefix}.mask"].shape[2]))
    return tok + pos_embed(masked_centers, p, f"{prefix}.pos")


def decode_tokens_t(
    p: dict,
    visible: Tensor,
    masked_centers: Tensor,
    cfg: EncoderConfig,
    prefix: str = "tta",
) -> Tensor:
    """Mask queries cross-attend over visible tokens; one block, V logits."""
    if masked_centers.shape[1] < 1:
        raise DomainError("decode_tokens requires a nonempty mask set")
    queries = _mask_queries(p, masked_centers, prefix)
    qn = layer_norm(queries, p, f"{prefix}.lnq")
    kvn = layer_norm(visible, p, f"{prefix}.lnkv")
    q = _heads_split(linear(qn, p, f"{prefix}.attq"), cfg.heads)
    k = _heads_split(linear(kvn, p, f"{prefix}.attk"), cfg.heads)
    v = _heads_split(linear(kvn, p, f"{prefix}.attv"), cfg.heads)
    queries = queries + linear(_heads_merge(_attention(q, k, v)), p, f"{prefix}.proj")
    queries = queries + _ffn(layer_norm(queries, p, f"{prefix}.ln2"), p, prefix)
    return linear(queries, p, f"{prefix}.head")


def decode_points_t(
    p: dict,
    visible: Tensor,
    masked_centers: Tensor,
    cfg: EncoderConfig,
    group_size: int,
    prefix: str = "pta",
) -> Tensor:
    """Four self-attention blocks over [visible; mask queries].

    Returns (B, M * k, 3) world-frame reconstructions: the linear head emits
    k center-relative points per masked group, shifted by the group center.
    """
    if masked_centers.shape[1] < 1:
        raise DomainError("decode_points requires a nonempty mask set")
    b, m, _ = masked_centers.shape
    x = ad.concat([visible, _mask_queries(p, masked_centers, prefix)], axis=1)
    for i in range(POINT_DECODER_BLOCKS):
        x = encoder_block(x, p, f"{prefix}.L{i}", cfg)
    mask_out = x[:, visible.shape[1] :, :]
    rel = linear(mask_out, p, f"{prefix}.head").reshape(b, m, group_size, 3)
    absolute = rel + masked_centers.reshape(b, m, 1, 3)
    return absolute.reshape(b, m * group_size, 3)


def decode_tokens(
    params: dict[str, Array],
    visible: Array,
    masked_centers: Array,
    cfg: EncoderConfig,
    prefix: str = "tta",
) -> Array:
    p = {k: Tensor.const(v) for k, v in params.items()}
    return decode_tokens_t(
        p, Tensor.const(visible[None]), Tensor.const(masked_centers[None]), cfg, prefix
    ).data[0]


def decode_points(
    params: dict[str, Array],
    visible: Array,
    masked_centers: Array,
    cfg: EncoderConfig,
    group_size: int,
    prefix: str = "pta",
) -> Array:
    p = {k: Tensor.const(v) for k, v in params.items()}
    return decode_points_t(
        p, Tensor.const(visible[None]), Tensor.const(masked_centers[None]), cfg, group_size, prefix
    ).data[0]


# -- image encoders ----------------------------------------------------------------------


def conv2d(x: Tensor, p: dict, name: str, stride: int = 2) -> Tensor:
    """3x3 convolution with zero padding 1, built from shifted slices."""
    b, hin, win, _ = x.shape
    hout = (hin + 2 - 3) // stride + 1
    wout = (win + 2 - 3) // stride + 1
    xp = ad.pad2d(x, 1)
    patches = []
    for i in range(3):
        for j in range(3):
            patches.append(
                xp[:, i : i + (hout - 1) * stride + 1 : stride, j : j + (wout - 1) * stride + 1 : stride, :]
            )
    cols = ad.concat(patches, axis=3)
    w = p[f"{name}.w"]
    flat = w.reshape(9 * w.shape[2], w.shape[3])
    return ad.matmul(cols, flat) + p[f"{name}.b"]


def encode_image_t(p: dict, images: Tensor, cfg: ImageEncoderConfig, prefix: str) -> Tensor:
    """(B, H, W, C) images -> (B, dim) unit-norm embeddings."""
    shape = images.shape
    if shape[1] != cfg.input_size or shape[2] != cfg.input_size or shape[3] != cfg.channels:
        raise DomainError(
            f"expected (B, {cfg.input_size}, {cfg.input_size}, {cfg.channels}) images, got {shape}"
        )
    x = images
    for i in range(len(IMAGE_CHANNELS)):
        x = relu(conv2d(x, p, f"{prefix}.c{i}", stride=2))
    pooled = x.mean(axis=(1, 2))
    return project_head_t(p, pooled, prefix)


def project_head_t(p: dict, features: Tensor, prefix: str) -> Tensor:
    """Two-layer projection head with L2-normalized output."""
    h = gelu(linear(features, p, f"{prefix}.fc1"))
    return l2_normalize(linear(h, p, f"{prefix}.fc2"))


def encode_image(
    params: dict[str, Array], image: Array, cfg: ImageEncoderConfig, prefix: str
) -> Array:
    """Array-level wrapper over a single (H, W, C) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DomainError(f"image must be (H, W, C), got {image.shape}")
    p = {k: Tensor.const(v) for k, v in params.items()}
    return encode_image_t(p, Tensor.const(image[None]), cfg, prefix).data[0]


def encode_external_features_t(p: dict, features: Tensor, prefix: str) -> Tensor:
    """Projection-head-only path for externally computed trunk features."""
    return project_head_t(p, features, prefix)


# -- momentum update -----------------------------------------------------------------------


def momentum_update(
    key_params: dict[str, Array], query_params: dict[str, Array], m: float
) -> dict[str, Array]:
    """key <- m * key + (1 - m) * query, elementwise over matching names."""
    if not 0.0 <= m <= 1.0:
        raise DomainError(f"momentum must lie in [0, 1], got {m}")
    out: dict[str, Array] = {}
    for name, key in key_params.items():
        query = query_params.get(name)
        if query is None or query.shape != key.shape:
            raise DomainError(f"parameter {name!r} missing or shape-mismatched in query set")
        out[name] = m * key + (1.0 - m) * query
    return out


# -- external feature files ("DRFE") ----------------------------------------------------------

_FEAT_MAGIC = b"DRFE"
_FEAT_VERSION = 1


def write_feature_file(features: Array, path) -> None:
    """Little-endian float32 rows with a DRFE header."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DomainError(f"features must be (N, F), got {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<III", _FEAT_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f4").tobytes(order="C"))


def read_feature_file(path) -> Array:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _FEAT_MAGIC:
            raise FormatError(f"{path}: not a feature file")
        version, count, dim = struct.unpack("<III", header[4:])
        if version != _FEAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * count * dim)
        if len(payload) != 4 * count * dim:
            raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
