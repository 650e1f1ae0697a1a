"""Pre-training orchestration: step logic, schedule, state, checkpoints.

One step runs, per sample in the batch:

  * token branch: group the first augmented view, mask it, encode the
    visible tokens behind a class token, decode codebook logits for the
    masked groups (cross-entropy against the frozen tokenizer), and read the
    class token out through two projection heads (cross-modal and MoCo),
  * point branch: an independent mask of the same grouping, decode the
    masked groups as points, compare them to the originals with Chamfer
    distance, render reconstruction and target from all rig poses for the
    rendering loss, and embed one seeded rendered view as the depth
    modality,
  * RGB branch: augment the stored image and embed it,
  * a second augmented view passes through the momentum copy of the encoder
    to produce MoCo keys.

The three pairwise InfoNCE terms, MoCo, cross-entropy, Chamfer, and the
rendering loss combine into the weighted total, followed by one AdamW step
with cosine-decayed learning rate, the momentum update of the key encoder,
and the queue update. Every random draw is keyed on (seed, step, object),
so runs are bit-reproducible and resumable from any checkpoint.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import backbone as bb
from . import losses as ls
from .autodiff import Tensor, concat, finite_differences, max_relative_error
from .backbone import Codebook, EncoderConfig, ImageEncoderConfig
from .data import RGB_SIZE, Triplet, augment_cloud, augment_rgb, encoder_points, resize_bilinear
from .errors import DomainError, FormatError
from .geometry import CameraPose, PointCloud, RenderConfig, generate_camera_poses, normalize_cloud
from .losses import LossWeights, MocoState
from .renderer import render_views, render_views_array
from .rng import stream

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RGB_JITTER_STRENGTH = 0.4
CODEBOOK_ITERATIONS = 10

METRIC_KEYS = ("step", "lr", "l_rd", "l_rp", "l_pd", "l_moco", "l_ce", "l_dr", "l_cd", "total")


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class MocoConfig:
    m: float = 0.999
    k: int = 1024
    tau: float = 0.07

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise DomainError("moco.m must lie in [0, 1]")
        if self.k < 1:
            raise DomainError("moco.k must be positive")
        if not self.tau > 0:
            raise DomainError("moco.tau must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    epochs: int = 50
    batch_size: int = 4
    warmup_steps: int = -1  # -1: 10% of the total step count
    mask_ratio: float = 0.6
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moco: MocoConfig = field(default_factory=MocoConfig)
    seed: int = 0
    groups: int = 64
    group_size: int = 32
    vocab: int = 64
    image_size: int = 224
    sample_points: int = 1024
    camera_radius: float = 2.0
    max_steps: int = 0  # 0: run epochs * ceil(N / batch) steps
    total_steps: int = 0  # filled in by `pretrain`; 0 keeps the lr constant
    checkpoint_keep: str = "all"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise DomainError("epochs and batch_size must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise DomainError("mask_ratio must lie in [0, 1)")
        if self.checkpoint_keep not in ("all", "last"):
            raise DomainError("checkpoint_keep must be 'all' or 'last'")
        if self.groups < 1 or self.group_size < 1 or self.vocab < 2:
            raise DomainError("groups, group_size must be positive and vocab >= 2")


def desk_config(**overrides) -> TrainConfig:
    """The small profile used by the acceptance run: 4 layers, dim 192,
    32^3 grid, 32x32 images."""
    base = dict(
        encoder=EncoderConfig(layers=4, dim=192, heads=3),
        render=RenderConfig(grid_depth=32, image_height=32, image_width=32),
        image_size=32,
        vocab=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


_NESTED_FIELDS = {
    "weights": LossWeights,
    "render": RenderConfig,
    "encoder": EncoderConfig,
    "moco": MocoConfig,
}


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from a (possibly partial) mapping; unknown keys fail."""
    base = base or TrainConfig()
    kwargs = {}
    valid = set(TrainConfig.__dataclass_fields__)
    for key, value in data.items():
        if key not in valid:
            raise DomainError(f"unknown config field: {key}")
        if key in _NESTED_FIELDS:
            cls = _NESTED_FIELDS[key]
            if not isinstance(value, dict):
                raise DomainError(f"config field {key} must be a table/object")
            sub_valid = set(cls.__dataclass_fields__)
            for sub in value:
                if sub not in sub_valid:
                    raise DomainError(f"unknown config field: {key}.{sub}")
            merged = {**asdict(getattr(base, key)), **value}
            kwargs[key] = cls(**merged)
        else:
            kwargs[key] = value
    merged_all = {**asdict(base), **kwargs}
    for key in _NESTED_FIELDS:
        if not isinstance(merged_all[key], _NESTED_FIELDS[key]):
            merged_all[key] = _NESTED_FIELDS[key](**merged_all[key])
    return TrainConfig(**merged_all)


# -- model/state construction -------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    step: int
    seed: int
    cfg: TrainConfig
    params: dict[str, Array]
    momentum_params: dict[str, Array]
    tokenizer_params: dict[str, Array]
    codebook: Codebook
    adam_m: dict[str, Array]
    adam_v: dict[str, Array]
    moco: MocoState


MOMENTUM_PREFIXES = ("embed.", "enc.", "moco_head.")


def _rgb_encoder_config(cfg: TrainConfig) -> ImageEncoderConfig:
    return ImageEncoderConfig(input_size=cfg.image_size, channels=3, dim=cfg.encoder.dim)


def _depth_encoder_config(cfg: TrainConfig) -> ImageEncoderConfig:
    return ImageEncoderConfig(
        input_size=cfg.render.image_height, channels=1, dim=cfg.encoder.dim
    )


def init_params(cfg: TrainConfig) -> dict[str, Array]:
    rng = stream(cfg.seed, "init")
    params: dict[str, Array] = {}
    params.update(bb.init_group_embedder(cfg.encoder.dim, rng, "embed"))
    params.update(bb.init_encoder(cfg.encoder, rng, "enc"))
    params.update(bb.init_token_decoder(cfg.encoder, cfg.vocab, rng, "tta"))
    params.update(bb.init_point_decoder(cfg.encoder, cfg.group_size, rng, "pta"))
    params.update(bb.init_projection_head(cfg.encoder.dim, rng, "point_head"))
    params.update(bb.init_projection_head(cfg.encoder.dim, rng, "moco_head"))
    params.update(bb.init_image_encoder(_rgb_encoder_config(cfg), rng, "img_rgb"))
    params.update(bb.init_image_encoder(_depth_encoder_config(cfg), rng, "img_depth"))
    params["contrast.log_tau"] = np.array(math.log(0.07))
    return params


def _momentum_subset(params: dict[str, Array]) -> dict[str, Array]:
    return {k: v.copy() for k, v in params.items() if k.startswith(MOMENTUM_PREFIXES)}


def _canonical_grouping(triplet: Triplet, cfg: TrainConfig, seed: int, tag: str):
    cloud = normalize_cloud(encoder_points(triplet, seed, cfg.sample_points))
    centers_idx = bb.fps(cloud, cfg.groups, stream(seed, tag, triplet.object_id).integers(2**62))
    return bb.knn_group(cloud, cloud.points[centers_idx], cfg.group_size)


def init_state(cfg: TrainConfig, dataset: Sequence[Triplet]) -> TrainState:
    """Initialize parameters, the frozen tokenizer, and the codebook."""
    if not dataset:
        raise DomainError("dataset must be nonempty")
    params = init_params(cfg)
    tokenizer = {k: v.copy() for k, v in params.items() if k.startswith("embed.")}
    feats = []
    for triplet in dataset:
        tokens = _canonical_grouping(triplet, cfg, cfg.seed, "fps_codebook")
        feats.append(bb.embed_groups(tokens, tokenizer))
    codebook = bb.fit_codebook(
        np.concatenate(feats), cfg.vocab, cfg.seed, iterations=CODEBOOK_ITERATIONS
    )
    dim = cfg.encoder.dim
    return TrainState(
        step=0,
        seed=cfg.seed,
        cfg=cfg,
        params=params,
        momentum_params=_momentum_subset(params),
        tokenizer_params=tokenizer,
        codebook=codebook,
        adam_m={k: np.zeros_like(v) for k, v in params.items()},
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        moco=MocoState.empty(cfg.moco.k, dim, momentum=cfg.moco.m, moco_tau=cfg.moco.tau),
    )


# -- learning rate schedule ------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup, then base_lr * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total_steps:
        raise DomainError(f"need 0 <= step <= total_steps, got {step}/{total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- pre-training step --------------------------------------------------------------------


def _downsample_rgb(image: Array, size: int) -> Array:
    if size == RGB_SIZE:
        return image
    if RGB_SIZE % size == 0:
        f = RGB_SIZE // size
        return image.reshape(size, f, size, f, 3).mean(axis=(1, 3))
    return resize_bilinear(image, size, size)


def _derive(seed: int, tag: str, step: int, object_id: str) -> int:
    return int(stream(seed, tag, step, object_id).integers(2**62))


def _normalization_stats(points: Array) -> tuple[Array, float]:
    center = points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(points - center, axis=1)))
    return center, max(radius, 1e-9)


def _momentum_keys(state: TrainState, centers2: Array, groups2: Array) -> Array:
    """MoCo keys from the second view through the momentum encoder (eval mode)."""
    kp = {k: Tensor.const(v) for k, v in state.momentum_params.items()}
    centers2 = centers2 - centers2.mean(axis=1, keepdims=True)
    tokens = bb.embed_groups_t(kp, Tensor.const(centers2), Tensor.const(groups2))
    x = bb.prepend_cls(tokens, kp)
    out = bb.encode_t(x, state.cfg.encoder, kp, mode="eval")
    return bb.project_head_t(kp, out[:, 0, :], "moco_head").data


def pretrain_step(
    batch: Sequence[Triplet], state: TrainState, cfg: TrainConfig | None = None
) -> tuple[TrainState, dict]:
    """One optimization step; returns the new state and the loss breakdown."""
    cfg = cfg or state.cfg
    if not batch:
        raise DomainError("batch must be nonempty")
    step, seed = state.step, state.seed
    enc_cfg = cfg.encoder
    n_masked = int(np.floor(cfg.mask_ratio * cfg.groups))
    if n_masked < 1:
        raise DomainError("mask_ratio too small: no groups would be masked")
    poses = generate_camera_poses(cfg.camera_radius)

    centers1, groups1, targets = [], [], []
    vis_t, mask_t, vis_p, mask_p = [], [], [], []
    centers2, groups2 = [], []
    rgb_in, depth_views = [], []
    for triplet in batch:
        oid = triplet.object_id
        base = normalize_cloud(encoder_points(triplet, seed, cfg.sample_points))
        view1 = augment_cloud(base, _derive(seed, "aug1", step, oid))
        view2 = augment_cloud(base, _derive(seed, "aug2", step, oid))
        c_idx = bb.fps(view1, cfg.groups, _derive(seed, "fps1", step, oid))
        tok1 = bb.knn_group(view1, view1.points[c_idx], cfg.group_size)
        c2_idx = bb.fps(view2, cfg.groups, _derive(seed, "fps2", step, oid))
        tok2 = bb.knn_group(view2, view2.points[c2_idx], cfg.group_size)
        v_t, m_t = bb.mask_tokens(cfg.groups, cfg.mask_ratio, _derive(seed, "mask_tta", step, oid))
        v_p, m_p = bb.mask_tokens(cfg.groups, cfg.mask_ratio, _derive(seed, "mask_pta", step, oid))
        feats = bb.embed_groups(tok1, state.tokenizer_params)
        targets.append(bb.tokenize(feats, state.codebook))
        centers1.append(tok1.centers)
        groups1.append(tok1.groups)
        centers2.append(tok2.centers)
        groups2.append(tok2.groups)
        vis_t.append(v_t)
        mask_t.append(m_t)
        vis_p.append(v_p)
        mask_p.append(m_p)
        rgb = augment_rgb(triplet.rgb, RGB_JITTER_STRENGTH, _derive(seed, "rgb", step, oid))
        rgb_in.append(_downsample_rgb(rgb, cfg.image_size))
        depth_views.append(triplet.depth_view_index)

    centers1 = np.stack(centers1)
    groups1 = np.stack(groups1)
    targets = np.stack(targets)
    vis_t, mask_t = np.stack(vis_t), np.stack(mask_t)
    vis_p, mask_p = np.stack(vis_p), np.stack(mask_p)
    rgb_batch = np.stack(rgb_in)

    # Positional inputs are centered on each view's mean group center, so the
    # trunk is exactly invariant to the translation augmentation; decoded
    # points are shifted back into the view frame below.
    offsets1 = centers1.mean(axis=1, keepdims=True)
    centers1_c = centers1 - offsets1

    tparams = {k: Tensor.leaf(v) for k, v in state.params.items()}
    tokens = bb.embed_groups_t(tparams, Tensor.const(centers1_c), Tensor.const(groups1))

    # Class-token embeddings come from an unmasked encode of the first view,
    # matching how objects are embedded after training.
    from .autodiff import gather_rows

    enc_full = bb.encode_t(
        bb.prepend_cls(tokens, tparams), enc_cfg, tparams,
        mode="train", seed=_derive(seed, "droppath_cls", step, "batch"),
    )
    cls_tokens = enc_full[:, 0, :]
    g_p = bb.project_head_t(tparams, cls_tokens, "point_head")
    moco_q = bb.project_head_t(tparams, cls_tokens, "moco_head")

    # Token branch: masked encode, discrete-token prediction.
    vis_tokens_t = gather_rows(tokens, vis_t)
    enc_t = bb.encode_t(
        bb.prepend_cls(vis_tokens_t, tparams), enc_cfg, tparams,
        mode="train", seed=_derive(seed, "droppath_tta", step, "batch"),
    )
    masked_centers_t = np.take_along_axis(centers1_c, mask_t[:, :, None], axis=1)
    logits = bb.decode_tokens_t(
        tparams, enc_t[:, 1:, :], Tensor.const(masked_centers_t), enc_cfg
    )
    masked_targets = np.take_along_axis(targets, mask_t, axis=1)
    l_ce = ls.token_ce_t(
        logits.reshape(logits.shape[0] * logits.shape[1], cfg.vocab),
        masked_targets.reshape(-1),
    )

    # Point branch: masked encode, point regression, rendering, depth views.
    vis_tokens_p = gather_rows(tokens, vis_p)
    enc_p = bb.encode_t(
        bb.prepend_cls(vis_tokens_p, tparams), enc_cfg, tparams,
        mode="train", seed=_derive(seed, "droppath_pta", step, "batch"),
    )
    masked_centers_p = np.take_along_axis(centers1_c, mask_p[:, :, None], axis=1)
    recon = bb.decode_points_t(
        tparams, enc_p[:, 1:, :], Tensor.const(masked_centers_p), enc_cfg, cfg.group_size
    ) + Tensor.const(offsets1)  # back into the (translated) view frame

    batch_size = len(batch)
    cd_terms, dr_terms, depth_images = [], [], []
    for b in range(batch_size):
        target_groups = groups1[b][mask_p[b]] + centers1[b][mask_p[b]][:, None, :]
        target_points = target_groups.reshape(-1, 3)
        recon_b = recon[b]
        cd_terms.append(ls.chamfer_t(recon_b, target_points, "l2"))
        center, radius = _normalization_stats(target_points)
        recon_n = (recon_b - Tensor.const(center)) * (1.0 / radius)
        rendered = render_views(recon_n, poses, cfg.render)
        gt_images = render_views_array((target_points - center) / radius, poses, cfg.render)
        dr_terms.append(ls.dr_loss_t(rendered, gt_images))
        h, w = cfg.render.image_height, cfg.render.image_width
        depth_images.append(rendered[depth_views[b]].reshape(1, h, w, 1))

    inv_b = 1.0 / batch_size
    l_cd = cd_terms[0] * inv_b
    l_dr = dr_terms[0] * inv_b
    for b in range(1, batch_size):
        l_cd = l_cd + cd_terms[b] * inv_b
        l_dr = l_dr + dr_terms[b] * inv_b

    g_d = bb.encode_image_t(
        tparams, concat(depth_images, axis=0), _depth_encoder_config(cfg), "img_depth"
    )
    g_r = bb.encode_image_t(
        tparams, Tensor.const(rgb_batch), _rgb_encoder_config(cfg), "img_rgb"
    )

    log_tau = tparams["contrast.log_tau"]
    l_rd = ls.cross_modal_nce_t(g_r, g_d, log_tau)
    l_rp = ls.cross_modal_nce_t(g_r, g_p, log_tau)
    l_pd = ls.cross_modal_nce_t(g_p, g_d, log_tau)

    keys = _momentum_keys(state, np.stack(centers2), np.stack(groups2))
    l_moco = ls.moco_loss_t(moco_q, keys, state.moco.queue, state.moco.moco_tau)

    parts = {
        "l_rd": l_rd, "l_rp": l_rp, "l_pd": l_pd,
        "l_moco": l_moco, "l_ce": l_ce, "l_dr": l_dr, "l_cd": l_cd,
    }
    for name, tensor in parts.items():
        if not np.isfinite(tensor.data):
            raise DomainError(f"loss component {name} is not finite at step {step}")

    w = cfg.weights
    total = (
        parts["l_rd"] * w.alpha + parts["l_rp"] * w.beta + parts["l_pd"] * w.theta
        + parts["l_moco"] + parts["l_ce"] + parts["l_dr"] + parts["l_cd"]
    )
    total.backward()

    lr = cosine_lr(step, cfg.total_steps, cfg.lr, cfg.warmup_steps) if cfg.total_steps \
        else cfg.lr
    new_params, new_m, new_v = _adamw_update(state, tparams, lr, cfg.weight_decay)
    momentum_params = bb.momentum_update(
        state.momentum_params,
        {k: new_params[k] for k in state.momentum_params},
        cfg.moco.m,
    )
    key_rows = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    moco = ls.moco_update(state.moco, ls.EmbeddingBatch(key_rows, "P"))

    new_state = TrainState(
        step=step + 1,
        seed=seed,
        cfg=state.cfg,
        params=new_params,
        momentum_params=momentum_params,
        tokenizer_params=state.tokenizer_params,
        codebook=state.codebook,
        adam_m=new_m,
        adam_v=new_v,
        moco=moco,
    )
    record = {"step": step, "lr": lr}
    record.update({k: float(v.data) for k, v in parts.items()})
    record["total"] = float(total.data)
    return new_state, record


def _adamw_update(state: TrainState, tparams: dict[str, Tensor], lr: float, weight_decay: float):
    """Decoupled AdamW; decay applies only to matrix/conv weights and is
    scaled by lr, so lr = 0 is an exact no-op."""
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, param in state.params.items():
        grad = tparams[name].grad
        if grad is None:
            grad = np.zeros_like(param)
        m = ADAM_BETA1 * state.adam_m[name] + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.adam_v[name] + (1.0 - ADAM_BETA2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        decay = param if (name.endswith(".w") and param.ndim >= 2) else 0.0
        new_params[name] = param - lr * update - lr * weight_decay * decay
        new_m[name] = m
        new_v[name] = v
    return new_params, new_m, new_v


# -- training loop --------------------------------------------------------------------------


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> list[int]:
    steps_per_epoch = math.ceil(n / batch_size)
    epoch = step // steps_per_epoch
    pos = step % steps_per_epoch
    perm = stream(seed, "shuffle", epoch).permutation(n)
    return [int(i) for i in perm[pos * batch_size : (pos + 1) * batch_size]]


def advance(
    dataset: Sequence[Triplet],
    state: TrainState,
    steps: int,
    on_record: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run `steps` more steps with the schedule implied by the state."""
    cfg = state.cfg
    for _ in range(steps):
        idx = _batch_indices(state.seed, state.step, len(dataset), cfg.batch_size)
        batch = [dataset[i] for i in idx]
        state, record = pretrain_step(batch, state, cfg)
        if on_record is not None:
            on_record(record)
    return state


def pretrain(
    dataset: Sequence[Triplet],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Full pre-training run with per-epoch checkpoints and a metrics log."""
    if not dataset:
        raise DomainError("dataset must be nonempty")
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps >= 0 else total // 10
    effective = replace(cfg, total_steps=total, warmup_steps=warmup)
    state = init_state(effective, dataset)
    metrics: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    metrics_fh = open(out_path / "metrics.jsonl", "w", encoding="utf-8") if out_path else None
    try:
        while state.step < total:
            def sink(record: dict) -> None:
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps({k: record[k] for k in METRIC_KEYS}) + "\n")
                if on_record is not None:
                    on_record(record)

            epoch = state.step // steps_per_epoch
            chunk = min(steps_per_epoch - state.step % steps_per_epoch, total - state.step)
            state = advance(dataset, state, chunk, on_record=sink)
            if out_path is not None:
                if cfg.checkpoint_keep == "all":
                    checkpoint_save(state, out_path / f"checkpoint_epoch_{epoch:03d}.drck")
                else:
                    checkpoint_save(state, out_path / "checkpoint_last.drck")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_path is not None:
        checkpoint_save(state, out_path / "checkpoint_final.drck")
    return state, metrics


# -- checkpoints ("DRCK") ----------------------------------------------------------------------

_CKPT_MAGIC = b"DRCK"
_CKPT_VERSION = 1
_DTYPE_CODES = {"<f8": 0, "<f4": 1, "<i8": 2, "|u1": 3}
_CODE_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "|u1"}


def _write_record(fh, name: str, array: Array) -> None:
    data = np.asarray(array)
    if data.ndim and not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)  # keeps 0-d arrays 0-d
    code = _DTYPE_CODES.get(data.dtype.str)
    if code is None:
        data = data.astype("<f8")
        code = 0
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BB", code, data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint")
    return buf


def _read_record(fh) -> tuple[str, Array]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
    dtype = np.dtype(_CODE_DTYPES[code])
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, dtype.itemsize * count)
    return name, np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    """Versioned binary dump of every tensor, the RNG root, and the queue."""
    records: list[tuple[str, Array]] = [
        ("meta.step", np.array(state.step, dtype="<i8")),
        ("meta.seed", np.array(state.seed, dtype="<i8")),
        ("meta.config", np.frombuffer(
            json.dumps(config_to_dict(state.cfg)).encode("utf-8"), dtype="|u1"
        ).copy()),
        ("codebook", state.codebook.codewords),
        ("queue", state.moco.queue),
    ]
    for group, tensors in (
        ("param", state.params),
        ("momentum", state.momentum_params),
        ("tokenizer", state.tokenizer_params),
        ("adam_m", state.adam_m),
        ("adam_v", state.adam_v),
    ):
        for name, value in tensors.items():
            records.append((f"{group}.{name}", value))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(records)))
        for name, value in records:
            _write_record(fh, name, value)


def checkpoint_load(path: str | Path) -> TrainState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        records = dict(_read_record(fh) for _ in range(count))
    try:
        cfg = config_from_dict(json.loads(records.pop("meta.config").tobytes().decode("utf-8")))
        step = int(records.pop("meta.step"))
        seed = int(records.pop("meta.seed"))
        codebook = Codebook(records.pop("codebook"))
        queue = records.pop("queue")
    except KeyError as exc:
        raise FormatError(f"{path}: missing record {exc}") from None
    groups: dict[str, dict[str, Array]] = {
        "param": {}, "momentum": {}, "tokenizer": {}, "adam_m": {}, "adam_v": {}
    }
    for name, value in records.items():
        prefix, _, rest = name.partition(".")
        if prefix not in groups:
            raise FormatError(f"{path}: unexpected record {name}")
        groups[prefix][rest] = value
    return TrainState(
        step=step,
        seed=seed,
        cfg=cfg,
        params=groups["param"],
        momentum_params=groups["momentum"],
        tokenizer_params=groups["tokenizer"],
        codebook=codebook,
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        moco=MocoState(queue, cfg.moco.k, momentum=cfg.moco.m, moco_tau=cfg.moco.tau),
    )


# -- evaluation-time embeddings --------------------------------------------------------------


def embed_cloud(state: TrainState, cloud: PointCloud) -> Array:
    """Unit-norm point embedding of a raw cloud (eval mode, no masking)."""
    cfg = state.cfg
    norm = normalize_cloud(cloud)
    if norm.count < cfg.sample_points:
        raise DomainError(f"cloud needs at least {cfg.sample_points} points")
    if norm.count > cfg.sample_points:
        idx = np.sort(
            stream(state.seed, "embed_subsample").choice(norm.count, cfg.sample_points, False)
        )
        norm = PointCloud(norm.points[idx])
    c_idx = bb.fps(norm, cfg.groups, int(stream(state.seed, "fps_eval").integers(2**62)))
    tokens = bb.knn_group(norm, norm.points[c_idx], cfg.group_size)
    p = {k: Tensor.const(v) for k, v in state.params.items()}
    centers = tokens.centers - tokens.centers.mean(axis=0)
    feats = bb.embed_groups_t(
        p, Tensor.const(centers[None]), Tensor.const(tokens.groups[None])
    )
    out = bb.encode_t(bb.prepend_cls(feats, p), cfg.encoder, p, mode="eval")
    return bb.project_head_t(p, out[:, 0, :], "point_head").data[0]


def embed_rgb(state: TrainState, rgb: Array) -> Array:
    cfg = state.cfg
    image = _downsample_rgb(np.asarray(rgb, dtype=np.float64), cfg.image_size)
    return bb.encode_image(state.params, image, _rgb_encoder_config(cfg), "img_rgb")


def embed_depth_view(state: TrainState, cloud: PointCloud, view_index: int) -> Array:
    """Render one rig view of the normalized cloud and embed it."""
    cfg = state.cfg
    poses = generate_camera_poses(cfg.camera_radius)
    if not 0 <= view_index < len(poses):
        raise DomainError(f"view index must lie in [0, {len(poses)})")
    image = render_views_array(normalize_cloud(cloud).points, [poses[view_index]], cfg.render)[0]
    return bb.encode_image(
        state.params, image[:, :, None], _depth_encoder_config(cfg), "img_depth"
    )


def embed_depth_mean(state: TrainState, cloud: PointCloud, view_step: int = 4) -> Array:
    """Depth embedding averaged over rig views, then re-normalized.

    Single views can be degenerate (a plane seen edge-on); the mean of the
    projected features is the stable object-level depth embedding.
    """
    cfg = state.cfg
    poses = generate_camera_poses(cfg.camera_radius)
    views = list(range(0, len(poses), view_step))
    images = render_views_array(
        normalize_cloud(cloud).points, [poses[v] for v in views], cfg.render
    )
    kp = {k: Tensor.const(v) for k, v in state.params.items()}
    out = bb.encode_image_t(
        kp, Tensor.const(images[:, :, :, None]), _depth_encoder_config(cfg), "img_depth"
    ).data
    mean = out.mean(axis=0)
    return mean / np.linalg.norm(mean)


def modal_alignment(state: TrainState, dataset: Sequence[Triplet]) -> dict[str, dict[str, float]]:
    """Mean cosine similarity of positive pairs vs. all negative pairs for
    the three modality pairs, over clean (un-augmented) triplets."""
    g_p = np.stack([embed_cloud(state, t.cloud) for t in dataset])
    g_r = np.stack([embed_rgb(state, t.rgb) for t in dataset])
    g_d = np.stack([embed_depth_mean(state, t.cloud) for t in dataset])
    out = {}
    for name, (a, b) in {"rp": (g_r, g_p), "rd": (g_r, g_d), "pd": (g_p, g_d)}.items():
        sims = a @ b.T
        n = sims.shape[0]
        pos = float(np.mean(np.diag(sims)))
        neg = float((sims.sum() - np.trace(sims)) / (n * (n - 1))) if n > 1 else 0.0
        out[name] = {"positive": pos, "negative": neg, "gap": pos - neg}
    return out


# -- finite difference harness -----------------------------------------------------------------


@dataclass(frozen=True)
class BlockResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass(frozen=True)
class CheckReport:
    op: str
    blocks: list[BlockResult]

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            status = "pass" if b.passed else "FAIL"
            out.append(f"[{status}] {self.op}/{b.name}: max_rel_err={b.max_rel_err:.3e} tol={b.tolerance:.1e}")
        return out


def _check_render(seed: int, h: float):
    """Rendering loss gradients on instances kept away from the non-smooth
    sets: the splat scale keeps 5-point sums below the clamp, and the target
    stack sits above every reachable depth so the L1 sign never flips. (The
    clamp and tie subgradient conventions have their own directed tests.)
    """
    rng = stream(seed, "fd_render")
    pts = rng.uniform(-0.6, 0.6, (5, 3))
    cfg = RenderConfig(grid_depth=16, image_height=8, image_width=8, splat_scale=0.18)
    poses = generate_camera_poses(2.0)[:4]
    target = render_views_array(rng.uniform(-0.6, 0.6, (5, 3)), poses, cfg) + 1.05
    upstream = rng.uniform(-1.0, 1.0, target.shape)

    def loss_dr(x: Array) -> float:
        return float(np.mean(np.abs(render_views_array(x, poses, cfg) - target)))

    def grad_dr(x: Array) -> Array:
        leaf = Tensor.leaf(x)
        ls.dr_loss_t(render_views(leaf, poses, cfg), target).backward()
        return leaf.grad

    def loss_w(x: Array) -> float:
        return float(np.mean(upstream * render_views_array(x, poses, cfg)))

    def grad_w(x: Array) -> Array:
        leaf = Tensor.leaf(x)
        (render_views(leaf, poses, cfg) * upstream).mean().backward()
        return leaf.grad

    return [("points_l_dr", loss_dr, grad_dr, pts), ("points_weighted", loss_w, grad_w, pts)]


def _check_dr_loss(seed: int, h: float):
    rng = stream(seed, "fd_dr")
    pred = rng.random((3, 5, 5))
    gt = rng.random((3, 5, 5))

    def loss(x):
        return float(np.mean(np.abs(x - gt)))

    def grad(x):
        leaf = Tensor.leaf(x)
        ls.dr_loss_t(leaf, gt).backward()
        return leaf.grad

    return [("pred", loss, grad, pred)]


def _check_chamfer(variant: str):
    def make(seed: int, h: float):
        rng = stream(seed, "fd_chamfer", variant)
        p = rng.uniform(-1, 1, (8, 3))
        q = rng.uniform(-1, 1, (9, 3))

        def loss(x):
            return ls.chamfer_t(Tensor.const(x), q, variant).item()

        def grad(x):
            leaf = Tensor.leaf(x)
            ls.chamfer_t(leaf, q, variant).backward()
            return leaf.grad

        return [("p", loss, grad, p)]

    return make


def _check_nce(seed: int, h: float):
    rng = stream(seed, "fd_nce")

    def unit(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    ga = unit(rng.normal(size=(5, 7)))
    gb = unit(rng.normal(size=(5, 7)))
    log_tau = np.array(math.log(0.2))

    def block(index):
        def loss(x):
            args = [ga, gb, log_tau]
            args[index] = x
            return ls.cross_modal_nce_t(
                Tensor.const(args[0]), Tensor.const(args[1]), Tensor.const(args[2])
            ).item()

        def grad(x):
            args = [Tensor.const(ga), Tensor.const(gb), Tensor.const(log_tau)]
            args[index] = Tensor.leaf(x)
            ls.cross_modal_nce_t(*args).backward()
            return args[index].grad

        return loss, grad

    la, ga_fn = block(0)
    lb, gb_fn = block(1)
    lt, gt_fn = block(2)
    return [("ga", la, ga_fn, ga), ("gb", lb, gb_fn, gb), ("log_tau", lt, gt_fn, log_tau)]


def _check_moco(seed: int, h: float):
    rng = stream(seed, "fd_moco")

    def unit(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    query = unit(rng.normal(size=(4, 6)))
    keys = unit(rng.normal(size=(4, 6)))
    queue = unit(rng.normal(size=(10, 6)))

    def loss(x):
        return ls.moco_loss_t(Tensor.const(x), keys, queue, 0.2).item()

    def grad(x):
        leaf = Tensor.leaf(x)
        ls.moco_loss_t(leaf, keys, queue, 0.2).backward()
        return leaf.grad

    return [("query", loss, grad, query)]


def _check_token_ce(seed: int, h: float):
    rng = stream(seed, "fd_token_ce")
    logits = rng.normal(size=(6, 8))
    targets = rng.integers(0, 8, size=6)

    def loss(x):
        return ls.token_ce_t(Tensor.const(x), targets).item()

    def grad(x):
        leaf = Tensor.leaf(x)
        ls.token_ce_t(leaf, targets).backward()
        return leaf.grad

    return [("logits", loss, grad, logits)]


CHECKS: dict[str, Callable] = {
    "render": _check_render,
    "dr_loss": _check_dr_loss,
    "chamfer_l1": _check_chamfer("l1"),
    "chamfer_l2": _check_chamfer("l2"),
    "cross_modal_nce": _check_nce,
    "moco_loss": _check_moco,
    "token_ce": _check_token_ce,
}


def finite_difference_check(
    op: str,
    seed: int = 0,
    h: float = 1e-4,
    tolerance: float = 1e-3,
    registry: dict[str, Callable] | None = None,
) -> CheckReport:
    """Compare an op's analytic gradient against central differences."""
    registry = registry if registry is not None else CHECKS
    if op not in registry:
        raise DomainError(f"no gradient check registered for {op!r}; have {sorted(registry)}")
    blocks = []
    for name, loss, grad, x0 in registry[op](seed, h):
        analytic = grad(x0.copy())
        numeric = finite_differences(loss, x0.copy(), h=h)
        blocks.append(BlockResult(name, max_relative_error(analytic, numeric), tolerance))
    return CheckReport(op=op, blocks=blocks)
