"""Training step, schedule, checkpoints, and the gradient-check harness."""

import json
from dataclasses import replace

import numpy as np
import pytest

from drpoint.backbone import EncoderConfig
from drpoint.data import build_synth_dataset
from drpoint.errors import DomainError, FormatError
from drpoint.geometry import RenderConfig
from drpoint.losses import LossWeights
from drpoint.trainer import (
    CHECKS,
    METRIC_KEYS,
    MocoConfig,
    TrainConfig,
    advance,
    checkpoint_load,
    checkpoint_save,
    config_from_dict,
    config_to_dict,
    cosine_lr,
    desk_config,
    embed_cloud,
    embed_depth_view,
    embed_rgb,
    finite_difference_check,
    init_state,
    modal_alignment,
    pretrain,
    pretrain_step,
)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        encoder=EncoderConfig(layers=2, dim=32, heads=2, ffn_ratio=2, droppath_rate=0.1),
        render=RenderConfig(grid_depth=8, image_height=16, image_width=16),
        image_size=28,
        groups=8,
        group_size=4,
        vocab=4,
        sample_points=64,
        batch_size=2,
        moco=MocoConfig(m=0.9, k=16, tau=0.07),
        epochs=1,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset():
    return build_synth_dataset(4, seed=1)


# -- learning rate schedule -----------------------------------------------------------


def test_cosine_lr_paper_base_value():
    assert cosine_lr(0, 1000, 5e-4) == pytest.approx(5e-4)


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(1000, 1000, 5e-4) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(500, 1000, 5e-4) == pytest.approx(2.5e-4)


def test_cosine_lr_warmup_is_linear():
    lrs = [cosine_lr(s, 100, 1e-3, warmup_steps=10) for s in range(10)]
    assert lrs[0] == pytest.approx(1e-4)
    assert lrs[-1] == pytest.approx(1e-3)
    diffs = np.diff(lrs)
    assert np.allclose(diffs, diffs[0])


def test_cosine_lr_bounds_checked():
    with pytest.raises(DomainError):
        cosine_lr(11, 10, 1e-3)
    with pytest.raises(DomainError):
        cosine_lr(-1, 10, 1e-3)


# -- configuration -----------------------------------------------------------------------


def test_train_config_paper_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 5e-4
    assert cfg.weight_decay == 0.05
    assert cfg.epochs == 50
    assert cfg.batch_size == 4
    assert cfg.encoder == EncoderConfig(layers=12, dim=384, heads=6)
    assert cfg.weights == LossWeights(0.1, 0.1, 0.1)
    assert cfg.moco.k == 1024 and cfg.moco.m == 0.999 and cfg.moco.tau == 0.07
    assert cfg.groups == 64 and cfg.group_size == 32
    assert cfg.image_size == 224 and cfg.sample_points == 1024


def test_desk_profile_matches_acceptance_requirements():
    cfg = desk_config()
    assert cfg.encoder.layers == 4 and cfg.encoder.dim == 192 and cfg.encoder.heads == 3
    assert (cfg.render.grid_depth, cfg.render.image_height, cfg.render.image_width) == (32, 32, 32)
    assert cfg.image_size == 32
    assert cfg.batch_size == 4


def test_config_round_trip_and_strictness():
    cfg = tiny_config()
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg
    with pytest.raises(DomainError, match="unknown config field: nope"):
        config_from_dict({"nope": 1})
    with pytest.raises(DomainError, match="unknown config field: render.foo"):
        config_from_dict({"render": {"foo": 2}})
    partial = config_from_dict({"lr": 1e-3, "encoder": {"layers": 3}})
    assert partial.lr == 1e-3
    assert partial.encoder.layers == 3
    assert partial.encoder.dim == 384  # untouched nested defaults survive


# -- one step ----------------------------------------------------------------------------------


def test_pretrain_step_contract(tiny_dataset):
    cfg = tiny_config(total_steps=10, warmup_steps=1)
    state = init_state(cfg, tiny_dataset)
    new_state, record = pretrain_step(tiny_dataset[:2], state, cfg)
    assert set(record) == set(METRIC_KEYS)
    assert all(np.isfinite(record[k]) for k in METRIC_KEYS)
    assert record["step"] == 0 and new_state.step == 1
    expected_total = (
        0.1 * (record["l_rd"] + record["l_rp"] + record["l_pd"])
        + record["l_moco"] + record["l_ce"] + record["l_dr"] + record["l_cd"]
    )
    assert record["total"] == pytest.approx(expected_total, rel=1e-12)


def test_pretrain_step_zero_lr_is_noop(tiny_dataset):
    cfg = tiny_config(lr=0.0, weight_decay=0.05)
    state = init_state(cfg, tiny_dataset)
    new_state, _ = pretrain_step(tiny_dataset[:2], state, cfg)
    for name, value in state.params.items():
        assert np.array_equal(new_state.params[name], value), name


def test_pretrain_step_deterministic(tiny_dataset):
    cfg = tiny_config(total_steps=5)
    records = []
    for _ in range(2):
        state = init_state(cfg, tiny_dataset)
        state, rec1 = pretrain_step(tiny_dataset[:2], state, cfg)
        state, rec2 = pretrain_step(tiny_dataset[2:], state, cfg)
        records.append((rec1, rec2))
    assert json.dumps(records[0]) == json.dumps(records[1])


def test_pretrain_step_rejects_empty_batch(tiny_dataset):
    cfg = tiny_config()
    state = init_state(cfg, tiny_dataset)
    with pytest.raises(DomainError):
        pretrain_step([], state, cfg)


def test_moco_queue_grows_fifo(tiny_dataset):
    cfg = tiny_config(moco=MocoConfig(m=0.9, k=3, tau=0.07))
    state = init_state(cfg, tiny_dataset)
    assert state.moco.queue.shape == (0, cfg.encoder.dim)
    state, _ = pretrain_step(tiny_dataset[:2], state, cfg)
    assert state.moco.queue.shape == (2, cfg.encoder.dim)
    state, _ = pretrain_step(tiny_dataset[:2], state, cfg)
    assert state.moco.queue.shape == (3, cfg.encoder.dim)  # capped at capacity


def test_momentum_encoder_moves_toward_query(tiny_dataset):
    cfg = tiny_config(moco=MocoConfig(m=0.5, k=8, tau=0.07))
    state = init_state(cfg, tiny_dataset)
    name = "enc.L0.qkv.w"
    assert np.array_equal(state.momentum_params[name], state.params[name])
    new_state, _ = pretrain_step(tiny_dataset[:2], state, cfg)
    expected = 0.5 * state.momentum_params[name] + 0.5 * new_state.params[name]
    assert np.allclose(new_state.momentum_params[name], expected)


# -- the loop -----------------------------------------------------------------------------------


def test_pretrain_step_count_and_metrics_stream(tiny_dataset, tmp_path):
    cfg = tiny_config(epochs=2)  # 4 objects, batch 2 -> 2 steps/epoch
    state, metrics = pretrain(tiny_dataset, cfg, out_dir=tmp_path / "run")
    assert len(metrics) == 4
    assert [m["step"] for m in metrics] == [0, 1, 2, 3]
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert all(set(json.loads(l)) == set(METRIC_KEYS) for l in lines)
    assert (tmp_path / "run" / "checkpoint_epoch_000.drck").exists()
    assert (tmp_path / "run" / "checkpoint_epoch_001.drck").exists()
    assert (tmp_path / "run" / "checkpoint_final.drck").exists()


def test_pretrain_max_steps_and_keep_last(tiny_dataset, tmp_path):
    cfg = tiny_config(epochs=50, max_steps=3, checkpoint_keep="last")
    state, metrics = pretrain(tiny_dataset, cfg, out_dir=tmp_path / "run")
    assert state.step == 3 and len(metrics) == 3
    names = {p.name for p in (tmp_path / "run").glob("*.drck")}
    assert names == {"checkpoint_last.drck", "checkpoint_final.drck"}


def test_pretrain_epoch_batches_cover_dataset(tiny_dataset):
    cfg = tiny_config(epochs=1)
    state, metrics = pretrain(tiny_dataset, cfg)
    assert state.step == 2  # ceil(4 / 2)


# -- checkpoints ----------------------------------------------------------------------------------


def states_equal(a, b) -> bool:
    if a.step != b.step or a.seed != b.seed or a.cfg != b.cfg:
        return False
    for group in ("params", "momentum_params", "tokenizer_params", "adam_m", "adam_v"):
        da, db = getattr(a, group), getattr(b, group)
        if set(da) != set(db) or any(not np.array_equal(da[k], db[k]) for k in da):
            return False
    return (
        np.array_equal(a.codebook.codewords, b.codebook.codewords)
        and np.array_equal(a.moco.queue, b.moco.queue)
    )


def test_checkpoint_round_trip_bit_exact(tiny_dataset, tmp_path):
    cfg = tiny_config(total_steps=8, warmup_steps=0)
    state = init_state(cfg, tiny_dataset)
    state = advance(tiny_dataset, state, 2)
    path = tmp_path / "state.drck"
    checkpoint_save(state, path)
    loaded = checkpoint_load(path)
    assert states_equal(state, loaded)


def test_checkpoint_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    cfg = tiny_config(total_steps=8, warmup_steps=2)
    straight = advance(tiny_dataset, init_state(cfg, tiny_dataset), 6)
    resumed = advance(tiny_dataset, init_state(cfg, tiny_dataset), 3)
    path = tmp_path / "mid.drck"
    checkpoint_save(resumed, path)
    resumed = advance(tiny_dataset, checkpoint_load(path), 3)
    assert states_equal(straight, resumed)


def test_checkpoint_errors(tiny_dataset, tmp_path):
    cfg = tiny_config()
    state = init_state(cfg, tiny_dataset)
    path = tmp_path / "ok.drck"
    checkpoint_save(state, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.drck"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint_load(bad_magic)

    bad_version = tmp_path / "version.drck"
    bad_version.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="version"):
        checkpoint_load(bad_version)

    truncated = tmp_path / "trunc.drck"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint_load(truncated)


# -- embeddings and alignment -------------------------------------------------------------------------


def test_embeddings_unit_norm(tiny_dataset):
    cfg = tiny_config()
    state = init_state(cfg, tiny_dataset)
    trip = tiny_dataset[0]
    g_p = embed_cloud(state, trip.cloud)
    g_r = embed_rgb(state, trip.rgb)
    g_d = embed_depth_view(state, trip.cloud, trip.depth_view_index)
    for g in (g_p, g_r, g_d):
        assert g.shape == (cfg.encoder.dim,)
        assert abs(np.linalg.norm(g) - 1.0) < 1e-6


def test_modal_alignment_report_shape(tiny_dataset):
    cfg = tiny_config()
    state = init_state(cfg, tiny_dataset)
    report = modal_alignment(state, tiny_dataset)
    assert set(report) == {"rp", "rd", "pd"}
    for pair in report.values():
        assert set(pair) == {"positive", "negative", "gap"}
        assert all(np.isfinite(v) for v in pair.values())


# -- gradient check harness -----------------------------------------------------------------------------


def test_finite_difference_check_registry_passes():
    for op in ("dr_loss", "chamfer_l1", "token_ce"):
        report = finite_difference_check(op, seed=0)
        assert report.passed, report.lines()


def test_finite_difference_check_negative_control():
    def corrupted(seed, h):
        (name, loss, grad, x0), = CHECKS["dr_loss"](seed, h)
        return [(name, loss, lambda x: -grad(x), x0)]  # sign flip must fail

    report = finite_difference_check("dr_loss", seed=0, registry={"dr_loss": corrupted})
    assert not report.passed


def test_finite_difference_check_unknown_op():
    with pytest.raises(DomainError):
        finite_difference_check("not_an_op")


def test_check_report_lines_format():
    report = finite_difference_check("token_ce", seed=1)
    lines = report.lines()
    assert len(lines) == 1 and "token_ce" in lines[0] and "pass" in lines[0]
