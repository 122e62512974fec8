"""Model assembly: config algebra, shapes, residual identity, checkpoints, counts."""

import json

import numpy as np
import pytest

from fdcheck import check_module_grads
from igmamba import network
from igmamba import tensor as T
from igmamba.errors import (
    CompatibilityError,
    ConfigError,
    MagicError,
    TruncationError,
    VersionError,
)
from igmamba.network import Model, ModelConfig
from igmamba.tensor import Tensor


def mini_config(**overrides):
    base = dict(
        patch_size=5,
        pca_dim=8,
        embed_dim=8,
        num_stages=2,
        ssm_state=4,
        num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build(config=None, seed=0, dtype=np.float32):
    config = config or mini_config()
    return Model(config, np.random.default_rng(seed), dtype=dtype)


def patches(config, batch=2, seed=0):
    r = np.random.default_rng(seed)
    return Tensor(r.random((batch, config.patch_size, config.patch_size, config.pca_dim)))


# -- config ------------------------------------------------------------------


def test_default_config_matches_reported_setup():
    cfg = ModelConfig()
    assert (cfg.patch_size, cfg.pca_dim, cfg.embed_dim) == (13, 30, 32)
    assert (cfg.num_stages, cfg.downsample_m, cfg.downsample_s) == (3, 2, 1)
    assert (cfg.ssm_state, cfg.expand, cfg.num_classes) == (16, 1, 16)
    assert cfg.spatial_trace() == [13, 12, 11]


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=12).validate()  # even
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=30).validate()  # not divisible by 4
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=5, num_stages=3, downsample_m=2, downsample_s=2).validate()
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=3, num_stages=3).validate()  # trace hits < 2
    with pytest.raises(ConfigError):
        ModelConfig(grouping_mode="other").validate()
    with pytest.raises(ConfigError):
        ModelConfig(operator_mode="both").validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1).validate()


def test_config_json_roundtrip_and_hash():
    cfg = mini_config()
    back = ModelConfig.from_dict(json.loads(cfg.canonical_json()))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert cfg.config_hash() != ModelConfig().config_hash()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"patch_size": 13, "bogus": 1})


# -- forward -----------------------------------------------------------------


def test_forward_shapes_and_stage_trace():
    cfg = mini_config()
    model = build(cfg)
    x = patches(cfg)
    logits = model(x)
    assert logits.shape == (2, cfg.num_classes)

    f = model.embed(x)
    trace = []
    for stage in model.stages:
        if stage.down is not None:
            f = stage.down(f)
        for block in stage.blocks:
            f = block(f)
        trace.append(f.shape[1])
    assert trace == cfg.spatial_trace() == [5, 4]
    assert f.shape[-1] == cfg.embed_dim


def test_logits_finite_on_unit_inputs():
    T.set_debug_checks(True)
    try:
        cfg = mini_config()
        logits = build(cfg)(patches(cfg, batch=3, seed=9))
        assert np.all(np.isfinite(logits.data))
    finally:
        T.set_debug_checks(False)


def test_identical_patches_get_identical_logits():
    cfg = mini_config()
    model = build(cfg)
    one = patches(cfg, batch=1, seed=4)
    pair = Tensor(np.concatenate([one.data, one.data], axis=0))
    logits = model(pair).data
    assert np.array_equal(logits[0], logits[1])


def test_wrong_patch_geometry_rejected():
    cfg = mini_config()
    model = build(cfg)
    with pytest.raises(ConfigError):
        model(Tensor(np.zeros((1, 5, 5, 9))))


def test_spatial_permutation_sensitivity_vs_head_invariance():
    cfg = mini_config()
    model = build(cfg)
    x = patches(cfg, batch=1, seed=2)
    permuted = x.data.copy().reshape(1, -1, cfg.pca_dim)
    permuted = permuted[:, ::-1, :].reshape(x.data.shape)
    assert not np.allclose(model(x).data, model(Tensor(permuted)).data)

    f = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4, cfg.embed_dim)))
    swapped = Tensor(np.ascontiguousarray(f.data[:, ::-1, ::-1, :]))
    assert np.allclose(model.classify(f).data, model.classify(swapped).data, atol=1e-12)


def test_residual_identity_when_projections_zeroed():
    cfg = mini_config()
    model = build(cfg, seed=8)
    for stage in model.stages:
        for block in stage.blocks:
            for op in (block.spa, block.spe):
                op.out.w.data[:] = 0.0
                op.out.b.data[:] = 0.0
            block.ffn.fc2.w.data[:] = 0.0
            block.ffn.fc2.b.data[:] = 0.0
    x = patches(cfg, seed=6)
    full = model(x).data

    f = model.embed(x)
    for stage in model.stages:
        if stage.down is not None:
            f = stage.down(f)
    expected = model.classify(f).data
    assert np.array_equal(full, expected)


# -- parameters and counting -------------------------------------------------


def test_parameter_names_unique_and_structured():
    model = build()
    params = model.parameters()
    names = [p.name for p in params]
    assert len(names) == len(set(names))
    assert "embed.conv.w" in names
    assert "stage1.igssb.spa.igsm.g0.a_log" in names
    assert "stage2.down.fc.w" in names
    assert "head.fc2.b" in names
    assert all(p.tensor.requires_grad for p in params)
    buffer_names = [n for n, _ in model.named_buffers()]
    assert buffer_names == ["embed.bn.running_mean", "embed.bn.running_var"]


def test_default_param_count_in_reported_band():
    model = Model(ModelConfig(), np.random.default_rng(0))
    count = network.count_params(model)
    assert 40_000 <= count <= 80_000


def test_param_count_scaling_and_modes():
    base = network.count_params(build(mini_config()))
    doubled = network.count_params(build(mini_config(embed_dim=16)))
    assert doubled > 2 * base  # quadratic terms present
    spatial = network.count_params(build(mini_config(operator_mode="spatial_only")))
    assert spatial < base


def test_single_linear_count_formula():
    from igmamba import layers

    fc = layers.Linear(5, 7, np.random.default_rng(0))
    total = sum(t.data.size for _, t in fc.named_parameters("fc"))
    assert total == 5 * 7 + 7


def test_flop_counter_grouping_comparison():
    cfg = ModelConfig()
    grouped = network.count_flops(cfg)
    ungrouped = network.count_flops(cfg, grouping="all")
    assert grouped < ungrouped
    proj_ratio = network.scan_projection_flops(cfg) / network.scan_projection_flops(cfg, "all")
    assert proj_ratio <= 0.30
    assert network.count_flops(mini_config(embed_dim=16)) > network.count_flops(mini_config())


def test_flop_breakdown_structure():
    breakdown = network.flop_breakdown(ModelConfig())
    assert "embed.conv" in breakdown
    assert "stage1.spa.igsm.scan_proj" in breakdown
    assert "stage3.spe.igsm.scan_recur" in breakdown
    assert all(v > 0 for v in breakdown.values())
    spectral_only = network.flop_breakdown(ModelConfig(operator_mode="spectral_only"))
    assert not any(".spa." in key for key in spectral_only)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = mini_config()
    model = build(cfg, seed=5)
    model(patches(cfg), training=True)  # move running stats off their init
    first = tmp_path / "model.ckpt"
    network.save_checkpoint(model, first)

    loaded = network.load_checkpoint(first)
    assert loaded.config == cfg
    second = tmp_path / "again.ckpt"
    network.save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()

    x = patches(cfg, seed=12)
    assert np.array_equal(model(x).data, loaded(x).data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    network.save_checkpoint(build(), path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(MagicError):
        network.load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "m.ckpt"
    network.save_checkpoint(build(), path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        network.load_checkpoint(path)


def test_checkpoint_truncation_reports_offset(tmp_path):
    path = tmp_path / "m.ckpt"
    network.save_checkpoint(build(), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 10])
    with pytest.raises(TruncationError) as err:
        network.load_checkpoint(path)
    assert "byte offset" in str(err.value)


def test_checkpoint_entry_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    network.save_checkpoint(build(), path)
    blob = path.read_bytes()
    assert blob.count(b"head.fc1.w") == 1
    path.write_bytes(blob.replace(b"head.fc1.w", b"head.fcX.w"))
    with pytest.raises(CompatibilityError):
        network.load_checkpoint(path)


# -- gradients through a whole block -----------------------------------------


def test_igssb_block_grads_match_fd():
    cfg = mini_config(ssm_state=4)
    rng = np.random.default_rng(41)
    block = network.IgssbBlock(8, cfg, p=4, rng=rng, dtype=np.float64)
    f = Tensor(rng.uniform(-1, 1, size=(1, 4, 4, 8)), requires_grad=True)

    def loss_fn():
        return T.reduce_sum(T.silu(block(f)))

    named = [("input", f)] + list(block.named_parameters("block"))
    check_module_grads(loss_fn, named, tol=1e-3)


def test_all_zero_final_layers_make_block_identity():
    cfg = mini_config()
    block = network.IgssbBlock(8, cfg, p=3, rng=np.random.default_rng(1), dtype=np.float64)
    for op in (block.spa, block.spe):
        op.out.w.data[:] = 0.0
        op.out.b.data[:] = 0.0
    block.ffn.fc2.w.data[:] = 0.0
    block.ffn.fc2.b.data[:] = 0.0
    f = Tensor(np.random.default_rng(2).normal(size=(2, 3, 3, 8)))
    assert np.array_equal(block(f).data, f.data)


def test_operator_mode_drops_branches():
    cfg = mini_config(operator_mode="spatial_only")
    block = network.IgssbBlock(8, cfg, p=3, rng=np.random.default_rng(1), dtype=np.float64)
    assert block.spa is not None and block.spe is None
    cfg = mini_config(operator_mode="spectral_only")
    block = network.IgssbBlock(8, cfg, p=3, rng=np.random.default_rng(1), dtype=np.float64)
    assert block.spa is None and block.spe is not None
