"""Composed-field model tests.

The load-bearing property: with freshly initialized heads the pipeline
must reproduce the frozen template exactly, because both head output
layers start at zero. Everything else (shapes, checkpoints, config
round trips) is plumbing that has to stay byte-stable.
"""

import numpy as np
import pytest

from segfield.model import (
    Encoder,
    EncoderConfig,
    HeadConfig,
    Pipeline,
    PipelineConfig,
    TemplateConfig,
    TemplateNet,
    load_pipeline,
    load_template,
    point_encoding,
    save_pipeline,
    save_template,
)
from segfield.nn import CheckpointError, Tensor
from segfield.train import grid_points
from segfield.volume import GridDims, sample_grid


def small_config(num_classes=3, in_channels=2):
    return PipelineConfig(
        encoder=EncoderConfig(in_channels=in_channels, channels=(4, 6)),
        template=TemplateConfig(
            num_classes=num_classes, latent_dim=6, resolution=8, channels=(4, 4), seed_side=4
        ),
        deform=HeadConfig(hidden=(8,)),
        correct=HeadConfig(hidden=(8,)),
    )


def small_pipeline(seed=0, num_classes=3):
    rng = np.random.default_rng(seed)
    cfg = small_config(num_classes=num_classes)
    grid = rng.normal(size=(num_classes, 8, 8, 8))
    return Pipeline(cfg, grid, rng), grid


def test_feature_length_accounts_for_raw_coords():
    cfg = small_config()
    assert cfg.feature_length == 4 + 6 + 3
    big = PipelineConfig(
        encoder=EncoderConfig(in_channels=4, channels=(16, 32, 64, 128)),
        template=TemplateConfig(num_classes=5),
    )
    assert big.feature_length == 243
    small = PipelineConfig(
        encoder=EncoderConfig(in_channels=4, channels=(8, 16, 32, 64)),
        template=TemplateConfig(num_classes=5),
    )
    assert small.feature_length == 123


def test_template_config_rejects_inconsistent_upsampling():
    with pytest.raises(ValueError):
        TemplateConfig(num_classes=3, latent_dim=8, resolution=32, channels=(4, 4), seed_side=4)


def test_full_scale_template_config_is_expressible():
    # 4 * 2**5 = 128, so a six-stage decoder reaches 128^3 from a 4^3 seed
    cfg = TemplateConfig(
        num_classes=19,
        latent_dim=1024,
        resolution=128,
        channels=(64, 48, 32, 24, 16, 16),
        seed_side=4,
    )
    assert cfg.resolution == 128


def test_encoder_level_shapes_halve_after_first_stage():
    rng = np.random.default_rng(3)
    enc = Encoder(EncoderConfig(in_channels=2, channels=(4, 6, 7)), rng)
    levels = enc.forward(Tensor(rng.normal(size=(2, 8, 8, 8))))
    assert [lv.shape for lv in levels] == [(4, 8, 8, 8), (6, 4, 4, 4), (7, 2, 2, 2)]


def test_template_generate_shape_and_determinism():
    cfg = TemplateConfig(num_classes=4, latent_dim=8, resolution=16, channels=(6, 5), seed_side=8)
    net = TemplateNet(cfg, np.random.default_rng(1))
    g1 = net.grid()
    g2 = net.grid()
    assert g1.shape == (4, 16, 16, 16)
    assert np.array_equal(g1, g2)


def test_point_encoding_width():
    rng = np.random.default_rng(5)
    levels = [Tensor(rng.normal(size=(4, 6, 6, 6))), Tensor(rng.normal(size=(6, 3, 3, 3)))]
    coords = Tensor(rng.uniform(-1, 1, size=(17, 3)))
    enc = point_encoding(levels, coords)
    assert enc.shape == (17, 4 + 6 + 3)
    # last three columns are the untouched coordinates
    assert np.array_equal(enc.data[:, -3:], coords.data)


def test_fresh_pipeline_is_exactly_the_template_at_centers():
    pipe, grid = small_pipeline(seed=7)
    pts = grid_points(GridDims(8, 8, 8))
    vol = np.random.default_rng(11).normal(size=(2, 8, 8, 8))
    logits, disp = pipe.forward_points(pipe.encode_volume(vol), pts)
    assert np.all(disp.data == 0.0)
    # voxel centers snap onto grid nodes, so trilinear returns stored
    # logits bit for bit and the zero correction changes nothing
    expected = grid.reshape(3, -1).T
    assert np.array_equal(logits.data, expected)


def test_fresh_pipeline_ignores_input_content():
    pipe, _ = small_pipeline(seed=8)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(50, 3))
    a = pipe.forward_points(pipe.encode_volume(rng.normal(size=(2, 8, 8, 8))), pts)[0]
    b = pipe.forward_points(pipe.encode_volume(rng.normal(size=(2, 8, 8, 8))), pts)[0]
    assert np.array_equal(a.data, b.data)


def test_fresh_pipeline_at_double_resolution_is_direct_trilinear():
    pipe, grid = small_pipeline(seed=9)
    pts = grid_points(GridDims(16, 16, 16))
    vol = np.random.default_rng(0).normal(size=(2, 8, 8, 8))
    logits, _ = pipe.forward_points(pipe.encode_volume(vol), pts)
    assert np.array_equal(logits.data, sample_grid(grid, pts))


def test_displacement_is_bounded_by_the_squashing():
    pipe, _ = small_pipeline(seed=10)
    vol = np.random.default_rng(1).normal(size=(2, 8, 8, 8))
    pts = np.random.default_rng(2).uniform(-1, 1, size=(40, 3))
    for p in pipe.deform.params:
        p.data = np.full_like(p.data, 0.3)
    _, disp = pipe.forward_points(pipe.encode_volume(vol), pts)
    assert np.all(np.abs(disp.data) < 1.0)
    assert np.any(disp.data != 0.0)
    # saturated weights: float64 tanh rounds to exactly one, never beyond
    for p in pipe.deform.params:
        p.data = np.full_like(p.data, 37.0)
    _, disp = pipe.forward_points(pipe.encode_volume(vol), pts)
    assert np.all(np.abs(disp.data) <= 1.0)


def test_pipeline_checkpoint_round_trip(tmp_path):
    pipe, _ = small_pipeline(seed=12)
    rng = np.random.default_rng(13)
    for p in pipe.parameters():  # make the heads non-silent first
        p.data = rng.normal(size=p.data.shape)
    path = tmp_path / "pipe.snn"
    save_pipeline(path, pipe)
    back = load_pipeline(path)
    assert back.config == pipe.config
    assert np.array_equal(back.template_grid, pipe.template_grid)
    for a, b in zip(pipe.parameters(), back.parameters()):
        assert a.name == b.name
        assert a.data.tobytes() == b.data.tobytes()
    pts = rng.uniform(-1, 1, size=(31, 3))
    vol = rng.normal(size=(2, 8, 8, 8))
    l1, d1 = pipe.forward_points(pipe.encode_volume(vol), pts)
    l2, d2 = back.forward_points(back.encode_volume(vol), pts)
    assert np.array_equal(l1.data, l2.data)
    assert np.array_equal(d1.data, d2.data)


def test_template_checkpoint_round_trip(tmp_path):
    cfg = TemplateConfig(num_classes=3, latent_dim=5, resolution=8, channels=(4, 4), seed_side=4)
    net = TemplateNet(cfg, np.random.default_rng(21))
    path = tmp_path / "tmpl.snn"
    save_template(path, net)
    back = load_template(path)
    assert back.config == cfg
    assert np.array_equal(back.grid(), net.grid())


def test_checkpoint_kind_is_enforced(tmp_path):
    cfg = TemplateConfig(num_classes=3, latent_dim=5, resolution=8, channels=(4, 4), seed_side=4)
    net = TemplateNet(cfg, np.random.default_rng(1))
    tpath = tmp_path / "t.snn"
    save_template(tpath, net)
    with pytest.raises(CheckpointError):
        load_pipeline(tpath)
    pipe, _ = small_pipeline()
    ppath = tmp_path / "p.snn"
    save_pipeline(ppath, pipe)
    with pytest.raises(CheckpointError):
        load_template(ppath)


def test_pipeline_rejects_mismatched_template_grid():
    cfg = small_config(num_classes=3)
    with pytest.raises(ValueError):
        Pipeline(cfg, np.zeros((4, 8, 8, 8)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        Pipeline(cfg, np.zeros((3, 9, 9, 9)), np.random.default_rng(0))


def test_config_json_round_trip():
    cfg = small_config(num_classes=5, in_channels=4)
    assert PipelineConfig.from_json(cfg.to_json()) == cfg
