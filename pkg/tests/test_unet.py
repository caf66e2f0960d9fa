#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import numpy as np
import pytest

import gridnet as gn
from errors import ShapeError
from gridnet import Tensor
from unet import UNetConfig, build_unet, downsample_nearest, load_model, save_model


def _cbr(c_in, c_out):
    """3³ 卷积（含偏置）+ BN 的 γ、β"""
    return c_out * c_in * 27 + c_out + 2 * c_out


def _up(c_in, c_out):
    return c_in * c_out * 27 + c_out


def test_parameter_count_matches_recipe():
    cfg = UNetConfig(in_channels=7, out_channels=15, levels=3, base_features=32)
    expected = (
        _cbr(7, 32) + _cbr(32, 32) + _cbr(32, 64) + _cbr(64, 64) + _cbr(64, 128) + _cbr(128, 128)
        + _up(128, 128) + _cbr(256, 128) + _cbr(128, 128)
        + _up(128, 64) + _cbr(128, 64) + _cbr(64, 64)
        + _up(64, 32) + _cbr(64, 32) + _cbr(32, 32)
        + 32 * 15 + 15
    )
    assert build_unet(cfg, np.random.default_rng(0)).parameter_count() == expected


def test_smallest_net_runs():
    model = build_unet(UNetConfig(in_channels=1, out_channels=2, levels=1, base_features=1), np.random.default_rng(0))
    out = model.forward(Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4))), training=True)
    assert out.logits.shape == (2, 4, 4, 4)
    assert out.aux == []


def test_same_seed_gives_identical_parameters():
    cfg = UNetConfig(in_channels=2, out_channels=3, levels=2, base_features=2)
    a = build_unet(cfg, np.random.default_rng(5)).state_arrays()
    b = build_unet(cfg, np.random.default_rng(5)).state_arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_deep_supervision_head_shapes():
    cfg = UNetConfig(in_channels=2, out_channels=3, levels=3, base_features=2, deep_supervision=True)
    model = build_unet(cfg, np.random.default_rng(0))
    out = model.forward(Tensor(np.zeros((2, 24, 24, 24))), training=False)
    assert out.logits.shape == (3, 24, 24, 24)
    assert [a.shape[1:] for a in out.aux] == [(12, 12, 12), (6, 6, 6), (3, 3, 3)]
    assert len(out.heads) == cfg.n_heads == 4


def test_indivisible_dims_are_rejected():
    model = build_unet(UNetConfig(in_channels=1, out_channels=2, levels=3, base_features=1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 7, 7, 7))))


def test_zero_parameters_give_background_everywhere():
    model = build_unet(UNetConfig(in_channels=1, out_channels=3, levels=2, base_features=2), np.random.default_rng(0))
    for t in model.parameters().values():
        t.data[...] = 0
    out = model.forward(Tensor(np.random.default_rng(2).normal(size=(1, 8, 8, 8))), training=False)
    assert np.all(out.logits.data == out.logits.data[0])
    assert np.all(np.argmax(out.logits.data, axis=0) == 0)


def test_dice_gradient_through_three_levels(f64):
    rng = np.random.default_rng(3)
    model = build_unet(UNetConfig(in_channels=2, out_channels=3, levels=3, base_features=2), rng)
    x = Tensor(rng.normal(size=(2, 8, 8, 8)))
    labels = rng.integers(0, 3, size=(8, 8, 8))
    onehot = (labels[None] == np.arange(3).reshape(-1, 1, 1, 1)).astype(np.float64)
    params = model.parameters()
    checked = {k: params[k] for k in ('enc0.conv0.weight', 'dec1.up.weight', 'dec0.conv1.bn.gamma', 'head.bias')}

    def loss():
        return gn.generalized_dice_loss(gn.softmax(model.forward(x, training=True).logits, axis=0), onehot)

    errs = gn.gradcheck(loss, checked, step=1e-6, max_checks=6, rng=np.random.default_rng(0))
    assert max(errs.values()) < 1e-3


def test_save_and_load_model(tmp_path):
    cfg = UNetConfig(in_channels=5, out_channels=3, levels=2, base_features=2, deep_supervision=True)
    model = build_unet(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(5, 8, 8, 8)))
    model.forward(x, training=True)
    save_model(model, tmp_path / "unet")
    loaded = load_model(tmp_path / "unet")
    assert loaded.cfg == cfg
    assert np.array_equal(loaded.forward(x, training=False).logits.data, model.forward(x, training=False).logits.data)


def test_downsample_nearest_takes_block_middle():
    labels = np.arange(4 * 4 * 4).reshape(4, 4, 4)
    assert np.array_equal(downsample_nearest(labels, 2), labels[1::2, 1::2, 1::2])
    assert downsample_nearest(labels, 1) is labels
