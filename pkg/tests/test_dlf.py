#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import numpy as np
import pytest

import gridnet as gn
from classicfusion import majority_vote
from conftest import random_atlases
from dlf import (DlfConfig, atlas_mask, average_votes, build_dlf, compose_votes, deep_supervision_loss,
                 dlf_forward, dlf_loss, load_model, save_model)
from errors import ShapeError
from gridnet import Tensor
from volcore import coordinate_maps


def _small_cfg(n_labels=3, **kw):
    params = dict(n_labels=n_labels, base_features=2, wv_levels=2, ft_levels=2)
    params.update(kw)
    return DlfConfig(**params)


class TestConfig:

    def test_subnet_channels(self):
        cfg = DlfConfig(n_labels=15)
        assert cfg.wv_cfg.in_channels == 7
        assert cfg.ft_cfg.in_channels == 18
        assert cfg.wv_cfg.out_channels == cfg.ft_cfg.out_channels == 15
        assert cfg.ft_cfg.deep_supervision and not cfg.wv_cfg.deep_supervision

    def test_full_scale_preset(self):
        cfg = DlfConfig.full_scale_preset()
        assert (cfg.base_features, cfg.wv_levels, cfg.ft_levels) == (32, 3, 4)
        assert cfg.divisor == 16

    def test_divisor_follows_active_subnets(self):
        cfg = _small_cfg(wv_levels=1, ft_levels=3)
        assert cfg.divisor == 8
        assert cfg.with_ablations(['ft']).divisor == 2
        assert cfg.with_ablations(['wv', 'ft']).divisor == 1

    def test_unknown_ablation(self):
        with pytest.raises(ValueError):
            _small_cfg().with_ablations(['staple'])


class TestFusionLayers:

    def test_compose_votes_is_elementwise(self, rng):
        w = Tensor(rng.normal(size=(3, 2, 2, 2)))
        s = (rng.integers(0, 2, size=(3, 2, 2, 2))).astype(np.float32)
        assert np.array_equal(compose_votes(w, s).data, w.data * s)
        with pytest.raises(ShapeError):
            compose_votes(w, np.zeros((2, 2, 2, 2)))

    def test_average_votes_requires_atlases(self):
        with pytest.raises(ShapeError):
            average_votes([])

    def test_atlas_mask_threshold_is_inclusive(self):
        s1 = np.zeros((3, 1, 1, 5))
        s1[1] = 1
        others = [np.zeros((3, 1, 1, 5)) for _ in range(4)]
        for s in others:
            s[2] = 1
        mask = atlas_mask([s1] + others, 0.2)
        # 标签 1 的均值恰为 0.2
        assert np.all(mask[1] == 1)
        assert np.all(mask[2] == 1)
        mask = atlas_mask([s1] + others, 0.25)
        assert np.all(mask[1] == 0)
        assert np.all(mask[0] == 1)


class TestForward:

    def test_all_ablations_equal_majority_vote(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            n_labels = int(rng.integers(2, 6))
            n_atlases = int(rng.integers(1, 6))
            dims = tuple(int(d) for d in rng.integers(1, 5, size=3))
            target, atlases = random_atlases(rng, dims, n_atlases, n_labels)
            cfg = _small_cfg(n_labels).with_ablations(['wv', 'ft', 'mask'])
            model = build_dlf(cfg, rng)
            out = dlf_forward(model, target, coordinate_maps(dims), atlases)
            assert np.array_equal(out.labels, majority_vote([a.labels for a in atlases]).data)

    def test_shapes_and_intermediates(self, rng):
        dims = (8, 8, 4)
        target, atlases = random_atlases(rng, dims, 3, 3)
        model = build_dlf(_small_cfg(), rng)
        out = dlf_forward(model, target, coordinate_maps(dims), atlases, training=True)
        assert out.logits.shape == (3,) + dims
        assert [a.shape for a in out.aux] == [(3, 4, 4, 2), (3, 2, 2, 1)]
        assert len(out.intermediates.W) == 3
        assert out.intermediates.S_init.shape == (3,) + dims
        assert out.label_map().dims == dims

    def test_labels_absent_from_atlases_are_masked(self, rng):
        dims = (4, 4, 4)
        target, atlases = random_atlases(rng, dims, 2, 4)
        for a in atlases:
            a.labels.data[...] = np.where(a.labels.data == 3, 1, a.labels.data)
        model = build_dlf(_small_cfg(4), rng)
        out = dlf_forward(model, target, coordinate_maps(dims), atlases)
        assert np.all(out.logits.data[3] == 0)
        # 被屏蔽的标签 logit 为 0：只要有一个允许标签的 logit 为正，就不会被选中
        allowed = np.delete(out.logits.data, 3, axis=0)
        positive = allowed.max(axis=0) > 0
        assert positive.any()
        assert np.all(out.labels[positive] != 3)

    def test_masked_label_wins_when_allowed_logits_are_negative(self, rng):
        dims = (4, 4, 4)
        target, atlases = random_atlases(rng, dims, 2, 4)
        for a in atlases:
            a.labels.data[...] = np.where(a.labels.data == 3, 1, a.labels.data)
        model = build_dlf(_small_cfg(4), rng)
        params = model.ft.parameters()
        params["head.weight"].data[...] = 0.0
        params["head.bias"].data[...] = -1.0
        out = dlf_forward(model, target, coordinate_maps(dims), atlases)
        chosen_mask = np.take_along_axis(out.intermediates.masks, out.labels[None], axis=0)[0]
        assert np.all(out.labels != 0)
        assert np.all(chosen_mask == 0)

    def test_atlas_order_does_not_matter(self, f64, rng):
        dims = (4, 4, 4)
        coords = coordinate_maps(dims)
        model = build_dlf(_small_cfg(), rng)
        for _ in range(50):
            target, atlases = random_atlases(rng, dims, int(rng.integers(2, 6)), 3)
            order = rng.permutation(len(atlases))
            a = dlf_forward(model, target, coords, atlases)
            b = dlf_forward(model, target, coords, [atlases[i] for i in order])
            assert np.allclose(a.logits.data, b.logits.data, rtol=1e-5, atol=1e-10)
            assert np.array_equal(a.labels, b.labels)

    def test_duplicated_atlases_are_bitwise_identical(self, rng):
        dims = (4, 4, 4)
        target, atlases = random_atlases(rng, dims, 1, 3)
        model = build_dlf(_small_cfg(), rng)
        coords = coordinate_maps(dims)
        single = dlf_forward(model, target, coords, atlases)
        for k in (2, 5):
            repeated = dlf_forward(model, target, coords, atlases * k)
            assert repeated.logits.data.tobytes() == single.logits.data.tobytes()

    def test_parallel_weight_maps_match_serial(self, rng):
        dims = (4, 4, 4)
        target, atlases = random_atlases(rng, dims, 4, 3)
        model = build_dlf(_small_cfg(), rng)
        coords = coordinate_maps(dims)
        serial = dlf_forward(model, target, coords, atlases, workers=1)
        threaded = dlf_forward(model, target, coords, atlases, workers=4)
        assert serial.logits.data.tobytes() == threaded.logits.data.tobytes()

    def test_errors(self, rng):
        target, atlases = random_atlases(rng, (6, 4, 4), 2, 3)
        model = build_dlf(_small_cfg(), rng)
        with pytest.raises(ShapeError):
            dlf_forward(model, target, coordinate_maps((6, 4, 4)), atlases)
        target, atlases = random_atlases(rng, (4, 4, 4), 2, 3)
        with pytest.raises(ShapeError):
            dlf_forward(model, target, coordinate_maps((4, 4, 4)), [])


class TestLoss:

    def test_deep_supervision_weights(self, f64, rng):
        main = Tensor(rng.normal(size=(3, 8, 8, 8)))
        aux = [Tensor(rng.normal(size=(3, n, n, n))) for n in (4, 2, 1)]
        gt = rng.integers(0, 3, size=(8, 8, 8))
        weights = [1.0, 0.5, 0.2, 0.1]
        total = deep_supervision_loss(main, aux, gt, weights).item()
        by_hand = 0.0
        for k, (w, logits) in enumerate(zip(weights, [main] + aux)):
            g = gt[2 ** k // 2::2 ** k, 2 ** k // 2::2 ** k, 2 ** k // 2::2 ** k] if k else gt
            onehot = (g[None] == np.arange(3).reshape(-1, 1, 1, 1)).astype(np.float64)
            by_hand += w * gn.generalized_dice_loss(gn.softmax(logits, axis=0), onehot).item()
        assert abs(total - by_hand) <= 1e-10

    def test_weight_count_must_match_heads(self, rng):
        main = Tensor(rng.normal(size=(2, 4, 4, 4)))
        with pytest.raises(ShapeError):
            deep_supervision_loss(main, [], np.zeros((4, 4, 4), dtype=int), [1.0, 0.5])

    def test_end_to_end_gradients(self, f64):
        rng = np.random.default_rng(21)
        dims = (8, 8, 8)
        target, atlases = random_atlases(rng, dims, 2, 3)
        gt = rng.integers(0, 3, size=dims)
        model = build_dlf(_small_cfg(), rng)
        coords = coordinate_maps(dims)
        params = model.parameters()
        checked = {k: params[k] for k in ('wv.enc0.conv0.weight', 'wv.head.bias', 'ft.dec0.conv1.bn.gamma',
                                          'ft.aux1.weight', 'ft.head.weight')}

        def loss():
            return dlf_loss(model, dlf_forward(model, target, coords, atlases, training=True), gt)

        errs = gn.gradcheck(loss, checked, step=1e-6, max_checks=5, rng=np.random.default_rng(0))
        assert max(errs.values()) < 1e-3

    def test_ablated_finetune_has_single_head(self, rng):
        dims = (4, 4, 4)
        target, atlases = random_atlases(rng, dims, 2, 3)
        model = build_dlf(_small_cfg().with_ablations(['ft']), rng)
        out = dlf_forward(model, target, coordinate_maps(dims), atlases, training=True)
        assert out.aux == []
        assert np.isfinite(dlf_loss(model, out, np.zeros(dims, dtype=int)).item())


def test_save_and_load(tmp_path, rng):
    dims = (4, 4, 4)
    target, atlases = random_atlases(rng, dims, 2, 3)
    model = build_dlf(_small_cfg(mask_threshold=0.3).with_ablations(['mask']), rng)
    coords = coordinate_maps(dims)
    dlf_forward(model, target, coords, atlases, training=True)
    save_model(model, tmp_path / "dlf")
    loaded = load_model(tmp_path / "dlf")
    assert loaded.cfg == model.cfg
    a = dlf_forward(model, target, coords, atlases).logits.data
    b = dlf_forward(loaded, target, coords, atlases).logits.data
    assert a.tobytes() == b.tobytes()
