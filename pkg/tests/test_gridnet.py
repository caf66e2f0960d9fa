#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import numpy as np
import pytest

import gridnet as gn
from errors import AutogradError, ShapeError
from gridnet import BatchNormState, OptimConfig, Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _projected_loss(y: Tensor, proj: np.ndarray) -> Tensor:
    """⟨y, proj⟩：把任意输出变成梯度各处不同的标量"""
    return gn.sum_all(gn.mul(y, proj))


class TestOps:

    def test_conv3d_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = gn.conv3d(x, Tensor(w), Tensor(np.zeros(1)))
        assert np.allclose(out.data, x.data)

    def test_conv3d_single_voxel_all_ones(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.5))
        out = gn.conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 2.5

    def test_conv3d_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            gn.conv3d(Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3, 3))))

    def test_conv_transpose_doubles_dims(self, rng):
        out = gn.conv_transpose3d(Tensor(rng.normal(size=(3, 4, 4, 4))), Tensor(rng.normal(size=(3, 2, 3, 3, 3))))
        assert out.shape == (2, 8, 8, 8)

    def test_conv_transpose_is_adjoint_of_strided_conv(self, f64, rng):
        x = rng.normal(size=(3, 3, 4, 2))
        y = rng.normal(size=(2, 6, 8, 4))
        w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
        lhs = float((gn.conv_transpose3d(Tensor(x), w).data * y).sum())
        rhs = float((x * gn.conv3d(Tensor(y), w, padding=1, stride=2).data).sum())
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_relu_and_maxpool(self):
        assert np.array_equal(gn.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
        block = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2), requires_grad=True)
        out = gn.maxpool3d(block, 2)
        assert out.data.reshape(-1)[0] == 7.0
        with pytest.raises(ShapeError):
            gn.maxpool3d(Tensor(np.zeros((1, 3, 2, 2))), 2)

    def test_maxpool_tie_routes_gradient_to_lowest_index(self):
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        gn.backward(gn.sum_all(gn.maxpool3d(x, 2)))
        flat = x.grad.reshape(-1)
        assert flat[0] == 1.0 and flat[1:].sum() == 0.0

    def test_mean_over_duplicates_is_exact(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 4, 4)).astype(np.float32))
        for k in (2, 3, 7):
            assert gn.mean_over([x] * k).data.tobytes() == x.data.tobytes()

    def test_batchnorm_normalizes_channel(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
        state = BatchNormState.create(1)
        out = gn.batchnorm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=True)
        assert np.allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-4)
        assert np.isclose(state.running_mean[0], 0.2)
        assert np.isclose(state.running_var[0], 0.9 + 0.1 * 1.0)

    def test_batchnorm_constant_channel_is_zero(self):
        x = Tensor(np.full((1, 2, 2, 2), 4.0))
        out = gn.batchnorm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.create(1), training=True)
        assert np.all(out.data == 0.0)

    def test_batchnorm_eval_uses_running_stats(self):
        state = BatchNormState(np.array([1.0], dtype=np.float32), np.array([4.0], dtype=np.float32))
        x = Tensor(np.full((1, 1, 1, 2), 5.0))
        out = gn.batchnorm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False)
        assert np.allclose(out.data, 2.0, atol=1e-4)


class TestGeneralizedDice:

    def test_perfect_prediction_is_zero(self, f64, rng):
        labels = rng.integers(0, 3, size=(4, 4, 4))
        onehot = (labels[None] == np.arange(3).reshape(-1, 1, 1, 1)).astype(np.float64)
        assert abs(gn.generalized_dice_loss(Tensor(onehot), onehot).item()) < 1e-6

    def test_uniform_prediction_single_voxel(self, f64):
        pred = Tensor(np.full((2, 1, 1, 1), 0.5))
        gt = np.array([1.0, 0.0]).reshape(2, 1, 1, 1)
        assert abs(gn.generalized_dice_loss(pred, gt).item() - 1.0 / 3.0) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gn.generalized_dice_loss(Tensor(np.zeros((2, 2, 2, 2))), np.zeros((3, 2, 2, 2)))


class TestGradients:
    """中心差分梯度校验（float64）"""

    TOL = 1e-3

    def test_conv3d(self, f64, rng):
        x, w, b = _param(rng, 2, 4, 4, 4), _param(rng, 3, 2, 3, 3, 3), _param(rng, 3)
        proj = rng.normal(size=(3, 4, 4, 4))
        errs = gn.gradcheck(lambda: _projected_loss(gn.conv3d(x, w, b), proj), {'x': x, 'w': w, 'b': b}, step=1e-3)
        assert max(errs.values()) < self.TOL

    def test_strided_conv_and_transpose(self, f64, rng):
        x, w, b = _param(rng, 2, 2, 2, 2), _param(rng, 2, 3, 3, 3, 3), _param(rng, 3)
        proj = rng.normal(size=(3, 4, 4, 4))
        errs = gn.gradcheck(lambda: _projected_loss(gn.conv_transpose3d(x, w, b), proj),
                            {'x': x, 'w': w, 'b': b}, step=1e-3)
        assert max(errs.values()) < self.TOL

    def test_batchnorm(self, f64, rng):
        x, gamma, beta = _param(rng, 2, 2, 3, 2), _param(rng, 2), _param(rng, 2)
        state = BatchNormState.create(2)
        proj = rng.normal(size=(2, 2, 3, 2))
        errs = gn.gradcheck(lambda: _projected_loss(gn.batchnorm3d(x, gamma, beta, state, True), proj),
                            {'x': x, 'gamma': gamma, 'beta': beta}, step=1e-3)
        assert max(errs.values()) < self.TOL

    def test_softmax_dice(self, f64, rng):
        logits = _param(rng, 3, 2, 2, 2)
        labels = rng.integers(0, 3, size=(2, 2, 2))
        labels[0, 0, 0] = 0
        labels[1, 1, 1] = 2
        onehot = (labels[None] == np.arange(3).reshape(-1, 1, 1, 1)).astype(np.float64)
        errs = gn.gradcheck(lambda: gn.generalized_dice_loss(gn.softmax(logits, axis=0), onehot),
                            {'logits': logits}, step=1e-3)
        assert errs['logits'] < self.TOL

    def test_composite_conv_bn_relu_pool(self, f64, rng):
        x, w = _param(rng, 1, 4, 4, 4), _param(rng, 2, 1, 3, 3, 3)
        gamma, beta = _param(rng, 2), _param(rng, 2)
        state = BatchNormState.create(2)
        other = _param(rng, 2, 2, 2, 2)
        proj = rng.normal(size=(4, 2, 2, 2))

        def loss():
            h = gn.relu(gn.batchnorm3d(gn.conv3d(x, w), gamma, beta, state, True))
            h = gn.concat([gn.maxpool3d(h, 2), gn.add(other, gn.mean_over([other, other]))], axis=0)
            return _projected_loss(h, proj)

        errs = gn.gradcheck(loss, {'x': x, 'w': w, 'gamma': gamma, 'beta': beta, 'other': other}, step=1e-6)
        assert max(errs.values()) < self.TOL


class TestAutograd:

    def test_sum_gives_ones(self, rng):
        x = _param(rng, 3, 2)
        gn.backward(gn.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 2), dtype=x.data.dtype))

    def test_second_backward_is_rejected(self, rng):
        x = _param(rng, 2)
        loss = gn.sum_all(gn.mul(x, x))
        gn.backward(loss)
        with pytest.raises(AutogradError):
            gn.backward(loss)

    def test_non_scalar_loss_is_rejected(self, rng):
        with pytest.raises(AutogradError):
            gn.backward(gn.relu(_param(rng, 2)))

    def test_leaf_gradients_accumulate_across_graphs(self, rng):
        x = _param(rng, 2)
        gn.backward(gn.sum_all(x))
        gn.backward(gn.sum_all(x))
        assert np.all(x.grad == 2.0)


class TestOptimizer:

    def test_zero_gradient_leaves_parameters(self, rng):
        p = {'w': _param(rng, 3)}
        before = p['w'].data.copy()
        gn.adam_step(p, {'w': np.zeros(3)}, gn.AdamState(), 0.1, OptimConfig())
        assert np.array_equal(p['w'].data, before)

    def test_first_step_by_hand(self, f64):
        p = {'w': Tensor(np.array([1.0]), requires_grad=True)}
        gn.adam_step(p, {'w': np.array([1.0])}, gn.AdamState(), 0.1, OptimConfig())
        assert abs(p['w'].data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-12

    def test_dlf_schedule(self):
        cfg = OptimConfig.dlf_preset()
        expected = [5e-4, 5e-4, 5e-4, 1e-4, 1e-4, 2e-5, 2e-5, 4e-6, 4e-6, 8e-7]
        assert [gn.lr_schedule(cfg, e) for e in range(1, 11)] == pytest.approx(expected, rel=1e-12)

    def test_unet_schedule(self):
        cfg = OptimConfig.unet_preset()
        lrs = [gn.lr_schedule(cfg, e) for e in range(1, 21)]
        closed = [5e-4 if e < 9 else 5e-4 * 0.2 ** ((e - 9) // 4 + 1) for e in range(1, 21)]
        assert lrs == closed

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            OptimConfig(decay_factor=1.5)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {'a.weight': rng.normal(size=(2, 3, 3, 3, 3)).astype(np.float32),
              'a.bias': rng.normal(size=(2,)).astype(np.float32)}
    gn.save_checkpoint(tmp_path / "ckpt", arrays, {'model': 'test', 'k': 3})
    back, extra = gn.load_checkpoint(tmp_path / "ckpt")
    assert extra == {'model': 'test', 'k': '3'}
    for name, arr in arrays.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()
    manifest = (tmp_path / "ckpt" / "manifest.txt").read_text(encoding='utf-8').splitlines()
    assert manifest[0] == "a.weight\t2,3,3,3,3\t162"
