#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import numpy as np
import pytest

from classicfusion import (FusionParams, fuse, jlf, jlf_weights, majority_vote, neighborhood_search, svwv,
                           tune)
from conftest import random_atlases
from errors import FusionError
from evalkit import gdsc
from synthlab import PhantomConfig, make_dataset
from trainer import atlas_library, load_dataset
from volcore import AtlasBundle, LabelMap, Volume


def _lm(values, n_labels=3):
    return LabelMap(np.asarray(values, dtype=np.int32).reshape(1, 1, -1), n_labels)


class TestMajorityVote:

    def test_modal_label(self):
        out = majority_vote([_lm([1]), _lm([1]), _lm([2])])
        assert out.data.reshape(-1).tolist() == [1]

    def test_tie_goes_to_lowest_label(self):
        assert majority_vote([_lm([1]), _lm([2])]).data.reshape(-1).tolist() == [1]

    def test_matches_histogram(self, rng):
        cands = [LabelMap(rng.integers(0, 4, size=(4, 4, 4)), 4) for _ in range(5)]
        out = majority_vote(cands).data
        stack = np.stack([c.data for c in cands]).reshape(5, -1)
        for v in range(stack.shape[1]):
            counts = np.bincount(stack[:, v], minlength=4)
            assert out.reshape(-1)[v] == int(np.argmax(counts))


class TestNeighborhoodSearch:

    def test_identical_atlas_gives_zero_displacement(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 4), 1, 3)
        atlas = AtlasBundle(target, atlases[0].labels)
        result = neighborhood_search(target, atlas, FusionParams(search_radius=(2, 2, 1)))
        assert np.all(result.displacement == 0)
        assert np.all(result.ssd == 0)

    def test_recovers_shift(self, rng):
        target, atlases = random_atlases(rng, (8, 5, 3), 1, 3)
        shifted = Volume(np.roll(target.data, 1, axis=1))
        atlas = AtlasBundle(shifted, atlases[0].labels)
        result = neighborhood_search(target, atlas, FusionParams(search_radius=(1, 0, 0), patch_radius=(1, 1, 0)))
        assert np.all(result.displacement[0, 1:-1] == 1)
        assert np.all(result.displacement[1:] == 0)

    def test_zero_radius_is_plain_patch_ssd(self, rng):
        target, atlases = random_atlases(rng, (5, 5, 3), 1, 3)
        p = FusionParams(search_radius=(0, 0, 0), patch_radius=(1, 1, 0), normalize=False)
        result = neighborhood_search(target, atlases[0], p)
        assert np.all(result.displacement == 0)
        sq = ((target.data.astype(np.float64) - atlases[0].images.data.astype(np.float64)) ** 2).sum(axis=0)
        x, y, z = 2, 2, 1
        assert result.ssd[x, y, z] == pytest.approx(sq[1:4, 1:4, 1:2].sum(), rel=1e-12)


class TestWeightedFusion:

    def test_single_atlas_reproduces_searched_candidate(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 3), 1, 3)
        for fuser, p in ((svwv, FusionParams.svwv_preset()), (jlf, FusionParams.jlf_preset())):
            result = fuser(target, atlases, p)
            assert np.array_equal(result.labels.data, result.candidates[0].data)

    def test_svwv_follows_perfect_atlas(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 3), 2, 3)
        perfect = AtlasBundle(target, atlases[0].labels)
        result = svwv(target, [perfect, atlases[1]], FusionParams(beta=50.0, search_radius=(0, 0, 0)))
        assert np.array_equal(result.labels.data, atlases[0].labels.data)

    def test_svwv_small_beta_is_majority_vote(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 3), 3, 2)
        result = svwv(target, atlases, FusionParams(beta=1e-9, search_radius=(1, 1, 0)))
        assert np.array_equal(result.labels.data, majority_vote(result.candidates).data)

    def test_svwv_is_label_permutation_equivariant(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 3), 3, 2)
        p = FusionParams.svwv_preset()
        swapped = [AtlasBundle(a.images, LabelMap(1 - a.labels.data, 2), a.name) for a in atlases]
        assert np.array_equal(svwv(target, swapped, p).labels.data, 1 - svwv(target, atlases, p).labels.data)

    def test_jlf_weights_symmetric_errors(self):
        base = np.abs(np.random.default_rng(0).normal(size=(1, 10, 9)))
        w, fallback = jlf_weights(np.concatenate([base, base]), beta=2.0, ridge=0.01)
        assert np.allclose(w, 0.5, atol=1e-12)
        assert not fallback.any()

    def test_jlf_prefers_identical_atlas(self, rng):
        target, atlases = random_atlases(rng, (6, 6, 3), 1, 3)
        perfect = AtlasBundle(target, atlases[0].labels)
        result = jlf(target, [perfect, atlases[0]], FusionParams(beta=2.0, search_radius=(0, 0, 0)))
        assert np.all(result.weights[0] > 0.9)

    def test_jlf_weights_sum_to_one(self, rng):
        target, atlases = random_atlases(rng, (6, 5, 3), 4, 3)
        result = jlf(target, atlases, FusionParams.jlf_preset())
        assert np.all(np.isfinite(result.weights))
        assert np.allclose(result.weights.sum(axis=0), 1.0, atol=1e-10)

    def test_jlf_independent_of_chunking(self, rng):
        target, atlases = random_atlases(rng, (6, 5, 3), 3, 3)
        p = FusionParams.jlf_preset()
        whole = jlf(target, atlases, p)
        chunked = jlf(target, atlases, p, workers=3, chunk_voxels=7)
        assert np.allclose(whole.weights, chunked.weights, rtol=0, atol=1e-12)
        assert np.array_equal(whole.labels.data, chunked.labels.data)

    def test_singular_voxels_fall_back_to_uniform(self):
        w, fallback = jlf_weights(np.zeros((3, 4, 9)), beta=2.0, ridge=0.01)
        assert fallback.all()
        assert np.allclose(w, 1.0 / 3.0)


class TestDispatch:

    def test_fuse_mv_uses_raw_candidates(self, rng):
        target, atlases = random_atlases(rng, (4, 4, 2), 3, 3)
        assert np.array_equal(fuse('mv', target, atlases).data, majority_vote([a.labels for a in atlases]).data)

    def test_unknown_method(self, rng):
        target, atlases = random_atlases(rng, (4, 4, 2), 1, 3)
        with pytest.raises(FusionError):
            fuse('staple', target, atlases)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            FusionParams(beta=0.0)
        with pytest.raises(ValueError):
            FusionParams(search_radius=(-1, 0, 0))

    def test_tune_returns_grid_table(self, rng):
        cases = []
        for _ in range(2):
            target, atlases = random_atlases(rng, (5, 5, 2), 3, 3)
            ref = LabelMap(rng.integers(0, 3, size=(5, 5, 2)), 3)
            cases.append((target, ref, atlases))
        best, table = tune('svwv', cases, [0.05, 0.5], [(0, 0, 0), (1, 1, 0)], [1, 2])
        assert len(table) == 4
        assert best.beta in (0.05, 0.5)
        assert best.search_radius in ((0, 0, 0), (1, 1, 0))
        best_row = table.loc[table['mean_gdsc'].idxmax()]
        assert best.beta == best_row['beta']
        assert best.search_radius == tuple(best_row['search_radius'])
        with pytest.raises(FusionError):
            tune('mv', cases, [0.1], [(0, 0, 0)], [1])


@pytest.mark.slow
def test_search_based_fusion_keeps_up_with_majority_vote(tmp_path):
    # 8 个图谱、3 个留出目标、5 个标签、残余错位 2 体素
    cfg = PhantomConfig(dims=(24, 24, 24), n_labels=5, n_subjects=11, misalign_sigma=2.0, seed=0)
    subjects = load_dataset(make_dataset(cfg, tmp_path / "data"))
    library = atlas_library(subjects[:8])
    label_set = [1, 2, 3, 4]
    scores = {'mv': [], 'svwv': [], 'jlf': []}
    for target in subjects[8:]:
        for method in scores:
            fused = fuse(method, target.images, library, workers=2)
            scores[method].append(gdsc(fused, target.labels, label_set))
    mean = {method: float(np.mean(values)) for method, values in scores.items()}
    assert mean['mv'] < 1.0
    assert mean['svwv'] >= mean['mv'] - 0.005
    assert mean['jlf'] >= mean['mv'] - 0.005
