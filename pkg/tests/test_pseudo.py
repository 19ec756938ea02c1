import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_sfda.model import ModelDescriptor, clone_model, init_model
from robust_sfda.pseudo import (
    PseudoConfig,
    build_supervision,
    compute_selection_mask,
    generate_pseudo_boundary,
    generate_pseudo_labels,
    selection_from_stats,
    threshold_probs,
)

from oracles import prototype_selection_bruteforce

SMALL = ModelDescriptor(base_width=4, depth=2, dropout_rate=0.3)


def image(seed=0, size=16):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


class TestThreshold:
    def test_inclusive(self):
        p = torch.tensor([0.7499, 0.75, 0.7501])
        assert threshold_probs(p, 0.75).tolist() == [0.0, 1.0, 1.0]

    def test_all_zero(self):
        assert not threshold_probs(torch.zeros(2, 4, 4), 0.75).any()

    @pytest.mark.parametrize("seed", range(3))
    def test_loop_oracle(self, seed):
        p = np.random.default_rng(seed).uniform(size=(2, 8, 8))
        expected = np.array([1.0 if v >= 0.75 else 0.0 for v in p.ravel()]).reshape(p.shape)
        assert np.array_equal(threshold_probs(torch.tensor(p), 0.75).numpy(), expected)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
    def test_equivariance_away_from_ties(self, seed, t):
        p = torch.tensor(np.random.default_rng(seed).uniform(size=(2, 6, 6)))
        interior = (p - t).abs() > 1e-6
        lhs = threshold_probs(p, t)
        rhs = 1 - threshold_probs(1 - p, 1 - t + 1e-9)
        assert torch.equal(lhs[interior], rhs[interior])


def test_model_pseudo_labels_and_boundary():
    m = init_model(0, SMALL)
    x = image()
    out = m(x.unsqueeze(0))
    assert torch.equal(generate_pseudo_labels(m, x, 0.75), threshold_probs(out.mask_prob[0], 0.75))
    assert torch.equal(generate_pseudo_boundary(m, x), out.boundary[0].detach())
    assert torch.equal(generate_pseudo_boundary(m, x), generate_pseudo_boundary(m, x))
    # changing some other (target) model does not affect what the source produces
    target = clone_model(m)
    with torch.no_grad():
        for p in target.parameters():
            p.mul_(0.5)
    assert torch.equal(generate_pseudo_boundary(m, x), out.boundary[0].detach())


class TestSelection:
    def test_no_dropout_reduces_to_prototype_test(self):
        m = init_model(0, ModelDescriptor(base_width=4, depth=2, dropout_rate=0.0))
        x = image(3)
        labels = torch.zeros(2, 16, 16)
        labels[:, :8] = 1
        mask = compute_selection_mask(m, x, labels, n_passes=4, uncertainty_threshold=0.05)
        feats = m(x[None]).features[0].detach().double().numpy()
        expected = prototype_selection_bruteforce(np.zeros((2, 16, 16)), feats, labels.numpy(), 0.05)
        assert np.array_equal(mask.numpy(), expected)

    def test_constant_labels_select_everything_without_dropout(self):
        m = init_model(0, ModelDescriptor(base_width=4, depth=2, dropout_rate=0.0))
        mask = compute_selection_mask(m, image(), torch.ones(2, 16, 16), n_passes=3, uncertainty_threshold=0.05)
        assert mask.all()

    def test_zero_threshold_selects_nothing(self):
        m = init_model(0, ModelDescriptor(base_width=4, depth=2, dropout_rate=0.5))
        x = image(1)
        mask = compute_selection_mask(m, x, generate_pseudo_labels(m, x, 0.5), 10, uncertainty_threshold=0.0)
        assert not mask.any()

    def test_handcrafted_clusters(self):
        rng = np.random.default_rng(0)
        labels = np.zeros((2, 8, 8))
        labels[0, 2:6, 2:6] = 1
        labels[1, 3:5, 3:5] = 1
        feats = np.zeros((3, 8, 8))
        feats[:, labels[0] == 1] = np.array([5.0, 0.0, 1.0])[:, None]
        feats[:, labels[0] == 0] = np.array([0.0, 5.0, 1.0])[:, None]
        feats += rng.normal(0, 0.3, feats.shape)
        # a few pixels carry the wrong cluster's feature
        feats[:, 2, 2] = [0.0, 5.0, 1.0]
        feats[:, 0, 7] = [5.0, 0.0, 1.0]
        std = rng.uniform(0, 0.1, (2, 8, 8))
        expected = prototype_selection_bruteforce(std, feats, labels, 0.05)
        got = selection_from_stats(torch.tensor(std)[None], torch.tensor(feats)[None], torch.tensor(labels)[None], 0.05)
        assert np.array_equal(got[0].numpy(), expected)
        assert expected[0, 2, 2] == 0 or std[0, 2, 2] >= 0.05

    @pytest.mark.parametrize("seed", range(5))
    def test_random_instances_match_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        labels = (rng.uniform(size=(2, 8, 8)) < 0.4).astype(float)
        feats = rng.normal(size=(4, 8, 8))
        std = rng.uniform(0, 0.1, (2, 8, 8))
        got = selection_from_stats(torch.tensor(std)[None], torch.tensor(feats)[None], torch.tensor(labels)[None], 0.05)
        assert np.array_equal(got[0].numpy(), prototype_selection_bruteforce(std, feats, labels, 0.05))

    def test_channel_without_foreground_is_vacuous(self):
        std = torch.zeros(1, 1, 4, 4)
        feats = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        assert selection_from_stats(std, feats, torch.zeros(1, 1, 4, 4), 0.05).all()


class TestBuildSupervision:
    @pytest.fixture
    def models(self):
        return init_model(0, SMALL), init_model(1, SMALL)

    def test_provenance(self, models):
        std, rob = models
        assert build_supervision(std, None, image(), "standard").provenance == "standard_source"
        assert build_supervision(std, rob, image(), "robust").provenance == "robust_source"
        assert build_supervision(std, rob, image(), "both").provenance == "standard_source"

    def test_both_equals_standard(self, models):
        std, rob = models
        a = build_supervision(std, None, image(), "standard")
        b = build_supervision(std, rob, image(), "both")
        for f in ("pseudo_label", "pseudo_boundary", "selection_mask"):
            assert torch.equal(getattr(a, f), getattr(b, f))

    def test_robust_differs(self, models):
        std, rob = models
        a = build_supervision(std, rob, image(), "standard", PseudoConfig(threshold=0.5))
        b = build_supervision(std, rob, image(), "robust", PseudoConfig(threshold=0.5))
        assert not torch.equal(a.pseudo_boundary, b.pseudo_boundary)

    def test_regeneration_bit_identical(self, models):
        std, _ = models
        x = torch.stack([image(i) for i in range(5)])
        a = build_supervision(std, None, x, "standard", batch_size=2)
        b = build_supervision(std, None, x, "standard", batch_size=2)
        for f in ("pseudo_label", "pseudo_boundary", "selection_mask"):
            assert torch.equal(getattr(a, f), getattr(b, f))
        assert a.pseudo_label.shape == (5, 2, 16, 16)

    def test_missing_models(self, models):
        std, rob = models
        with pytest.raises(ValueError):
            build_supervision(std, None, image(), "robust")
        with pytest.raises(ValueError):
            build_supervision(std, None, image(), "both")
        with pytest.raises(ValueError):
            build_supervision(None, rob, image(), "standard")
        with pytest.raises(ValueError):
            build_supervision(std, rob, image(), "sideways")

    def test_save_bundle(self, models, tmp_path):
        sup = build_supervision(models[0], None, image(), "standard")
        sidecar = sup.save(tmp_path, "s0")
        meta = json.loads(sidecar.read_text())
        assert meta["threshold"] == 0.75 and meta["provenance"] == "standard_source"
        assert len(meta["files"]) == 4 and all((tmp_path / f).exists() for f in meta["files"].values())
