import numpy as np
import pytest

from conftest import permute_graph, random_graph
from gladformer import autodiff as ad
from gladformer.autodiff import ContractError, constant, finite_diff_check, parameter
from gladformer.dataset import Graph
from gladformer.localspec import (
    band_pass_embed,
    bank_features,
    classify,
    combine_layers,
    fuse,
    local_readout,
    lowhigh_channels,
    lowhigh_layer,
    ls_branch,
)
from gladformer.model import ModelConfig, init_params
from gladformer.spectral import beta_bank, normalized_laplacian

SMALL = ModelConfig(in_dim=3, hidden=8, out_dim=4, walk_length=3, gt_layers=2, beta_order=3, ls_layers=2, heads=2)


def weights(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


class TestBandPass:
    def test_width(self, rng):
        g = random_graph(rng, 6)
        assert bank_features(normalized_laplacian(g), 3, g.x).shape == (6, 4 * 3)

    def test_matches_bank(self, rng):
        g = random_graph(rng, 6)
        lap = normalized_laplacian(g)
        np.testing.assert_array_equal(bank_features(lap, 3, g.x), np.concatenate(beta_bank(lap, 3, g.x), axis=1))

    def test_zero_input(self, rng):
        lap = normalized_laplacian(random_graph(rng, 5))
        np.testing.assert_array_equal(bank_features(lap, 3, np.zeros((5, 2))), 0.0)

    def test_partition_inside_bank(self, rng):
        g = random_graph(rng, 8)
        bank = bank_features(normalized_laplacian(g), 3, g.x)
        total = bank.reshape(8, 4, 3).sum(axis=1)
        np.testing.assert_allclose(total, 2.0 * g.x, atol=1e-10)

    def test_embed_is_linear_projection(self, rng):
        bank = rng.normal(size=(5, 6))
        w, b = rng.normal(size=(6, 4)), rng.normal(size=(1, 4))
        np.testing.assert_allclose(band_pass_embed(bank, constant(w), constant(b)).data, bank @ w + b)


class TestLowHigh:
    def test_halves_sum_to_input(self, rng):
        g = random_graph(rng, 7)
        h = constant(rng.normal(size=(7, 3)))
        low, high = lowhigh_channels(h, normalized_laplacian(g), 0.5)
        np.testing.assert_allclose(low.data + high.data, h.data, atol=1e-14)

    def test_constant_on_regular_graph(self):
        g = Graph(0, 3, [(0, 1), (1, 2), (0, 2)], np.ones((3, 1)), 0)
        _, high = lowhigh_channels(constant(np.ones((3, 2))), normalized_laplacian(g), 1.0)
        np.testing.assert_allclose(high.data, 0.0, atol=1e-14)

    def test_gradient_one_layer(self, rng):
        lap = normalized_laplacian(random_graph(rng, 5))
        h = parameter(rng.normal(size=(5, 3)))
        w, b = parameter(rng.normal(size=(6, 4))), parameter(rng.normal(size=(1, 4)))
        proj = constant(weights(3, 5, 4))
        assert finite_diff_check(lambda: ad.sum_all(ad.mul(lowhigh_layer(h, lap, 0.3, w, b), proj)), [h, w, b]) <= 1e-6


class TestCombineAndReadout:
    def test_single_layer_projection(self, rng):
        s = rng.normal(size=(4, 3))
        w, b = rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
        np.testing.assert_allclose(combine_layers([constant(s)], constant(w), constant(b)).data, s @ w + b)

    def test_width(self, rng):
        states = [constant(rng.normal(size=(4, 3))) for _ in range(2)]
        out = combine_layers(states, constant(np.ones((6, 5))), constant(np.zeros((1, 5))))
        assert out.shape == (4, 5)

    def test_single_node_readout(self, rng):
        hb, hp = rng.normal(size=(1, 3)), rng.normal(size=(1, 2))
        np.testing.assert_array_equal(local_readout(constant(hb), constant(hp)).data, np.hstack([hb, hp]))

    def test_readout_permutation_and_duplication(self, rng):
        hb, hp = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        ref = local_readout(constant(hb), constant(hp)).data
        perm = rng.permutation(6)
        np.testing.assert_allclose(local_readout(constant(hb[perm]), constant(hp[perm])).data, ref, atol=1e-12)
        dup = local_readout(constant(np.vstack([hb, hb])), constant(np.vstack([hp, hp]))).data
        np.testing.assert_allclose(dup, ref, atol=1e-12)

    def test_empty_readout(self):
        with pytest.raises(ContractError):
            local_readout(constant(np.zeros((0, 2))), constant(np.zeros((0, 2))))


class TestBranch:
    def test_shape_and_invariance(self, rng):
        params = init_params(SMALL, 1)
        g = random_graph(rng, 9)
        h = permute_graph(g, rng.permutation(9))
        outs = []
        for graph in (g, h):
            lap = normalized_laplacian(graph)
            outs.append(ls_branch(graph.x, lap, bank_features(lap, 3, graph.x), params, 2, 0.5).data)
        assert outs[0].shape == (1, 16)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-10)


class TestFuseAndClassify:
    def test_output_width(self, rng):
        cfg = ModelConfig(in_dim=3)
        params = init_params(cfg, 0)
        out = fuse(constant(rng.normal(size=(1, 128))), constant(rng.normal(size=(1, 256))), params["fuse.W"], params["fuse.b"])
        assert out.shape == (1, 32)

    def test_zero_branch_finite(self, rng):
        w, b = constant(rng.normal(size=(6, 4))), constant(np.zeros((1, 4)))
        out = fuse(constant(np.zeros((1, 2))), constant(rng.normal(size=(1, 4))), w, b)
        assert np.all(np.isfinite(out.data))

    def test_gradient_reaches_both_inputs(self, rng):
        a, c = parameter(rng.normal(size=(1, 2))), parameter(rng.normal(size=(1, 4)))
        w, b = constant(rng.normal(size=(6, 4))), constant(np.full((1, 4), 5.0))
        ad.backward(ad.sum_all(fuse(a, c, w, b)))
        assert np.abs(a.grad).sum() > 0 and np.abs(c.grad).sum() > 0

    def test_zero_weights_half(self):
        params = {k: constant(np.zeros(s)) for k, s in
                  {"cls.W1": (4, 4), "cls.b1": (1, 4), "cls.W2": (4, 1), "cls.b2": (1, 1)}.items()}
        assert classify(constant(np.ones((1, 4))), params).data[0, 0] == 0.5

    def test_monotone_in_bias(self, rng):
        params = {k: constant(rng.normal(size=s)) for k, s in
                  {"cls.W1": (4, 4), "cls.b1": (1, 4), "cls.W2": (4, 1)}.items()}
        h = constant(rng.normal(size=(1, 4)))
        ps = [classify(h, {**params, "cls.b2": constant([[z]])}).data[0, 0] for z in (-2.0, 0.0, 2.0)]
        assert ps[0] < ps[1] < ps[2]
        assert all(0.0 < p < 1.0 for p in ps)

    def test_gradient(self, rng):
        params = {k: parameter(rng.normal(size=s)) for k, s in
                  {"cls.W1": (4, 4), "cls.b1": (1, 4), "cls.W2": (4, 1), "cls.b2": (1, 1)}.items()}
        h = constant(rng.normal(size=(1, 4)))
        assert finite_diff_check(lambda: ad.sum_all(classify(h, params)), params) <= 1e-6
