import math

import numpy as np
import pytest

from conftest import permute_graph, random_graph
from gladformer import autodiff as ad
from gladformer.autodiff import constant, finite_diff_check, parameter
from gladformer.dataset import Graph
from gladformer.model import ModelConfig, init_params
from gladformer.spectral import normalized_laplacian, rayleigh_vector
from gladformer.transformer import (
    PairIndex,
    add_supernode,
    attention_head,
    attention_maps,
    combine_supernode,
    degree_scale,
    gt_branch,
    gt_layer,
    init_embed,
    rrwp_mha,
    spectrum_enhance,
)

SMALL = ModelConfig(in_dim=3, hidden=8, out_dim=4, walk_length=3, gt_layers=2, beta_order=2, ls_layers=2, heads=2)


def small_params(seed=0, cfg=SMALL):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in params.items():
        # jitter zero-initialised biases and scalers so every path is exercised
        if not p.data.any() or name.endswith("gain") or name == "gt.theta1":
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    return params


def node_states(params, g, cfg=SMALL):
    aug = add_supernode(g, cfg.walk_length)
    xa = ad.concat([constant(g.x), params["gt.super"]], axis=0)
    h = init_embed(xa, params["gt.embed.W"], params["gt.embed.b"])
    return aug, PairIndex.build(aug), degree_scale(h, aug.degrees, params["gt.theta1"], params["gt.theta2"])


class TestSupernode:
    def test_two_node_graph(self):
        aug = add_supernode(Graph(0, 2, [(0, 1)], np.ones((2, 1)), 0), 3)
        assert aug.size == 3 and aug.supernode == 2
        assert aug.degrees[2] == 2

    def test_edgeless_star(self):
        aug = add_supernode(Graph(0, 3, np.zeros((0, 2)), np.ones((3, 1)), 0), 2)
        np.testing.assert_allclose(aug.rrwp[3, :, 1], [1 / 3, 1 / 3, 1 / 3, 0], atol=1e-15)
        np.testing.assert_array_equal(aug.degrees, [1, 1, 1, 3])

    def test_base_block_preserved(self, rng):
        g = random_graph(rng, 7)
        aug = add_supernode(g, 4)
        a = np.zeros((7, 7))
        a[g.edges[:, 0], g.edges[:, 1]] = a[g.edges[:, 1], g.edges[:, 0]] = 1
        np.testing.assert_array_equal(aug.adjacency[:7, :7], a)
        assert aug.rrwp.shape == (8, 8, 4)


class TestEmbedAndScale:
    def test_identity_embed(self, rng):
        x = np.abs(rng.normal(size=(4, 3)))
        out = init_embed(constant(x), constant(np.eye(3)), constant(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input(self):
        b = np.array([[1.0, -2.0]])
        out = init_embed(constant(np.zeros((3, 2))), constant(np.ones((2, 2))), constant(b))
        np.testing.assert_array_equal(out.data, np.repeat([[1.0, 0.0]], 3, axis=0))

    def test_embed_gradient(self, rng):
        x = constant(rng.normal(size=(4, 3)))
        w, b = parameter(rng.normal(size=(3, 5))), parameter(rng.normal(size=(1, 5)))
        assert finite_diff_check(lambda: ad.sum_all(ad.mul(init_embed(x, w, b), constant(rng_w(4, 5)))), [w, b]) <= 1e-6

    def test_degree_scale_cases(self, rng):
        h = constant(rng.normal(size=(3, 4)))
        t1, t2 = constant(rng.normal(size=(1, 4))), constant(np.zeros((1, 4)))
        np.testing.assert_allclose(degree_scale(h, [1, 2, 3], t1, t2).data, h.data * t1.data)
        t2 = constant(rng.normal(size=(1, 4)))
        np.testing.assert_allclose(degree_scale(h, [0, 0, 0], t1, t2).data, h.data * t1.data)
        ones = constant(np.ones((1, 4)))
        np.testing.assert_allclose(degree_scale(h, [math.e - 1] * 3, ones, ones).data, 2 * h.data, atol=1e-14)


def rng_w(*shape):
    return np.random.default_rng(7).normal(size=shape)


class TestAttention:
    def test_uniform_when_scores_equal(self, rng):
        g = random_graph(rng, 5)
        aug = add_supernode(g, 3)
        pairs = PairIndex.build(aug)
        states = constant(rng.normal(size=(6, 4)))
        zero = constant(np.zeros((4, 2)))
        _, alpha = attention_head(states, pairs, zero, zero, constant(rng.normal(size=(4, 2))),
                                  constant(np.zeros((3, 2))), constant(rng.normal(size=(2, 1))))
        np.testing.assert_allclose(alpha.data, np.full((6, 6), 1 / 6), atol=1e-15)

    def test_single_node_graph(self, rng):
        g = Graph(0, 1, np.zeros((0, 2)), rng.normal(size=(1, 3)), 0)
        params = small_params()
        aug, pairs, states = node_states(params, g)
        maps = attention_maps(states, pairs, params, "gt.layer0.mha", SMALL.heads)
        for m in maps:
            assert m.shape == (2, 2)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_head_matches_dense_loops(self, rng):
        n, w, dh, T = 4, 3, 2, 3
        gs = rng.normal(size=(n, w))
        e = rng.normal(size=(n, n, T))
        wq, wk, wv, we, wa = (rng.normal(size=s) for s in [(w, dh), (w, dh), (w, dh), (T, dh), (dh, 1)])
        pairs = PairIndex(e.reshape(n * n, T))
        out, _ = attention_head(constant(gs), pairs, *(constant(a) for a in (wq, wk, wv, we, wa)))
        q, k, v = gs @ wq, gs @ wk, gs @ wv
        ref = np.zeros((n, dh))
        for i in range(n):
            ehat = np.array([np.maximum(q[i] * k[j] + e[i, j] @ we, 0) for j in range(n)])
            s = (ehat @ wa).ravel()
            a = np.exp(s - s.max())
            a /= a.sum()
            ref[i] = sum(a[j] * (v[j] + ehat[j]) for j in range(n))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        params = small_params()
        g = random_graph(rng, 7)
        perm = rng.permutation(7)
        h = permute_graph(g, perm)
        _, pg, sg = node_states(params, g)
        _, ph, sh = node_states(params, h)
        out_g = rrwp_mha(sg, pg, params, "gt.layer0.mha", SMALL.heads).data
        out_h = rrwp_mha(sh, ph, params, "gt.layer0.mha", SMALL.heads).data
        np.testing.assert_allclose(out_h[perm], out_g[:7], atol=1e-10)
        np.testing.assert_allclose(out_h[7], out_g[7], atol=1e-10)


class TestLayer:
    def test_zeroed_weights_keep_residual(self, rng):
        params = small_params()
        for name, p in params.items():
            if name.startswith("gt.layer0.") and (".mha." in name or ".ffn." in name):
                p.data = np.zeros_like(p.data)
        params["gt.layer0.norm1.gain"].data[:] = 1.0
        params["gt.layer0.norm1.bias"].data[:] = 0.0
        params["gt.layer0.norm2.gain"].data[:] = 1.0
        params["gt.layer0.norm2.bias"].data[:] = 0.0
        g = constant(rng.normal(size=(5, 8)))
        out = gt_layer(g, PairIndex(np.zeros((25, 3))), params, "gt.layer0", SMALL.heads).data
        x = g.data
        normed = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
        # norm of the zero FFN output is zero, so only the residual survives
        np.testing.assert_allclose(out, normed, atol=1e-12)

    def test_gradient_two_layers(self, rng):
        params = small_params()
        g = random_graph(rng, 4)
        aug = add_supernode(g, SMALL.walk_length)
        pairs = PairIndex.build(aug)
        names = ["gt.embed.W", "gt.layer0.mha.head0.WQ", "gt.layer0.mha.head1.WE", "gt.layer1.ffn.W1", "gt.layer1.norm2.gain", "gt.super"]

        def f():
            out = gt_branch(g.x, aug, pairs, rayleigh_vector(g.x, normalized_laplacian(g)), params, 2, SMALL.heads)
            return ad.sum_all(ad.mul(out, constant(rng_w(1, 8))))

        assert finite_diff_check(f, [params[n] for n in names]) <= 1e-4


class TestReadout:
    def test_combine_single_layer(self, rng):
        s = constant(rng.normal(size=(1, 4)))
        w, b = constant(rng.normal(size=(4, 4))), constant(rng.normal(size=(1, 4)))
        np.testing.assert_allclose(combine_supernode([s], w, b).data, s.data @ w.data + b.data)

    def test_combine_width_check(self, rng):
        states = [constant(rng.normal(size=(1, 4))) for _ in range(3)]
        with pytest.raises(ad.ShapeError):
            combine_supernode(states, constant(np.ones((8, 4))), constant(np.zeros((1, 4))))

    def test_enhance_zero_rayleigh(self, rng):
        params = small_params()
        params["gt.rq.b"].data[:] = 0.0
        params["gt.enhance.b"].data[:] = 0.0
        h = constant(rng.normal(size=(1, 8)))
        out = spectrum_enhance(h, np.zeros(3), params).data
        w = params["gt.enhance.W"].data[:8]
        np.testing.assert_allclose(out, np.maximum(h.data @ w, 0), atol=1e-14)

    def test_rayleigh_distinguishes_flip(self):
        g = Graph(0, 4, [(0, 1), (1, 2), (2, 3)], np.ones((4, 1)), 0)
        flipped = Graph(0, 4, g.edges, np.array([[1.0], [-1.0], [1.0], [-1.0]]), 0)
        r1 = rayleigh_vector(g.x, normalized_laplacian(g))
        r2 = rayleigh_vector(flipped.x, normalized_laplacian(flipped))
        assert r2[0] > r1[0] + 1.0

    def test_gradient_reaches_both_paths(self, rng):
        params = small_params()
        h = ad.add(constant(rng.normal(size=(1, 8))), params["gt.combine.b"])
        out = spectrum_enhance(h, rng.uniform(0.5, 1.5, size=3), params)
        ad.backward(ad.sum_all(out))
        assert np.abs(params["gt.rq.W"].grad).sum() > 0
        assert np.abs(params["gt.combine.b"].grad).sum() > 0

    def test_branch_invariant_and_finite(self, rng):
        params = small_params()
        for n in (1, 2, 9):
            g = random_graph(rng, n)
            perm = rng.permutation(n)
            h = permute_graph(g, perm)
            outs = []
            for graph in (g, h):
                aug = add_supernode(graph, SMALL.walk_length)
                r = rayleigh_vector(graph.x, normalized_laplacian(graph))
                outs.append(gt_branch(graph.x, aug, PairIndex.build(aug), r, params, 2, SMALL.heads).data)
            assert np.all(np.isfinite(outs[0]))
            np.testing.assert_allclose(outs[0], outs[1], atol=1e-10)

    def test_edgeless_finite(self, rng):
        params = small_params()
        g = Graph(0, 5, np.zeros((0, 2)), rng.normal(size=(5, 3)), 0)
        aug = add_supernode(g, SMALL.walk_length)
        out = gt_branch(g.x, aug, PairIndex.build(aug), rayleigh_vector(g.x, normalized_laplacian(g)), params, 2, SMALL.heads)
        assert np.all(np.isfinite(out.data))
