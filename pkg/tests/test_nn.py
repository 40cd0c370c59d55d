"""Network graph, layer backward, and level-semantics tests.

Gradient checks compare hand-written backward passes against central
finite differences of the scalar loss at 64-bit precision.
"""

import numpy as np
import pytest

from nestednet import arch, nn
from nestednet.nesting import (
    MaskHierarchy,
    NestingError,
    build_channel_schedule,
    build_layer_schedule,
    magnitude_mask,
    validate_nesting,
)
from nestednet.nn import build_network, extract_standalone, softmax_cross_entropy


def loss_at(net, x, y, level):
    logits, _ = net.forward(x, level, mode="train")
    loss, _ = softmax_cross_entropy(logits, y)
    return loss


def analytic_grads(net, x, y, level):
    logits, trace = net.forward(x, level, mode="train")
    _, gl = softmax_cross_entropy(logits, y)
    return net.backward(trace, gl)


def jitter_params(net, rng, scale=0.05):
    """Move every parameter off zero so no ReLU sits exactly on its kink
    (finite differences are one-sided there)."""
    for info in net.params.values():
        info.value += rng.normal(scale=scale, size=info.value.shape)


def fd_check(net, x, y, level, rng, picks=6, h=1e-5, tol=1e-4):
    """Central-difference check on a random subset of every parameter."""
    grads = analytic_grads(net, x, y, level)
    for name in sorted(net.params):
        value = net.params[name].value
        flat = value.reshape(-1)
        idx = rng.choice(flat.size, size=min(picks, flat.size), replace=False)
        for t in idx:
            orig = flat[t]
            flat[t] = orig + h
            up = loss_at(net, x, y, level)
            flat[t] = orig - h
            dn = loss_at(net, x, y, level)
            flat[t] = orig
            fd = (up - dn) / (2 * h)
            an = grads[name].reshape(-1)[t]
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom < tol, f"{name}[{t}]: fd={fd:.3e} analytic={an:.3e}"


def small_mlp(levels=1, fractions=None, bits=64, seed=0, classes=5):
    body, head = arch.mlp((6, 8, 7), classes)
    sched = build_channel_schedule(body, head, fractions or (1.0,) * levels)
    return build_network(body, head, levels, seed=seed, mode="channel",
                         schedule=sched, bits=bits)


class TestBuildNetwork:
    def test_mlp_parameter_count(self):
        body, head = arch.mlp((784, 256), 10)
        sched = build_channel_schedule(body, head, (1.0,))
        net = build_network(body, head, 1, seed=0, schedule=sched)
        total = sum(info.value.size for info in net.params.values())
        assert total == 784 * 256 + 256 + 256 * 10 + 10

    def test_residual_depth_formula(self):
        body, _ = arch.resnet(3, (16, 32, 64), 5, 10)
        assert arch.conv_layer_count(body) == 6 * 5 + 2 == 32

    def test_seeded_determinism(self):
        a = small_mlp(seed=11)
        b = small_mlp(seed=11)
        assert a.checksum() == b.checksum()
        c = small_mlp(seed=12)
        assert a.checksum() != c.checksum()

    def test_bad_level_count(self):
        body, head = arch.mlp((4, 4), 3)
        with pytest.raises(NestingError):
            build_network(body, head, 0, seed=0, mode="weight_prune")


class TestForwardSemantics:
    def test_full_level_equals_unmasked_baseline(self):
        body, head = arch.mlp((6, 8, 8), 4)
        pruned = build_network(body, head, 2, seed=3, mode="weight_prune", bits=64)
        sched = build_channel_schedule(body, head, (1.0,))
        plain = build_network(body, head, 1, seed=3, mode="channel", schedule=sched, bits=64)
        x = np.random.default_rng(0).random((5, 6))
        feats_pruned = pruned.features(x, level=2)
        feats_plain = plain.features(x, level=1)
        np.testing.assert_array_equal(feats_pruned, feats_plain)
        # identical head values => identical logits
        pruned.params["head2.w"].value[...] = plain.params["head1.w"].value
        pruned.params["head2.b"].value[...] = plain.params["head1.b"].value
        np.testing.assert_array_equal(
            pruned.forward(x, 2, "eval")[0], plain.forward(x, 1, "eval")[0]
        )

    def test_zero_input_zero_logits(self):
        net = small_mlp()
        logits, _ = net.forward(np.zeros((3, 6)), 1, "eval")
        assert not logits.any()

    def test_level_out_of_range(self):
        net = small_mlp(levels=2, fractions=(0.5, 1.0))
        with pytest.raises(NestingError):
            net.forward(np.zeros((1, 6)), 3)

    def test_train_forward_is_repeatable(self):
        body, head = arch.cnn(2, (4, 6), 3)
        sched = build_channel_schedule(body, head, (0.5, 1.0))
        net = build_network(body, head, 2, seed=5, mode="channel", schedule=sched)
        x = np.random.default_rng(1).random((2, 8, 8, 2)).astype(np.float32)
        first, _ = net.forward(x, 1, "train")
        second, _ = net.forward(x, 1, "train")
        assert first.tobytes() == second.tobytes()


class TestExtraction:
    def test_channel_extraction_matches_nested_forward(self):
        body, head = arch.cnn(3, (8, 8), 10)
        sched = build_channel_schedule(body, head, (0.25, 0.5, 1.0))
        net = build_network(body, head, 3, seed=7, mode="channel", schedule=sched)
        rng = np.random.default_rng(2)
        x = rng.random((4, 8, 8, 3)).astype(np.float32)
        for level in (1, 2, 3):
            sub = extract_standalone(net, level)
            np.testing.assert_allclose(
                sub.forward(x, 1, "eval")[0], net.forward(x, level, "eval")[0], atol=1e-6
            )

    def test_layer_extraction_drops_blocks(self):
        body, head = arch.resnet(2, (4, 8, 8), 3, 6)
        sched = build_layer_schedule(body, head, (1, 3))
        net = build_network(body, head, 2, seed=9, mode="layer", schedule=sched)
        rng = np.random.default_rng(3)
        x = rng.random((2, 8, 8, 2)).astype(np.float32)
        sub = extract_standalone(net, 1)
        blocks = [s for s in sub.body_specs if s.kind == "residual_block"]
        assert len(blocks) == 3  # one per stage
        np.testing.assert_allclose(
            sub.forward(x, 1, "eval")[0], net.forward(x, 1, "eval")[0], atol=1e-6
        )

    def test_full_extraction_is_parameter_identical(self):
        net = small_mlp(levels=2, fractions=(0.5, 1.0), bits=32)
        sub = extract_standalone(net, 2)
        np.testing.assert_array_equal(sub.params["body0.w"].value,
                                      net.params["body0.w"].value)
        assert sub.params["body0.w"].value.size == net.params["body0.w"].value.size

    def test_core_extraction_quarter_params(self):
        body, head = arch.mlp((8, 8, 8), 4)
        sched = build_channel_schedule(body, head, (0.5, 1.0))
        net = build_network(body, head, 2, seed=0, mode="channel", schedule=sched)
        sub = extract_standalone(net, 1)
        assert sub.params["body2.w"].value.size == net.params["body2.w"].value.size // 4

    def test_weight_prune_extraction_refused(self):
        body, head = arch.mlp((6, 6), 3)
        net = build_network(body, head, 2, seed=0, mode="weight_prune")
        with pytest.raises(NestingError, match="density"):
            extract_standalone(net, 1)


class TestBackward:
    def test_zero_grad_logits(self):
        net = small_mlp()
        x = np.random.default_rng(0).random((3, 6))
        logits, trace = net.forward(x, 1, "train")
        grads = net.backward(trace, np.zeros_like(logits))
        assert all(not g.any() for g in grads.values())

    def test_mlp_finite_differences(self):
        rng = np.random.default_rng(10)
        net = small_mlp(levels=2, fractions=(0.5, 1.0), bits=64)
        x = rng.random((4, 6))
        y = rng.integers(0, 5, size=4)
        for level in (1, 2):
            fd_check(net, x, y, level, rng)

    def test_cnn_finite_differences(self):
        rng = np.random.default_rng(11)
        body, head = arch.cnn(2, (4, 5), 3, exempt_first=False)
        sched = build_channel_schedule(body, head, (0.5, 1.0))
        net = build_network(body, head, 2, seed=1, mode="channel", schedule=sched, bits=64)
        x = rng.random((3, 6, 6, 2))
        y = rng.integers(0, 3, size=3)
        for level in (1, 2):
            fd_check(net, x, y, level, rng, picks=4)

    def test_resnet_finite_differences(self):
        rng = np.random.default_rng(12)
        body, head = arch.resnet(2, (3, 4), 2, 3)
        sched = build_layer_schedule(body, head, (1, 2))
        net = build_network(body, head, 2, seed=2, mode="layer", schedule=sched, bits=64)
        x = rng.random((2, 6, 6, 2))
        y = rng.integers(0, 3, size=2)
        for level in (1, 2):
            fd_check(net, x, y, level, rng, picks=3)

    def test_masked_positions_get_zero_gradient(self):
        rng = np.random.default_rng(13)
        body, head = arch.mlp((6, 8, 8), 4)
        net = build_network(body, head, 2, seed=4, mode="weight_prune", bits=64)
        h = MaskHierarchy(levels=2)
        for name in net.shared_weight_names():
            w = net.params[name].value
            core = magnitude_mask(w, float(np.median(np.abs(w))))
            h.add(name, [core, np.ones_like(core)])
        assert validate_nesting(h) is None
        net.set_hierarchy(h)
        x = rng.random((4, 6))
        y = rng.integers(0, 4, size=4)
        grads = analytic_grads(net, x, y, level=1)
        for name in net.shared_weight_names():
            outside = ~h.masks[name][0]
            assert not grads[name][outside].any()

    def test_weight_prune_finite_differences(self):
        rng = np.random.default_rng(14)
        body, head = arch.mlp((6, 8, 8), 4)
        net = build_network(body, head, 2, seed=4, mode="weight_prune", bits=64)
        h = MaskHierarchy(levels=2)
        for name in net.shared_weight_names():
            w = net.params[name].value
            core = magnitude_mask(w, float(np.median(np.abs(w))))
            h.add(name, [core, np.ones_like(core)])
        net.set_hierarchy(h)
        jitter_params(net, rng)
        x = rng.random((4, 6))
        y = rng.integers(0, 4, size=4)
        for level in (1, 2):
            fd_check(net, x, y, level, rng)

    def test_stale_trace_rejected(self):
        net = small_mlp()
        other = small_mlp(seed=99)
        x = np.zeros((1, 6))
        logits, trace = net.forward(x, 1, "train")
        with pytest.raises(nn.TraceError):
            other.backward(trace, np.zeros_like(logits))
        _, eval_trace = net.forward(x, 1, "eval")
        with pytest.raises(nn.TraceError):
            net.backward(eval_trace, np.zeros_like(logits))


class TestBatchNorm:
    def _bn_net(self, bits=64):
        body, head = arch.cnn(2, (4,), 3, exempt_first=False)
        sched = build_channel_schedule(body, head, (1.0,))
        return build_network(body, head, 1, seed=6, mode="channel", schedule=sched, bits=bits)

    def test_constant_batch_normalizes_to_shift(self):
        net = self._bn_net()
        bn = net.body[1]
        bn.beta[0][...] = 0.75
        x = np.full((4, 5, 5, 4), 3.2)
        out = bn.forward(x, 0, "train", [])
        np.testing.assert_allclose(out, 0.75, atol=1e-6)

    def test_eval_with_initial_running_stats(self):
        net = self._bn_net()
        bn = net.body[1]
        x = np.random.default_rng(4).random((2, 3, 3, 4))
        out = bn.forward(x, 0, "eval", [])
        want = bn.gamma[0] * x / np.sqrt(1.0 + nn.BN_EPS) + bn.beta[0]
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_running_stats_momentum(self):
        net = self._bn_net()
        bn = net.body[1]
        x = np.random.default_rng(5).random((8, 3, 3, 4))
        bn.forward(x, 0, "train", [])
        mean = x.mean(axis=(0, 1, 2))
        np.testing.assert_allclose(bn.rmean[0], 0.1 * mean, rtol=1e-12)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(15)
        net = self._bn_net()
        x = rng.random((5, 4, 4, 2))
        y = rng.integers(0, 3, size=5)
        fd_check(net, x, y, 1, rng, picks=4)

    def test_channel_mismatch(self):
        net = self._bn_net()
        with pytest.raises(nn.DimensionError):
            net.body[1].forward(np.zeros((1, 2, 2, 3)), 0, "train", [])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 10)), [0, 3, 5, 9])
        assert loss == pytest.approx(np.log(10.0), rel=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = logits[1, 2] = 50.0
        loss, _ = softmax_cross_entropy(logits, [1, 2])
        assert loss < 1e-12

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(16)
        logits = rng.standard_normal((5, 7))
        y = rng.integers(0, 7, size=5)
        _, grad = softmax_cross_entropy(logits, y)
        h = 1e-6
        for _ in range(30):
            i, j = rng.integers(0, 5), rng.integers(0, 7)
            orig = logits[i, j]
            logits[i, j] = orig + h
            up, _ = softmax_cross_entropy(logits, y)
            logits[i, j] = orig - h
            dn, _ = softmax_cross_entropy(logits, y)
            logits[i, j] = orig
            fd = (up - dn) / (2 * h)
            assert abs(fd - grad[i, j]) / max(abs(fd), 1e-8) < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((1, 3)), [3])


class TestCostModel:
    def test_channel_levels_strictly_cheaper(self):
        body, head = arch.cnn(3, (8, 8), 10)
        sched = build_channel_schedule(body, head, (0.25, 0.5, 1.0))
        net = build_network(body, head, 3, seed=0, mode="channel", schedule=sched)
        costs = [net.madds(level, (8, 8)) for level in (1, 2, 3)]
        assert costs[0] < costs[1] < costs[2]

    def test_pruned_levels_monotone(self):
        body, head = arch.mlp((10, 12, 12), 4)
        net = build_network(body, head, 2, seed=1, mode="weight_prune")
        h = MaskHierarchy(levels=2)
        for name in net.shared_weight_names():
            w = net.params[name].value
            core = magnitude_mask(w, float(np.quantile(np.abs(w), 0.6)))
            h.add(name, [core, np.ones_like(core)])
        net.set_hierarchy(h)
        assert net.madds(1) <= net.madds(2)

    def test_skipped_blocks_cost_nothing(self):
        body, head = arch.resnet(2, (4, 4), 3, 5)
        sched = build_layer_schedule(body, head, (1, 3))
        net = build_network(body, head, 2, seed=2, mode="layer", schedule=sched)
        assert net.madds(1, (8, 8)) < net.madds(2, (8, 8))
