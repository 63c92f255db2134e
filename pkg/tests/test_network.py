import math

import numpy as np
import pytest

from trifuse import network as nw
from trifuse import tensor as tt
from trifuse.network import FusionNet, TmfaBlock, concat_modalities, count_parameters, split_modalities
from trifuse.tensor import ShapeError, Tensor

from gradcheck import COMPOSITE_TOL, check_gradients, leaf

TINY_WIDTHS = (4, 4, 8, 8)


class TestConcatModalities:
    def test_constant_planes_readable_in_order(self):
        x, y, s = (Tensor(np.full((1, 4, 4), v)) for v in (0.1, 0.5, 0.9))
        c = concat_modalities(x, y, s)
        assert np.allclose(c.data[0], 0.1) and np.allclose(c.data[1], 0.5) and np.allclose(c.data[2], 0.9)

    def test_identical_inputs_identical_channels(self):
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 5, 5)))
        c = concat_modalities(x, x, x)
        assert np.array_equal(c.data[0], c.data[1]) and np.array_equal(c.data[1], c.data[2])

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(1)
        x, y, s = (Tensor(rng.uniform(size=(1, 6, 6))) for _ in range(3))
        a, b, c = split_modalities(concat_modalities(x, y, s))
        assert np.array_equal(a.data, x.data)
        assert np.array_equal(b.data, y.data)
        assert np.array_equal(c.data, s.data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            concat_modalities(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4))), Tensor(np.zeros((1, 4, 4))))


class TestTmfa:
    def test_zero_input_zero_output(self):
        block = TmfaBlock(rng=np.random.default_rng(2))
        out = block(Tensor(np.zeros((2, 3, 4, 4))))
        assert np.array_equal(out.data, np.zeros((2, 3, 4, 4)))

    def test_zero_parameters_gate_at_half(self):
        block = TmfaBlock(rng=np.random.default_rng(3))
        for _, p in block.parameters():
            p.data[...] = 0.0
        c = Tensor(np.random.default_rng(4).uniform(size=(1, 3, 4, 4)))
        out = block(c)
        assert np.allclose(out.data, 0.5 * c.data)

    def test_weights_strictly_inside_unit_interval(self):
        block = TmfaBlock(rng=np.random.default_rng(5))
        c = Tensor(np.random.default_rng(6).normal(size=(4, 3, 8, 8)) * 10)
        w = block.attention_weights(c)
        assert np.all(w > 0) and np.all(w < 1)

    def test_output_shape_preserved(self):
        block = TmfaBlock(rng=np.random.default_rng(7))
        out = block(Tensor(np.zeros((2, 3, 5, 7))))
        assert out.shape == (2, 3, 5, 7)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        block = TmfaBlock(rng=rng)
        c = leaf(rng.uniform(0.1, 0.9, size=(1, 3, 4, 4)))
        tensors = [c] + [p for _, p in block.parameters()]

        def f(*args):
            return block(args[0]).sum()

        check_gradients(f, tensors)

    def test_gating_is_nonlinear_in_scale(self):
        # scaling the input scales the squeezed statistics, but the sigmoid
        # gate makes the output depart from plain proportionality
        block = TmfaBlock(rng=np.random.default_rng(9))
        block.fc1.weight.data = np.array([[0.5, 0.5, 0.5]])
        block.fc1.bias.data = np.zeros(1)
        block.fc2.weight.data = np.array([[1.0], [0.5], [-0.5]])
        block.fc2.bias.data = np.zeros(3)
        c = Tensor(np.random.default_rng(10).uniform(0.2, 1.0, size=(1, 3, 6, 6)))
        scaled = block(Tensor(3.0 * c.data)).data
        assert not np.allclose(scaled, 3.0 * block(c).data, rtol=1e-3)

    def test_bottleneck_clamped_to_one(self):
        block = TmfaBlock(channels=3, reduction=16, rng=np.random.default_rng(10))
        assert block.fc1.weight.shape == (1, 3)
        assert block.fc2.weight.shape == (3, 1)


def _census_resblock(c_in, c_out):
    count = c_out * c_in * 9 + 2 * c_out              # conv1 + norm1 affine
    count += 2 * c_out * nw.EMBED_FEATURES + 2 * c_out  # scale/shift projection
    count += c_out * c_out * 9 + 2 * c_out            # conv2 + norm2 affine
    if c_in != c_out:
        count += c_out * c_in                         # 1x1 skip
    return count


def _census(widths, tmfa_enabled=True, reduction=16):
    w0, w1, w2, w3 = widths
    count = nw.EMBED_FEATURES * nw.EMBED_DIM + nw.EMBED_FEATURES
    count += nw.EMBED_FEATURES * nw.EMBED_FEATURES + nw.EMBED_FEATURES
    count += w0 * 6 * 9
    count += _census_resblock(w0, w0) + _census_resblock(w0, w1)
    count += _census_resblock(w1, w2) + _census_resblock(w2, w3)
    count += 4 * w3 * w3
    count += _census_resblock(2 * w3, w3) + _census_resblock(w3 + w2, w2)
    count += _census_resblock(w2 + w1, w1) + _census_resblock(w1 + w0, w0)
    taps = w0 + nw.FusionNet.INPUT_TAPS
    count += 2 * taps * nw.EMBED_FEATURES + 2 * taps  # output gate
    count += 3 * taps * 9                             # head
    if tmfa_enabled:
        count += nw.tmfa_parameter_count(3, reduction)
    return count


class TestFusionNet:
    def test_zero_initialized_head_outputs_zero(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(11))
        rng = np.random.default_rng(12)
        z = Tensor(rng.normal(size=(3, 8, 8)))
        i_t = Tensor(rng.normal(size=(3, 8, 8)))
        out = nw.eps_theta(z, i_t, 0.5, net)
        assert np.array_equal(out.data, np.zeros((3, 8, 8)))

    @pytest.mark.parametrize("hw", [8, 16, 32])
    def test_output_shape_matches_latent(self, hw):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(13))
        rng = np.random.default_rng(14)
        z = Tensor(rng.normal(size=(3, hw, hw)))
        i_t = Tensor(rng.normal(size=(3, hw, hw)))
        assert nw.eps_theta(z, i_t, 0.9, net).shape == (3, hw, hw)

    def test_unsupported_spatial_size_rejected(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(15))
        bad = Tensor(np.zeros((3, 12, 12)))
        with pytest.raises(ShapeError, match="multiples of 8"):
            nw.eps_theta(bad, bad, 0.5, net)

    def test_spatial_mismatch_rejected(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(16))
        with pytest.raises(ShapeError):
            nw.eps_theta(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((3, 16, 16))), 0.5, net)

    def test_invalid_gamma_rejected(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(17))
        x = Tensor(np.zeros((3, 8, 8)))
        with pytest.raises(ValueError):
            nw.eps_theta(x, x, 0.0, net)

    def test_batched_forward_matches_stacked_singles(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(18))
        for _, p in net.head.parameters():
            p.data[...] = np.random.default_rng(19).normal(size=p.shape)
        rng = np.random.default_rng(20)
        z = rng.normal(size=(2, 3, 8, 8))
        it = rng.normal(size=(2, 3, 8, 8))
        gammas = np.array([0.3, 0.8])
        batched = net.forward(Tensor(z), Tensor(it), gammas).data
        singles = [net.forward(Tensor(z[i]), Tensor(it[i]), gammas[i]).data for i in range(2)]
        assert np.allclose(batched, np.stack(singles), atol=1e-12)

    def test_full_network_gradients(self):
        net = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(21))
        rng = np.random.default_rng(22)
        net.head.kernel.data = rng.normal(size=net.head.kernel.shape) * 0.1
        modalities = leaf(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)))
        i_t = leaf(rng.normal(size=(1, 3, 8, 8)) * 0.5)
        weights = Tensor(rng.normal(size=(1, 3, 8, 8)))
        params = [p for _, p in net.named_parameters()]
        tensors = [modalities, i_t] + params

        def f(*args):
            z = net.conditioning(args[0])
            return (net.forward(z, args[1], 0.6) * weights).sum()

        check_gradients(f, tensors, tol=COMPOSITE_TOL, sample=2, seed=23)


class TestParameterCount:
    def test_removing_tmfa_changes_count_by_closed_form(self):
        with_block = FusionNet(TINY_WIDTHS, tmfa_enabled=True, rng=np.random.default_rng(24))
        without = FusionNet(TINY_WIDTHS, tmfa_enabled=False, rng=np.random.default_rng(24))
        diff = count_parameters(with_block) - count_parameters(without)
        r = 16
        assert diff == 3 * math.ceil(3 / r) * 2 + math.ceil(3 / r) + 3
        assert diff == nw.tmfa_parameter_count(3, r)

    @pytest.mark.parametrize("widths", [TINY_WIDTHS, (8, 16, 16, 16), (16, 32, 64, 64)])
    def test_census_matches_actual_count(self, widths):
        net = FusionNet(widths, rng=np.random.default_rng(25))
        assert count_parameters(net) == _census(widths)

    def test_doubling_widths_matches_census(self):
        doubled = tuple(2 * w for w in TINY_WIDTHS)
        net = FusionNet(doubled, rng=np.random.default_rng(26))
        assert count_parameters(net) == _census(doubled)

    def test_count_invariant_under_reseeding(self):
        a = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(27))
        b = FusionNet(TINY_WIDTHS, rng=np.random.default_rng(99))
        assert count_parameters(a) == count_parameters(b)


class TestGammaEmbedding:
    def test_shape_and_constantness(self):
        emb = nw.gamma_embedding(np.array([0.5, 0.9]))
        assert emb.shape == (2, nw.EMBED_DIM)
        assert not emb.requires_grad

    def test_distinct_gammas_distinct_embeddings(self):
        emb = nw.gamma_embedding(np.array([0.1, 0.9])).data
        assert not np.allclose(emb[0], emb[1])
