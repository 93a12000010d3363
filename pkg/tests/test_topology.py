import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasnn.autodiff import Tape, Tensor, backward, mul, sum_all
from dasnn.layers import Identity, Module, SpikingNeuron
from dasnn.neuron import NeuronConfig
from dasnn.topology import (
    ChainStage,
    ConnectionVariant,
    DenseStage,
    TopologySpec,
    build_block,
    build_network,
    build_stage_chain,
    build_stage_dense,
    depth_ladder,
    rewrite_chain_as_dense,
    stages_for_depth,
)

V = ConnectionVariant
ALL = list(ConnectionVariant)


class Scale(Module):
    def __init__(self, c):
        self.c = c

    def forward(self, x, T):
        from dasnn.autodiff import scale
        return scale(x, self.c)


def rand_input(shape, seed=0, binary=False):
    rng = np.random.default_rng(seed)
    if binary:
        return Tensor((rng.random(shape) < 0.3).astype(np.float64))
    return Tensor(rng.standard_normal(shape))


def analog_stage(variant, n, ch, seed):
    rng = np.random.default_rng(seed)
    blocks = [build_block(variant, ch, ch, 1, rng=rng, dtype=np.float64) for _ in range(n)]
    return build_stage_chain(blocks)


class TestVariant:
    def test_parse_aliases(self):
        assert V.parse("PA-A") is V.DANET_A
        assert V.parse("danet_b") is V.DANET_B
        assert V.parse(V.SEW) is V.SEW
        with pytest.raises(ValueError):
            V.parse("resnet")

    @pytest.mark.parametrize("variant,trunk", [
        (V.ORIGIN, "spike"), (V.TDBN, "spike"), (V.BAA, "spike"), (V.DANET_C, "spike"),
        (V.DANET_D, "spike"), (V.SEW, "integer"), (V.DANET_A, "analog"), (V.DANET_B, "analog"),
    ])
    def test_trunk_kind(self, variant, trunk):
        assert variant.trunk == trunk


class TestBlockLayouts:
    def kinds(self, seq):
        return [type(m).__name__ for m in seq]

    @pytest.mark.parametrize("variant,F,Fp", [
        (V.ORIGIN, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm"], ["SpikingNeuron"]),
        (V.TDBN, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm"], ["SpikingNeuron"]),
        (V.BAA, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d"], ["BatchNorm", "SpikingNeuron"]),
        (V.SEW, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm", "SpikingNeuron"], []),
        (V.DANET_A, ["SpikingNeuron", "Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm"], []),
        (V.DANET_B, ["BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d"], []),
        (V.DANET_C, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d", "BatchNorm"], ["SpikingNeuron"]),
        (V.DANET_D, ["Conv2d", "BatchNorm", "SpikingNeuron", "Conv2d"], ["BatchNorm", "SpikingNeuron"]),
    ])
    def test_layer_order(self, variant, F, Fp):
        b = build_block(variant, 4, 4)
        assert self.kinds(b.F) == F
        assert self.kinds(b.F_prime) == Fp
        assert b.identity_shortcut

    def test_spiking_trunks_end_with_neuron(self):
        for v in ALL:
            b = build_block(v, 4, 4)
            if v.trunk == "spike":
                assert isinstance(b.F_prime[-1], SpikingNeuron)
            else:
                assert len(b.F_prime) == 0

    def test_tdbn_uses_tdbn_mode(self):
        b = build_block(V.TDBN, 4, 4, neuron=NeuronConfig(v_th=0.5))
        for bn in b.batchnorms():
            assert bn.params.mode == "tdbn" and bn.params.v_th == 0.5

    def test_baa_neuron_inputs_scaled_by_threshold(self):
        b = build_block(V.BAA, 4, 4, neuron=NeuronConfig(v_th=0.5))
        np.testing.assert_array_equal(b.F[1].params.gamma.data, 0.5)
        np.testing.assert_array_equal(b.F_prime[0].params.gamma.data, 0.5)

    @pytest.mark.parametrize("variant,kinds", [
        (V.ORIGIN, ["Conv2d", "BatchNorm"]),
        (V.SEW, ["Conv2d", "BatchNorm", "SpikingNeuron"]),
        (V.DANET_A, ["SpikingNeuron", "Conv2d", "BatchNorm"]),
        (V.DANET_B, ["BatchNorm", "SpikingNeuron", "Conv2d"]),
    ])
    def test_projection_shortcut(self, variant, kinds):
        b = build_block(variant, 4, 8, stride=2)
        assert self.kinds(b.shortcut) == kinds
        y = b(rand_input((2, 4, 8, 8), binary=True), 1)
        assert y.shape == (2, 8, 4, 4)

    def test_invalid_stride(self):
        with pytest.raises(ValueError):
            build_block(V.ORIGIN, 4, 4, stride=3)

    @pytest.mark.parametrize("variant", ALL)
    def test_zero_residual_at_init(self, variant):
        # a zero BN either ends F or silences the neuron feeding the last conv
        b = build_block(variant, 3, 3, zero_init_last_bn=True, dtype=np.float64)
        x = rand_input((2, 3, 5, 5), seed=1)
        np.testing.assert_array_equal(b.F(x, 1).data, 0.0)

    @pytest.mark.parametrize("variant", [V.DANET_A])
    def test_identity_mapping(self, variant):
        b = build_block(variant, 3, 3, zero_init_last_bn=True, dtype=np.float64)
        x = rand_input((4, 3, 5, 5), seed=2)
        np.testing.assert_array_equal(b(x, 2).data, x.data)

    def test_sew_block_integer_output(self):
        b = build_block(V.SEW, 3, 3, dtype=np.float64)
        y = b(rand_input((2, 3, 6, 6), binary=True), 1).data
        assert np.all(y == np.round(y)) and y.min() >= 0 and y.max() <= 2

    def test_origin_block_preserves_spikes(self):
        # zero-gamma last BN and IF v_th=1: O = SN(0 + O_prev) = O_prev for binary input
        b = build_block(V.ORIGIN, 3, 3, zero_init_last_bn=True, dtype=np.float64)
        x = rand_input((3, 3, 6, 6), seed=4, binary=True)
        np.testing.assert_array_equal(b(x, 3).data, x.data)


class TestDenseStage:
    def test_three_identity_layers_give_4x(self):
        stage = build_stage_dense([Identity(), Identity(), Identity()])
        x = rand_input((2, 3))
        np.testing.assert_array_equal(stage(x, 1).data, 4 * x.data)

    def test_three_identity_chain_is_identity(self):
        stage = ChainStage([Identity()] * 3)
        x = rand_input((2, 3))
        np.testing.assert_array_equal(stage(x, 1).data, x.data)

    def test_single_layer_matches_chain(self):
        f = Scale(3.0)
        x = rand_input((2, 3))
        np.testing.assert_array_equal(DenseStage([f])(x, 1).data, ChainStage([f])(x, 1).data)

    def test_two_layers_expansion(self):
        f0, f1 = Scale(2.0), Scale(-0.5)
        x = rand_input((2, 3))
        y = DenseStage([f0, f1])(x, 1).data
        np.testing.assert_allclose(y, 2 * x.data + (-0.5) * 2 * x.data)

    def test_chain_matches_manual_fold(self):
        rng = np.random.default_rng(0)
        blocks = [build_block(V.ORIGIN, 3, 3, rng=rng, dtype=np.float64) for _ in range(3)]
        x = rand_input((2, 3, 5, 5), binary=True)
        manual = x
        for b in blocks:
            manual = b(manual, 1)
        np.testing.assert_array_equal(build_stage_chain(blocks)(x, 1).data, manual.data)

    def test_concat_channels_grow(self):
        rng = np.random.default_rng(0)
        blocks = [build_block(V.ORIGIN, 4 * max(i, 1), 4, rng=rng, dtype=np.float64) for i in range(3)]
        y = build_stage_dense(blocks, "concat")(rand_input((2, 4, 5, 5), binary=True), 1)
        assert y.shape == (2, 12, 5, 5)

    def test_concat_spatial_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        blocks = [build_block(V.ORIGIN, 4, 4, rng=rng), build_block(V.ORIGIN, 4, 4, stride=2, rng=rng)]
        with pytest.raises(ValueError):
            build_stage_dense(blocks, "concat")(rand_input((2, 4, 6, 6), binary=True), 1)

    def test_danet_c_sums_previous_outputs(self):
        # scalar channel, zero-gamma last BN: each block outputs SN(sum of features)
        rng = np.random.default_rng(0)
        blocks = [build_block(V.DANET_C, 1, 1, rng=rng, zero_init_last_bn=True, dtype=np.float64)
                  for _ in range(4)]
        stage = build_stage_dense(blocks)
        stage.record = True
        x = Tensor(np.full((1, 1, 2, 2), 1.0))
        stage(x, 1)
        feats, acc = [x.data], None
        for b in blocks:
            inp = feats[0] if acc is None else acc
            out = (inp >= 1.0).astype(float)
            acc = out if acc is None else acc + out
            feats.append(out)
        np.testing.assert_array_equal(stage.outputs[-1], acc)


class TestEquivalence:
    @pytest.mark.parametrize("variant", [V.DANET_A, V.DANET_B, V.SEW])
    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_chain_equals_dense(self, variant, n):
        chain = analog_stage(variant, n, 3, seed=n)
        dense = rewrite_chain_as_dense(chain)
        x = rand_input((4, 3, 5, 5), seed=7, binary=variant is V.SEW)
        c = Tensor(np.random.default_rng(1).standard_normal((4, 3, 5, 5)))
        grads = []
        for stage in (chain, dense):
            with Tape() as tape:
                y = stage(x, 2)
                loss = sum_all(mul(y, c))
            backward(tape, loss)
            grads.append([p.grad.copy() for p in chain.parameters()])
            for p in chain.parameters():
                p.grad = None
            if stage is chain:
                y_chain = y.data
        np.testing.assert_array_equal(y_chain, y.data)
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_sew_trunks_identical(self):
        chain = analog_stage(V.SEW, 3, 2, seed=0)
        dense = rewrite_chain_as_dense(chain)
        chain.record = dense.record = True
        x = rand_input((2, 2, 6, 6), binary=True)
        chain(x, 1)
        dense(x, 1)
        for a, b in zip(chain.outputs, dense.outputs):
            np.testing.assert_array_equal(a, b)

    def test_spiking_trunk_rejected(self):
        with pytest.raises(ValueError):
            rewrite_chain_as_dense(analog_stage(V.ORIGIN, 2, 3, seed=0))

    def test_shares_parameters(self):
        chain = analog_stage(V.DANET_A, 3, 3, seed=0)
        dense = rewrite_chain_as_dense(chain)
        assert {id(p) for p in chain.parameters()} == {id(p) for p in dense.parameters()}


class TestSewIntegrality:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_trunk_bounded_by_block_index(self, seed):
        chain = analog_stage(V.SEW, 4, 2, seed=seed)
        chain.record = True
        chain(rand_input((2, 2, 5, 5), seed=seed, binary=True), 2)
        for k, out in enumerate(chain.outputs, start=1):
            assert np.all(out == np.round(out))
            assert out.min() >= 0 and out.max() <= k + 1


class TestNetwork:
    @pytest.mark.parametrize("variant", ALL)
    def test_shape_contract(self, variant):
        net = build_network(TopologySpec(variant=variant, stages=((1, 4),), time_steps=1))
        y = net(Tensor(np.random.default_rng(0).random((3, 1, 8, 8)).astype(np.float32)))
        assert y.shape == (3, 10)

    def test_multi_stage_with_time(self):
        net = build_network(TopologySpec(variant="danet-a", stages=((2, 4), (2, 8)), time_steps=3))
        assert net(Tensor(np.ones((2, 1, 8, 8), np.float32))).shape == (2, 10)

    def test_param_count_danet_a_equals_sew(self):
        spec = dict(stages=((2, 8), (2, 16)), time_steps=1)
        a = build_network(TopologySpec(variant="danet-a", **spec))
        s = build_network(TopologySpec(variant="sew", **spec))
        assert a.parameter_count() == s.parameter_count()

    def test_stem_and_head(self):
        a = build_network(TopologySpec(variant="danet-a", stages=((1, 4),)))
        o = build_network(TopologySpec(variant="origin", stages=((1, 4),)))
        assert not any(isinstance(m, SpikingNeuron) for m in a.stem)
        assert isinstance(o.stem[-1], SpikingNeuron)
        assert a.head_neuron is not None and o.head_neuron is None

    def test_dense_variants_get_dense_stages(self):
        net = build_network(TopologySpec(variant="danet-d", stages=((2, 4), (2, 8))))
        assert all(isinstance(s, DenseStage) for s in net.stages)

    def test_concat_network(self):
        net = build_network(TopologySpec(variant="danet-c", stages=((3, 4), (2, 8)), aggregation="concat"))
        assert net(Tensor(np.ones((2, 1, 8, 8), np.float32))).shape == (2, 10)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            TopologySpec(stages=((0, 4),))
        with pytest.raises(ValueError):
            TopologySpec(variant="danet-a", aggregation="concat")
        with pytest.raises(ValueError):
            TopologySpec(time_steps=0)
        with pytest.raises(ValueError):
            TopologySpec(stages=())

    def test_deterministic_construction(self):
        spec = TopologySpec(variant="sew", stages=((2, 4),))
        x = Tensor(np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(build_network(spec, seed=3)(x).data,
                                      build_network(spec, seed=3)(x).data)

    def test_spec_round_trip(self):
        spec = TopologySpec(variant="danet-c", stages=((2, 4),), aggregation="concat")
        assert TopologySpec.from_dict(spec.to_dict()) == spec

    def test_state_dict_round_trip(self):
        spec = TopologySpec(variant="baa", stages=((1, 4),))
        a, b = build_network(spec, seed=0), build_network(spec, seed=1)
        b.load_state_dict(a.state_dict())
        x = Tensor(np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32))
        a.eval(), b.eval()
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_layouts(self):
        assert depth_ladder(0) == ((2, 16), (2, 32), (2, 64))
        assert stages_for_depth(8) == ((4, 16), (4, 32))
        assert stages_for_depth(5) == ((3, 16), (2, 32))
