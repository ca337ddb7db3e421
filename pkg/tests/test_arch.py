import json
import warnings

import numpy as np
import pydot
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from smashnas.arch import (
    ArchitectureSpec,
    BlockSpec,
    EncodingError,
    NoOpCorruptionWarning,
    OpSpec,
    SearchSpaceConfig,
    canonical_pattern,
    corrupt_encoding,
    decode,
    encode,
    encoding_shape,
    layer_windows,
    param_count,
    perturb,
    sample_architecture,
    to_graphviz,
    validate,
)
from smashnas.arch.patterns import fractal_columns
from smashnas.arch.sampling import BudgetError, minimal_architecture

seeds = st.integers(0, 2**32 - 1)
small_v2 = SearchSpaceConfig.v2(M=12, N_max=16, N=4, D=2, num_blocks=2, banks_per_block_range=(3, 12),
                                op_count_budget_range=(1, 5), max_reads=4, bank_channel_choices=(4, 8),
                                param_budget=2_000_000)


class TestConfig:
    def test_v1_derived_sizes(self):
        cfg = SearchSpaceConfig.v1()
        assert cfg.hypernet_out_channels == 432
        assert cfg.encoding_rows == 49
        assert cfg.encoding_channels == 2 * 240 + 3

    def test_rejects_bad_quantum(self):
        with pytest.raises(ValueError, match="multiple of N"):
            SearchSpaceConfig.v1(N_max=40)

    def test_v1_refuses_groups(self):
        with pytest.raises(ValueError, match="v1 uses"):
            SearchSpaceConfig.v1(allowed_groups=(1, 2))

    def test_dict_round_trip(self):
        cfg = small_v2
        assert SearchSpaceConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_bottleneck_modes(self):
        assert SearchSpaceConfig.v1().bottleneck_width(12, 6) == 24
        assert SearchSpaceConfig.v2().bottleneck_width(12, 12) == 12
        assert SearchSpaceConfig.v2().bottleneck_width(48, 12) == 24


class TestValidate:
    def _one_op(self, desk, **kw):
        base = dict(read_set=(0,), write_set=(1,), n_out=4)
        base.update(kw)
        block = BlockSpec(3, 4, (OpSpec(**base),))
        return ArchitectureSpec((block, block), desk)

    def test_valid(self, desk):
        assert validate(self._one_op(desk)) == []

    @pytest.mark.parametrize(
        "kw,needle",
        [
            (dict(read_set=()), "read_set must be nonempty"),
            (dict(write_set=(5,)), "outside"),
            (dict(n_out=8), "len(write_set)"),
            (dict(dilations=(4,)), "d_max"),
            (dict(conv_mask=(True, True, False, False), dilations=(1, 1), filter_sizes=(3, 3)), "v1 ops"),
            (dict(read_set=(0, 1, 2), write_set=(0,)), "n_in=12 not divisible"),
        ],
    )
    def test_reports_violation(self, desk, kw, needle):
        if needle.startswith("n_in"):
            desk = desk.replace(D=8)
        problems = validate(self._one_op(desk, **kw))
        assert any(needle in p for p in problems), problems

    def test_wrong_block_count(self, desk):
        arch = self._one_op(desk)
        assert "expected 2 blocks" in validate(ArchitectureSpec(arch.blocks[:1], desk))[0]

    def test_budget(self, desk):
        arch = self._one_op(desk)
        tight = ArchitectureSpec(arch.blocks, desk.replace(param_budget=10))
        assert "exceeds budget" in validate(tight)[0]


class TestParamCount:
    def test_hand_count_single_op(self):
        cfg = SearchSpaceConfig.desk(num_blocks=1, in_channels=1, num_classes=3)
        op = OpSpec((0,), (0,), 4)
        arch = ArchitectureSpec((BlockSpec(3, 4, (op,)),), cfg)
        stem = 1 * 4 * 9
        op_cost = (2 * 4 + 16 * 4) + (2 * 16 + 4 * 16 * 9)
        head = 2 * 4 + 3 * 4 + 3
        assert param_count(arch) == stem + op_cost + head


class TestSerialization:
    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_json_round_trip(self, seed):
        arch = sample_architecture(small_v2, np.random.default_rng(seed))
        back = ArchitectureSpec.from_json(arch.to_json())
        assert back == arch
        assert back.config == arch.config

    def test_rejects_foreign_document(self):
        with pytest.raises(ValueError, match="not an architecture"):
            ArchitectureSpec.from_dict({"format": "other"})


class TestEncoding:
    @settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(seeds, st.sampled_from(["desk", "v2"]))
    def test_decode_inverts_encode(self, seed, which):
        cfg = SearchSpaceConfig.desk() if which == "desk" else small_v2
        arch = sample_architecture(cfg, np.random.default_rng(seed))
        c = encode(arch)
        assert c.shape == encoding_shape(cfg, arch.n_ch)
        assert decode(c, cfg) == arch

    def test_shape_formula(self, desk):
        arch = sample_architecture(desk, np.random.default_rng(0))
        assert encode(arch).shape == (1, 2 * desk.M + desk.d_max, (desk.N_max // desk.N) ** 2, arch.n_ch // desk.D)

    def test_cells_outside_windows_are_zero(self, desk):
        arch = sample_architecture(desk, np.random.default_rng(3))
        c = encode(arch).data[0]
        mask = np.zeros(c.shape[1:], bool)
        for (start, width), (_, _, op, _) in zip(layer_windows(arch), arch.layers()):
            rows = op.n_out * desk.N_max // desk.N**2
            mask[:rows, start:start + width] = True
        assert not c[:, ~mask].any()
        assert c[:, mask].sum(axis=0).min() >= 3  # at least one read, one write, one dilation

    def test_invalid_architecture_refused(self, desk):
        op = OpSpec((0,), (0, 1), 4)
        with pytest.raises(EncodingError):
            encode(ArchitectureSpec((BlockSpec(3, 4, (op,)),) * 2, desk))

    def test_decode_detects_tampering(self, desk):
        c = encode(sample_architecture(desk, np.random.default_rng(4)))
        c.data[0, 2 * desk.M:, 0, 0] = 1  # two dilations hot in one cell
        with pytest.raises(EncodingError):
            decode(c, desk)


class TestCorruption:
    def test_shuffle_dilations_keeps_shape_changes_content(self, desk):
        rng = np.random.default_rng(0)
        for _ in range(20):
            arch = sample_architecture(desk, rng)
            if len({op.dilations for _, _, op, _ in arch.layers()}) < 2:
                continue
            c = encode(arch)
            bad = corrupt_encoding(c, "shuffle_dilations", rng, desk)
            assert bad.shape == c.shape and bad != c
            new = decode(bad, desk)
            assert sorted(op.dilations for _, _, op, _ in new.layers()) == sorted(
                op.dilations for _, _, op, _ in arch.layers()
            )

    def test_no_degree_of_freedom_warns(self, desk):
        arch = minimal_architecture(desk)
        c = encode(arch)
        with pytest.warns(NoOpCorruptionWarning):
            assert corrupt_encoding(c, "swap_layers", np.random.default_rng(0), desk) is c

    def test_unknown_mode(self, desk):
        c = encode(minimal_architecture(desk))
        with pytest.raises(ValueError):
            corrupt_encoding(c, "reverse", np.random.default_rng(0), desk)


class TestSampling:
    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_samples_are_valid_and_within_budget(self, seed):
        arch = sample_architecture(small_v2, np.random.default_rng(seed))
        assert validate(arch) == []
        assert param_count(arch) <= small_v2.param_budget

    def test_same_seed_same_architecture(self, desk):
        a = sample_architecture(desk, np.random.default_rng(9))
        assert a == sample_architecture(desk, np.random.default_rng(9))

    def test_impossible_budget(self, desk):
        with pytest.raises(BudgetError):
            sample_architecture(desk, np.random.default_rng(0), budget=10)

    def test_reads_only_written_banks(self, desk):
        rng = np.random.default_rng(5)
        for _ in range(50):
            for block in sample_architecture(desk, rng).blocks:
                written = {0}
                for op in block.ops:
                    assert set(op.read_set) <= written
                    written.update(op.write_set)


class TestPerturb:
    def test_rate_zero_is_identity(self, desk):
        arch = sample_architecture(desk, np.random.default_rng(1))
        assert perturb(arch, 0.0, np.random.default_rng(2)) is arch

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.floats(0.01, 1.0))
    def test_keeps_topology_and_validity(self, seed, rate):
        rng = np.random.default_rng(seed)
        arch = sample_architecture(small_v2, rng)
        new = perturb(arch, rate, rng)
        assert validate(new) == []
        assert [(b.bank_count, b.bank_channels, len(b.ops)) for b in new.blocks] == [
            (b.bank_count, b.bank_channels, len(b.ops)) for b in arch.blocks
        ]

    def test_full_rate_changes_something(self, desk):
        rng = np.random.default_rng(7)
        arch = sample_architecture(desk, rng)
        assert any(perturb(arch, 1.0, rng) != arch for _ in range(5))

    def test_rate_range(self, desk):
        with pytest.raises(ValueError):
            perturb(minimal_architecture(desk), 1.5, np.random.default_rng(0))


class TestPatterns:
    def test_resnet_reads_and_writes_bank_zero(self, tiny):
        block = canonical_pattern("resnet", 3, tiny).blocks[0]
        assert all(op.read_set == (0,) and op.write_set == (0,) for op in block.ops)

    def test_densenet_reads_all_previous(self, tiny):
        block = canonical_pattern("densenet", 4, tiny).blocks[0]
        assert [op.read_set for op in block.ops] == [(0,), (0, 1), (0, 1, 2), (0, 1, 2, 3)]
        assert [op.write_set for op in block.ops] == [(1,), (2,), (3,), (4,)]

    def test_fractal_three_ops(self, tiny):
        block = canonical_pattern("fractalnet", 3, tiny).blocks[0]
        assert [(op.read_set, op.write_set) for op in block.ops] == [((0,), (2,)), ((2,), (1,)), ((0,), (1,))]

    @pytest.mark.parametrize("n,cols", [(1, 1), (3, 2), (7, 3)])
    def test_fractal_columns(self, n, cols):
        assert fractal_columns(n) == cols

    def test_fractal_rejects_other_counts(self):
        with pytest.raises(ValueError):
            fractal_columns(4)


class TestGraphviz:
    def test_parses_with_pydot(self, desk):
        arch = sample_architecture(desk, np.random.default_rng(11))
        (graph,) = pydot.graph_from_dot_data(to_graphviz(arch))
        nodes = {n.get_name() for sub in graph.get_subgraphs() for n in sub.get_nodes()}
        assert len(nodes) == arch.num_ops
        assert len(graph.get_subgraphs()) == desk.num_blocks

    def test_dense_edges(self, tiny):
        dot = to_graphviz(canonical_pattern("densenet", 3, tiny))
        (graph,) = pydot.graph_from_dot_data(dot)
        pairs = sorted((e.get_source(), e.get_destination()) for e in graph.get_edges())
        assert pairs == [("b0_op0", "b0_op1"), ("b0_op0", "b0_op2"), ("b0_op1", "b0_op2")]

    def test_self_loop_for_residual(self, tiny):
        (graph,) = pydot.graph_from_dot_data(to_graphviz(canonical_pattern("resnet", 2, tiny)))
        pairs = {(e.get_source(), e.get_destination()) for e in graph.get_edges()}
        assert ("b0_op0", "b0_op0") in pairs and ("b0_op0", "b0_op1") in pairs

    def test_quotes_are_escaped(self, tiny):
        dot = to_graphviz(canonical_pattern("resnet", 1, tiny), name='a "b"')
        assert pydot.graph_from_dot_data(dot)[0] is not None


def test_warnings_filter_untouched():
    # corruption warnings are opt-in noise; the module must not install filters globally
    assert not any(f[2] is NoOpCorruptionWarning and f[0] == "ignore" for f in warnings.filters)
