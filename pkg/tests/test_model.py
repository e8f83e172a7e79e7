import numpy as np
import pytest

from stgormer.data import Normalizer
from stgormer.graph import SpatioTemporalGraph, relabel
from stgormer.model import (StgormerConfig, build, load_model, loss,
                            save_model)
from stgormer.moe import MoEState
from stgormer.numerics import Tensor, finite_difference_check


def small_graph(n=6, seed=2, prob=0.35):
    rng = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(n)
             if u != v and rng.random() < prob]
    return SpatioTemporalGraph.from_edge_list(n, pairs)


def small_config(**overrides):
    base = dict(hidden_dim=8, heads=2, block_order="ST", experts=3,
                expert_expansion=2, time_dim=3, temporal_features=2,
                degree_dim=4, max_degree=8, max_spd=6, alpha=0.01,
                input_len=8, horizon=1, channels=1, seed=9)
    base.update(overrides)
    return StgormerConfig(**base)


def sample_inputs(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cfg.input_len, n, cfg.channels))
    ts = rng.uniform(0, 1, size=(cfg.input_len, cfg.temporal_features))
    y = rng.normal(size=(cfg.horizon, n, cfg.channels))
    return x, ts, y


class TestBuild:
    def test_block_structure_follows_order(self):
        model = build(small_config(block_order="ST"), small_graph())
        assert [b.axis for b in model.blocks] == ["S", "T"]
        assert model.blocks[0].axis == "S"

    def test_same_seed_same_initial_checkpoint(self, tmp_path):
        g = small_graph()
        m1 = build(small_config(), g)
        m2 = build(small_config(), g)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(m1, p1)
        save_model(m2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_different_parameters(self):
        g = small_graph()
        m1 = build(small_config(seed=1), g)
        m2 = build(small_config(seed=2), g)
        assert not np.array_equal(m1.fusion_w.data, m2.fusion_w.data)

    def test_parameter_count_audit(self):
        cfg = small_config()
        model = build(cfg, small_graph())
        d, k, dt = cfg.hidden_dim, cfg.temporal_features, cfg.time_dim
        fusion_in = cfg.channels + k * dt + cfg.degree_dim
        expected = (
            k * 2 * dt                                   # time encodings
            + 2 * (cfg.max_degree + 2) * cfg.degree_dim  # degree tables
            + fusion_in * d + d                          # fusion projection
            + (cfg.max_spd + 3)                          # spd bias table
        )
        hidden = cfg.expert_expansion * d
        per_block = (
            4 * d * d + 3 * d                            # attention (no key bias)
            + 4 * d                                      # two layer norms
            + cfg.experts * (2 * d * hidden + hidden + d)  # experts
            + d * cfg.experts + cfg.experts              # router
        )
        expected += len(cfg.block_order) * per_block
        expected += cfg.input_len * d * cfg.horizon * cfg.channels \
            + cfg.horizon * cfg.channels                 # regression head
        assert model.parameter_count() == expected

    def test_invalid_configs_rejected_with_all_errors(self):
        cfg = small_config(hidden_dim=7, heads=2, block_order="SX", experts=0)
        msgs = cfg.validate()
        assert len(msgs) == 3
        with pytest.raises(ValueError, match="not divisible"):
            build(cfg, small_graph())

    def test_routers_have_disjoint_paths_per_axis(self):
        model = build(small_config(block_order="ST"), small_graph())
        paths = model.store.paths()
        spatial = [p for p in paths if "spatial.ffn.router" in p]
        temporal = [p for p in paths if "temporal.ffn.router" in p]
        assert spatial and temporal
        assert not set(spatial) & set(temporal)


class TestForward:
    def test_output_shape_contract(self):
        cfg = small_config(horizon=3)
        g = small_graph()
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        assert model.forward(x, ts).shape == (3, g.num_nodes, 1)

    def test_block_order_realized_in_sequence(self):
        cfg = small_config(block_order="STTS")
        g = small_graph()
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        trace = []
        model.forward_batch(x[None], ts[None], trace=trace)
        assert trace == ["S", "T", "T", "S"]

    def test_shape_errors(self):
        cfg = small_config()
        g = small_graph()
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        with pytest.raises(ValueError, match="input_len"):
            model.forward(x[:4], ts[:4])
        with pytest.raises(ValueError, match="timestamps"):
            model.forward(x, ts[:, :1])

    def test_forward_deterministic(self):
        cfg = small_config()
        g = small_graph()
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        assert np.array_equal(model.forward(x, ts).data,
                              model.forward(x, ts).data)

    def test_node_permutation_equivariance(self):
        cfg = small_config()
        g = small_graph()
        n = g.num_nodes
        x, ts, _ = sample_inputs(cfg, n)
        base = build(cfg, g).forward(x, ts).data
        rng = np.random.default_rng(77)
        for _ in range(5):
            perm = rng.permutation(n).tolist()
            permuted_model = build(cfg, relabel(g, perm))
            x_perm = np.empty_like(x)
            for v in range(n):
                x_perm[:, perm[v], :] = x[:, v, :]
            out = permuted_model.forward(x_perm, ts).data
            for v in range(n):
                diff = np.abs(out[:, perm[v], :] - base[:, v, :])
                assert np.max(diff) < 1e-8 * max(1.0, np.max(np.abs(base)))


class TestAblationEquivalences:
    def test_spd_bias_off_equals_zero_table(self):
        g = small_graph()
        cfg_on = small_config(use_spd_bias=True)
        cfg_off = small_config(use_spd_bias=False)
        m_on, m_off = build(cfg_on, g), build(cfg_off, g)
        m_on.spd_table.data[:] = 0.0
        x, ts, _ = sample_inputs(cfg_on, g.num_nodes)
        a = m_on.forward(x, ts).data
        b = m_off.forward(x, ts).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_time_encoding_off_ignores_timestamps(self):
        g = small_graph()
        cfg = small_config(use_time_encoding=False)
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        other_ts = np.random.default_rng(123).uniform(0, 1, size=ts.shape)
        assert np.array_equal(model.forward(x, ts).data,
                              model.forward(x, other_ts).data)

    def test_time_encoding_on_uses_timestamps(self):
        g = small_graph()
        cfg = small_config(use_time_encoding=True)
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        other_ts = np.random.default_rng(123).uniform(0, 1, size=ts.shape)
        assert not np.array_equal(model.forward(x, ts).data,
                                  model.forward(x, other_ts).data)

    def test_degree_encoding_off_ignores_tables(self):
        g = small_graph()
        cfg = small_config(use_degree_encoding=False)
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        before = model.forward(x, ts).data
        model.degree_tables.z_minus.data[:] += 3.5
        model.degree_tables.z_plus.data[:] -= 1.25
        assert np.array_equal(model.forward(x, ts).data, before)

    def test_both_encodings_off_depends_only_on_flows(self):
        g = small_graph()
        cfg = small_config(use_time_encoding=False, use_degree_encoding=False)
        model = build(cfg, g)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        base = model.forward(x, ts).data
        other_ts = np.random.default_rng(9).uniform(0, 1, size=ts.shape)
        model.degree_tables.z_minus.data[:] += 2.0
        for feature in model.time_params:
            feature.w.data[:] *= -3.0
        assert np.array_equal(model.forward(x, other_ts).data, base)

    def test_moe_off_equals_single_expert_mixture(self):
        g = small_graph()
        m_single = build(small_config(use_moe=True, experts=1), g)
        m_plain = build(small_config(use_moe=False, experts=5), g)
        x, ts, _ = sample_inputs(small_config(), g.num_nodes)
        m_single.reset_moe_states()
        a = m_single.forward(x, ts).data
        b = m_plain.forward(x, ts).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_moe_off_has_no_balance_loss(self):
        g = small_graph()
        cfg = small_config(use_moe=False)
        model = build(cfg, g)
        x, ts, y = sample_inputs(cfg, g.num_nodes)
        pred = model.forward(x, ts)
        assert model.moe_states == []
        total, parts = loss(pred, y, model.moe_states, cfg.alpha)
        assert parts["lb"] == 0.0
        assert total.item() == parts["mae"]


class TestLoss:
    def test_zero_residual(self):
        pred = Tensor(np.array([1.0, 2.0]))
        total, parts = loss(pred, np.array([1.0, 2.0]), [], 0.5)
        assert parts["mae"] == 0.0
        assert total.item() == 0.0

    def test_alpha_zero_collapses_to_mae(self):
        state = MoEState(4)
        state.accumulate(Tensor([[0.7, 0.1, 0.1, 0.1]]))
        pred = Tensor(np.array([2.0, 0.0]))
        total, parts = loss(pred, np.zeros(2), [state], 0.0)
        assert total.item() == parts["mae"] == 1.0

    def test_hand_evaluated_total(self):
        pred = Tensor(np.array([1.0, -2.0, 3.0]))
        target = np.zeros(3)
        state = MoEState(6)
        state.accumulate(Tensor([[1.0 / 6.0] * 6]))
        total, parts = loss(pred, target, [state], 0.01)
        assert parts["mae"] == 2.0
        assert abs(parts["lb"] - 1.0 / 36.0) < 1e-15
        assert abs(total.item() - (2.0 + 0.01 / 36.0)) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            loss(Tensor(np.zeros(3)), np.zeros(4), [], 0.0)


class TestPredict:
    def test_identity_normalizer_matches_forward(self):
        g = small_graph()
        cfg = small_config()
        model = build(cfg, g)
        model.normalizer = Normalizer(mean=np.zeros(1), std=np.ones(1))
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        assert np.array_equal(model.predict(x, ts), model.forward(x, ts).data)

    def test_affine_inverse(self):
        g = small_graph()
        cfg = small_config()
        model = build(cfg, g)
        model.head_w.data[:] = 0.0
        model.head_b.data[:] = 0.0
        model.normalizer = Normalizer(mean=np.array([5.0]), std=np.array([2.0]))
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        pred = model.predict(x, ts)
        assert np.array_equal(pred, np.full(pred.shape, 5.0))

    def test_round_trip_matches_manual_composition(self):
        g = small_graph()
        cfg = small_config()
        model = build(cfg, g)
        normalizer = Normalizer(mean=np.array([3.0]), std=np.array([1.5]))
        model.normalizer = normalizer
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        manual = normalizer.invert(model.forward(normalizer.apply(x), ts).data)
        assert np.max(np.abs(model.predict(x, ts) - manual)) < 1e-12

    def test_requires_normalizer(self):
        model = build(small_config(), small_graph())
        x, ts, _ = sample_inputs(model.config, model.graph.num_nodes)
        with pytest.raises(ValueError, match="normalizer"):
            model.predict(x, ts)


class TestFullGradient:
    def test_full_model_finite_difference(self):
        cfg = small_config()
        g = small_graph()
        model = build(cfg, g)
        x, ts, y = sample_inputs(cfg, g.num_nodes, seed=5)

        def fwd():
            model.reset_moe_states()
            pred = model.forward(x, ts)
            total, _ = loss(pred, y, model.moe_states, cfg.alpha)
            return total

        assert finite_difference_check(fwd, model.store, max_coords=120) < 1e-4


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        g = small_graph()
        cfg = small_config()
        model = build(cfg, g)
        model.normalizer = Normalizer(mean=np.array([1.23456789012345]),
                                      std=np.array([2.34567890123456]))
        rng = np.random.default_rng(4)
        for _, t in model.store.items():
            t.data += rng.normal(scale=0.01, size=t.data.shape)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == cfg
        assert loaded.graph == g
        assert np.array_equal(loaded.normalizer.mean, model.normalizer.mean)
        assert np.array_equal(loaded.normalizer.std, model.normalizer.std)
        for (p1, t1), (p2, t2) in zip(model.store.items(), loaded.store.items()):
            assert p1 == p2
            assert np.array_equal(t1.data, t2.data)
        x, ts, _ = sample_inputs(cfg, g.num_nodes)
        assert np.array_equal(model.forward(x, ts).data,
                              loaded.forward(x, ts).data)

    def test_save_twice_identical_bytes(self, tmp_path):
        model = build(small_config(), small_graph())
        p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"nonsense\n")
        with pytest.raises(ValueError, match="magic"):
            load_model(p)

    def test_truncated_payload_rejected(self, tmp_path):
        model = build(small_config(), small_graph())
        p = tmp_path / "model.ckpt"
        save_model(model, p)
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_model(p)
