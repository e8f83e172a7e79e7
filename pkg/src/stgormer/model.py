"""Full model assembly: encodings, axis-wise attention blocks, MoE, regression head.

Each block applies attention along its axis, then the feedforward sublayer
(mixture-of-experts, or a single expert when MoE is disabled), both wrapped in
residual + post-layer-norm.  The regression head flattens the time axis per
node.  All parameters are seeded per path, so two configs that share a
parameter path initialize it identically.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, spatial_attention, spd_bias, temporal_attention
from .encoding import (DegreeEmbeddingTables, Time2VecParams, fuse_inputs,
                       spatial_input_encoding, temporal_input_encoding)
from .graph import SpatioTemporalGraph, SpdMatrix, shortest_path_matrix
from .moe import (ExpertParams, MoEState, RouterParams, expert_forward,
                  load_balance_loss, moe_forward)
from .numerics import (ParameterStore, Tensor, layer_norm, linear,
                       read_param_block, write_param_block)

_MODEL_MAGIC = "stgormer-model-checkpoint 1"


@dataclass
class StgormerConfig:
    """Every architectural knob plus the ablation toggles and init seed."""

    hidden_dim: int = 64
    heads: int = 4
    block_order: str = "SSSTTT"
    experts: int = 6
    expert_expansion: int = 4
    time_dim: int = 8
    temporal_features: int = 2
    degree_dim: int = 8
    max_degree: int = 16
    max_spd: int = 10
    alpha: float = 0.01
    input_len: int = 12
    horizon: int = 1
    channels: int = 1
    use_time_encoding: bool = True
    use_degree_encoding: bool = True
    use_spd_bias: bool = True
    use_moe: bool = True
    seed: int = 0

    def validate(self) -> list[str]:
        """Collect every violation (not just the first)."""
        errors = []
        if self.hidden_dim < 1:
            errors.append("hidden_dim must be >= 1")
        if self.heads < 1:
            errors.append("heads must be >= 1")
        elif self.hidden_dim % self.heads:
            errors.append(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not self.block_order:
            errors.append("block_order must be non-empty")
        elif set(self.block_order) - {"S", "T"}:
            errors.append(
                f"block_order {self.block_order!r} may only contain 'S' and 'T'")
        if self.experts < 1:
            errors.append("experts must be >= 1")
        if self.expert_expansion < 1:
            errors.append("expert_expansion must be >= 1")
        if self.time_dim < 1:
            errors.append("time_dim must be >= 1")
        if self.temporal_features < 1:
            errors.append("temporal_features must be >= 1")
        if self.degree_dim < 1:
            errors.append("degree_dim must be >= 1")
        if self.max_degree < 0:
            errors.append("max_degree must be >= 0")
        if self.max_spd < 0:
            errors.append("max_spd must be >= 0")
        if self.alpha < 0:
            errors.append("alpha must be >= 0")
        if self.input_len < 1:
            errors.append("input_len must be >= 1")
        if self.horizon < 1:
            errors.append("horizon must be >= 1")
        if self.channels < 1:
            errors.append("channels must be >= 1")
        return errors

    @property
    def fusion_width(self) -> int:
        width = self.channels
        if self.use_time_encoding:
            width += self.temporal_features * self.time_dim
        if self.use_degree_encoding:
            width += self.degree_dim
        return width


@dataclass
class Block:
    """One transformer block's parameter views; axis is 'S' or 'T'."""

    axis: str
    attn: AttentionParams
    experts: list[ExpertParams]
    router: RouterParams | None
    state: MoEState | None
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor


def _path_rng(seed: int, path: str) -> np.random.Generator:
    # per-path streams keep shared paths identical across config variants
    return np.random.default_rng([seed, zlib.crc32(path.encode("utf-8"))])


class _Init:
    def __init__(self, store: ParameterStore, seed: int):
        self.store = store
        self.seed = seed

    def weight(self, path: str, fan_in: int, fan_out: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        rng = _path_rng(self.seed, path)
        return self.store.add(path, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def vector_weight(self, path: str, dim: int) -> Tensor:
        rng = _path_rng(self.seed, path)
        return self.store.add(path, rng.uniform(-1.0, 1.0, size=dim))

    def zeros(self, path: str, *shape: int) -> Tensor:
        return self.store.add(path, np.zeros(shape))

    def ones(self, path: str, *shape: int) -> Tensor:
        return self.store.add(path, np.ones(shape))

    def table(self, path: str, *shape: int) -> Tensor:
        rng = _path_rng(self.seed, path)
        return self.store.add(path, rng.normal(0.0, 0.02, size=shape))


class StgormerModel:
    """Built model: parameter store, precomputed graph signals, block views."""

    def __init__(self, config: StgormerConfig, graph: SpatioTemporalGraph):
        errors = config.validate()
        if errors:
            raise ValueError("invalid model config: " + "; ".join(errors))
        self.config = config
        self.graph = graph
        self.spd: SpdMatrix = shortest_path_matrix(graph)
        self.normalizer = None
        self.store = ParameterStore()
        init = _Init(self.store, config.seed)
        d = config.hidden_dim

        self.time_params = [
            Time2VecParams(
                w=init.vector_weight(f"encoding.time.f{j}.w", config.time_dim),
                b=init.zeros(f"encoding.time.f{j}.b", config.time_dim))
            for j in range(config.temporal_features)
        ]
        rows = config.max_degree + 2
        self.degree_tables = DegreeEmbeddingTables(
            z_minus=init.table("encoding.degree.in", rows, config.degree_dim),
            z_plus=init.table("encoding.degree.out", rows, config.degree_dim),
            max_degree=config.max_degree)
        self.fusion_w = init.weight("encoding.fusion.w", config.fusion_width, d)
        self.fusion_b = init.zeros("encoding.fusion.b", d)
        self.spd_table = init.table("spd_bias.table", config.max_spd + 3)

        self.blocks: list[Block] = []
        for i, axis in enumerate(config.block_order):
            name = "spatial" if axis == "S" else "temporal"
            base = f"blocks.{i:02d}.{name}"
            attn = AttentionParams(
                w_q=init.weight(f"{base}.attn.w_q", d, d),
                b_q=init.zeros(f"{base}.attn.b_q", d),
                w_k=init.weight(f"{base}.attn.w_k", d, d),
                w_v=init.weight(f"{base}.attn.w_v", d, d),
                b_v=init.zeros(f"{base}.attn.b_v", d),
                w_o=init.weight(f"{base}.attn.w_o", d, d),
                b_o=init.zeros(f"{base}.attn.b_o", d),
                heads=config.heads)
            hidden = config.expert_expansion * d
            n_experts = config.experts if config.use_moe else 1
            experts = [
                ExpertParams(
                    w1=init.weight(f"{base}.ffn.expert{j}.w1", d, hidden),
                    b1=init.zeros(f"{base}.ffn.expert{j}.b1", hidden),
                    w2=init.weight(f"{base}.ffn.expert{j}.w2", hidden, d),
                    b2=init.zeros(f"{base}.ffn.expert{j}.b2", d))
                for j in range(n_experts)
            ]
            router = None
            state = None
            if config.use_moe:
                router = RouterParams(
                    w=init.weight(f"{base}.ffn.router.w", d, config.experts),
                    b=init.zeros(f"{base}.ffn.router.b", config.experts),
                    axis=name)
                state = MoEState(config.experts)
            self.blocks.append(Block(
                axis=axis, attn=attn, experts=experts, router=router, state=state,
                norm1_gamma=init.ones(f"{base}.norm1.gamma", d),
                norm1_beta=init.zeros(f"{base}.norm1.beta", d),
                norm2_gamma=init.ones(f"{base}.norm2.gamma", d),
                norm2_beta=init.zeros(f"{base}.norm2.beta", d)))

        head_in = config.input_len * d
        head_out = config.horizon * config.channels
        self.head_w = init.weight("head.w", head_in, head_out)
        self.head_b = init.zeros("head.b", head_out)

    # -- state -------------------------------------------------------------

    @property
    def moe_states(self) -> list[MoEState]:
        return [b.state for b in self.blocks if b.state is not None]

    def reset_moe_states(self) -> None:
        for s in self.moe_states:
            s.reset()

    def parameter_count(self) -> int:
        return self.store.num_values()

    # -- forward -----------------------------------------------------------

    def forward_batch(self, x: np.ndarray, timestamps: np.ndarray,
                      trace: list | None = None) -> Tensor:
        """Batched forward: (B, T, N, C) plus (B, T, k) -> (B, horizon, N, C)."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        timestamps = np.asarray(timestamps, dtype=np.float64)
        b, t, n, c = x.shape
        if t != cfg.input_len:
            raise ValueError(f"window length {t} != configured input_len {cfg.input_len}")
        if n != self.graph.num_nodes:
            raise ValueError(f"window has {n} nodes but graph has {self.graph.num_nodes}")
        if c != cfg.channels:
            raise ValueError(f"window has {c} channels but config says {cfg.channels}")
        if timestamps.shape != (b, t, cfg.temporal_features):
            raise ValueError(
                f"timestamps shape {timestamps.shape} != expected "
                f"{(b, t, cfg.temporal_features)}")

        t_enc = (temporal_input_encoding(Tensor(timestamps), self.time_params)
                 if cfg.use_time_encoding else None)
        s_enc = (spatial_input_encoding(self.graph, self.degree_tables)
                 if cfg.use_degree_encoding else None)
        h = fuse_inputs(Tensor(x), t_enc, s_enc, self.fusion_w, self.fusion_b)

        bias = (spd_bias(self.spd, self.spd_table, cfg.max_spd)
                if cfg.use_spd_bias else None)
        for block in self.blocks:
            if trace is not None:
                trace.append(block.axis)
            if block.axis == "S":
                attended = spatial_attention(h, block.attn, bias)
            else:
                attended = temporal_attention(h, block.attn)
            u = layer_norm(h + attended, block.norm1_gamma, block.norm1_beta)
            if block.router is not None:
                f = moe_forward(u, block.experts, block.router, block.state)
            else:
                f = expert_forward(u, block.experts[0])
            h = layer_norm(u + f, block.norm2_gamma, block.norm2_beta)

        per_node = h.transpose(0, 2, 1, 3).reshape(b, n, t * cfg.hidden_dim)
        out = linear(per_node, self.head_w, self.head_b)
        return out.reshape(b, n, cfg.horizon, cfg.channels).transpose(0, 2, 1, 3)

    def forward(self, x: np.ndarray, timestamps: np.ndarray) -> Tensor:
        """Single-window forward: (T, N, C) plus (T, k) -> (horizon, N, C)."""
        pred = self.forward_batch(x[None, ...], np.asarray(timestamps)[None, ...])
        return pred.reshape(pred.shape[1:])

    def predict(self, window: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
        """Forecast on the original scale; gate statistics are not retained."""
        if self.normalizer is None:
            raise ValueError("model has no normalizer attached; train or load first")
        pred = self.forward(self.normalizer.apply(np.asarray(window, dtype=np.float64)),
                            timestamps)
        self.reset_moe_states()
        return self.normalizer.invert(pred.data)


def build(config: StgormerConfig, graph: SpatioTemporalGraph) -> StgormerModel:
    return StgormerModel(config, graph)


def loss(pred: Tensor, target: np.ndarray, moe_states: list[MoEState],
         alpha: float) -> tuple[Tensor, dict]:
    """Mean absolute error plus alpha times the mean per-layer balance loss."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mae = (pred - Tensor(target)).abs().mean()
    if moe_states:
        lb = None
        for s in moe_states:
            term = load_balance_loss(s)
            lb = term if lb is None else lb + term
        lb = lb * (1.0 / len(moe_states))
        total = mae + alpha * lb
        return total, {"mae": mae.item(), "lb": lb.item()}
    return mae, {"mae": mae.item(), "lb": 0.0}


# -- checkpointing -------------------------------------------------------------


def _config_items(cfg: StgormerConfig) -> dict[str, str]:
    items = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            items[f.name] = "true" if v else "false"
        elif isinstance(v, float):
            items[f.name] = repr(v)
        else:
            items[f.name] = str(v)
    return items


def parse_config_items(items: dict[str, str]) -> StgormerConfig:
    """Build a config from string key/values, reporting every bad field."""
    kwargs = {}
    errors = []
    types = {f.name: f.type for f in dataclasses.fields(StgormerConfig)}
    defaults = StgormerConfig()
    for key, raw in items.items():
        if key not in types:
            errors.append(f"unknown model config key {key!r}")
            continue
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                if raw not in ("true", "false"):
                    raise ValueError
                kwargs[key] = raw == "true"
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        except ValueError:
            errors.append(f"bad value {raw!r} for model config key {key!r}")
    if errors:
        raise ValueError("; ".join(errors))
    return StgormerConfig(**kwargs)


def save_model(model: StgormerModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC.encode() + b"\n")
        fh.write(b"[config]\n")
        for k, v in sorted(_config_items(model.config).items()):
            fh.write(f"{k}={v}\n".encode())
        fh.write(b"[graph]\n")
        g = model.graph
        fh.write(f"num_nodes={g.num_nodes}\n".encode())
        fh.write(f"directed={'true' if g.directed else 'false'}\n".encode())
        pairs = g.edges if g.directed else g.undirected_edges()
        fh.write(("edges=" + ";".join(f"{u}:{v}" for u, v in pairs) + "\n").encode())
        fh.write(b"[normalizer]\n")
        if model.normalizer is None:
            fh.write(b"present=false\n")
        else:
            fh.write(b"present=true\n")
            fh.write(("mean=" + ",".join(repr(float(v)) for v in model.normalizer.mean)
                      + "\n").encode())
            fh.write(("std=" + ",".join(repr(float(v)) for v in model.normalizer.std)
                      + "\n").encode())
        write_param_block(fh, model.store)


def load_model(path) -> StgormerModel:
    """Rebuild a model from its checkpoint, verifying config/parameter agreement."""
    from .data import Normalizer

    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != _MODEL_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")

        def expect(tag: str) -> None:
            line = fh.readline().decode().rstrip("\n")
            if line != tag:
                raise ValueError(f"corrupt checkpoint: expected {tag}, got {line!r}")

        def read_kv() -> tuple[str, str]:
            line = fh.readline().decode().rstrip("\n")
            if "=" not in line:
                raise ValueError(f"corrupt checkpoint: expected key=value, got {line!r}")
            k, _, v = line.partition("=")
            return k, v

        expect("[config]")
        items = {}
        n_fields = len(dataclasses.fields(StgormerConfig))
        for _ in range(n_fields):
            k, v = read_kv()
            items[k] = v
        config = parse_config_items(items)

        expect("[graph]")
        k, v = read_kv()
        num_nodes = int(v)
        k, v = read_kv()
        directed = v == "true"
        k, v = read_kv()
        pairs = []
        if v:
            for token in v.split(";"):
                a, _, b = token.partition(":")
                pairs.append((int(a), int(b)))
        graph = SpatioTemporalGraph.from_edge_list(num_nodes, pairs, directed=directed)

        expect("[normalizer]")
        k, v = read_kv()
        normalizer = None
        if v == "true":
            k, v = read_kv()
            mean = np.array([float(x) for x in v.split(",")])
            k, v = read_kv()
            std = np.array([float(x) for x in v.split(",")])
            normalizer = Normalizer(mean=mean, std=std)

        values = read_param_block(fh)

    model = StgormerModel(config, graph)
    expected = {p: t.data.shape for p, t in model.store.items()}
    actual = {p: a.shape for p, a in values.items()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        raise ValueError(
            "checkpoint incompatible with its config: "
            f"missing={missing} unexpected={extra}")
    model.store.restore(values)
    model.normalizer = normalizer
    return model
