"""Training pipeline: encoders, edge weights, filters, and the loop.

The pipeline owns every trainable piece and one forward pass produces
anchor embeddings plus all separated structure views on a single tape.
Positive sets are refreshed each epoch from detached view
representations and affinities before the loss is taped. The loop is deterministic given
the config seed: initialization, per-epoch weight noise, and the
single-view draw all derive from it, and no other randomness exists, so
a run interrupted at a checkpoint resumes bit-identically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import (
    Adam,
    Parameter,
    Tape,
    Value,
    load_checkpoint,
    save_checkpoint,
)
from .encoder import HeteroEncoder, xavier_init
from .hetgraph import HeteroGraph
from .objective import (
    ContrastiveObjective,
    LossBreakdown,
    PositiveSet,
    merge_pair_affinities,
    positives_for_index,
    sample_positives,
)
from .relweight import RelationWeightModel
from .separation import (
    HETEROPHILIC,
    HOMOPHILIC,
    apply_filter,
    build_two_hop,
    pair_affinities,
)

LOSS_MODES = ("multi", "mean_fusion", "random_single")
VARIANTS = ("full", "no_rae", "no_homo", "no_hete")
FUSED = "fused"


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainError(RuntimeError):
    """Training failed at runtime (divergence, bad resume state)."""


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 64
    encoder_layers: int = 2
    low_pass_layers: int = 1
    high_pass_layers: int = 1
    k_pos: int = 2
    tau: float = 1.0
    tau_c: float = 0.5
    noise_clamp: float = 1e-4
    lr: float = 1e-3
    epochs: int = 400
    patience: int = 50
    seed: int = 0
    precision: int = 32
    loss_mode: str = "multi"
    denominator: str = "excl_pos"
    variant: str = "full"

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ConfigError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.encoder_layers < 0:
            raise ConfigError(
                f"encoder_layers must be >= 0, got {self.encoder_layers}")
        for name in ("low_pass_layers", "high_pass_layers"):
            depth = getattr(self, name)
            if not 1 <= depth <= 5:
                raise ConfigError(f"{name} must lie in [1, 5], got {depth}")
        if not 0 <= self.k_pos <= 5:
            raise ConfigError(f"k_pos must lie in [0, 5], got {self.k_pos}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.tau_c <= 0:
            raise ConfigError(f"tau_c must be positive, got {self.tau_c}")
        if not 0 < self.noise_clamp < 0.5:
            raise ConfigError(
                f"noise_clamp must lie in (0, 0.5), got {self.noise_clamp}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.denominator not in ("excl_pos", "full"):
            raise ConfigError(
                f"denominator must be 'excl_pos' or 'full', "
                f"got {self.denominator!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name)
                           for f in fields(self)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def with_variant(self, variant: str) -> "TrainConfig":
        return replace(self, variant=variant)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds, stable across runs for a given root."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


@dataclass
class ForwardResult:
    embeddings: dict[str, Value]
    anchor: Value
    weights: dict[str, Value]
    affinities: dict[tuple[str, str], Value]
    views: dict[tuple[str, str], Value]


class Pipeline:
    """All trainable state for one graph under one configuration."""

    def __init__(self, graph: HeteroGraph, config: TrainConfig):
        self.graph = graph
        self.config = config
        dtype = config.dtype

        self.oriented = []
        for r in graph.base_relations():
            if r.src_type == graph.target_type:
                self.oriented.append(r.name)
            elif r.dst_type == graph.target_type:
                self.oriented.append(r.inverse_name)
        if not self.oriented:
            raise ConfigError("no relation touches the target type")

        if config.variant == "no_homo":
            self.kinds = (HETEROPHILIC,)
        elif config.variant == "no_hete":
            self.kinds = (HOMOPHILIC,)
        else:
            self.kinds = (HOMOPHILIC, HETEROPHILIC)

        seeds = derive_seeds(config.seed, 5)
        self.features: dict[str, np.ndarray] = {}
        in_dims: dict[str, int] = {}
        for i, t in enumerate(graph.node_types):
            if t.feature_dim > 0:
                feats = graph.features[t.name].astype(dtype)
            else:
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence([seeds[0], i])))
                feats = xavier_init(rng, (t.count, config.hidden_dim), dtype)
            self.features[t.name] = feats
            in_dims[t.name] = feats.shape[1]

        self.encoder = HeteroEncoder(graph, in_dims, config.hidden_dim,
                                     config.encoder_layers, seeds[1],
                                     dtype, prefix="enc.")
        self.aux_encoder = HeteroEncoder(graph, in_dims, config.hidden_dim,
                                         1, seeds[2], dtype, prefix="aux.")
        self.relweight = RelationWeightModel(
            graph, config.hidden_dim, config.hidden_dim, seeds[3], dtype,
            use_dual_conv=config.variant != "no_rae")

        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(seeds[4])))
        target_dim = in_dims[graph.target_type]
        self.filter_in_w = Parameter(
            "filt.W_in", xavier_init(rng, (target_dim, config.hidden_dim),
                                     dtype))
        self.filter_in_b = Parameter(
            "filt.b_in", np.zeros(config.hidden_dim, dtype=dtype))

        self.two_hop = {name: build_two_hop(graph, name)
                        for name in self.oriented}
        if config.loss_mode == "mean_fusion":
            self.view_keys = [(FUSED, kind) for kind in self.kinds]
        else:
            self.view_keys = [(name, kind) for name in self.oriented
                              for kind in self.kinds]
        self.objective = ContrastiveObjective(
            self.view_keys, config.hidden_dim, config.k_pos, config.tau_c,
            seeds[4], dtype, config.denominator)

    def parameters(self) -> list[Parameter]:
        return (self.encoder.parameters() + self.aux_encoder.parameters()
                + self.relweight.parameters()
                + [self.filter_in_w, self.filter_in_b]
                + self.objective.parameters())

    def forward(self, tape: Tape, training: bool, epoch: int) -> ForwardResult:
        feats = {name: tape.constant(arr)
                 for name, arr in self.features.items()}
        h = self.encoder(tape, feats)
        h_aux = self.aux_encoder(tape, feats)
        scores = self.relweight.scores(tape, h_aux)
        weights = self.relweight.soft_weights(
            tape, scores, self.config.tau, training, epoch, self.config.seed,
            self.config.noise_clamp)

        target = self.graph.target_type
        x0 = tape.add_bias(tape.matmul(feats[target],
                                       tape.watch(self.filter_in_w)),
                           tape.watch(self.filter_in_b))

        affinities: dict[tuple[str, str], Value] = {}
        rel_views: dict[tuple[str, str], Value] = {}
        for name in self.oriented:
            index = self.two_hop[name]
            inverse = self.graph.inverse_of(
                self.graph.relation_by_name(name)).name
            for kind in self.kinds:
                aff = pair_affinities(tape, index, weights[name],
                                      weights[inverse], kind)
                affinities[(name, kind)] = aff
                depth = (self.config.low_pass_layers if kind == HOMOPHILIC
                         else self.config.high_pass_layers)
                rel_views[(name, kind)] = apply_filter(
                    tape, index, aff, x0, kind, depth)

        if self.config.loss_mode == "mean_fusion":
            views: dict[tuple[str, str], Value] = {}
            for kind in self.kinds:
                acc = None
                for name in self.oriented:
                    v = rel_views[(name, kind)]
                    acc = v if acc is None else tape.add(acc, v)
                views[(FUSED, kind)] = tape.scale(acc, 1.0 / len(self.oriented))
        else:
            views = rel_views

        return ForwardResult(h, h[target], weights, affinities, views)

    def sample_positives(self, result: ForwardResult) -> dict:
        """Refresh positive sets from detached view representations.

        Each view ranks candidates by affinity times cosine in its own
        filtered geometry, so the two kinds pick different peers even
        over the same two-hop support.
        """
        k = self.config.k_pos
        out: dict[tuple[str, str], PositiveSet] = {}
        if self.config.loss_mode == "mean_fusion":
            indexes = [self.two_hop[name] for name in self.oriented]
            for kind in self.kinds:
                arrays = [np.asarray(result.affinities[(name, kind)].data,
                                     dtype=np.float64)
                          for name in self.oriented]
                pairs, indptr, mean = merge_pair_affinities(indexes, arrays)
                h = np.asarray(result.views[(FUSED, kind)].data,
                               dtype=np.float64)
                out[(FUSED, kind)] = sample_positives(
                    pairs, indptr, h.shape[0], mean, h, k)
        else:
            for name in self.oriented:
                for kind in self.kinds:
                    aff = np.asarray(result.affinities[(name, kind)].data,
                                     dtype=np.float64)
                    h = np.asarray(result.views[(name, kind)].data,
                                   dtype=np.float64)
                    out[(name, kind)] = positives_for_index(
                        self.two_hop[name], aff, h, k)
        return out

    def epoch_view_keys(self, epoch: int, single_seed: int) -> list:
        """View keys active this epoch (one relation under random_single)."""
        if self.config.loss_mode != "random_single":
            return list(self.view_keys)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([single_seed, epoch])))
        name = self.oriented[int(rng.integers(len(self.oriented)))]
        return [(name, kind) for kind in self.kinds]

    def export_embeddings(self, mode: str = "anchor") -> np.ndarray:
        """Detached target embeddings after a noiseless forward pass.

        ``anchor`` returns the encoder output; ``concat_views`` appends
        the mean over relations of each separated view kind.
        """
        if mode not in ("anchor", "concat_views"):
            raise ConfigError(f"export mode must be 'anchor' or "
                              f"'concat_views', got {mode!r}")
        tape = Tape()
        result = self.forward(tape, training=False, epoch=0)
        blocks = [np.asarray(result.anchor.data, dtype=np.float64)]
        if mode == "concat_views":
            for kind in self.kinds:
                stack = [np.asarray(result.views[key].data, dtype=np.float64)
                         for key in result.views if key[1] == kind]
                blocks.append(np.mean(stack, axis=0))
        return np.concatenate(blocks, axis=1)


@dataclass
class TrainResult:
    history: list[tuple[int, LossBreakdown]] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = float("inf")
    final_epoch: int = -1
    early_stopped: bool = False

    @property
    def losses(self) -> list[float]:
        return [b.total for _, b in self.history]


class Trainer:
    """Epoch loop with early stopping and resumable checkpoints."""

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        cfg = pipeline.config
        self.params = pipeline.parameters()
        self.optimizer = Adam(self.params, lr=cfg.lr) if cfg.lr > 0 else None
        self.single_seed = derive_seeds(cfg.seed, 6)[5]
        self.start_epoch = 0
        self.best_epoch = -1
        self.best_loss = float("inf")
        self.best_state: dict[str, np.ndarray] = {}

    def step(self, epoch: int) -> LossBreakdown:
        """One full epoch: forward, positive refresh, loss, update."""
        pipeline = self.pipeline
        tape = Tape()
        result = pipeline.forward(tape, training=True, epoch=epoch)
        positives = pipeline.sample_positives(result)
        active = pipeline.epoch_view_keys(epoch, self.single_seed)
        views = {key: result.views[key] for key in active}
        total, breakdown = pipeline.objective.loss(
            tape, result.anchor, views,
            {key: positives[key] for key in active})
        if not np.isfinite(breakdown.total):
            raise TrainError(f"loss diverged at epoch {epoch}: "
                             f"{breakdown.total}")
        tape.backward(total)
        for param in self.params:
            # Heads outside this epoch's view draw still need a zero
            # gradient so the optimizer can apply moment decay.
            if param.grad is None:
                param.grad = np.zeros_like(param.data)
        if self.optimizer is not None:
            self.optimizer.step()
        return breakdown

    def run(self, epochs: int | None = None, restore_best: bool = True,
            checkpoint_path=None, checkpoint_every: int = 0) -> TrainResult:
        """Train to the epoch budget or until patience runs out.

        ``restore_best`` puts the best parameters seen back on the
        pipeline afterwards; leave it off when the run will be resumed
        from a checkpoint instead. With ``checkpoint_path`` and a
        positive ``checkpoint_every``, training state is written every
        that many epochs, before any restore.
        """
        cfg = self.pipeline.config
        end = cfg.epochs if epochs is None else epochs
        result = TrainResult(best_epoch=self.best_epoch,
                             best_loss=self.best_loss)
        for epoch in range(self.start_epoch, end):
            breakdown = self.step(epoch)
            self.start_epoch = epoch + 1
            result.history.append((epoch, breakdown))
            result.final_epoch = epoch
            stop = False
            if breakdown.total < self.best_loss:
                self.best_loss = breakdown.total
                self.best_epoch = epoch
                self.best_state = {p.name: p.data.copy() for p in self.params}
            elif (cfg.patience > 0
                  and epoch - self.best_epoch >= cfg.patience):
                result.early_stopped = True
                stop = True
            if (checkpoint_path is not None and checkpoint_every > 0
                    and (epoch + 1) % checkpoint_every == 0):
                self.save(checkpoint_path)
            if stop:
                break
        result.best_epoch = self.best_epoch
        result.best_loss = self.best_loss
        if restore_best and self.best_state:
            for p in self.params:
                p.data[:] = self.best_state[p.name]
        return result

    def save(self, path) -> None:
        """Checkpoint current parameters, optimizer state, and the best
        snapshot so a resumed run continues bit-identically."""
        arrays = {f"param:{p.name}": p.data for p in self.params}
        for name, arr in self.best_state.items():
            arrays[f"best:{name}"] = arr
        meta = {"next_epoch": self.start_epoch,
                "best_epoch": self.best_epoch,
                "best_loss": self.best_loss,
                "adam_t": 0,
                "config": json.loads(self.pipeline.config.to_json())}
        if self.optimizer is not None:
            arrays.update(self.optimizer.state_arrays())
            meta["adam_t"] = self.optimizer.t
        save_checkpoint(path, arrays, meta)

    def load(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        stored = meta.get("config")
        current = json.loads(self.pipeline.config.to_json())
        if stored != current:
            raise TrainError("checkpoint was written under a different "
                             "configuration")
        for p in self.params:
            key = f"param:{p.name}"
            if key not in arrays:
                raise TrainError(f"checkpoint is missing {key!r}")
            p.data[:] = arrays[key].astype(p.data.dtype)
        self.best_state = {
            name[len("best:"):]: arr.copy()
            for name, arr in arrays.items() if name.startswith("best:")}
        self.start_epoch = int(meta["next_epoch"])
        self.best_epoch = int(meta["best_epoch"])
        self.best_loss = float(meta["best_loss"])
        if self.optimizer is not None:
            self.optimizer.load_state_arrays(arrays, meta["adam_t"])


def train_pipeline(graph: HeteroGraph, config: TrainConfig
                   ) -> tuple[Pipeline, TrainResult]:
    """Build, train, and return a pipeline with its training history."""
    pipeline = Pipeline(graph, config)
    result = Trainer(pipeline).run()
    return pipeline, result
