"""Multi-view contrastive objective over separated structure views.

Anchor embeddings and every filtered view pass through their own
two-layer projection heads into a shared space. For each view, positive
partners are picked per node from its two-hop pairs, ranked by affinity
times embedding cosine (ranking runs outside the tape on detached
arrays and is refreshed by the caller each epoch). The view loss is a
temperature-scaled contrast of positive mass against the rest of the
batch, averaged over both matching directions; the total sums the views
in a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tape, Value
from .separation import TwoHopIndex

DENOMINATORS = ("excl_pos", "full")
FORWARD = "forward"
BACKWARD = "backward"


class ObjectiveError(ValueError):
    """Raised on invalid objective configuration or degenerate inputs."""


class ProjectionHead:
    """Two-layer MLP: linear, ELU, linear. One head per view."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator, dtype):
        from .encoder import xavier_init

        self.name = name
        self.w1 = Parameter(f"proj.{name}.W1", xavier_init(rng, (dim, dim), dtype))
        self.b1 = Parameter(f"proj.{name}.b1", np.zeros(dim, dtype=dtype))
        self.w2 = Parameter(f"proj.{name}.W2", xavier_init(rng, (dim, dim), dtype))
        self.b2 = Parameter(f"proj.{name}.b2", np.zeros(dim, dtype=dtype))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, tape: Tape, x: Value) -> Value:
        h = tape.elu(tape.add_bias(tape.matmul(x, tape.watch(self.w1)),
                                   tape.watch(self.b1)))
        return tape.add_bias(tape.matmul(h, tape.watch(self.w2)),
                             tape.watch(self.b2))


@dataclass(frozen=True)
class PositiveSet:
    """Boolean positive mask per anchor node plus 1/|P_i| row weights."""
    mask: np.ndarray
    inv_sizes: np.ndarray


def sample_positives(pairs: np.ndarray, indptr: np.ndarray, num_nodes: int,
                     affinities: np.ndarray, embeddings: np.ndarray,
                     k_pos: int) -> PositiveSet:
    """Rank each node's two-hop pairs by affinity times cosine and keep
    the top ``k_pos`` (ties broken toward the smaller index). Nodes with
    no selection, and every node when ``k_pos`` is 0, fall back to
    themselves as their only positive.
    """
    if k_pos < 0:
        raise ObjectiveError(f"k_pos must be >= 0, got {k_pos}")
    mask = np.zeros((num_nodes, num_nodes), dtype=bool)
    if k_pos > 0 and len(pairs):
        norms = np.linalg.norm(embeddings, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = embeddings / safe[:, None]
        cos = (unit[pairs[:, 0]] * unit[pairs[:, 1]]).sum(axis=1)
        score = np.asarray(affinities, dtype=np.float64) * cos
        for i in range(num_nodes):
            lo, hi = indptr[i], indptr[i + 1]
            if lo == hi:
                continue
            js = pairs[lo:hi, 1]
            order = np.lexsort((js, -score[lo:hi]))[:min(k_pos, hi - lo)]
            mask[i, js[order]] = True
    sizes = mask.sum(axis=1)
    empty = sizes == 0
    mask[empty, np.arange(num_nodes)[empty]] = True
    sizes = np.where(empty, 1, sizes)
    return PositiveSet(mask, 1.0 / sizes.astype(np.float64))


def positives_for_index(index: TwoHopIndex, affinities: np.ndarray,
                        embeddings: np.ndarray, k_pos: int) -> PositiveSet:
    return sample_positives(index.pairs, index.indptr, index.num_nodes,
                            affinities, embeddings, k_pos)


def merge_pair_affinities(indexes: list[TwoHopIndex],
                          affinity_arrays: list[np.ndarray]
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Union of pair supports with affinities averaged over all the
    given relations; pairs absent from a relation contribute zero."""
    if not indexes:
        raise ObjectiveError("need at least one index to merge")
    n = indexes[0].num_nodes
    codes = np.concatenate([idx.pairs[:, 0] * n + idx.pairs[:, 1]
                            for idx in indexes])
    values = np.concatenate([np.asarray(a, dtype=np.float64)
                             for a in affinity_arrays])
    unique_codes, inverse = np.unique(codes, return_inverse=True)
    sums = np.zeros(len(unique_codes))
    np.add.at(sums, inverse, values)
    pairs = np.stack([unique_codes // n, unique_codes % n], axis=1)
    indptr = np.searchsorted(pairs[:, 0], np.arange(n + 1))
    return pairs, indptr.astype(np.int64), sums / len(indexes)


@dataclass
class LossBreakdown:
    """Per-view, per-direction loss terms in evaluation order."""
    entries: list[tuple[str, str, str, float]]
    total: float

    def view_totals(self) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        for relation, kind, _, value in self.entries:
            out[(relation, kind)] = out.get((relation, kind), 0.0) + 0.5 * value
        return out


class ContrastiveObjective:
    """Anchor-versus-views contrast with per-view projection heads.

    ``view_keys`` fixes both the set of heads and the summation order of
    the total loss. ``denominator`` picks the contrast pool: everything
    outside the positive set (``excl_pos``) or everything but the node
    itself (``full``).
    """

    def __init__(self, view_keys: list[tuple[str, str]], dim: int,
                 k_pos: int, tau_c: float, seed: int, dtype=np.float32,
                 denominator: str = "excl_pos"):
        if tau_c <= 0:
            raise ObjectiveError(f"tau_c must be positive, got {tau_c}")
        if k_pos < 0:
            raise ObjectiveError(f"k_pos must be >= 0, got {k_pos}")
        if denominator not in DENOMINATORS:
            raise ObjectiveError(
                f"denominator must be one of {DENOMINATORS}, got {denominator!r}")
        if len(set(view_keys)) != len(view_keys):
            raise ObjectiveError("view keys must be unique")
        self.view_keys = list(view_keys)
        self.k_pos = k_pos
        self.tau_c = float(tau_c)
        self.denominator = denominator
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        self.anchor_head = ProjectionHead("anchor", dim, rng, dtype)
        self.view_heads = {key: ProjectionHead(f"{key[0]}.{key[1]}", dim,
                                               rng, dtype)
                           for key in self.view_keys}

    def parameters(self) -> list[Parameter]:
        params = self.anchor_head.parameters()
        for key in self.view_keys:
            params.extend(self.view_heads[key].parameters())
        return params

    def _direction_loss(self, tape: Tape, sims: Value,
                        positives: PositiveSet) -> Value:
        n = positives.mask.shape[0]
        pos = tape.constant(positives.mask.astype(self.dtype))
        if self.denominator == "excl_pos":
            neg_mask = ~positives.mask
        else:
            neg_mask = ~np.eye(n, dtype=bool)
        if not neg_mask.any(axis=1).all():
            raise ObjectiveError("a node has an empty contrast pool")
        neg = tape.constant(neg_mask.astype(self.dtype))
        e = tape.exp(tape.scale(sims, 1.0 / self.tau_c))
        log_num = tape.log(tape.rowsum(tape.mul(e, pos)))
        log_den = tape.log(tape.rowsum(tape.mul(e, neg)))
        weights = tape.constant(positives.inv_sizes.astype(self.dtype))
        terms = tape.mul(tape.sub(log_den, log_num), weights)
        return tape.scale(tape.sum_all(terms), 1.0 / n)

    def loss(self, tape: Tape, anchor: Value,
             views: dict[tuple[str, str], Value],
             positives: dict[tuple[str, str], PositiveSet]
             ) -> tuple[Value, LossBreakdown]:
        """Total contrastive loss over the provided views.

        Views are processed in ``view_keys`` order; keys absent from
        ``views`` are skipped, so a caller may train on a subset.
        """
        unknown = set(views) - set(self.view_keys)
        if unknown:
            raise ObjectiveError(f"unknown view keys: {sorted(unknown)}")
        if not views:
            raise ObjectiveError("no views provided")
        za = tape.l2norm_rows(self.anchor_head(tape, anchor))
        total: Value | None = None
        entries: list[tuple[str, str, str, float]] = []
        for key in self.view_keys:
            if key not in views:
                continue
            zv = tape.l2norm_rows(self.view_heads[key](tape, views[key]))
            sims = tape.matmul(za, tape.transpose(zv))
            fwd = self._direction_loss(tape, sims, positives[key])
            bwd = self._direction_loss(tape, tape.transpose(sims),
                                       positives[key])
            view_loss = tape.scale(tape.add(fwd, bwd), 0.5)
            total = view_loss if total is None else tape.add(total, view_loss)
            entries.append((key[0], key[1], FORWARD, float(fwd.data)))
            entries.append((key[0], key[1], BACKWARD, float(bwd.data)))
        return total, LossBreakdown(entries, float(total.data))
