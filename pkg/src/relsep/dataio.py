"""Reading and writing graph directories.

A dataset is a directory holding ``meta.json`` (node types, relations,
target type, class count), one ``<type>.features.tsv`` per typed feature
matrix, one ``<relation>.edges.tsv`` per declared relation, a
``<target>.labels.tsv``, and an optional ``splits.json``. All text files
are UTF-8 with one record per line. Malformed input is reported with the
offending file and, where line-local, the 1-based line number.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .hetgraph import GraphError, HeteroGraph, NodeType, Relation, build_graph


class FormatError(ValueError):
    """A dataset file is missing, malformed, or inconsistent with meta.json."""

    def __init__(self, message: str, path: Path | None = None, line: int | None = None):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path.name}:{line}: {message}"
        elif path is not None:
            message = f"{path.name}: {message}"
        super().__init__(message)


def load_graph(directory: str | Path) -> HeteroGraph:
    """Load a dataset directory into a validated graph."""
    root = Path(directory)
    if not root.is_dir():
        raise FormatError(f"dataset directory not found: {root}")
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError("missing meta.json", meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", meta_path) from exc

    for key in ("node_types", "relations", "target_type", "num_classes"):
        if key not in meta:
            raise FormatError(f"missing required key {key!r}", meta_path)

    try:
        node_types = [NodeType(t["name"], t["count"], t["feature_dim"])
                      for t in meta["node_types"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed node_types entry: {exc}", meta_path) from exc
    except GraphError as exc:
        raise FormatError(str(exc), meta_path) from exc
    counts = {t.name: t.count for t in node_types}

    features = {}
    for t in node_types:
        if t.feature_dim > 0:
            features[t.name] = _read_features(root / f"{t.name}.features.tsv",
                                              t.count, t.feature_dim)

    relations = []
    for entry in meta["relations"]:
        try:
            name, src, dst = entry["name"], entry["src_type"], entry["dst_type"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed relations entry: {exc}", meta_path) from exc
        if src not in counts or dst not in counts:
            raise FormatError(f"relation {name!r} references unknown node type",
                              meta_path)
        edges = _read_edges(root / f"{name}.edges.tsv", name,
                            counts[src], counts[dst])
        relations.append(Relation(name, src, dst, edges))

    target = meta["target_type"]
    if target not in counts:
        raise FormatError(f"target type {target!r} not declared", meta_path)
    labels = _read_labels(root / f"{target}.labels.tsv",
                          counts[target], meta["num_classes"])

    splits = None
    splits_path = root / "splits.json"
    if splits_path.is_file():
        splits = _read_splits(splits_path, counts[target])

    try:
        return build_graph(node_types, relations, features, target, labels,
                           meta["num_classes"], splits=splits)
    except GraphError as exc:
        raise FormatError(str(exc), meta_path) from exc


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise FormatError("file not found", path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _read_features(path: Path, count: int, dim: int) -> np.ndarray:
    lines = _read_lines(path)
    if len(lines) != count:
        raise FormatError(f"expected {count} rows, found {len(lines)}", path)
    out = np.empty((count, dim))
    for i, line in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != dim:
            raise FormatError(f"expected {dim} values, found {len(parts)}",
                              path, i + 1)
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"non-numeric value: {exc}", path, i + 1) from exc
    if not np.isfinite(out).all():
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise FormatError("non-finite value", path, bad + 1)
    return out


def _read_edges(path: Path, relation: str, n_src: int, n_dst: int) -> np.ndarray:
    lines = _read_lines(path)
    if not lines:
        raise FormatError(f"relation {relation!r} has zero edges", path)
    edges = np.empty((len(lines), 2), dtype=np.int64)
    seen: set[tuple[int, int]] = set()
    for i, line in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"expected 2 columns, found {len(parts)}", path, i + 1)
        try:
            s, d = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise FormatError(f"non-integer index: {exc}", path, i + 1) from exc
        if not 0 <= s < n_src:
            raise FormatError(f"src index {s} out of range [0, {n_src})", path, i + 1)
        if not 0 <= d < n_dst:
            raise FormatError(f"dst index {d} out of range [0, {n_dst})", path, i + 1)
        if (s, d) in seen:
            raise FormatError(f"duplicate edge ({s}, {d})", path, i + 1)
        seen.add((s, d))
        edges[i] = (s, d)
    return edges


def _read_labels(path: Path, count: int, num_classes: int) -> np.ndarray:
    lines = _read_lines(path)
    if len(lines) != count:
        raise FormatError(f"expected {count} labels, found {len(lines)}", path)
    labels = np.empty(count, dtype=np.int64)
    for i, line in enumerate(lines):
        try:
            labels[i] = int(line.strip())
        except ValueError as exc:
            raise FormatError(f"non-integer label: {exc}", path, i + 1) from exc
        if not 0 <= labels[i] < num_classes:
            raise FormatError(f"label {labels[i]} out of range [0, {num_classes})",
                              path, i + 1)
    return labels


def _read_splits(path: Path, n_target: int) -> dict:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}", path) from exc
    if not isinstance(raw, dict):
        raise FormatError("splits must be a JSON object", path)
    for split_name, parts in raw.items():
        if not isinstance(parts, dict):
            raise FormatError(f"split {split_name!r} must be an object", path)
        for part in ("train", "val", "test"):
            if part not in parts:
                raise FormatError(f"split {split_name!r} missing {part!r}", path)
            idx = parts[part]
            if not all(isinstance(i, int) and 0 <= i < n_target for i in idx):
                raise FormatError(
                    f"split {split_name!r} {part!r} has an index outside "
                    f"[0, {n_target})", path)
    return raw


def save_graph(graph: HeteroGraph, directory: str | Path) -> None:
    """Write a graph as a dataset directory (base relations only)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    base = graph.base_relations()
    meta = {
        "node_types": [{"name": t.name, "count": t.count,
                        "feature_dim": t.feature_dim}
                       for t in graph.node_types],
        "relations": [{"name": r.name, "src_type": r.src_type,
                       "dst_type": r.dst_type} for r in base],
        "target_type": graph.target_type,
        "num_classes": graph.num_classes,
    }
    _write_text(root / "meta.json", json.dumps(meta, indent=2) + "\n")
    for t in graph.node_types:
        if t.feature_dim > 0:
            rows = graph.features[t.name]
            body = "\n".join("\t".join(repr(float(v)) for v in row)
                             for row in rows)
            _write_text(root / f"{t.name}.features.tsv", body + "\n")
    for r in base:
        body = "\n".join(f"{s}\t{d}" for s, d in r.edges.tolist())
        _write_text(root / f"{r.name}.edges.tsv", body + "\n")
    body = "\n".join(str(v) for v in graph.labels.tolist())
    _write_text(root / f"{graph.target_type}.labels.tsv", body + "\n")
    if graph.splits is not None:
        _write_text(root / "splits.json", json.dumps(graph.splits, indent=2) + "\n")


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")
