"""Graph container, JSONL persistence and the spurious-motif benchmark generator.

A synthetic graph is a *base* (wheel, tree, ladder, star, path) with a
*motif* (house, cycle, crane) attached by a single bridge edge.  Only the
motif decides the label.  In training data the base is correlated with the
label through the bias ``b``; test data either swaps in unseen base kinds
(basis shift) or enlarges the bases (size shift).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MOTIFS = ("house", "cycle", "crane")
BASES = ("wheel", "tree", "ladder", "star", "path")
FEATURE_MODES = ("constant", "degree", "random")
MAX_DEGREE = 10

_MOTIF_EDGES = {
    "house": [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)],
    "cycle": [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
    "crane": [(0, 1), (1, 2), (2, 3), (1, 4), (2, 4)],
}


class GraphFormatError(ValueError):
    pass


@dataclass
class Fragment:
    num_nodes: int
    edges: list[tuple[int, int]]
    kind: str


@dataclass
class Graph:
    num_nodes: int
    x: np.ndarray
    edges: np.ndarray  # [E, 2], each undirected edge stored once
    y: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(self.num_nodes, -1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def validate(self, num_classes: int | None = None) -> None:
        n = self.num_nodes
        if n <= 0:
            raise GraphFormatError("graph has no nodes")
        if self.x.shape[0] != n:
            raise GraphFormatError(f"feature rows {self.x.shape[0]} != num_nodes {n}")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise GraphFormatError(f"edge endpoint out of range for {n} nodes")
            if (self.edges[:, 0] == self.edges[:, 1]).any():
                raise GraphFormatError("self-loop in edge list")
            canon = {(min(a, b), max(a, b)) for a, b in self.edges.tolist()}
            if len(canon) != len(self.edges):
                raise GraphFormatError("duplicate undirected edge")
        if self.y < 0 or (num_classes is not None and self.y >= num_classes):
            raise GraphFormatError(f"label {self.y} out of range")

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) with each undirected edge expanded to both directions."""
        e = self.edges
        return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(self.num_nodes, self.x[perm], inv[self.edges], self.y, dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.y == other.y
            and self.meta == other.meta
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.edges, other.edges)
        )


def make_motif(kind: str) -> Fragment:
    if kind not in _MOTIF_EDGES:
        raise ValueError(f"unknown motif {kind!r}; expected one of {MOTIFS}")
    return Fragment(5, list(_MOTIF_EDGES[kind]), kind)


def _ring(nodes: Sequence[int]) -> list[tuple[int, int]]:
    return [(nodes[i], nodes[(i + 1) % len(nodes)]) for i in range(len(nodes))]


def make_base(kind: str, size: int, rng: np.random.Generator | None = None) -> Fragment:
    """Canonical base graph with ``size`` nodes.

    ``tree`` is a random binary tree and is the only kind that consumes
    ``rng``; an odd-sized ladder gets one tail node on its last rung.
    """
    if kind not in BASES:
        raise ValueError(f"unknown base {kind!r}; expected one of {BASES}")
    if size < 4:
        raise ValueError(f"base size must be >= 4, got {size}")
    if kind == "wheel":
        edges = _ring(list(range(1, size))) + [(0, i) for i in range(1, size)]
    elif kind == "star":
        edges = [(0, i) for i in range(1, size)]
    elif kind == "path":
        edges = [(i, i + 1) for i in range(size - 1)]
    elif kind == "ladder":
        rungs = size // 2
        edges = []
        for r in range(rungs):
            a, b = 2 * r, 2 * r + 1
            edges.append((a, b))
            if r + 1 < rungs:
                edges += [(a, a + 2), (b, b + 2)]
        if size % 2:
            edges.append((size - 2, size - 1))
    else:
        if rng is None:
            raise ValueError("tree base needs an rng")
        children = [0] * size
        edges = []
        for v in range(1, size):
            open_ = [u for u in range(v) if children[u] < 2]
            parent = open_[int(rng.integers(len(open_)))]
            children[parent] += 1
            edges.append((parent, v))
    return Fragment(size, edges, kind)


def node_features(num_nodes: int, edges: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "constant":
        return np.ones((num_nodes, 1))
    if mode == "degree":
        deg = np.zeros(num_nodes, dtype=np.int64)
        np.add.at(deg, np.asarray(edges, dtype=np.int64).reshape(-1), 1)
        out = np.zeros((num_nodes, MAX_DEGREE + 1))
        out[np.arange(num_nodes), np.minimum(deg, MAX_DEGREE)] = 1.0
        return out
    if mode == "random":
        return rng.standard_normal((num_nodes, 4))
    raise ValueError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def feature_dim(mode: str) -> int:
    return {"constant": 1, "degree": MAX_DEGREE + 1, "random": 4}[mode]


def compose(
    base: Fragment,
    motif: Fragment,
    rng: np.random.Generator,
    label: int = 0,
    meta: dict | None = None,
    features: str = "constant",
) -> Graph:
    """Disjoint union of base and motif plus one random bridge edge."""
    if base.num_nodes == 0 or motif.num_nodes == 0:
        raise ValueError("compose needs two nonempty fragments")
    off = base.num_nodes
    u = int(rng.integers(base.num_nodes))
    v = off + int(rng.integers(motif.num_nodes))
    edges = list(base.edges) + [(a + off, b + off) for a, b in motif.edges] + [(u, v)]
    n = base.num_nodes + motif.num_nodes
    edges_arr = np.asarray(edges, dtype=np.int64)
    x = node_features(n, edges_arr, features, rng)
    return Graph(n, x, edges_arr, label, dict(meta or {}))


@dataclass
class DatasetSpec:
    num_classes: int = 2
    motifs: tuple[str, ...] = ("house", "cycle")
    train_bases: tuple[str, ...] = ("wheel", "tree", "ladder")
    test_bases: tuple[str, ...] = ("star", "path")
    bias: float = 0.9
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    shift: str = "basis"
    base_size: tuple[int, int] = (8, 15)
    test_base_size: tuple[int, int] = (30, 45)
    features: str = "constant"
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError(f"bias must lie in [0, 1], got {self.bias}")
        if self.num_classes < 2 or len(self.motifs) != self.num_classes:
            raise ValueError("need one motif per class and at least two classes")
        for m in self.motifs:
            make_motif(m)
        for b in (*self.train_bases, *self.test_bases):
            if b not in BASES:
                raise ValueError(f"unknown base {b!r}")
        if not self.train_bases:
            raise ValueError("no training bases")
        if self.shift not in ("basis", "size"):
            raise ValueError(f"unknown shift {self.shift!r}")
        if self.shift == "basis" and not self.test_bases:
            raise ValueError("basis shift needs at least one test base kind")
        if self.features not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.features!r}")

    def spurious_base(self, label: int) -> str:
        """Base kind that class ``label`` is biased toward in training."""
        return self.train_bases[label % len(self.train_bases)]

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.features)


TASKS = {
    "spmotif-binary": dict(num_classes=2, motifs=("house", "cycle")),
    "spmotif-3": dict(num_classes=3, motifs=("house", "cycle", "crane")),
}


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def _draw(spec: DatasetSpec, split: str, n: int, rng: np.random.Generator) -> list[Graph]:
    graphs = []
    for y in _balanced_labels(n, spec.num_classes, rng).tolist():
        size_range = spec.base_size
        if split == "test" and spec.shift == "basis":
            base_kind = spec.test_bases[int(rng.integers(len(spec.test_bases)))]
        elif split == "test":
            base_kind = spec.train_bases[int(rng.integers(len(spec.train_bases)))]
            size_range = spec.test_base_size
        else:
            designated = spec.spurious_base(y)
            others = [b for b in spec.train_bases if b != designated]
            if not others or rng.random() < spec.bias:
                base_kind = designated
            else:
                base_kind = others[int(rng.integers(len(others)))]
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        base = make_base(base_kind, size, rng)
        motif_kind = spec.motifs[y]
        env = base_kind if spec.shift == "basis" else f"{base_kind}-{'large' if split == 'test' else 'small'}"
        meta = {"base": base_kind, "motif": motif_kind, "split": split, "env": env}
        graphs.append(compose(base, make_motif(motif_kind), rng, y, meta, spec.features))
    return graphs


def generate(spec: DatasetSpec) -> dict[str, list[Graph]]:
    """Train / val / test splits; a pure function of ``spec`` (seed included).

    Validation data is drawn from the training distribution.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    streams = root.spawn(3)
    out = {}
    for split, n, ss in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test), streams):
        out[split] = _draw(spec, split, n, np.random.default_rng(ss))
    return out


# ---------------------------------------------------------------- JSONL


def graph_to_record(g: Graph) -> dict:
    meta = {k: g.meta.get(k, "") for k in ("base", "motif", "split", "env")}
    return {
        "n": int(g.num_nodes),
        "x": g.x.tolist(),
        "edges": g.edges.tolist(),
        "y": int(g.y),
        "meta": meta,
    }


def graph_from_record(rec: dict) -> Graph:
    for key in ("n", "x", "edges", "y"):
        if key not in rec:
            raise GraphFormatError(f"missing field {key!r}")
    n = int(rec["n"])
    x = np.asarray(rec["x"], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != n:
        raise GraphFormatError(f"x must be an {n} x f matrix")
    edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
    g = Graph(n, x, edges, int(rec["y"]), dict(rec.get("meta", {})))
    g.validate()
    return g


def dumps_graph(g: Graph) -> str:
    return json.dumps(graph_to_record(g), separators=(",", ":"))


def save_jsonl(path, graphs: Iterable[Graph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(dumps_graph(g))
            fh.write("\n")


def load_jsonl(path) -> list[Graph]:
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                graphs.append(graph_from_record(rec))
            except (json.JSONDecodeError, GraphFormatError, TypeError, ValueError) as exc:
                raise GraphFormatError(f"{path}: line {lineno}: {exc}") from exc
    return graphs


def save_splits(out_dir, splits: dict[str, list[Graph]]) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, graphs in splits.items():
        p = out_dir / f"{name}.jsonl"
        save_jsonl(p, graphs)
        paths[name] = p
    return paths


def load_split(data_dir, split: str) -> list[Graph]:
    p = Path(data_dir) / f"{split}.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"no {split} split at {p}")
    return load_jsonl(p)
