"""Heterogeneous forum graph: meta-path guided random walks and skip-gram
node embeddings used to initialize the subforum context table.

Node labels are the type letter plus a per-type index (U0, S3, T12, P7);
indices are assigned in sorted key order so graph construction is
deterministic for a fixed post list.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .corpus import Post

log = logging.getLogger(__name__)

NODE_TYPES = ("U", "S", "T", "P")

# All schemes start and end at a user node; walks cycle them end-to-start.
DEFAULT_SCHEMES = ("UPTSTPU", "UTSTPU", "UPTSTU", "UTSTU", "UPTPU", "UPTU", "UTPU")

_EDGE_TYPES = {("U", "T"), ("U", "P"), ("T", "P"), ("S", "T")}


@dataclass
class HetGraph:
    node_keys: dict[str, str] = field(default_factory=dict)  # label -> original key
    key_labels: dict[tuple[str, str], str] = field(default_factory=dict)  # (type, key) -> label
    neighbors: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def labels_of_type(self, node_type: str) -> list[str]:
        return sorted(
            (lab for lab in self.node_keys if lab[0] == node_type),
            key=lambda lab: int(lab[1:]),
        )

    def typed_neighbors(self, label: str, node_type: str) -> list[str]:
        return self.neighbors.get(label, {}).get(node_type, [])

    def num_nodes(self) -> int:
        return len(self.node_keys)

    def _add_node(self, node_type: str, key: str) -> str:
        label = self.key_labels.get((node_type, key))
        if label is None:
            label = f"{node_type}{sum(1 for l in self.node_keys if l[0] == node_type)}"
            self.key_labels[(node_type, key)] = label
            self.node_keys[label] = key
            self.neighbors[label] = {}
        return label

    def _add_edge(self, a: str, b: str) -> None:
        ta, tb = a[0], b[0]
        if (ta, tb) not in _EDGE_TYPES and (tb, ta) not in _EDGE_TYPES:
            raise ValueError(f"edge type {ta}-{tb} not allowed")
        self.neighbors[a].setdefault(tb, [])
        if b not in self.neighbors[a][tb]:
            self.neighbors[a][tb].append(b)
        self.neighbors[b].setdefault(ta, [])
        if a not in self.neighbors[b][ta]:
            self.neighbors[b][ta].append(a)


def build_graph(posts: list[Post]) -> HetGraph:
    """One U node per author, S per subforum, T per thread, P per post.

    Every post contributes U-P and T-P edges; thread starters add U-T;
    each thread hangs off its subforum via S-T.
    """
    graph = HetGraph()
    for p in sorted(posts, key=lambda p: (p.author, p.subforum, p.thread_id, p.post_id)):
        u = graph._add_node("U", p.author)
        s = graph._add_node("S", p.subforum)
        t = graph._add_node("T", p.thread_id)
        pn = graph._add_node("P", p.post_id)
        graph._add_edge(s, t)
        graph._add_edge(t, pn)
        graph._add_edge(u, pn)
        if p.is_thread_start:
            graph._add_edge(u, t)
    for nbrs in graph.neighbors.values():
        for lst in nbrs.values():
            lst.sort(key=lambda lab: (lab[0], int(lab[1:])))
    return graph


# ------------------------------------------------------------------- walks


def _walk_rng(seed: int, node: str, walk_index: int) -> random.Random:
    digest = hashlib.blake2b(
        f"{seed}:{node}:{walk_index}".encode(), digest_size=8
    ).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _scheme_type_cycle(scheme: str):
    """Infinite node-type sequence: the scheme repeated with its terminal U
    doubling as the next start."""
    yield scheme[0]
    while True:
        for t in scheme[1:]:
            yield t


def sample_walks(
    graph: HetGraph,
    schemes=DEFAULT_SCHEMES,
    walks_per_user: int = 1000,
    walk_length: int = 80,
    rng_seed: int = 0,
) -> list[list[str]]:
    """Meta-path guided walks from every user node.

    walks_per_user splits evenly across schemes (remainder round-robin); at
    each step the next node is uniform over neighbors of the required type,
    truncating when none exists.
    """
    for scheme in schemes:
        if scheme[0] != "U" or scheme[-1] != "U":
            raise ValueError(f"scheme {scheme!r} must start and end at U")
        for a, b in zip(scheme, scheme[1:]):
            if (a, b) not in _EDGE_TYPES and (b, a) not in _EDGE_TYPES:
                raise ValueError(f"scheme {scheme!r} uses a nonexistent edge type {a}-{b}")
    if graph.num_nodes() == 0:
        raise ValueError("sample_walks: empty graph")

    per_scheme = walks_per_user // len(schemes)
    remainder = walks_per_user % len(schemes)
    walks: list[list[str]] = []
    isolated_warned = False
    for user in graph.labels_of_type("U"):
        walk_index = 0
        for si, scheme in enumerate(schemes):
            count = per_scheme + (1 if si < remainder else 0)
            for _ in range(count):
                rng = _walk_rng(rng_seed, user, walk_index)
                walk_index += 1
                walk = [user]
                types = _scheme_type_cycle(scheme)
                next(types)  # consume the starting U
                current = user
                while len(walk) < walk_length:
                    want = next(types)
                    options = graph.typed_neighbors(current, want)
                    if not options:
                        break
                    current = options[rng.randrange(len(options))]
                    walk.append(current)
                if len(walk) == 1 and walk_length > 1 and not isolated_warned:
                    log.warning("isolated user node %s: emitting length-1 walks", user)
                    isolated_warned = True
                walks.append(walk)
    return walks


def write_walks(path, walks: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for walk in walks:
            fh.write(" ".join(walk) + "\n")


def read_walks(path) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


# --------------------------------------------------------------- skip-gram


def sgns_pair_loss_and_grads(v_center: np.ndarray, u_context: np.ndarray, u_negs: np.ndarray):
    """Loss and gradients for one positive pair plus its negative samples.

    loss = -log sigmoid(u_c . v_w) - sum_n log sigmoid(-u_n . v_w)
    Returns (loss, grad_v_center, grad_u_context, grad_u_negs).
    """
    pos_score = float(u_context @ v_center)
    neg_scores = u_negs @ v_center
    # log sigmoid via softplus for stability
    loss = math.log1p(math.exp(-abs(pos_score))) + max(-pos_score, 0.0)
    loss += float(np.sum(np.log1p(np.exp(-np.abs(neg_scores))) + np.maximum(neg_scores, 0.0)))
    g_pos = _sigmoid(pos_score) - 1.0
    g_negs = _sigmoid(neg_scores)
    grad_v = g_pos * u_context + g_negs @ u_negs
    grad_uc = g_pos * v_center
    grad_un = np.outer(g_negs, v_center)
    return loss, grad_v, grad_uc, grad_un


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class NodeEmbeddings:
    vectors: dict[str, np.ndarray]
    dim: int
    meta: dict = field(default_factory=dict)

    def matrix(self, labels) -> np.ndarray:
        return np.stack([self.vectors[lab] for lab in labels])


class _TypedNegativeSampler:
    """Unigram^(3/4) negative sampling, optionally restricted to the context
    node's type (the typed-context normalization)."""

    def __init__(self, counts: dict[str, int], nodes: list[str], typed: bool):
        self.typed = typed
        self.tables: dict[str, tuple[list[str], np.ndarray]] = {}
        groups: dict[str, list[str]] = {}
        for node in nodes:
            groups.setdefault(node[0] if typed else "*", []).append(node)
        for key, members in groups.items():
            weights = np.array([counts[m] ** 0.75 for m in members], dtype=np.float64)
            self.tables[key] = (members, np.cumsum(weights / weights.sum()))

    def draw(self, context: str, k: int, rng: random.Random) -> list[str]:
        members, cdf = self.tables[context[0] if self.typed else "*"]
        if len(members) == 1:
            return [members[0]] * k  # nothing else to draw from
        out = []
        while len(out) < k:
            node = members[int(np.searchsorted(cdf, rng.random(), side="right"))]
            if node != context:
                out.append(node)
        return out


def train_skipgram(
    walks: list[list[str]],
    dim: int = 128,
    window: int = 7,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    rng_seed: int = 0,
    typed_negatives: bool = True,
) -> NodeEmbeddings:
    """Skip-gram with negative sampling over walk windows.

    Single-threaded sequential SGD with a linearly decayed learning rate;
    deterministic for a fixed seed. Records the mean per-pair loss of each
    epoch in meta["epoch_losses"].
    """
    if dim <= 0 or window <= 0:
        raise ValueError(f"dim and window must be positive, got {dim}, {window}")
    if not walks or not any(walks):
        raise ValueError("train_skipgram: no walks")

    counts: dict[str, int] = {}
    for walk in walks:
        for node in walk:
            counts[node] = counts.get(node, 0) + 1
    nodes = sorted(counts)
    index = {n: i for i, n in enumerate(nodes)}
    sampler = _TypedNegativeSampler(counts, nodes, typed=typed_negatives)

    rng = random.Random(rng_seed)
    np_rng = np.random.default_rng(rng_seed)
    w_in = ((np_rng.random((len(nodes), dim)) - 0.5) / dim).astype(np.float64)
    w_out = np.zeros((len(nodes), dim), dtype=np.float64)

    total_pairs = 0
    for walk in walks:
        for t in range(len(walk)):
            lo, hi = max(0, t - window), min(len(walk), t + window + 1)
            total_pairs += hi - lo - 1
    total_updates = max(1, total_pairs * epochs)

    epoch_losses: list[float] = []
    update = 0
    for _ in range(epochs):
        loss_sum, n_pairs = 0.0, 0
        for walk in walks:
            for t, center in enumerate(walk):
                lo, hi = max(0, t - window), min(len(walk), t + window + 1)
                ci = index[center]
                for j in range(lo, hi):
                    if j == t:
                        continue
                    context = walk[j]
                    negs = sampler.draw(context, negatives, rng)
                    alpha = lr * max(1e-4, 1.0 - update / total_updates)
                    update += 1
                    oi = index[context]
                    ni = [index[n] for n in negs]
                    loss, g_v, g_uc, g_un = sgns_pair_loss_and_grads(
                        w_in[ci], w_out[oi], w_out[ni]
                    )
                    loss_sum += loss
                    n_pairs += 1
                    w_in[ci] -= alpha * g_v
                    w_out[oi] -= alpha * g_uc
                    w_out[ni] -= alpha * g_un
        epoch_losses.append(loss_sum / max(1, n_pairs))

    vectors = {n: w_in[index[n]].astype(np.float32) for n in nodes}
    return NodeEmbeddings(
        vectors=vectors,
        dim=dim,
        meta={
            "window": window,
            "negatives": negatives,
            "epochs": epochs,
            "lr": lr,
            "seed": rng_seed,
            "typed_negatives": typed_negatives,
            "epoch_losses": epoch_losses,
        },
    )


# ------------------------------------------------------------------ export


def export_context_init(
    embeddings: NodeEmbeddings, graph: HetGraph, subforums: list[str], dim: int | None = None
) -> dict[str, np.ndarray]:
    """Subforum -> S-node vector, in subforum-id order; missing S nodes get a
    zero vector with a warning."""
    want = dim if dim is not None else embeddings.dim
    if want != embeddings.dim:
        raise ValueError(f"context dim {want} != embedding dim {embeddings.dim}")
    out: dict[str, np.ndarray] = {}
    for sf in sorted(subforums):
        label = graph.key_labels.get(("S", sf))
        vec = embeddings.vectors.get(label) if label is not None else None
        if vec is None:
            log.warning("subforum %r has no trained S node; using zero init", sf)
            vec = np.zeros(embeddings.dim, dtype=np.float32)
        out[sf] = vec
    return out


def rescale_context_init(init: dict[str, np.ndarray], target_std: float) -> dict[str, np.ndarray]:
    """Scale a set of context-init vectors so their global standard deviation
    matches the model's random-init scale.

    Skip-gram vectors come out with much larger norms than a fresh embedding
    table; transplanted unscaled they dominate the concatenated post vector.
    Relative geometry is preserved.
    """
    mat = np.stack([init[k] for k in sorted(init)])
    std = float(mat.std())
    if std == 0.0:
        return {k: v.copy() for k, v in init.items()}
    factor = target_std / std
    return {k: (v * factor).astype(np.float32) for k, v in init.items()}


def write_embeddings_tsv(path, embeddings: NodeEmbeddings) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node\t" + "\t".join(f"dim{i}" for i in range(embeddings.dim)) + "\n")
        for node in sorted(embeddings.vectors):
            vec = embeddings.vectors[node]
            fh.write(node + "\t" + "\t".join(repr(float(x)) for x in vec) + "\n")


def read_embeddings_tsv(path) -> NodeEmbeddings:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        dim = len(header) - 1
        vectors: dict[str, np.ndarray] = {}
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float32)
    return NodeEmbeddings(vectors=vectors, dim=dim)
