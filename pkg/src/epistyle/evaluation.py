"""Retrieval metrics over episode embeddings, paired signed-rank comparison,
sybil candidate search, identifiability scores, and integrated-gradients
token attribution."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import numcore as nc
from .corpus import Episode
from .model import EpisodeModel, EpisodeBatch, PostEncoder, make_episode_batch
from .numcore import Tensor

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- index


class RetrievalIndex:
    """Immutable store of episode embeddings with author labels.

    Cosine ranking uses unit-normalized float64 copies; ties break by the
    stable insertion index. Raw embeddings are kept for distance-based
    scores.
    """

    def __init__(self, episode_ids, markets, authors, embeddings, seen=None):
        self.episode_ids = list(episode_ids)
        self.markets = np.asarray(markets, dtype=object)
        self.authors = np.asarray(authors, dtype=object)
        self.raw = np.asarray(embeddings, dtype=np.float64)
        if self.raw.ndim != 2 or len(self.raw) != len(self.episode_ids):
            raise ValueError("embeddings must be (n_episodes, dim)")
        norms = np.linalg.norm(self.raw, axis=1)
        self.unit = self.raw / np.maximum(norms, 1e-12)[:, None]
        self.seen = (
            np.ones(len(self.raw), dtype=bool) if seen is None else np.asarray(seen, dtype=bool)
        )
        keys = {}
        self.author_ids = np.array(
            [keys.setdefault((m, a), len(keys)) for m, a in zip(self.markets, self.authors)]
        )

    def __len__(self) -> int:
        return len(self.episode_ids)

    @classmethod
    def from_episodes(cls, model: EpisodeModel, encoder: PostEncoder, episodes: list[Episode],
                      seen_authors: set | None = None, batch_size: int = 256) -> "RetrievalIndex":
        if len(episodes) < 2:
            raise ValueError("an index needs at least 2 episodes")
        chunks = []
        for i in range(0, len(episodes), batch_size):
            batch = make_episode_batch(episodes[i : i + batch_size], encoder, model)
            chunks.append(model.embed_episodes(batch, train=False).data)
        emb = np.vstack(chunks)
        seen = None
        if seen_authors is not None:
            seen = np.array([(e.market, e.author) in seen_authors for e in episodes])
        ids = [f"{e.market}/{e.author}/{e.posts[0].post_id}" for e in episodes]
        return cls(ids, [e.market for e in episodes], [e.author for e in episodes], emb, seen)

    # ----------------------------------------------------------- rankings

    def eligible_queries(self) -> np.ndarray:
        """Indices whose author has at least one other episode in the index."""
        _, counts = np.unique(self.author_ids, return_counts=True)
        per_episode = counts[self.author_ids]
        return np.flatnonzero(per_episode >= 2)

    def first_same_author_rank(self, i: int) -> int:
        """1-based rank of the first same-author episode among all others,
        ordered by cosine descending with stable-id tie-breaking."""
        sims = self.unit @ self.unit[i]
        order = np.lexsort((np.arange(len(sims)), -sims))
        order = order[order != i]
        hits = self.author_ids[order] == self.author_ids[i]
        pos = int(np.argmax(hits))
        if not hits[pos]:
            raise ValueError(f"query {i} has no same-author episode")
        return pos + 1


def sample_queries(index: RetrievalIndex, kappa: int, rng: np.random.Generator) -> np.ndarray:
    eligible = index.eligible_queries()
    if len(eligible) == 0:
        raise ValueError("no eligible queries: every author has a single episode")
    excluded = len(index) - len(eligible)
    if excluded:
        log.info("excluding %d single-episode-author queries", excluded)
    if kappa >= len(eligible):
        if kappa > len(eligible):
            log.warning("kappa=%d > %d eligible queries; using all", kappa, len(eligible))
        return eligible
    picked = rng.choice(len(eligible), size=kappa, replace=False)
    return eligible[np.sort(picked)]


def mrr(index: RetrievalIndex, queries=None, kappa: int = 1000, rng=None) -> float:
    """Mean reciprocal rank of the first same-author episode by cosine."""
    if queries is None:
        queries = sample_queries(index, kappa, rng or np.random.default_rng(0))
    ranks = [index.first_same_author_rank(int(i)) for i in queries]
    return float(np.mean([1.0 / r for r in ranks]))


def recall_at_k(index: RetrievalIndex, queries=None, k: int = 10, kappa: int = 1000, rng=None) -> float:
    """Fraction of queries with a same-author episode in the top k."""
    if queries is None:
        queries = sample_queries(index, kappa, rng or np.random.default_rng(0))
    ranks = [index.first_same_author_rank(int(i)) for i in queries]
    return float(np.mean([1.0 if r <= k else 0.0 for r in ranks]))


def random_baseline_mrr(index: RetrievalIndex, queries) -> float:
    """Exact expected MRR of a uniformly random ranking.

    For a query with m same-author episodes among n-1 candidates, the first
    hit's rank R has P(R=r) = C(n-1-r, m-1)/C(n-1, m); we sum 1/r * P(R=r).
    """
    n = len(index)
    _, counts = np.unique(index.author_ids, return_counts=True)
    expectations = []
    for i in queries:
        m = int(counts[index.author_ids[int(i)]]) - 1
        total = math.comb(n - 1, m)
        e = sum(
            (1.0 / r) * math.comb(n - 1 - r, m - 1) / total
            for r in range(1, n - m + 1)
        )
        expectations.append(e)
    return float(np.mean(expectations))


@dataclass
class MetricsReport:
    mrr: float
    recall: dict[int, float]
    kappa: int
    n_queries: int
    seed: int
    group: str = "all"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.mrr <= 1.0:
            raise ValueError(f"MRR {self.mrr} outside [0, 1]")
        ks = sorted(self.recall)
        for a, b in zip(ks, ks[1:]):
            if self.recall[a] > self.recall[b] + 1e-12:
                raise ValueError("recall must be non-decreasing in k")

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "mrr": self.mrr,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "kappa": self.kappa,
            "n_queries": self.n_queries,
            "seed": self.seed,
            **self.extra,
        }


def metrics_report(index: RetrievalIndex, kappa: int = 1000, seed: int = 0,
                   ks=(1, 5, 10), queries=None, group: str = "all") -> MetricsReport:
    rng = np.random.default_rng(seed)
    if queries is None:
        queries = sample_queries(index, kappa, rng)
    ranks = [index.first_same_author_rank(int(i)) for i in queries]
    rec = {k: float(np.mean([1.0 if r <= k else 0.0 for r in ranks])) for k in ks}
    return MetricsReport(
        mrr=float(np.mean([1.0 / r for r in ranks])),
        recall=rec, kappa=kappa, n_queries=len(queries), seed=seed, group=group,
    )


def seen_novel_report(index: RetrievalIndex, kappa: int = 1000, seed: int = 0,
                      ks=(1, 5, 10)) -> dict[str, MetricsReport]:
    """Metrics over the disjoint seen-author and novel-author query samples."""
    rng = np.random.default_rng(seed)
    eligible = index.eligible_queries()
    out: dict[str, MetricsReport] = {}
    for group, mask in (("seen", index.seen), ("novel", ~index.seen)):
        pool = eligible[mask[eligible]]
        if len(pool) == 0:
            log.warning("%s group is empty; report omitted", group)
            continue
        if kappa < len(pool):
            picked = rng.choice(len(pool), size=kappa, replace=False)
            pool = pool[np.sort(picked)]
        out[group] = metrics_report(index, kappa=kappa, seed=seed, ks=ks,
                                    queries=pool, group=group)
    return out


# ------------------------------------------------------- paired signed-rank


def _signed_ranks(diffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average ranks of |d| (ties averaged) and the tie-group sizes."""
    absd = np.abs(diffs)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(len(absd))
    ties = []
    i = 0
    while i < len(absd):
        j = i
        while j < len(absd) and absd[order[j]] == absd[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average of 1-based positions
        ties.append(j - i)
        i = j
    return ranks, np.array(ties)


def wmw_paired(sample_a, sample_b, exact_threshold: int = 12) -> float:
    """Two-sided paired signed-rank test p-value.

    Zero differences are dropped. With n nonzero differences <= 12 the null
    is computed exactly over all 2^n sign assignments (via the generating
    function of achievable rank sums); larger n uses the normal
    approximation with continuity and tie corrections.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1-d and equal length")
    if len(a) < 5:
        raise ValueError(f"need at least 5 pairs, got {len(a)}")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return 1.0
    ranks, ties = _signed_ranks(diffs)
    w_pos = float(ranks[diffs > 0].sum())

    if n <= exact_threshold:
        scaled = np.rint(ranks * 2).astype(np.int64)  # tie-averages become integers
        total = int(scaled.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in scaled:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[: total + 1 - r]
            counts = counts + shifted
        w_scaled = int(round(w_pos * 2))
        n_patterns = 2.0**n
        p_le = counts[: w_scaled + 1].sum() / n_patterns
        p_ge = counts[w_scaled:].sum() / n_patterns
        return min(1.0, 2.0 * min(p_le, p_ge))

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((ties**3 - ties).sum())) / 48.0
    if var <= 0:
        return 1.0
    delta = w_pos - mu
    z = (delta - 0.5 * np.sign(delta)) / math.sqrt(var)
    return min(1.0, 2.0 * (1.0 - NormalDist().cdf(abs(z))))


# --------------------------------------------------------- SI & sybil search


def si_score(index: RetrievalIndex, market: str, author: str, normalized: bool = False) -> float:
    """Mean pairwise Euclidean distance between the author's episode
    embeddings; lower means more identifiable."""
    mask = (index.markets == market) & (index.authors == author)
    rows = (index.unit if normalized else index.raw)[mask]
    if len(rows) < 2:
        raise ValueError(f"author {author!r} has {len(rows)} episode(s); need >= 2")
    total, pairs = 0.0, 0
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            total += float(np.linalg.norm(rows[i] - rows[j]))
            pairs += 1
    return total / pairs


def topk_sybil(index: RetrievalIndex, market: str, author: str, k: int = 10):
    """Most frequent foreign user among the k nearest cross-market episodes of
    each of the author's episodes; ties prefer higher mean similarity.

    Returns (candidate_author, candidate_market, support_count).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    own = np.flatnonzero((index.markets == market) & (index.authors == author))
    if len(own) == 0:
        raise ValueError(f"user {author!r} has no episodes in market {market!r}")
    foreign = np.flatnonzero(index.markets != market)
    if len(foreign) == 0:
        raise ValueError("no cross-market episodes in the index")
    support: dict[tuple[str, str], list[float]] = {}
    for i in own:
        sims = index.unit[foreign] @ index.unit[i]
        order = np.lexsort((foreign, -sims))[: min(k, len(foreign))]
        for pos in order:
            key = (str(index.markets[foreign[pos]]), str(index.authors[foreign[pos]]))
            support.setdefault(key, []).append(float(sims[pos]))
    best = max(
        support.items(),
        key=lambda kv: (len(kv[1]), float(np.mean(kv[1])), kv[0]),
    )
    (cand_market, cand_author), sims_list = best
    return cand_author, cand_market, len(sims_list)


# ------------------------------------------------------ integrated gradients


def gauss_legendre_unit(steps: int, panels: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]; weights sum to 1.

    The rule is composite: `steps` nodes spread over equal panels of ~5
    nodes each. Relu kinks and max-pool switches leave the path derivative
    only piecewise smooth, where a composite rule converges far better
    than one high-order panel.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if panels is None:
        panels = max(1, steps // 5)
    panels = min(panels, steps)
    base, extra = divmod(steps, panels)
    alphas, weights = [], []
    for p in range(panels):
        n = base + (1 if p < extra else 0)
        nodes, w = np.polynomial.legendre.leggauss(n)
        lo, hi = p / panels, (p + 1) / panels
        alphas.extend(lo + (nodes + 1.0) / 2.0 * (hi - lo))
        weights.extend(w / 2.0 * (hi - lo))
    return np.asarray(alphas), np.asarray(weights)


def integrated_gradients_fn(fn, x: np.ndarray, baseline: np.ndarray, steps: int = 50):
    """Path-integral attribution of a scalar function from baseline to x.

    fn maps a Tensor of x.shape to a scalar Tensor. Returns (attributions,
    completeness gap) where the gap is |sum(attr) - (fn(x) - fn(baseline))|.
    """
    if x.shape != baseline.shape:
        raise ValueError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    alphas, weights = gauss_legendre_unit(steps)
    diff = x.astype(np.float64) - baseline.astype(np.float64)
    accum = np.zeros_like(diff)
    for alpha, weight in zip(alphas, weights):
        point = Tensor(baseline + alpha * diff, requires_grad=True)
        out = fn(point)
        if not np.isfinite(out.data):
            raise FloatingPointError("non-finite output along the integration path")
        out.backward()
        if not np.all(np.isfinite(point.grad)):
            raise FloatingPointError("non-finite gradient along the integration path")
        accum += weight * point.grad.astype(np.float64)
    attributions = diff * accum

    def value(arr):
        return float(fn(Tensor(arr)).data)

    delta = value(x) - value(baseline)
    total = float(attributions.sum())
    completeness = {"sum_attributions": total, "delta": delta, "gap": abs(total - delta)}
    return attributions, completeness


def cosine_target(centroid: np.ndarray):
    """Scalar target: cosine similarity of the episode embedding to a fixed
    centroid vector."""
    unit = centroid / max(np.linalg.norm(centroid), 1e-12)

    def fn(episode_emb: Tensor) -> Tensor:
        flat = nc.reshape(episode_emb, (1, episode_emb.shape[-1]))
        return nc.sum_(nc.mul(nc.l2_normalize(flat, axis=-1), Tensor(unit[None, :].astype(np.float32))))

    return fn


def author_centroid(index: RetrievalIndex, market: str, author: str) -> np.ndarray:
    mask = (index.markets == market) & (index.authors == author)
    if not mask.any():
        raise ValueError(f"no episodes for {market}/{author} in index")
    return index.raw[mask].mean(axis=0)


def integrated_gradients(model: EpisodeModel, encoder: PostEncoder, episode: Episode,
                         target_fn, steps: int = 50):
    """Per-token attribution scores for one episode.

    The baseline replaces every token embedding with the [PAD] embedding;
    time and context inputs are held at their actual values. Returns
    (records, completeness) with one {post_id, token, score} record per
    real token.
    """
    batch = make_episode_batch([episode], encoder, model)
    table = model.params["token_emb"].data
    x = table[batch.token_ids]  # (L, n_max, d_token)
    baseline = np.broadcast_to(table[encoder.vocab.pad_id], x.shape).copy()

    def fn(emb: Tensor) -> Tensor:
        out = model.embed_episodes(batch, train=False, token_embeddings=emb)
        return target_fn(out)

    attr, completeness = integrated_gradients_fn(fn, x, baseline, steps=steps)
    scores = attr.sum(axis=-1)  # (L, n_max)
    records = []
    for li, post in enumerate(episode.posts):
        n_tokens = len(encoder.ids(post))
        for ti in range(n_tokens):
            token_id = int(batch.token_ids[li, ti])
            records.append(
                {
                    "post_id": post.post_id,
                    "token": token_display(encoder.vocab, token_id),
                    "score": float(scores[li, ti]),
                }
            )
    return records, completeness


def token_display(vocab, token_id: int) -> str:
    token = vocab.tokens[token_id]
    if isinstance(token, bytes):
        return token.decode("utf-8", errors="replace")
    return token


# ------------------------------------------------------------------ export


def export_embeddings_tsv(path, index: RetrievalIndex) -> None:
    dim = index.raw.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("episode_id\tmarket\tauthor\t" + "\t".join(f"dim{i}" for i in range(dim)) + "\n")
        for i, eid in enumerate(index.episode_ids):
            vals = "\t".join(repr(float(v)) for v in index.raw[i])
            fh.write(f"{eid}\t{index.markets[i]}\t{index.authors[i]}\t{vals}\n")
