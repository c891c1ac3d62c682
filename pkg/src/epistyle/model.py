"""Episode embedding network (text CNN + posting-time + subforum context,
mean or transformer pooling) and the per-task metric learning heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import numcore as nc
from .corpus import Episode, Post
from .numcore import Tensor
from .tokenization import Vocab, encode

MASK_NEG = -1e30
UNK_SUBFORUM_ROW = 0


@dataclass
class ModelConfig:
    vocab_size: int = 0  # filled in when the tokenizer is known
    d_token: int = 32
    d_text: int = 128
    d_time: int = 64
    d_context: int = 128
    filter_sizes: tuple[int, ...] = (2, 3, 4, 5)
    filters_per_size: int = 32
    dropout: float = 0.1
    pooling: str = "mean"  # mean | transformer
    tf_layers: int = 4
    tf_heads: int = 4
    tf_ff: int = 128
    tf_model_dim: int = 128
    tf_out_dim: int = 32
    tokenizer_kind: str = "bpe"
    max_tokens: int = 512

    def __post_init__(self):
        dims = (self.d_token, self.d_text, self.d_time, self.d_context,
                self.filters_per_size, self.tf_model_dim, self.tf_out_dim)
        if any(d <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.pooling not in ("mean", "transformer"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def conv_width(self) -> int:
        return len(self.filter_sizes) * self.filters_per_size

    @property
    def post_dim(self) -> int:
        return self.d_text + self.d_time + self.d_context

    @property
    def episode_dim(self) -> int:
        return self.post_dim if self.pooling == "mean" else self.tf_out_dim

    @property
    def max_filter(self) -> int:
        return max(self.filter_sizes)


def day_of_week(timestamp: float) -> int:
    """UTC day of week, Monday = 0. Only the calendar date is trusted."""
    return datetime.fromtimestamp(timestamp, tz=timezone.utc).weekday()


# ------------------------------------------------------------ batch building


class PostEncoder:
    """Caches token-id sequences per post; truncates to the model's cap."""

    def __init__(self, vocab: Vocab, max_tokens: int = 512):
        self.vocab = vocab
        self.max_tokens = max_tokens
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def ids(self, post: Post) -> np.ndarray:
        key = (post.market, post.post_id)
        out = self._cache.get(key)
        if out is None:
            out = np.asarray(encode(self.vocab, post.body)[: self.max_tokens], dtype=np.int64)
            self._cache[key] = out
        return out


@dataclass
class EpisodeBatch:
    token_ids: np.ndarray  # (B*L, n_max), padded with the pad id
    pad_lengths: np.ndarray  # (B*L,), after padding to the max filter width
    dow: np.ndarray  # (B*L,)
    ctx_rows: np.ndarray  # (B*L,), market-local rows, 0 = unknown subforum
    market_groups: list[tuple[str, np.ndarray]]  # market -> flat post indices
    size: int
    episode_len: int


def make_episode_batch(episodes: list[Episode], encoder: PostEncoder, model: "EpisodeModel") -> EpisodeBatch:
    if not episodes:
        raise ValueError("empty episode batch")
    length = len(episodes[0])
    if any(len(e) != length for e in episodes):
        raise ValueError("all episodes in a batch must have the same length")
    cfg = model.cfg
    flat_posts = [p for e in episodes for p in e.posts]
    seqs = [encoder.ids(p) for p in flat_posts]
    pad_lengths = np.array([max(len(s), cfg.max_filter) for s in seqs], dtype=np.int64)
    n_max = int(pad_lengths.max())
    ids = np.full((len(flat_posts), n_max), encoder.vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    dow = np.array([day_of_week(p.timestamp) for p in flat_posts], dtype=np.int64)
    ctx = np.zeros(len(flat_posts), dtype=np.int64)
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(flat_posts):
        ctx[i] = model.subforum_maps[p.market].get(p.subforum, UNK_SUBFORUM_ROW)
        groups.setdefault(p.market, []).append(i)
    market_groups = [(m, np.array(ix, dtype=np.int64)) for m, ix in sorted(groups.items())]
    return EpisodeBatch(
        token_ids=ids, pad_lengths=pad_lengths, dow=dow, ctx_rows=ctx,
        market_groups=market_groups, size=len(episodes), episode_len=length,
    )


# ------------------------------------------------------------------- model


class EpisodeModel:
    """f_theta: episodes -> embeddings. Parameters live in a flat named dict;
    the per-market context tables are the only market-specific pieces."""

    def __init__(self, cfg: ModelConfig, subforum_maps: dict[str, dict[str, int]], params: dict[str, Tensor]):
        self.cfg = cfg
        self.subforum_maps = subforum_maps
        self.params = params

    @classmethod
    def build(
        cls,
        cfg: ModelConfig,
        markets: dict[str, list[str]],
        seed: int = 0,
        context_init: dict[str, dict[str, np.ndarray]] | None = None,
    ) -> "EpisodeModel":
        if cfg.vocab_size <= 0:
            raise ValueError("cfg.vocab_size must be set before building the model")
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def param(name, arr):
            p[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)

        def glorot(*shape):
            fan_in, fan_out = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1])), shape[-1]
            std = math.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, std, size=shape)

        param("token_emb", rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, cfg.d_token)))
        param("time_emb", rng.uniform(-0.1, 0.1, size=(7, cfg.d_time)))
        for w in cfg.filter_sizes:
            param(f"conv{w}.w", glorot(w, cfg.d_token, cfg.filters_per_size))
            param(f"conv{w}.b", np.zeros(cfg.filters_per_size))
        param("text_fc.w", glorot(cfg.conv_width, cfg.d_text))
        param("text_fc.b", np.zeros(cfg.d_text))

        subforum_maps: dict[str, dict[str, int]] = {}
        for market, subforums in sorted(markets.items()):
            ordered = sorted(subforums)
            subforum_maps[market] = {sf: i + 1 for i, sf in enumerate(ordered)}
            table = rng.uniform(-0.1, 0.1, size=(len(ordered) + 1, cfg.d_context))
            init = (context_init or {}).get(market)
            if init is not None:
                for sf, row in subforum_maps[market].items():
                    if sf in init:
                        vec = np.asarray(init[sf], dtype=np.float32)
                        if vec.shape != (cfg.d_context,):
                            raise ValueError(
                                f"context init for {market}/{sf}: dim {vec.shape} != ({cfg.d_context},)"
                            )
                        table[row] = vec
            param(f"context.{market}", table)

        if cfg.pooling == "transformer":
            d = cfg.tf_model_dim
            param("pool.in.w", glorot(cfg.post_dim, d))
            param("pool.in.b", np.zeros(d))
            for i in range(cfg.tf_layers):
                pre = f"pool.l{i}"
                param(f"{pre}.ln1.g", np.ones(d))
                param(f"{pre}.ln1.b", np.zeros(d))
                for nm in ("wq", "wk", "wv", "wo"):
                    param(f"{pre}.attn.{nm}", glorot(d, d))
                for nm in ("bq", "bv", "bo"):
                    param(f"{pre}.attn.{nm}", np.zeros(d))
                param(f"{pre}.ln2.g", np.ones(d))
                param(f"{pre}.ln2.b", np.zeros(d))
                param(f"{pre}.ff.w1", glorot(d, cfg.tf_ff))
                param(f"{pre}.ff.b1", np.zeros(cfg.tf_ff))
                param(f"{pre}.ff.w2", glorot(cfg.tf_ff, d))
                param(f"{pre}.ff.b2", np.zeros(d))
            param("pool.ln.g", np.ones(d))
            param("pool.ln.b", np.zeros(d))
            param("pool.out.w", glorot(d, cfg.tf_out_dim))
            param("pool.out.b", np.zeros(cfg.tf_out_dim))
        return cls(cfg, subforum_maps, p)

    # ------------------------------------------------------------- forward

    def _text_from_token_embeddings(self, emb: Tensor, pad_lengths: np.ndarray,
                                    train: bool, rng) -> Tensor:
        cfg = self.cfg
        n_max = emb.shape[-2]
        feats = []
        for w in cfg.filter_sizes:
            conv = nc.sliding_window_conv(emb, self.params[f"conv{w}.w"], self.params[f"conv{w}.b"])
            conv = nc.relu(conv)
            t = n_max - w + 1
            valid = pad_lengths - w + 1
            mask = np.where(np.arange(t)[None, :] < valid[:, None], 0.0, MASK_NEG)
            conv = nc.add(conv, Tensor(mask.astype(np.float32)[..., None]))
            feats.append(nc.max_over_time(conv, axis=1))
        x = nc.concat(feats, axis=-1)
        x = nc.dropout(x, cfg.dropout, train, rng)
        return nc.linear(x, self.params["text_fc.w"], self.params["text_fc.b"])

    def _embed_text_batch(self, token_ids, pad_lengths, train, rng) -> Tensor:
        emb = nc.embedding_lookup(self.params["token_emb"], token_ids)
        return self._text_from_token_embeddings(emb, pad_lengths, train, rng)

    def _embed_context_batch(self, batch: EpisodeBatch) -> Tensor:
        pieces = []
        for market, idx in batch.market_groups:
            rows = nc.embedding_lookup(self.params[f"context.{market}"], batch.ctx_rows[idx])
            pieces.append((idx, rows))
        n = batch.token_ids.shape[0]
        if len(pieces) == 1 and len(pieces[0][0]) == n:
            return pieces[0][1]
        return nc.scatter_rows(pieces, n, self.cfg.d_context)

    def _pool_transformer(self, posts: Tensor, train: bool, rng) -> Tensor:
        cfg = self.cfg
        p = self.params
        x = nc.linear(posts, p["pool.in.w"], p["pool.in.b"])
        for i in range(cfg.tf_layers):
            pre = f"pool.l{i}"
            h = nc.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            a = nc.multihead_attention(
                h, p[f"{pre}.attn.wq"], p[f"{pre}.attn.wk"], p[f"{pre}.attn.wv"],
                p[f"{pre}.attn.wo"], p[f"{pre}.attn.bq"], p[f"{pre}.attn.bv"],
                p[f"{pre}.attn.bo"], cfg.tf_heads,
            )
            a = nc.dropout(a, cfg.dropout, train, rng)
            x = nc.add(x, a)
            h2 = nc.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            f = nc.relu(nc.linear(h2, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"]))
            f = nc.dropout(f, cfg.dropout, train, rng)
            f = nc.linear(f, p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
            x = nc.add(x, f)
        x = nc.layer_norm(x, p["pool.ln.g"], p["pool.ln.b"])
        x = nc.mean(x, axis=1)
        return nc.linear(x, p["pool.out.w"], p["pool.out.b"])

    def embed_episodes(self, batch: EpisodeBatch, train: bool = False,
                       rng: np.random.Generator | None = None,
                       token_embeddings: Tensor | None = None) -> Tensor:
        """Embed a batch of episodes; (B, E). Pass `token_embeddings` to
        bypass the token lookup (attribution path integrals need this)."""
        if token_embeddings is None:
            text = self._embed_text_batch(batch.token_ids, batch.pad_lengths, train, rng)
        else:
            text = self._text_from_token_embeddings(token_embeddings, batch.pad_lengths, train, rng)
        time = nc.embedding_lookup(self.params["time_emb"], batch.dow)
        ctx = self._embed_context_batch(batch)
        post = nc.concat([text, time, ctx], axis=-1)
        post = nc.reshape(post, (batch.size, batch.episode_len, self.cfg.post_dim))
        if self.cfg.pooling == "mean":
            return nc.mean(post, axis=1)
        return self._pool_transformer(post, train, rng)

    # ------------------------------------------- single-input conveniences

    def embed_text(self, token_ids, train: bool = False, rng=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        pad_len = max(len(ids), self.cfg.max_filter)
        padded = np.zeros((1, pad_len), dtype=np.int64)
        padded[0, : len(ids)] = ids
        out = self._embed_text_batch(padded, np.array([pad_len]), train, rng)
        return nc.reshape(out, (self.cfg.d_text,))

    def embed_time(self, timestamp: float) -> Tensor:
        row = nc.embedding_lookup(self.params["time_emb"], np.array([day_of_week(timestamp)]))
        return nc.reshape(row, (self.cfg.d_time,))

    def embed_context(self, market: str, subforum: str) -> Tensor:
        row_idx = self.subforum_maps[market].get(subforum, UNK_SUBFORUM_ROW)
        row = nc.embedding_lookup(self.params[f"context.{market}"], np.array([row_idx]))
        return nc.reshape(row, (self.cfg.d_context,))

    def embed_post(self, post: Post, encoder: PostEncoder) -> Tensor:
        return nc.concat(
            [
                self.embed_text(encoder.ids(post)),
                self.embed_time(post.timestamp),
                self.embed_context(post.market, post.subforum),
            ],
            axis=-1,
        )

    def pool_mean(self, post_embeddings: Tensor) -> Tensor:
        return nc.mean(post_embeddings, axis=0)

    def pool_transformer(self, post_embeddings: Tensor, train: bool = False, rng=None) -> Tensor:
        length, d = post_embeddings.shape
        out = self._pool_transformer(nc.reshape(post_embeddings, (1, length, d)), train, rng)
        return nc.reshape(out, (self.cfg.tf_out_dim,))

    # ------------------------------------------------------------- weights

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing parameter {k!r}")
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"parameter {k!r}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(np.float32).copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# ------------------------------------------------------------- metric heads


@dataclass
class MetricHead:
    """Task-specific layer g_phi shaping the embedding geometry.

    kinds: sm (plain softmax on unnormalized logits), cf (additive cosine
    margin), af (additive angular margin), ms (multi-similarity over the
    batch; carries no weight matrix).
    """

    kind: str
    name: str
    n_labels: int
    dim: int
    weight: Tensor | None = None
    cf_margin: float = 0.35
    af_margin_deg: float = 28.6
    logit_scale: float = 64.0
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 0.5
    ms_mining_eps: float = 0.1

    @classmethod
    def build(cls, kind: str, name: str, n_labels: int, dim: int, seed: int = 0, **hyper) -> "MetricHead":
        if kind not in ("sm", "cf", "af", "ms"):
            raise ValueError(f"unknown metric head kind {kind!r}")
        head = cls(kind=kind, name=name, n_labels=n_labels, dim=dim, **hyper)
        if kind != "ms":
            rng = np.random.default_rng(seed)
            std = math.sqrt(2.0 / (n_labels + dim))
            head.weight = Tensor(
                rng.normal(0.0, std, size=(n_labels, dim)).astype(np.float32),
                requires_grad=True, name=f"head.{name}",
            )
        return head

    def named_params(self) -> dict[str, Tensor]:
        return {} if self.weight is None else {f"head.{self.name}": self.weight}

    def _check_labels(self, labels: np.ndarray):
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_labels):
            raise ValueError(f"label out of range [0, {self.n_labels})")

    def _cosine_logits(self, embeddings: Tensor) -> Tensor:
        norms = np.sqrt((embeddings.data.astype(np.float64) ** 2).sum(axis=-1))
        if np.any(norms < 1e-20):
            raise ValueError("zero-norm embedding in margin loss")
        xn = nc.l2_normalize(embeddings, axis=-1)
        wn = nc.l2_normalize(self.weight, axis=-1)
        return nc.matmul(xn, nc.transpose(wn, (1, 0)))

    def loss(self, embeddings: Tensor, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if self.kind == "sm":
            self._check_labels(labels)
            logits = nc.matmul(embeddings, nc.transpose(self.weight, (1, 0)))
            return nc.cross_entropy(logits, labels)
        if self.kind == "cf":
            self._check_labels(labels)
            cos = self._cosine_logits(embeddings)
            onehot = np.zeros((len(labels), self.n_labels), dtype=np.float32)
            onehot[np.arange(len(labels)), labels] = 1.0
            adjusted = nc.scale(nc.sub(cos, Tensor(onehot * self.cf_margin)), self.logit_scale)
            return nc.cross_entropy(adjusted, labels)
        if self.kind == "af":
            self._check_labels(labels)
            return self._arcface_loss(embeddings, labels)
        return self.multisimilarity_loss(embeddings, labels)

    def _arcface_loss(self, embeddings: Tensor, labels: np.ndarray) -> Tensor:
        m = math.radians(self.af_margin_deg)
        cos_m, sin_m = math.cos(m), math.sin(m)
        cos = self._cosine_logits(embeddings)
        n = len(labels)
        onehot = np.zeros((n, self.n_labels), dtype=np.float32)
        onehot[np.arange(n), labels] = 1.0
        ty = nc.sum_(nc.mul(cos, Tensor(onehot)), axis=1, keepdims=True)  # (B, 1)
        sin_y = nc.sqrt(nc.add(nc.sub(Tensor(np.ones((n, 1), dtype=np.float32)),
                                      nc.mul(ty, ty)), Tensor(np.full((n, 1), 1e-12, np.float32))))
        shifted = nc.sub(nc.scale(ty, cos_m), nc.scale(sin_y, sin_m))  # cos(theta + m)
        # where theta + m would exceed pi, fall back to the linear margin
        ok = (ty.data >= -cos_m).astype(np.float32)
        fallback = nc.sub(ty, Tensor(np.full((n, 1), m * sin_m, np.float32)))
        target = nc.add(nc.mul(shifted, Tensor(ok)), nc.mul(fallback, Tensor(1.0 - ok)))
        adjusted = nc.add(cos, nc.mul(nc.sub(target, ty), Tensor(onehot)))
        return nc.cross_entropy(nc.scale(adjusted, self.logit_scale), labels)

    def multisimilarity_loss(self, embeddings: Tensor, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        if n < 2:
            raise ValueError("multi-similarity loss needs a batch of >= 2")
        xn = nc.l2_normalize(embeddings, axis=-1)
        sims = nc.matmul(xn, nc.transpose(xn, (1, 0)))  # (B, B)
        s = sims.data
        same = labels[:, None] == labels[None, :]
        eye = np.eye(n, dtype=bool)
        pos = same & ~eye
        neg = ~same

        mined_pos = np.zeros((n, n), dtype=np.float32)
        mined_neg = np.zeros((n, n), dtype=np.float32)
        contributes = np.zeros(n, dtype=bool)
        eps = self.ms_mining_eps
        for i in range(n):
            if not pos[i].any() or not neg[i].any():
                continue
            max_neg = s[i, neg[i]].max()
            min_pos = s[i, pos[i]].min()
            mp = pos[i] & (s[i] < max_neg + eps)
            mn = neg[i] & (s[i] > min_pos - eps)
            if mp.any() or mn.any():
                contributes[i] = True
                mined_pos[i, mp] = 1.0
                mined_neg[i, mn] = 1.0
        if not contributes.any():
            return Tensor(np.float32(0.0))

        lam = self.ms_lambda
        pos_e = nc.mul(nc.exp(nc.scale(nc.sub(sims, lam), -self.ms_alpha)), Tensor(mined_pos))
        neg_e = nc.mul(nc.exp(nc.scale(nc.sub(sims, lam), self.ms_beta)), Tensor(mined_neg))
        pos_term = nc.scale(nc.log(nc.add(nc.sum_(pos_e, axis=1), 1.0)), 1.0 / self.ms_alpha)
        neg_term = nc.scale(nc.log(nc.add(nc.sum_(neg_e, axis=1), 1.0)), 1.0 / self.ms_beta)
        per_anchor = nc.add(pos_term, neg_term)
        keep = contributes.astype(np.float32)
        total = nc.sum_(nc.mul(per_anchor, Tensor(keep)))
        return nc.scale(total, 1.0 / float(contributes.sum()))


def loss_softmax(embedding: Tensor, label: int, head: MetricHead) -> Tensor:
    emb = nc.reshape(embedding, (1, head.dim)) if embedding.data.ndim == 1 else embedding
    return head.loss(emb, np.array([label]) if np.isscalar(label) else label)


def loss_cosface(embedding: Tensor, label: int, head: MetricHead) -> Tensor:
    return loss_softmax(embedding, label, head)


def loss_arcface(embedding: Tensor, label: int, head: MetricHead) -> Tensor:
    return loss_softmax(embedding, label, head)


def loss_multisimilarity(embeddings: Tensor, labels, head: MetricHead) -> Tensor:
    return head.multisimilarity_loss(embeddings, labels)
