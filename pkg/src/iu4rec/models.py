"""The three rankers: DNN (mean-pooled), DIN (target attention over the item
sequence) and the IU-Boosted network (DIN plus IU features, the hierarchical
IU click sequence and a second attention block whose query is the target
item's IU representation). Inputs nest: DIN sees everything DNN sees plus the
attention block, IU_BOOSTED sees everything DIN sees plus the IU blocks.

Everything is explicit numpy forward/backward over named parameter arrays so
the whole model is finite-difference checkable. Batches are padded with id 0;
padding rows are frozen zeros, masked out of attention and excluded from mean
denominators, so appending padding never changes a prediction.
"""

from dataclasses import dataclass, field

import numpy as np

from .nn import (AdagradState, EmbeddingTable, KernelError, adagrad_update,
                 attention_backward, attention_forward, mlp_backward,
                 mlp_forward)
from .features import FeatureContext, Sample, ITEM_SEQ_MAX, IU_SEQ_MAX, IU_INNER_MAX

MODEL_KINDS = ("DNN", "DIN", "IU_BOOSTED")


class SampleError(ValueError):
    """A sample violates the model's input contract; the message names the field."""


class DivergenceError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: str = "IU_BOOSTED"
    d_user: int = 8
    d_item: int = 8
    d_attr: int = 4          # category / brand / model embeddings
    d_iu: int = 8
    d_iu_type: int = 4
    d_bucket: int = 4        # stats / cross bucket embeddings
    att_width: int = 32      # total attention width, split across heads
    heads: int = 2
    # multiplier on the Q/K projection init; >1 sharpens the initial softmax
    # so target-history matching differentiates from mean pooling early
    att_init_gain: float = 4.0
    # multiplier on the V projection init; small values start the attention
    # block near zero (a residual branch over the pooled baseline input), so
    # it only grows where it consistently reduces the loss
    att_value_gain: float = 0.1
    mlp_widths: tuple = (64, 32, 16)
    # adagrad-normalized steps; desk-scale logs need a much larger rate than
    # production-size training would use
    lr: float = 0.03
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    adagrad_decay: float = 0.9999
    adagrad_epsilon: float = 1e-8
    pred_clamp: float = 1e-7

    @property
    def d_item_vec(self):
        return self.d_item + 3 * self.d_attr

    @property
    def d_iu_vec(self):
        return self.d_iu + self.d_iu_type + self.d_item_vec

    def mlp_input_dim(self, kind):
        # each kind's input strictly extends the previous one: DNN mean-pools
        # the item sequence, DIN adds target attention on top of the pooled
        # block, IU_BOOSTED adds the IU fields and IU attention on top of DIN
        base = self.d_user + 2 * self.d_item_vec
        if kind == "DNN":
            return base
        if kind == "DIN":
            return base + self.att_width
        if kind == "IU_BOOSTED":
            return (base + self.att_width + self.d_iu_vec + self.att_width
                    + 5 * self.d_bucket)
        raise KernelError(f"unknown model kind {kind}")


@dataclass
class ModelParams:
    kind: str
    cfg: ModelConfig
    tables: dict              # name -> EmbeddingTable (sparse adagrad rows)
    dense: dict               # name -> ndarray
    dense_state: dict         # name -> AdagradState
    mlp_acts: list

    def flat(self):
        """Every named parameter array (embedding weights are live views)."""
        out = {name: t.weights for name, t in self.tables.items()}
        out.update(self.dense)
        return out

    def mlp_layers(self):
        return [(self.dense[f"mlp{i}_w"], self.dense[f"mlp{i}_b"], act)
                for i, act in enumerate(self.mlp_acts)]

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.flat().items()}

    def apply_gradients(self, grads, lr):
        for name, table in self.tables.items():
            table.apply_grad(grads[name], lr)
        for name, arr in self.dense.items():
            adagrad_update(arr, grads[name], self.dense_state[name], lr)


def init_params(kind, vocab_sizes, cfg: ModelConfig, seed=None):
    if kind not in MODEL_KINDS:
        raise KernelError(f"unknown model kind {kind}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dec, eps = cfg.adagrad_decay, cfg.adagrad_epsilon

    def table(vocab, dim):
        return EmbeddingTable.create(vocab, dim, rng, decay=dec, epsilon=eps)

    def glorot(rows, cols):
        return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=(rows, cols))

    tables = {
        "user": table(vocab_sizes["user"], cfg.d_user),
        "item": table(vocab_sizes["item"], cfg.d_item),
        "cat": table(vocab_sizes["cat"], cfg.d_attr),
        "brand": table(vocab_sizes["brand"], cfg.d_attr),
        "model": table(vocab_sizes["model"], cfg.d_attr),
    }
    dense, dense_state = {}, {}

    def add_dense(name, arr):
        dense[name] = arr
        dense_state[name] = AdagradState(np.zeros_like(arr), dec, eps)

    if kind in ("DIN", "IU_BOOSTED"):
        for n in ("wq_item", "wk_item", "wv_item"):
            gain = cfg.att_value_gain if n == "wv_item" else cfg.att_init_gain
            add_dense(n, gain * glorot(cfg.att_width, cfg.d_item_vec))
    if kind == "IU_BOOSTED":
        tables["iu"] = table(vocab_sizes["iu"], cfg.d_iu)
        tables["iu_type"] = table(vocab_sizes["iu_type"], cfg.d_iu_type)
        tables["stats_imp"] = table(vocab_sizes["count_bucket"] + 1, cfg.d_bucket)
        tables["stats_clk"] = table(vocab_sizes["count_bucket"] + 1, cfg.d_bucket)
        tables["stats_ctr"] = table(vocab_sizes["ctr_bucket"] + 1, cfg.d_bucket)
        tables["cross_clk"] = table(vocab_sizes["click_bucket"] + 1, cfg.d_bucket)
        tables["cross_rec"] = table(vocab_sizes["recency_bucket"] + 1, cfg.d_bucket)
        for n in ("wq_iu", "wk_iu", "wv_iu"):
            gain = cfg.att_value_gain if n == "wv_iu" else cfg.att_init_gain
            add_dense(n, gain * glorot(cfg.att_width, cfg.d_iu_vec))

    dims = [cfg.mlp_input_dim(kind)] + list(cfg.mlp_widths) + [1]
    acts = ["relu"] * len(cfg.mlp_widths) + ["linear"]
    for i in range(len(dims) - 1):
        add_dense(f"mlp{i}_w", glorot(dims[i + 1], dims[i]))
        add_dense(f"mlp{i}_b", np.zeros(dims[i + 1]))
    return ModelParams(kind, cfg, tables, dense, dense_state, acts)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    user: np.ndarray          # (B,)
    tgt_item: np.ndarray      # (B,)
    tgt_iu: np.ndarray        # (B,) iu index, 0 = unmapped
    stats: np.ndarray         # (B, 3) imp/clk/ctr bucket ids
    cross: np.ndarray         # (B, 2) click/recency bucket ids
    seq_items: np.ndarray     # (B, H) item ids, 0-padded
    seq_mask: np.ndarray      # (B, H) attention mask, >= one True per row
    tgt_inner: np.ndarray     # (B, 5) user's clicks inside the target IU
    iu_seq: np.ndarray        # (B, U) iu indices
    iu_inner: np.ndarray      # (B, U, 5) item ids per entry
    iu_mask: np.ndarray       # (B, U)
    labels: np.ndarray        # (B,) float

    @property
    def size(self):
        return self.user.shape[0]


def _attention_mask(ids):
    mask = ids != 0
    empty = ~mask.any(axis=-1)
    mask[empty, 0] = True  # a single zero entry keeps attention defined
    return mask


def make_batch(samples):
    B = len(samples)
    H = max(1, max(len(s.item_seq) for s in samples))
    U = max(1, max(len(s.hier_iu_seq) for s in samples))
    user = np.zeros(B, dtype=np.int64)
    tgt_item = np.zeros(B, dtype=np.int64)
    tgt_iu = np.zeros(B, dtype=np.int64)
    stats = np.zeros((B, 3), dtype=np.int64)
    cross = np.zeros((B, 2), dtype=np.int64)
    seq = np.zeros((B, H), dtype=np.int64)
    tgt_inner = np.zeros((B, IU_INNER_MAX), dtype=np.int64)
    iu_seq = np.zeros((B, U), dtype=np.int64)
    iu_inner = np.zeros((B, U, IU_INNER_MAX), dtype=np.int64)
    labels = np.zeros(B)
    for b, s in enumerate(samples):
        user[b] = s.user_id
        tgt_item[b] = s.item_id
        tgt_iu[b] = s.tgt_iu_idx
        stats[b] = (s.stats_imp_bucket, s.stats_clk_bucket, s.stats_ctr_bucket)
        cross[b] = (s.cross_click_bucket, s.cross_recency_bucket)
        seq[b, :len(s.item_seq)] = s.item_seq
        tgt_inner[b, :len(s.tgt_inner_items)] = s.tgt_inner_items
        for u, (iu_idx, inner) in enumerate(s.hier_iu_seq):
            iu_seq[b, u] = iu_idx
            iu_inner[b, u, :len(inner)] = inner
        labels[b] = s.label
    return Batch(user, tgt_item, tgt_iu, stats, cross, seq,
                 _attention_mask(seq), tgt_inner, iu_seq, iu_inner,
                 _attention_mask(iu_seq), labels)


# ---------------------------------------------------------------------------
# Embedding assembly (forward + scatter backward)
# ---------------------------------------------------------------------------

def _embed_item(params, ctx, ids):
    t = params.tables
    return np.concatenate([
        t["item"].lookup(ids),
        t["cat"].lookup(ctx.item_cat[ids]),
        t["brand"].lookup(ctx.item_brand[ids]),
        t["model"].lookup(ctx.item_model[ids]),
    ], axis=-1)


def _embed_item_back(grads, cfg, ctx, ids, d):
    di, da = cfg.d_item, cfg.d_attr
    np.add.at(grads["item"], ids, d[..., :di])
    np.add.at(grads["cat"], ctx.item_cat[ids], d[..., di:di + da])
    np.add.at(grads["brand"], ctx.item_brand[ids], d[..., di + da:di + 2 * da])
    np.add.at(grads["model"], ctx.item_model[ids], d[..., di + 2 * da:])


def _inner_mean(params, ctx, inner_ids):
    """Mean of embedded inner items over real (nonzero-id) slots."""
    emb = _embed_item(params, ctx, inner_ids)           # (..., 5, d_item_vec)
    count = np.maximum((inner_ids != 0).sum(axis=-1), 1)
    return emb.sum(axis=-2) / count[..., None], count


def _embed_iu_entry(params, ctx, iu_ids, inner_ids):
    t = params.tables
    mean, count = _inner_mean(params, ctx, inner_ids)
    entry = np.concatenate([
        t["iu"].lookup(iu_ids),
        t["iu_type"].lookup(ctx.iu_type_idx[iu_ids]),
        mean,
    ], axis=-1)
    return entry, count


def _embed_iu_entry_back(grads, cfg, ctx, iu_ids, inner_ids, count, d):
    du, dt = cfg.d_iu, cfg.d_iu_type
    np.add.at(grads["iu"], iu_ids, d[..., :du])
    np.add.at(grads["iu_type"], ctx.iu_type_idx[iu_ids], d[..., du:du + dt])
    d_mean = d[..., du + dt:]
    d_each = (d_mean / count[..., None])[..., None, :] * \
        np.ones((inner_ids.shape[-1], 1))
    _embed_item_back(grads, cfg, ctx, inner_ids, d_each)


def embed_item(item_id, params, ctx):
    """Single-item embedding: Concat[E(id), E(side ids)]; padding id -> zeros."""
    return _embed_item(params, ctx, np.asarray([item_id]))[0]


def embed_iu_entry(iu_idx, inner_item_ids, params, ctx):
    """Single IU-entry embedding: Concat[E(iu id), E(iu side), mean E(inner items)]."""
    if len(inner_item_ids) > IU_INNER_MAX:
        raise SampleError(f"inner item list longer than {IU_INNER_MAX}")
    inner = np.zeros((1, IU_INNER_MAX), dtype=np.int64)
    inner[0, :len(inner_item_ids)] = inner_item_ids
    entry, _ = _embed_iu_entry(params, ctx, np.asarray([iu_idx]), inner)
    return entry[0]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward(params: ModelParams, batch: Batch, ctx: FeatureContext):
    """Returns (p in (0,1) of shape (B,), cache for backward)."""
    cfg, kind, t = params.cfg, params.kind, params.tables
    cache = {"blocks": []}
    user_emb = t["user"].lookup(batch.user)
    tgt_emb = _embed_item(params, ctx, batch.tgt_item)
    seq_emb = _embed_item(params, ctx, batch.seq_items)
    blocks = [("user", user_emb), ("tgt_item", tgt_emb)]

    count = np.maximum((batch.seq_items != 0).sum(axis=1), 1)
    blocks.append(("seq_mean", seq_emb.sum(axis=1) / count[:, None]))
    cache["seq_count"] = count

    if kind != "DNN":
        att_out, att_cache = attention_forward(
            tgt_emb, seq_emb, batch.seq_mask,
            params.dense["wq_item"], params.dense["wk_item"],
            params.dense["wv_item"], cfg.heads)
        blocks.append(("att_item", att_out))
        cache["att_item"] = att_cache

    if kind == "IU_BOOSTED":
        tgt_entry, tgt_count = _embed_iu_entry(params, ctx, batch.tgt_iu,
                                               batch.tgt_inner)
        seq_entries, seq_count = _embed_iu_entry(params, ctx, batch.iu_seq,
                                                 batch.iu_inner)
        att_iu, att_iu_cache = attention_forward(
            tgt_entry, seq_entries, batch.iu_mask,
            params.dense["wq_iu"], params.dense["wk_iu"],
            params.dense["wv_iu"], cfg.heads)
        blocks.append(("tgt_iu_entry", tgt_entry))
        blocks.append(("att_iu", att_iu))
        blocks.append(("stats_imp", t["stats_imp"].lookup(batch.stats[:, 0])))
        blocks.append(("stats_clk", t["stats_clk"].lookup(batch.stats[:, 1])))
        blocks.append(("stats_ctr", t["stats_ctr"].lookup(batch.stats[:, 2])))
        blocks.append(("cross_clk", t["cross_clk"].lookup(batch.cross[:, 0])))
        blocks.append(("cross_rec", t["cross_rec"].lookup(batch.cross[:, 1])))
        cache["att_iu"] = att_iu_cache
        cache["iu_counts"] = (tgt_count, seq_count)

    x = np.concatenate([b for _, b in blocks], axis=1)
    logit, mlp_cache = mlp_forward(x, params.mlp_layers())
    p = 1.0 / (1.0 + np.exp(-logit))
    cache.update(blocks=[(n, b.shape[1]) for n, b in blocks], mlp=mlp_cache,
                 logit=logit, p=p)
    return p, cache


def nll_loss(predictions, labels, clamp=1e-7):
    """-(1/N) sum[y log p + (1-y) log(1-p)], with p clamped for stability."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise KernelError("nll_loss: empty batch")
    pc = np.clip(p, clamp, 1.0 - clamp)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def loss_and_grads(params: ModelParams, batch: Batch, ctx: FeatureContext):
    """Forward + full backward. Returns (loss, grads, p)."""
    cfg = params.cfg
    p, cache = forward(params, batch, ctx)
    y = batch.labels
    c = cfg.pred_clamp
    loss = nll_loss(p, y, c)

    B = batch.size
    pc = np.clip(p, c, 1.0 - c)
    active = (p > c) & (p < 1.0 - c)  # clamp is flat outside
    dp = np.where(active, (-y / pc + (1.0 - y) / (1.0 - pc)) / B, 0.0)
    dlogit = dp * p * (1.0 - p)

    grads = params.zero_grads()
    dx, mlp_grads = mlp_backward(cache["mlp"], dlogit)
    for i, (dw, db) in enumerate(mlp_grads):
        grads[f"mlp{i}_w"] += dw
        grads[f"mlp{i}_b"] += db

    parts = {}
    off = 0
    for name, width in cache["blocks"]:
        parts[name] = dx[:, off:off + width]
        off += width

    d_tgt_emb = parts["tgt_item"].copy()
    np.add.at(grads["user"], batch.user, parts["user"])

    d_seq = (parts["seq_mean"] / cache["seq_count"][:, None])[:, None, :] * \
        np.ones((batch.seq_items.shape[1], 1))
    if params.kind != "DNN":
        dq, d_seq_att, dwq, dwk, dwv = attention_backward(cache["att_item"],
                                                          parts["att_item"])
        d_seq = d_seq + d_seq_att
        d_tgt_emb += dq
        grads["wq_item"] += dwq
        grads["wk_item"] += dwk
        grads["wv_item"] += dwv
    _embed_item_back(grads, cfg, ctx, batch.seq_items, d_seq)
    _embed_item_back(grads, cfg, ctx, batch.tgt_item, d_tgt_emb)

    if params.kind == "IU_BOOSTED":
        tgt_count, seq_count = cache["iu_counts"]
        dq_iu, d_entries, dwq, dwk, dwv = attention_backward(cache["att_iu"],
                                                             parts["att_iu"])
        grads["wq_iu"] += dwq
        grads["wk_iu"] += dwk
        grads["wv_iu"] += dwv
        d_tgt_entry = parts["tgt_iu_entry"] + dq_iu
        _embed_iu_entry_back(grads, cfg, ctx, batch.tgt_iu, batch.tgt_inner,
                             tgt_count, d_tgt_entry)
        _embed_iu_entry_back(grads, cfg, ctx, batch.iu_seq, batch.iu_inner,
                             seq_count, d_entries)
        np.add.at(grads["stats_imp"], batch.stats[:, 0], parts["stats_imp"])
        np.add.at(grads["stats_clk"], batch.stats[:, 1], parts["stats_clk"])
        np.add.at(grads["stats_ctr"], batch.stats[:, 2], parts["stats_ctr"])
        np.add.at(grads["cross_clk"], batch.cross[:, 0], parts["cross_clk"])
        np.add.at(grads["cross_rec"], batch.cross[:, 1], parts["cross_rec"])

    return loss, grads, p


# ---------------------------------------------------------------------------
# Prediction and training
# ---------------------------------------------------------------------------

def _validate_sample(s: Sample, ctx: FeatureContext):
    if s.label not in (0, 1):
        raise SampleError(f"label must be binary, got {s.label}")
    if len(s.item_seq) > ITEM_SEQ_MAX:
        raise SampleError(f"item_seq longer than {ITEM_SEQ_MAX}")
    if len(s.hier_iu_seq) > IU_SEQ_MAX:
        raise SampleError(f"hier_iu_seq longer than {IU_SEQ_MAX}")
    for _, inner in s.hier_iu_seq:
        if len(inner) > IU_INNER_MAX:
            raise SampleError(f"hier_iu_seq inner list longer than {IU_INNER_MAX}")
    if len(s.tgt_inner_items) > IU_INNER_MAX:
        raise SampleError(f"tgt_inner_items longer than {IU_INNER_MAX}")
    if not 0 <= s.tgt_iu_idx <= len(ctx.iu_vocab):
        raise SampleError(f"tgt_iu_idx {s.tgt_iu_idx} out of vocabulary")


def predict_ctr(params: ModelParams, sample: Sample, ctx: FeatureContext):
    """Click probability of one sample under the given model."""
    _validate_sample(sample, ctx)
    p, _ = forward(params, make_batch([sample]), ctx)
    return float(p[0])


def predict_batch(params, samples, ctx):
    if not samples:
        return np.zeros(0)
    p, _ = forward(params, make_batch(samples), ctx)
    return p


def train(kind, samples, ctx: FeatureContext, cfg: ModelConfig = None):
    """Mini-batch Adagrad training; deterministic given cfg.seed.

    Returns (params, loss_curve) with one (step, loss) point per step.
    """
    cfg = cfg or ModelConfig(kind=kind)
    if not samples:
        raise KernelError("train: empty dataset")
    params = init_params(kind, ctx.vocab_sizes, cfg)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for lo in range(0, len(samples), cfg.batch_size):
            batch = make_batch([samples[i] for i in order[lo:lo + cfg.batch_size]])
            loss, grads, _ = loss_and_grads(params, batch, ctx)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"training diverged: loss {loss} at step {step} (kind={kind}, "
                    f"lr={cfg.lr}); lower the learning rate or check the data")
            params.apply_gradients(grads, cfg.lr)
            curve.append((step, loss))
            step += 1
    return params, curve


def score_samples(params, samples, ctx, batch_size=1024):
    """Scores for a large sample list, batched for memory."""
    out = np.zeros(len(samples))
    for lo in range(0, len(samples), batch_size):
        out[lo:lo + batch_size] = predict_batch(params, samples[lo:lo + batch_size], ctx)
    return out
