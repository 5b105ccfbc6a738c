"""IU-level behavior accumulation and training-sample assembly.

The point of the feature store is that counters live on interest units, not
items: aggregation replays the event log against the item->IU map, so deleting
sold items later changes nothing. Stats and user-IU cross features are
snapshotted at day boundaries; click sequences are rebuilt per sample
timestamp, strictly excluding events at or after it.
"""

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .marketplace import DAY

ITEM_SEQ_MAX = 150          # max behavior-sequence length
ITEM_SEQ_WINDOW_DAYS = 30   # lookback window
IU_INNER_MAX = 5            # max items kept inside one IU entry
IU_SEQ_MAX = 20             # outer hierarchical-sequence length (configurable)

CLICK_LABEL_WINDOW = 60.0   # impression is positive if a click follows within this

# click-count buckets: 0, 1, 2, 3-5, 6-10, 11+
_CLICK_BUCKET_UPPER = (0, 1, 2, 5, 10)
# recency buckets: never, <1h, <1d, <7d, >=7d
_RECENCY_UPPER = (3600.0, DAY, 7 * DAY)

N_CLICK_BUCKETS = len(_CLICK_BUCKET_UPPER) + 1
N_RECENCY_BUCKETS = len(_RECENCY_UPPER) + 2
N_COUNT_BUCKETS = 16
N_CTR_BUCKETS = 10


def click_count_bucket(n):
    for b, upper in enumerate(_CLICK_BUCKET_UPPER):
        if n <= upper:
            return b
    return len(_CLICK_BUCKET_UPPER)


def recency_bucket(age_seconds):
    """Bucket of time since last interaction; None means never."""
    if age_seconds is None:
        return 0
    for b, upper in enumerate(_RECENCY_UPPER):
        if age_seconds < upper:
            return b + 1
    return len(_RECENCY_UPPER) + 1


def count_bucket(n):
    if n <= 0:
        return 0
    return min(1 + int(math.log2(n)), N_COUNT_BUCKETS - 1)


@dataclass
class IuStats:
    iu_id: int
    impressions: int = 0
    clicks: int = 0
    inquiries: int = 0
    transactions: int = 0

    @property
    def ctr(self):
        return None if self.impressions == 0 else self.clicks / self.impressions

    _FIELD = {"impression": "impressions", "click": "clicks",
              "inquiry": "inquiries", "transaction": "transactions"}

    def add(self, kind):
        f = self._FIELD[kind]
        setattr(self, f, getattr(self, f) + 1)


def accumulate_iu_stats(events, item_iu_map, as_of_time=None):
    """Fold the log into per-IU counters; events on unmapped items contribute
    nothing. The result only depends on the log and the map, never on whether
    an item still exists at as_of_time."""
    stats = {}
    for e in events:
        if as_of_time is not None and e.timestamp >= as_of_time:
            break
        iu = item_iu_map.get(e.item_id)
        if iu is None:
            continue
        if iu not in stats:
            stats[iu] = IuStats(iu)
        stats[iu].add(e.event_kind)
    return stats


def build_item_sequence(events, user_id, as_of_time,
                        max_len=ITEM_SEQ_MAX, window_days=ITEM_SEQ_WINDOW_DAYS):
    """The user's clicked item ids in the lookback window, newest first."""
    lo = as_of_time - window_days * DAY
    clicks = [(e.timestamp, e.item_id) for e in events
              if e.user_id == user_id and e.event_kind == "click"
              and lo <= e.timestamp < as_of_time]
    clicks.sort()
    return [item_id for _, item_id in reversed(clicks[-max_len:])]


def hier_entries_from_clicks(clicks_new_first, item_iu_map,
                             n=IU_SEQ_MAX, inner_max=IU_INNER_MAX):
    """Group newest-first clicked items by resolved IU.

    Entries are ordered by each IU's most recent click; the inner list keeps
    that IU's most recent items. Clicks on unmapped items are dropped.
    """
    order = []
    inner = {}
    for item_id in clicks_new_first:
        iu = item_iu_map.get(item_id)
        if iu is None:
            continue
        if iu not in inner:
            inner[iu] = []
            order.append(iu)
        if len(inner[iu]) < inner_max:
            inner[iu].append(item_id)
    return [(iu, inner[iu]) for iu in order[:n]]


def build_hier_iu_sequence(events, user_id, item_iu_map, as_of_time,
                           n=IU_SEQ_MAX, inner_max=IU_INNER_MAX):
    clicks = build_item_sequence(events, user_id, as_of_time)
    return hier_entries_from_clicks(clicks, item_iu_map, n, inner_max)


def cross_features(user_id, iu_id, cross_state, as_of_time):
    """(click-count bucket, recency bucket) for a user-IU pair.

    cross_state maps (user_id, iu_id) -> (click count, last interaction time).
    """
    entry = cross_state.get((user_id, iu_id))
    if entry is None:
        return click_count_bucket(0), recency_bucket(None)
    n, last_ts = entry
    return click_count_bucket(n), recency_bucket(as_of_time - last_ts)


# ---------------------------------------------------------------------------
# Vocabularies and assembled samples
# ---------------------------------------------------------------------------

@dataclass
class FeatureContext:
    """Closed vocabularies and static lookup arrays; id 0 is padding everywhere."""
    n_users: int
    n_items: int
    cat_vocab: dict
    brand_vocab: dict
    model_vocab: dict
    iu_vocab: dict            # iu_id -> contiguous index (1-based)
    item_cat: np.ndarray      # per item-id attribute index arrays (0 = pad row)
    item_brand: np.ndarray
    item_model: np.ndarray
    iu_type_idx: np.ndarray   # per iu-index type id (1=SPU, 2=Image, 3=Semantic)
    item_iu_idx: np.ndarray   # per item-id resolved iu index (0 = unmapped)

    @classmethod
    def build(cls, users, items, units, item_iu_map):
        def vocab(values):
            return {v: i + 1 for i, v in enumerate(sorted(set(values)))}
        cat_v = vocab(it.category for it in items)
        brand_v = vocab(it.brand for it in items)
        model_v = vocab(it.model for it in items)
        iu_v = {u.iu_id: i + 1 for i, u in enumerate(sorted(units, key=lambda u: u.iu_id))}
        n_items = max(it.item_id for it in items)
        item_cat = np.zeros(n_items + 1, dtype=np.int64)
        item_brand = np.zeros(n_items + 1, dtype=np.int64)
        item_model = np.zeros(n_items + 1, dtype=np.int64)
        item_iu = np.zeros(n_items + 1, dtype=np.int64)
        for it in items:
            item_cat[it.item_id] = cat_v[it.category]
            item_brand[it.item_id] = brand_v[it.brand]
            item_model[it.item_id] = model_v[it.model]
            iu = item_iu_map.get(it.item_id)
            if iu is not None:
                item_iu[it.item_id] = iu_v[iu]
        type_code = {"SPU": 1, "Image": 2, "Semantic": 3}
        iu_type = np.zeros(len(units) + 1, dtype=np.int64)
        for u in units:
            iu_type[iu_v[u.iu_id]] = type_code[u.iu_type]
        return cls(len(users), n_items, cat_v, brand_v, model_v, iu_v,
                   item_cat, item_brand, item_model, iu_type, item_iu)

    @property
    def vocab_sizes(self):
        return {
            "user": self.n_users + 1,
            "item": self.n_items + 1,
            "cat": len(self.cat_vocab) + 1,
            "brand": len(self.brand_vocab) + 1,
            "model": len(self.model_vocab) + 1,
            "iu": len(self.iu_vocab) + 1,
            "iu_type": 4,
            "count_bucket": N_COUNT_BUCKETS + 1,
            "ctr_bucket": N_CTR_BUCKETS + 2,
            "click_bucket": N_CLICK_BUCKETS + 1,
            "recency_bucket": N_RECENCY_BUCKETS + 1,
        }


@dataclass
class Sample:
    """One (user, target item, timestamp) training sample with resolved ids.

    Sequence fields hold item ids / iu indices; side-feature ids are looked up
    from FeatureContext arrays at embedding time. All bucket features are
    shifted by +1 so 0 stays the padding id.
    """
    user_id: int
    item_id: int
    timestamp: float
    label: int
    domain: str                   # "iu" | "normal" (impression surface)
    tgt_iu_idx: int               # 0 when the item maps to no IU
    stats_imp_bucket: int
    stats_clk_bucket: int
    stats_ctr_bucket: int
    cross_click_bucket: int
    cross_recency_bucket: int
    item_seq: list                # item ids, newest first, <= 150
    hier_iu_seq: list             # [(iu index, [item ids, <= 5])], <= 20
    tgt_inner_items: list         # user's clicks inside the target IU, <= 5


class FeatureStore:
    """Point-in-time feature state over an event log.

    Day-boundary snapshots hold IU stats and user-IU cross state; per-user
    click indexes support per-timestamp sequence building. CTR buckets are
    quantiles fitted on the day-1 snapshot and frozen.
    """

    def __init__(self, events, item_iu_map, ctx: FeatureContext, horizon_days):
        self.events = events
        self.item_iu_map = item_iu_map
        self.ctx = ctx
        self.horizon_days = horizon_days

        self.user_clicks = {}     # user_id -> ([ts], [item_id]) sorted
        for e in events:
            if e.event_kind == "click":
                ts_list, id_list = self.user_clicks.setdefault(e.user_id, ([], []))
                ts_list.append(e.timestamp)
                id_list.append(e.item_id)
        for ts_list, id_list in self.user_clicks.values():
            order = np.argsort(np.asarray(ts_list), kind="stable")
            ts_list[:] = [ts_list[i] for i in order]
            id_list[:] = [id_list[i] for i in order]

        # snapshots[d] = state from events with timestamp < d*DAY
        self.stats_snapshots = [dict()]
        self.cross_snapshots = [dict()]
        stats, cross = {}, {}
        ev_i = 0
        for d in range(1, horizon_days + 1):
            cutoff = d * DAY
            while ev_i < len(events) and events[ev_i].timestamp < cutoff:
                e = events[ev_i]
                ev_i += 1
                iu = item_iu_map.get(e.item_id)
                if iu is None:
                    continue
                if iu not in stats:
                    stats[iu] = IuStats(iu)
                stats[iu].add(e.event_kind)
                if e.event_kind == "click":
                    n, _ = cross.get((e.user_id, iu), (0, 0.0))
                    cross[(e.user_id, iu)] = (n + 1, e.timestamp)
            self.stats_snapshots.append(
                {k: IuStats(v.iu_id, v.impressions, v.clicks, v.inquiries,
                            v.transactions) for k, v in stats.items()})
            self.cross_snapshots.append(dict(cross))

        ctrs = sorted(s.ctr for s in self.stats_snapshots[min(1, horizon_days)].values()
                      if s.ctr is not None)
        if ctrs:
            qs = np.quantile(ctrs, np.linspace(0, 1, N_CTR_BUCKETS + 1)[1:-1])
            self.ctr_boundaries = np.unique(qs)
        else:
            self.ctr_boundaries = np.array([])

    def ctr_bucket(self, ctr):
        if ctr is None:
            return 0
        return 1 + int(np.searchsorted(self.ctr_boundaries, ctr, side="right"))

    def _snapshot_index(self, as_of_time):
        return min(int(as_of_time // DAY), self.horizon_days)

    def clicks_before(self, user_id, as_of_time,
                      max_len=ITEM_SEQ_MAX, window_days=ITEM_SEQ_WINDOW_DAYS):
        """Item ids of the user's clicks in the window, newest first."""
        entry = self.user_clicks.get(user_id)
        if entry is None:
            return []
        ts_list, id_list = entry
        hi = bisect.bisect_left(ts_list, as_of_time)
        lo = bisect.bisect_left(ts_list, as_of_time - window_days * DAY)
        return id_list[max(lo, hi - max_len):hi][::-1]

    def build_sample(self, user_id, item_id, as_of_time, label, domain="normal"):
        ctx = self.ctx
        d = self._snapshot_index(as_of_time)
        stats = self.stats_snapshots[d]
        cross = self.cross_snapshots[d]
        iu_id = self.item_iu_map.get(item_id)
        iu_idx = ctx.iu_vocab[iu_id] if iu_id is not None else 0

        if iu_id is not None:
            s = stats.get(iu_id)
            imp_b = count_bucket(s.impressions if s else 0) + 1
            clk_b = count_bucket(s.clicks if s else 0) + 1
            ctr_b = self.ctr_bucket(s.ctr if s else None) + 1
            cb, rb = cross_features(user_id, iu_id, cross, as_of_time)
            cb, rb = cb + 1, rb + 1
        else:
            imp_b = clk_b = ctr_b = cb = rb = 0  # padding: no IU features

        clicks = self.clicks_before(user_id, as_of_time)
        hier = [(ctx.iu_vocab[iu], items) for iu, items in
                hier_entries_from_clicks(clicks, self.item_iu_map)]
        tgt_inner = [i for i in clicks if self.item_iu_map.get(i) == iu_id][:IU_INNER_MAX] \
            if iu_id is not None else []

        return Sample(user_id, item_id, as_of_time, label, domain, iu_idx,
                      imp_b, clk_b, ctr_b, cb, rb, clicks, hier, tgt_inner)

    def serving_state(self, as_of_time):
        """Frozen per-day snapshot used by the serving simulator."""
        d = self._snapshot_index(as_of_time)
        return self.stats_snapshots[d], self.cross_snapshots[d]


def label_impressions(events, window=CLICK_LABEL_WINDOW):
    """(impression event, label) pairs: positive when the same user clicks the
    same item within the window after the impression."""
    click_ts = {}
    for e in events:
        if e.event_kind == "click":
            click_ts.setdefault((e.user_id, e.item_id), []).append(e.timestamp)
    for ts_list in click_ts.values():
        ts_list.sort()
    out = []
    for e in events:
        if e.event_kind != "impression":
            continue
        ts_list = click_ts.get((e.user_id, e.item_id), ())
        i = bisect.bisect_right(ts_list, e.timestamp)
        label = 1 if i < len(ts_list) and ts_list[i] <= e.timestamp + window else 0
        out.append((e, label))
    return out


def featurize(events, store: FeatureStore):
    """One Sample per impression event, with leakage-safe features."""
    samples = []
    for e, label in label_impressions(events):
        domain = "iu" if e.surface == "iu_page" else "normal"
        samples.append(store.build_sample(e.user_id, e.item_id, e.timestamp,
                                          label, domain))
    return samples


def split_by_day(samples, train_days):
    """Samples on days [0, train_days) vs the rest (the held-out day)."""
    cut = train_days * DAY
    train = [s for s in samples if s.timestamp < cut]
    test = [s for s in samples if s.timestamp >= cut]
    return train, test
