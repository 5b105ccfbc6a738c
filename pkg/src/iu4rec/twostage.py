"""Two-stage serving simulator: a homepage queue of IU cards interleaved with
normal items, an IU landing page ranking items within a clicked unit, and A/B
comparisons reported per domain.

Accounting uses two surfaces: "iu" (IU cards and the IU landing page) and
"normal" (plain item cards on the homepage); overall counters are their exact
sum. Inventory is authoritative: a card is re-checked against stock at view
time, so a sold item is never impressed after its sell-out.
"""

import hashlib
import heapq
from dataclasses import dataclass, field

import numpy as np

from .marketplace import DAY, InteractionEvent, World
from .models import predict_batch


class SimulationError(ValueError):
    pass


@dataclass
class MergePolicy:
    """How IU cards and normal items share the homepage queue."""
    iu_slot_ratio: float = 0.13
    page_size: int = 20
    iu_score_mode: str = "max"    # score of an IU card: max or mean member score
    member_score_cap: int = 20    # members scored per IU card in stage one
    patience_mean: float = 20.0   # geometric scroll depth

    def __post_init__(self):
        if not 0.0 <= self.iu_slot_ratio <= 1.0:
            raise SimulationError(f"iu_slot_ratio {self.iu_slot_ratio} outside [0, 1]")

    def iu_slots(self, page_size=None):
        """Deterministic interleave: slot i is an IU slot when the running
        quota floor((i+1)*ratio) increments; yields round(ratio*page) slots."""
        n = self.page_size if page_size is None else page_size
        r = self.iu_slot_ratio
        return [i for i in range(n) if int((i + 1) * r) > int(i * r)]


@dataclass
class HomepageCard:
    slot: int
    kind: str            # "iu" | "item"
    score: float
    item_id: int = None
    iu_id: int = None
    title: str = None


@dataclass
class Counters:
    impressions: int = 0
    clicks: int = 0
    transactions: int = 0

    @property
    def ctr(self):
        return None if self.impressions == 0 else self.clicks / self.impressions

    def merged(self, other):
        return Counters(self.impressions + other.impressions,
                        self.clicks + other.clicks,
                        self.transactions + other.transactions)

    def as_dict(self):
        return {"impressions": self.impressions, "clicks": self.clicks,
                "bills": self.transactions, "ctr": self.ctr,
                "gmv_proxy": float(self.transactions)}


@dataclass
class SessionOutcome:
    iu: Counters = field(default_factory=Counters)
    normal: Counters = field(default_factory=Counters)

    @property
    def overall(self):
        return self.iu.merged(self.normal)

    def bucket(self, surface):
        return self.iu if surface == "iu" else self.normal


class Inventory:
    """Cloned per simulation run; the world's own items are never mutated."""

    def __init__(self, world: World):
        self.stock = np.array([0 if it.sold else it.stock for it in world.items])
        self.sold_time = {}

    def unsold(self, idx0):
        return self.stock[idx0] > 0

    def unsold_indices(self):
        return np.nonzero(self.stock > 0)[0]

    def transact(self, idx0, ts):
        if self.stock[idx0] <= 0:
            raise SimulationError(f"transaction on sold-out item index {idx0}")
        self.stock[idx0] -= 1
        if self.stock[idx0] == 0:
            self.sold_time[idx0] = ts


class ModelScorer:
    """predict_ctr over frozen serving features, memoized per (user, item)."""

    def __init__(self, params, store, ctx, as_of_time):
        self.params = params
        self.store = store
        self.ctx = ctx
        self.as_of = as_of_time
        self.cache = {}

    def scores(self, user_id, item_ids):
        missing = [i for i in item_ids if (user_id, i) not in self.cache]
        if missing:
            samples = [self.store.build_sample(user_id, i, self.as_of, 0)
                       for i in missing]
            for i, p in zip(missing, predict_batch(self.params, samples, self.ctx)):
                self.cache[(user_id, i)] = float(p)
        return np.array([self.cache[(user_id, i)] for i in item_ids])


def stage_one_rank(user_id, candidate_item_ids, candidate_units, scorer,
                   policy: MergePolicy, page_size=None, inventory=None,
                   members_of=None):
    """Rank items and IU cards, then interleave them into homepage slots.

    candidate_units: list of InterestUnit (each must have an unsold member).
    members_of maps iu_id -> unsold member item ids (already filtered).
    Returns HomepageCard list with contiguous slots from 0.
    """
    page_size = policy.page_size if page_size is None else page_size
    item_scores = scorer.scores(user_id, candidate_item_ids) \
        if candidate_item_ids else np.zeros(0)
    ranked_items = [candidate_item_ids[i] for i in np.argsort(-item_scores, kind="stable")]
    item_score = dict(zip(candidate_item_ids, item_scores))

    iu_cards = []
    for u in candidate_units:
        members = members_of[u.iu_id][:policy.member_score_cap]
        if not members:
            continue
        s = scorer.scores(user_id, members)
        score = float(s.max()) if policy.iu_score_mode == "max" else float(s.mean())
        iu_cards.append((score, u))
    iu_cards.sort(key=lambda t: (-t[0], t[1].iu_id))

    iu_positions = set(policy.iu_slots(page_size))
    cards = []
    ii = ui = 0
    for slot in range(page_size):
        take_iu = slot in iu_positions and ui < len(iu_cards)
        if not take_iu and ii >= len(ranked_items):
            take_iu = ui < len(iu_cards)
        if take_iu:
            score, u = iu_cards[ui]
            ui += 1
            cards.append(HomepageCard(slot, "iu", score, iu_id=u.iu_id, title=u.title))
        elif ii < len(ranked_items):
            item_id = ranked_items[ii]
            ii += 1
            cards.append(HomepageCard(slot, "item", float(item_score[item_id]),
                                      item_id=item_id))
        else:
            break
    return cards


def stage_two_rank(user_id, iu_id, scorer, unsold_member_ids):
    """Unsold members of the IU ordered by predicted CTR, best first."""
    if not unsold_member_ids:
        return []
    s = scorer.scores(user_id, unsold_member_ids)
    return [unsold_member_ids[i] for i in np.argsort(-s, kind="stable")]


@dataclass
class ServingWorld:
    """Static serving context shared by runs: units, members, oracle arrays."""
    world: World
    units: list
    item_iu_map: dict

    def __post_init__(self):
        self.unit_by_id = {u.iu_id: u for u in self.units}
        self.members = {u.iu_id: list(u.member_item_ids) for u in self.units}

    def unsold_members(self, iu_id, inventory):
        return [m for m in self.members[iu_id] if inventory.unsold(m - 1)]


def run_sessions(serving: ServingWorld, scorer, policy: MergePolicy,
                 horizon_days, seed, users=None, start_day=None,
                 inventory=None):
    """Simulate homepage browsing over the horizon.

    Behavior comes from the world's ground-truth oracle; the model only
    decides ranking. Sessions overlap in wall-clock time, so every card view
    flows through a global time-ordered queue and stock is re-checked when
    the view happens: a sold item is never impressed after its sell-out.
    Returns (SessionOutcome, events) with surface-tagged events (IU cards and
    the IU landing page log as "iu_page").
    """
    world = serving.world
    cfg = world.cfg
    users = world.users if users is None else users
    inventory = Inventory(world) if inventory is None else inventory
    if start_day is None:
        start_day = cfg.horizon_days
    rng = np.random.default_rng(seed)
    outcome = SessionOutcome()
    events = []
    p_stop = 1.0 / policy.patience_mean

    def record(kind, user_id, item_id, ts, surface):
        events.append(InteractionEvent(
            ts, user_id, item_id, kind,
            "iu_page" if surface == "iu" else "homepage"))
        if kind == "impression":
            outcome.bucket(surface).impressions += 1
        elif kind == "click":
            outcome.bucket(surface).clicks += 1
        elif kind == "transaction":
            outcome.bucket(surface).transactions += 1

    def maybe_transact(user_id, item_idx0, ts, surface):
        if rng.random() < cfg.click_to_inquiry:
            record("inquiry", user_id, world.items[item_idx0].item_id, ts, surface)
            if rng.random() < cfg.inquiry_to_transaction and inventory.stock[item_idx0] > 0:
                record("transaction", user_id, world.items[item_idx0].item_id,
                       ts + 1.0, surface)
                inventory.transact(item_idx0, ts + 1.0)

    heap = []
    seq = 0

    def push(ts, fn):
        nonlocal seq
        seq += 1
        heapq.heappush(heap, (ts, seq, fn))

    def scroll_depth():
        # number of cards viewed before patience runs out (mean - 1 views)
        return int(rng.geometric(p_stop)) - 1

    def view_member(user, item_id, ts):
        idx0 = item_id - 1
        if not inventory.unsold(idx0):
            return
        record("impression", user.user_id, item_id, ts, "iu")
        if rng.random() < world.ctr_for(user.user_id, np.array([idx0]))[0]:
            record("click", user.user_id, item_id, ts + 0.5, "iu")
            maybe_transact(user.user_id, idx0, ts + 1.0, "iu")

    def view_card(user, card, ts):
        if card.kind == "item":
            idx0 = card.item_id - 1
            if not inventory.unsold(idx0):
                return
            record("impression", user.user_id, card.item_id, ts, "normal")
            if rng.random() < world.ctr_for(user.user_id, np.array([idx0]))[0]:
                record("click", user.user_id, card.item_id, ts + 0.5, "normal")
                maybe_transact(user.user_id, idx0, ts + 1.0, "normal")
            return
        members = serving.unsold_members(card.iu_id, inventory)
        if not members:
            return
        midx = np.array(members) - 1
        ctrs = world.ctr_for(user.user_id, midx)
        best = int(np.argmax(ctrs))
        record("impression", user.user_id, members[best], ts, "iu")
        if rng.random() < ctrs[best]:
            record("click", user.user_id, members[best], ts + 0.5, "iu")
            ranked = stage_two_rank(user.user_id, card.iu_id, scorer,
                                    serving.unsold_members(card.iu_id, inventory))
            for pos, item_id in enumerate(ranked[:scroll_depth()]):
                push(ts + 1.0 + 2.0 * pos,
                     lambda t, u=user, i=item_id: view_member(u, i, t))

    def open_session(user, start):
        unsold = inventory.unsold_indices()
        if unsold.size == 0:
            return
        pool = unsold + 1 if unsold.size <= 60 else \
            rng.choice(unsold, size=60, replace=False) + 1
        pool = [int(i) for i in pool]
        cand_items = pool[:40]
        cand_units = []
        seen = set()
        for item_id in pool:
            iu = serving.item_iu_map.get(item_id)
            if iu is None or iu in seen:
                continue
            seen.add(iu)
            if serving.unsold_members(iu, inventory):
                cand_units.append(serving.unit_by_id[iu])
            if len(cand_units) >= 15:
                break
        cards = stage_one_rank(user.user_id, cand_items, cand_units,
                               scorer, policy, inventory=inventory,
                               members_of={u.iu_id: serving.unsold_members(
                                   u.iu_id, inventory) for u in cand_units})
        for card in cards[:scroll_depth()]:
            push(start + 20.0 * card.slot,
                 lambda t, u=user, c=card: view_card(u, c, t))

    opens = []
    for day in range(horizon_days):
        for user in users:
            for _ in range(rng.poisson(user.activity_rate)):
                start = (start_day + day) * DAY + rng.uniform(0.0, DAY - 3600.0)
                opens.append((start, user))
    opens.sort(key=lambda t: t[0])

    oi = 0
    while oi < len(opens) or heap:
        if heap and (oi >= len(opens) or heap[0][0] <= opens[oi][0]):
            ts, _, fn = heapq.heappop(heap)
            fn(ts)
        else:
            start, user = opens[oi]
            oi += 1
            open_session(user, start)
    events.sort(key=lambda e: (e.timestamp, e.user_id, e.item_id, e.event_kind))
    return outcome, events


def hash_split(users, split):
    """Deterministic disjoint partition of users into (arm A, arm B)."""
    arm_a, arm_b = [], []
    for u in users:
        h = hashlib.blake2b(str(u.user_id).encode(), digest_size=8).digest()
        frac = int.from_bytes(h, "big") / 2**64
        (arm_b if frac < split else arm_a).append(u)
    return arm_a, arm_b


def _delta_pct(b, a):
    if a is None or b is None or a == 0:
        return None
    return 100.0 * (b - a) / a


def _row(cb: Counters, ca: Counters):
    return {"ctr_delta_pct": _delta_pct(cb.ctr, ca.ctr),
            "clicks_delta_pct": _delta_pct(cb.clicks, ca.clicks),
            "bills_delta_pct": _delta_pct(cb.transactions, ca.transactions)}


def run_ab_test(serving: ServingWorld, scorer_a, scorer_b, split=0.5,
                horizon_days=1, seed=0, policy: MergePolicy = None,
                shared_randomness=False):
    """A/B comparison of two models, reported as per-domain percent deltas.

    Default mode hash-partitions users into disjoint arms with independent
    randomness streams. With shared_randomness=True both arms simulate the
    full population with identical streams (a paired counterfactual design:
    an A/A comparison then yields exact zeros). Inventory is cloned per arm.
    """
    policy = policy or MergePolicy()
    if shared_randomness:
        users_a = users_b = serving.world.users
        seed_a = seed_b = seed
    else:
        users_a, users_b = hash_split(serving.world.users, split)
        seed_a, seed_b = seed * 2 + 1, seed * 2 + 2
    if not users_a or not users_b:
        raise SimulationError("empty A/B arm; adjust the split")
    out_a, _ = run_sessions(serving, scorer_a, policy, horizon_days, seed_a,
                            users=users_a)
    out_b, ev_b = run_sessions(serving, scorer_b, policy, horizon_days, seed_b,
                               users=users_b)
    report = {
        "arm_sizes": {"a": len(users_a), "b": len(users_b)},
        "shared_randomness": shared_randomness,
        "overall": _row(out_b.overall, out_a.overall),
        "interest_unit_rec": _row(out_b.iu, out_a.iu),
        "general_product_rec": _row(out_b.normal, out_a.normal),
        "arm_a": {"overall": out_a.overall.as_dict(), "iu": out_a.iu.as_dict(),
                  "normal": out_a.normal.as_dict()},
        "arm_b": {"overall": out_b.overall.as_dict(), "iu": out_b.iu.as_dict(),
                  "normal": out_b.normal.as_dict()},
    }
    return report, ev_b
