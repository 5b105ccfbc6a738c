"""Seeded synthetic C2C marketplace with hidden interest structure and limited stock.

The generator samples items around hidden cluster centers ("true units") so
that same-unit items have correlated attributes, image proxies and text
proxies. A behavioral oracle (ground_truth_ctr) drives the log simulator that
produces impression/click/inquiry/transaction events; transactions consume
stock and sold items leave circulation.
"""

import heapq
from dataclasses import dataclass, field

import numpy as np

DAY = 86400.0  # seconds

EVENT_KINDS = ("impression", "click", "inquiry", "transaction")
SURFACES = ("homepage", "iu_page")


class WorldError(ValueError):
    """Infeasible world configuration."""


@dataclass
class WorldConfig:
    n_users: int = 2000
    n_items: int = 20000
    n_true_units: int = 400
    latent_dim: int = 16
    image_dim: int = 16
    text_dim: int = 16
    # stock: fraction of items with stock 1 (sell-out pressure); the rest get
    # stock uniform in [2, max_stock]
    stock_one_fraction: float = 0.8
    max_stock: int = 4
    # fraction of units whose items share an exact (category, brand, model)
    # key; the rest are "non-standard" and only recoverable via vectors.
    # Shared keys also give sequence models unit-level attribute ids to match
    # history against targets with, so this knob controls how much signal
    # target attention has over mean pooling.
    standard_unit_fraction: float = 0.7
    n_categories: int = 30
    interests_per_user: int = 3
    user_noise: float = 0.3
    image_noise: float = 0.35
    text_noise: float = 0.35
    residual_scale: float = 0.3
    # behavioral oracle
    alpha: float = 4.0
    beta: float = 2.0
    bias: float = -2.8
    policy_noise: float = 1.0
    # simulator
    horizon_days: int = 8
    # after a homepage click the user sometimes opens the platform's
    # similar-items page for that listing (logged as surface "iu_page")
    iu_page_prob: float = 0.2
    iu_page_items: int = 4
    activity_rate: float = 1.0        # mean sessions per user per day
    exposures_per_session: int = 10
    candidate_pool: int = 40          # retrieval pool sampled per session
    click_to_inquiry: float = 0.35
    inquiry_to_transaction: float = 0.5


@dataclass
class SynthUser:
    user_id: int
    latent: np.ndarray
    activity_rate: float


@dataclass
class SynthItem:
    item_id: int
    seller_id: int
    true_unit: int
    category: str
    brand: str
    model: str
    image_vec: np.ndarray
    text_vec: np.ndarray
    unit_latent: np.ndarray   # hidden: latent center of the true unit
    residual: np.ndarray      # hidden: item-level latent offset
    stock: int = 1
    list_time: float = 0.0
    sold: bool = False
    sold_time: float = None


@dataclass
class InteractionEvent:
    timestamp: float
    user_id: int
    item_id: int
    event_kind: str
    surface: str = "homepage"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_catalog(cfg: WorldConfig, seed: int):
    """Sample (users, items) deterministically from the seed.

    Each hidden unit owns a latent center, an image center, a text center and
    an attribute key; items inherit noisy copies. User latents are noisy
    mixtures of a few unit centers, giving every user concentrated interests.
    """
    if cfg.n_users < 1 or cfg.n_items < 1:
        raise WorldError("need at least one user and one item")
    if cfg.n_true_units > cfg.n_items:
        raise WorldError("n_true_units exceeds n_items")
    rng = np.random.default_rng(seed)
    K, L = cfg.n_true_units, cfg.latent_dim

    centers = rng.normal(size=(K, L))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    img_centers = rng.normal(size=(K, cfg.image_dim))
    txt_centers = rng.normal(size=(K, cfg.text_dim))
    unit_cat = rng.integers(0, cfg.n_categories, size=K)
    unit_brand = rng.integers(0, 8, size=K)
    standard = rng.random(K) < cfg.standard_unit_fraction

    users = []
    for uid in range(1, cfg.n_users + 1):
        picks = rng.choice(K, size=min(cfg.interests_per_user, K), replace=False)
        latent = centers[picks].sum(axis=0) + cfg.user_noise * rng.normal(size=L)
        norm = np.linalg.norm(latent)
        latent = latent / norm * min(norm, 10.0)
        if norm == 0.0:
            latent = centers[picks[0]].copy()
        rate = float(np.clip(rng.gamma(4.0, cfg.activity_rate / 4.0), 0.1, 8.0))
        users.append(SynthUser(uid, latent, rate))

    items = []
    unit_of_item = rng.integers(0, K, size=cfg.n_items)
    for iid in range(1, cfg.n_items + 1):
        g = int(unit_of_item[iid - 1])
        residual = cfg.residual_scale * rng.normal(size=L)
        img = img_centers[g] + cfg.image_noise * rng.normal(size=cfg.image_dim)
        txt = txt_centers[g] + cfg.text_noise * rng.normal(size=cfg.text_dim)
        model = f"m{g}" if standard[g] else f"m{g}x{iid}"
        stock = 1 if rng.random() < cfg.stock_one_fraction \
            else int(rng.integers(2, cfg.max_stock + 1))
        items.append(SynthItem(
            item_id=iid,
            seller_id=int(rng.integers(1, cfg.n_users + 1)),
            true_unit=g,
            category=f"cat{unit_cat[g]}",
            brand=f"brand{unit_brand[g]}",
            model=model,
            image_vec=img,
            text_vec=txt,
            unit_latent=centers[g].copy(),
            residual=residual,
            stock=stock,
            list_time=0.0,
        ))
    return users, items


@dataclass
class World:
    """Users + items with stacked arrays for vectorized oracle evaluation."""
    cfg: WorldConfig
    users: list
    items: list
    user_latent: np.ndarray = field(default=None, repr=False)
    item_unit_latent: np.ndarray = field(default=None, repr=False)
    item_residual: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.user_latent is None:
            self.user_latent = np.stack([u.latent for u in self.users])
            self.item_unit_latent = np.stack([i.unit_latent for i in self.items])
            self.item_residual = np.stack([i.residual for i in self.items])

    @classmethod
    def generate(cls, cfg: WorldConfig, seed: int):
        users, items = generate_catalog(cfg, seed)
        return cls(cfg, users, items)

    def ctr_for(self, user_id, item_indices):
        """Vectorized ground-truth CTR of one user over item indices (0-based)."""
        u = self.user_latent[user_id - 1]
        logit = (self.cfg.alpha * self.item_unit_latent[item_indices] @ u
                 + self.cfg.beta * self.item_residual[item_indices] @ u
                 + self.cfg.bias)
        return _sigmoid(logit)


def ground_truth_ctr(user: SynthUser, item: SynthItem, cfg: WorldConfig):
    """Oracle click probability: sigmoid(a<u,c> + b<u,r> + bias), in (0,1)."""
    logit = (cfg.alpha * float(user.latent @ item.unit_latent)
             + cfg.beta * float(user.latent @ item.residual)
             + cfg.bias)
    return float(_sigmoid(logit))


def _exposure_random(world, user, available_idx, rng, n):
    if available_idx.size <= n:
        return available_idx
    return rng.choice(available_idx, size=n, replace=False)


def _exposure_affinity(world, user, available_idx, rng, n):
    """Retrieval-like policy: sample a pool, keep the highest-affinity items."""
    pool = min(world.cfg.candidate_pool, available_idx.size)
    cand = available_idx if available_idx.size <= pool \
        else rng.choice(available_idx, size=pool, replace=False)
    if cand.size <= n:
        return cand
    score = world.item_unit_latent[cand] @ user.latent \
        + world.cfg.policy_noise * rng.normal(size=cand.size)
    top = np.argpartition(-score, n - 1)[:n]
    return cand[top]


EXPOSURE_POLICIES = {"random": _exposure_random, "affinity": _exposure_affinity}


def _visit(world, user, idx, ts, surface, ctr, events, rng, available):
    """One impression plus its escalation chain. Returns True on click."""
    cfg = world.cfg
    item = world.items[idx]
    events.append(InteractionEvent(ts, user.user_id, item.item_id,
                                   "impression", surface))
    if rng.random() >= ctr:
        return False
    events.append(InteractionEvent(ts + 1.0, user.user_id, item.item_id,
                                   "click", surface))
    if rng.random() >= cfg.click_to_inquiry:
        return True
    events.append(InteractionEvent(ts + 2.0, user.user_id, item.item_id,
                                   "inquiry", surface))
    if rng.random() >= cfg.inquiry_to_transaction or item.stock <= 0:
        return True
    events.append(InteractionEvent(ts + 3.0, user.user_id, item.item_id,
                                   "transaction", surface))
    item.stock -= 1
    if item.stock == 0:
        item.sold = True
        item.sold_time = ts + 3.0
        available[idx] = False
    return True


def simulate_log(world: World, horizon_days=None, exposure_policy="affinity", seed=0):
    """Simulate sessions over the horizon and return time-ordered events.

    Per session the policy exposes unsold items; clicks follow the oracle CTR;
    a configurable fraction of clicks escalates to inquiry then transaction;
    each transaction decrements stock, and stock 0 marks the item sold and
    removes it from all future exposure. After a homepage click the user may
    open the listing's similar-items page, logged with surface "iu_page".
    Mutates item stock/sold state.
    """
    cfg = world.cfg
    if horizon_days is None:
        horizon_days = cfg.horizon_days
    if horizon_days < 1:
        raise WorldError("horizon must be at least 1 day")
    policy = EXPOSURE_POLICIES[exposure_policy] if isinstance(exposure_policy, str) \
        else exposure_policy
    rng = np.random.default_rng(seed)
    available = np.array([not it.sold for it in world.items])
    unit_members = {}
    for j, it in enumerate(world.items):
        unit_members.setdefault(it.true_unit, []).append(j)

    # schedule sessions, then process in global time order (shared inventory)
    sessions = []
    for day in range(horizon_days):
        for user in world.users:
            for _ in range(rng.poisson(user.activity_rate)):
                start = day * DAY + rng.uniform(0.0, DAY - 3600.0)
                sessions.append((start, user))
    sessions.sort(key=lambda s: s[0])

    # sessions overlap in wall-clock time, so visits are processed through a
    # global time-ordered queue: availability is re-checked at visit time and
    # a sold item is never exposed after its sell-out
    events = []
    heap = []
    seq = 0
    si = 0

    def process_visit(ts, user, idx, ctr, surface):
        nonlocal seq
        if not available[idx]:
            return
        clicked = _visit(world, user, idx, ts, surface, ctr, events, rng,
                         available)
        if surface != "homepage" or not clicked \
                or rng.random() >= cfg.iu_page_prob:
            return
        pool = [j for j in unit_members[world.items[idx].true_unit]
                if j != idx and available[j]]
        if not pool:
            return
        n = min(cfg.iu_page_items, len(pool))
        similar = rng.choice(len(pool), size=n, replace=False)
        sim_ctrs = world.ctr_for(user.user_id, [pool[s] for s in similar])
        for k, s in enumerate(similar):
            seq += 1
            heapq.heappush(heap, (ts + 4.0 + 1.2 * k, seq, user, pool[s],
                                  sim_ctrs[k], "iu_page"))

    while si < len(sessions) or heap:
        if heap and (si >= len(sessions) or heap[0][0] <= sessions[si][0]):
            ts, _, user, idx, ctr, surface = heapq.heappop(heap)
            process_visit(ts, user, idx, ctr, surface)
            continue
        start, user = sessions[si]
        si += 1
        avail_idx = np.nonzero(available)[0]
        if avail_idx.size == 0:
            continue
        exposed = policy(world, user, avail_idx, rng, cfg.exposures_per_session)
        if len(exposed) == 0:
            continue
        ctrs = world.ctr_for(user.user_id, exposed)
        for slot, idx in enumerate(exposed):
            seq += 1
            heapq.heappush(heap, (start + 10.0 * slot, seq, user, int(idx),
                                  ctrs[slot], "homepage"))
    events.sort(key=lambda e: (e.timestamp, e.user_id, e.item_id, e.event_kind))
    return events
