"""Interest-unit construction: SPU attribute groups, image clusters, and
hierarchical semantic codes (3 levels x 128 codes) via residual k-means.

Unit ids are stable: each id is derived from the unit's key (attribute tuple,
cluster index, or code prefix), so adding or removing members never renames a
unit, and the three type namespaces never collide.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

IU_TYPES = ("SPU", "Image", "Semantic")
_TYPE_CODE = {"SPU": 1, "Image": 2, "Semantic": 3}

GSID_LEVELS = 3
GSID_CODES_PER_LEVEL = 128


class UnitError(ValueError):
    pass


@dataclass
class GsidCode:
    level1: int
    level2: int
    level3: int

    def __post_init__(self):
        for lv in (self.level1, self.level2, self.level3):
            if not 0 <= lv < GSID_CODES_PER_LEVEL:
                raise UnitError(f"gsid level value {lv} outside [0, 128)")

    def prefix(self, level):
        return (self.level1, self.level2, self.level3)[:level]


@dataclass
class InterestUnit:
    iu_id: int
    iu_type: str
    member_item_ids: list
    title: str
    creation_time: float = 0.0
    gsid: tuple = None       # level-prefix tuple for semantic units
    centroid: np.ndarray = field(default=None, repr=False)


def unit_id_for(iu_type, key):
    """Stable positive id from (type, key); disjoint ranges per type."""
    digest = hashlib.blake2b(repr(key).encode(), digest_size=5).digest()
    return _TYPE_CODE[iu_type] * (1 << 40) + int.from_bytes(digest, "big") + 1


def _title(iu_type, members):
    cats = {}
    brands = {}
    for it in members:
        cats[it.category] = cats.get(it.category, 0) + 1
        brands[it.brand] = brands.get(it.brand, 0) + 1
    cat = max(sorted(cats), key=cats.get)
    brand = max(sorted(brands), key=brands.get)
    return f"{iu_type}:{cat}/{brand}"


# ---------------------------------------------------------------------------
# k-means (shared by image clustering and GSID codebook training)
# ---------------------------------------------------------------------------

def _pairwise_sq(x, c):
    return ((x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T
            + (c * c).sum(axis=1)[None, :])


def kmeans(x, k, rng, max_iter=100):
    """Deterministic k-means with k-means++ init.

    Converges when assignments stabilize; empty clusters are re-seeded from
    the point farthest from its centroid. Returns (centroids, assignment).
    """
    n = x.shape[0]
    if k > n:
        raise UnitError(f"k={k} exceeds {n} points")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iter):
        new_assign = _pairwise_sq(x, centers).argmin(axis=1)
        if (new_assign == assign).all():
            break
        assign = new_assign
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                far = ((x - centers[assign]) ** 2).sum(axis=1).argmax()
                centers[j] = x[far]
                assign[far] = j
    return centers, assign


# ---------------------------------------------------------------------------
# Unit builders
# ---------------------------------------------------------------------------

def _normalize_attr(s):
    return s.strip().lower()

def spu_key(item):
    return (_normalize_attr(item.category), _normalize_attr(item.brand),
            _normalize_attr(item.model))


def build_spu_units(items, min_members=2):
    """Group items by exact normalized (category, brand, model) key."""
    groups = {}
    for it in items:
        groups.setdefault(spu_key(it), []).append(it)
    units = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < min_members:
            continue
        units.append(InterestUnit(
            iu_id=unit_id_for("SPU", key),
            iu_type="SPU",
            member_item_ids=[it.item_id for it in members],
            title=_title("SPU", members),
        ))
    return units


def build_image_cluster_units(items, k, seed, min_members=2):
    """k-means over image-proxy vectors; small clusters are dropped."""
    x = np.stack([it.image_vec for it in items])
    centers, assign = kmeans(x, k, np.random.default_rng(seed))
    units = []
    for j in range(k):
        members = [items[i] for i in np.nonzero(assign == j)[0]]
        if len(members) < min_members:
            continue
        units.append(InterestUnit(
            iu_id=unit_id_for("Image", ("img", j)),
            iu_type="Image",
            member_item_ids=[it.item_id for it in members],
            title=_title("Image", members),
            centroid=centers[j].copy(),
        ))
    return units


def assign_to_image_units(item, units):
    """Nearest-centroid assignment of a new item to existing image units."""
    image_units = [u for u in units if u.iu_type == "Image" and u.centroid is not None]
    if not image_units:
        return None
    d = [float(((item.image_vec - u.centroid) ** 2).sum()) for u in image_units]
    return image_units[int(np.argmin(d))].iu_id


@dataclass
class Codebooks:
    """Per-level centroid lists; level l centroids live in level l-1 residual space."""
    levels: list

    def __post_init__(self):
        for c in self.levels:
            if c.shape[0] != GSID_CODES_PER_LEVEL:
                raise UnitError(f"codebook level has {c.shape[0]} centroids, need 128")
            if not np.isfinite(c).all():
                raise UnitError("codebook centroids must be finite")

    @property
    def code_space_sizes(self):
        return [GSID_CODES_PER_LEVEL ** (lv + 1) for lv in range(len(self.levels))]


def train_gsid_codebooks(text_vectors, seed, max_iter=100):
    """Residual k-means: 128 centroids per level on successive residuals."""
    x = np.asarray(text_vectors, dtype=np.float64)
    if x.shape[0] < GSID_CODES_PER_LEVEL:
        raise UnitError(f"need at least {GSID_CODES_PER_LEVEL} vectors, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for _ in range(GSID_LEVELS):
        centers, assign = kmeans(residual, GSID_CODES_PER_LEVEL, rng, max_iter)
        levels.append(centers)
        residual = residual - centers[assign]
    return Codebooks(levels)


def assign_gsid(item_or_vec, codebooks):
    """Greedy nearest-centroid code at each level; ties go to the lowest index."""
    vec = item_or_vec.text_vec if hasattr(item_or_vec, "text_vec") else item_or_vec
    residual = np.asarray(vec, dtype=np.float64).copy()
    codes = []
    for centers in codebooks.levels:
        j = int(((centers - residual) ** 2).sum(axis=1).argmin())
        codes.append(j)
        residual -= centers[j]
    return GsidCode(*codes)


def build_semantic_units(items, codebooks, level=2, min_members=2):
    """Group items by their GSID prefix at the given level (default level 2)."""
    groups = {}
    for it in items:
        code = assign_gsid(it, codebooks)
        groups.setdefault(code.prefix(level), []).append(it)
    units = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < min_members:
            continue
        units.append(InterestUnit(
            iu_id=unit_id_for("Semantic", ("gsid", key)),
            iu_type="Semantic",
            member_item_ids=[it.item_id for it in members],
            title=_title("Semantic", members),
            gsid=key,
        ))
    return units


# ---------------------------------------------------------------------------
# Resolution and reporting
# ---------------------------------------------------------------------------

DEFAULT_PRECEDENCE = ("SPU", "Image", "Semantic")


def membership_index(units):
    """item_id -> {iu_type: iu_id}. Within a type memberships must be disjoint."""
    index = {}
    for u in units:
        for item_id in u.member_item_ids:
            per_type = index.setdefault(item_id, {})
            if u.iu_type in per_type and per_type[u.iu_type] != u.iu_id:
                raise UnitError(
                    f"item {item_id} in two {u.iu_type} units")
            per_type[u.iu_type] = u.iu_id
    return index


def resolve_item_iu(item_id, index, precedence=DEFAULT_PRECEDENCE):
    """The single IU used for modeling/serving, by type precedence; None if unmapped."""
    per_type = index.get(item_id)
    if not per_type:
        return None
    for t in precedence:
        if t in per_type:
            return per_type[t]
    return None


def build_item_iu_map(items, units, precedence=DEFAULT_PRECEDENCE):
    index = membership_index(units)
    return {it.item_id: resolve_item_iu(it.item_id, index, precedence)
            for it in items if resolve_item_iu(it.item_id, index, precedence) is not None}


def coverage_report(units, events, items):
    """Per-type unit counts, product coverage and event-share ratios.

    CTR improvement compares each type's member-item CTR against items in no
    unit of any type; with an empty log the ratio columns are 0 and CTR cells
    are None.
    """
    n_items = len(items)
    covered_any = set()
    members_by_type = {t: set() for t in IU_TYPES}
    for u in units:
        members_by_type[u.iu_type].update(u.member_item_ids)
        covered_any.update(u.member_item_ids)

    counts = {"impression": {}, "click": {}, "transaction": {}}
    totals = {"impression": 0, "click": 0, "transaction": 0}
    for e in events:
        if e.event_kind in counts:
            counts[e.event_kind][e.item_id] = counts[e.event_kind].get(e.item_id, 0) + 1
            totals[e.event_kind] += 1

    def event_share(member_set, kind):
        if totals[kind] == 0:
            return 0.0
        got = sum(c for iid, c in counts[kind].items() if iid in member_set)
        return 100.0 * got / totals[kind]

    def ctr_of(member_set):
        imp = sum(c for iid, c in counts["impression"].items() if iid in member_set)
        clk = sum(c for iid, c in counts["click"].items() if iid in member_set)
        return None if imp == 0 else clk / imp

    baseline_set = {it.item_id for it in items} - covered_any
    base_ctr = ctr_of(baseline_set)

    rows = {}
    for t in IU_TYPES:
        members = members_by_type[t]
        c = ctr_of(members)
        improvement = None
        if c is not None and base_ctr not in (None, 0.0):
            improvement = 100.0 * (c / base_ctr - 1.0)
        rows[t] = {
            "units": sum(1 for u in units if u.iu_type == t),
            "product_coverage_pct": 100.0 * len(members) / n_items if n_items else 0.0,
            "exposure_pct": event_share(members, "impression"),
            "click_pct": event_share(members, "click"),
            "transaction_pct": event_share(members, "transaction"),
            "ctr": c,
            "ctr_improvement_pct": improvement,
        }
    rows["total"] = {
        "units": len(units),
        "product_coverage_pct": 100.0 * len(covered_any) / n_items if n_items else 0.0,
        "exposure_pct": event_share(covered_any, "impression"),
        "click_pct": event_share(covered_any, "click"),
        "transaction_pct": event_share(covered_any, "transaction"),
        "ctr": ctr_of(covered_any),
        "ctr_improvement_pct": None,
    }
    return rows
