"""Ranking metrics: AUC, impression-weighted GAUC, relative improvement, domain split.

AUC uses the rank-statistic fast path with ties counted as 0.5, which is
mathematically identical to averaging the pairwise indicator over all
positive/negative pairs. A strict mode (ties count 0) is available behind a
flag for comparison.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (single class, base AUC 0.5, ...)."""


@dataclass
class ScoredSample:
    user_id: int
    score: float
    label: int
    domain: str = "normal"  # "iu" when the impression came from an IU card/page


def auc(scores, labels=None, ties="half"):
    """Area under the ROC curve over scored samples.

    Accepts either (scores, labels) arrays or a list of ScoredSample. With
    ties="half" tied positive/negative pairs contribute 0.5 (rank-statistic
    convention); ties="strict" counts them 0.
    """
    if labels is None:
        samples = scores
        scores = np.array([s.score for s in samples], dtype=np.float64)
        labels = np.array([s.label for s in samples], dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: need at least one positive and one negative")
    if ties == "strict":
        neg_sorted = np.sort(scores[labels == 0])
        wins = np.searchsorted(neg_sorted, scores[labels == 1], side="left").sum()
        return wins / (n_pos * n_neg)
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_bruteforce(scores, labels, ties="half"):
    """O(|P||N|) pairwise enumeration; the independent oracle for auc()."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("auc: need at least one positive and one negative")
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n and ties == "half":
                total += 0.5
    return total / (pos.size * neg.size)


def gauc(samples, ties="half"):
    """Impression-weighted average of per-user AUCs.

    Users whose samples are single-class carry no AUC and are excluded from
    both numerator and denominator.
    """
    by_user = {}
    for s in samples:
        by_user.setdefault(s.user_id, []).append(s)
    num = den = 0.0
    eligible = 0
    for user_samples in by_user.values():
        labels = [s.label for s in user_samples]
        if all(labels) or not any(labels):
            continue
        a = auc(user_samples, ties=ties)
        w = len(user_samples)
        num += w * a
        den += w
        eligible += 1
    if eligible == 0:
        raise UndefinedMetricError("gauc: no user has both a positive and a negative")
    return num / den


def rela_impr(measured_auc, base_auc):
    """Relative improvement over a base model, in percent, anchored at 0.5."""
    if base_auc == 0.5:
        raise UndefinedMetricError("rela_impr: base AUC 0.5 (random guesser)")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def _cell(samples):
    out = {}
    try:
        out["auc"] = auc(samples)
    except UndefinedMetricError:
        out["auc"] = None
    try:
        out["gauc"] = gauc(samples)
    except UndefinedMetricError:
        out["gauc"] = None
    return out


def domain_split_eval(scored_by_model, base_model):
    """Per-domain metric report over day-8 scored samples, one row per model.

    scored_by_model: {model_name: [ScoredSample]}. Emits the three-way split
    (overall / iu / normal) with AUC+GAUC overall and AUC per domain, plus
    relative-improvement columns against ``base_model``. Undefined cells are
    null; the run continues.
    """
    if base_model not in scored_by_model:
        raise UndefinedMetricError(f"domain_split_eval: unknown base model {base_model}")
    rows = {}
    for name, samples in scored_by_model.items():
        iu = [s for s in samples if s.domain == "iu"]
        normal = [s for s in samples if s.domain == "normal"]
        rows[name] = {
            "overall": _cell(samples),
            "iu": {"auc": _cell(iu)["auc"]},
            "normal": {"auc": _cell(normal)["auc"]},
        }
    base = rows[base_model]
    for name, row in rows.items():
        for part in ("overall", "iu", "normal"):
            m, b = row[part]["auc"], base[part]["auc"]
            try:
                row[part]["ri"] = None if m is None or b is None else rela_impr(m, b)
            except UndefinedMetricError:
                row[part]["ri"] = None
        m, b = row["overall"]["gauc"], base["overall"]["gauc"]
        try:
            row["overall"]["gauc_ri"] = None if m is None or b is None else rela_impr(m, b)
        except UndefinedMetricError:
            row["overall"]["gauc_ri"] = None
    return {"base_model": base_model, "models": rows}
