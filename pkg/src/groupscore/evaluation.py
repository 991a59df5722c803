"""AUC, pooled and per-week evaluation, score time series, activity-volume correlation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .datamodel import ActivityEvent, ConversionLabel, ScoreRecord, WindowSample, absolute_week


class AUCUndefinedError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counting one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefinedError(f"AUC undefined: {n_pos} positive and {n_neg} negative samples")
    ranks = stats.rankdata(s)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_auc_ci(scores, labels, groups, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile interval of the AUC resampling whole groups (accounts) with replacement."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    g = np.asarray(groups)
    uniq, inv = np.unique(g, return_inverse=True)
    members = [np.flatnonzero(inv == i) for i in range(len(uniq))]
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_resamples):
        pick = rng.integers(0, len(uniq), size=len(uniq))
        idx = np.concatenate([members[i] for i in pick])
        yy = y[idx]
        if yy.min() == yy.max():
            continue
        values.append(auc(s[idx], yy))
    if not values:
        return float("nan"), float("nan")
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(values, alpha)), float(np.quantile(values, 1.0 - alpha))


@dataclass
class EvalReport:
    pooled_auc: float
    per_week_auc: dict[int, tuple[float | None, int, int]]
    mean_weekly_auc: float | None
    n_samples: int
    config_hash: str
    ci95: tuple[float, float] | None = None
    n_positive: int = 0

    def to_dict(self) -> dict:
        return {
            "pooled_auc": self.pooled_auc,
            "mean_weekly_auc": self.mean_weekly_auc,
            "n_samples": self.n_samples,
            "n_positive": self.n_positive,
            "config_hash": self.config_hash,
            "ci95": list(self.ci95) if self.ci95 else None,
            "per_week_auc": {
                str(w): {"auc": a, "n_pos": p, "n_neg": n} for w, (a, p, n) in sorted(self.per_week_auc.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_per_week_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("target_week", "auc", "n_pos", "n_neg"))
            for w, (a, p, n) in sorted(self.per_week_auc.items()):
                writer.writerow((w, "" if a is None else repr(a), p, n))


def model_hash(scorer) -> str:
    h = hashlib.sha256(json.dumps(scorer.config.to_dict(), sort_keys=True).encode())
    for name in sorted(scorer.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(scorer.params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def report_from_scores(
    scores, samples: list[WindowSample], config_hash: str = "", bootstrap: int = 0, seed: int = 0
) -> EvalReport:
    """Pooled AUC over all samples plus AUC per target week; weeks lacking a
    class are recorded with auc=None and left out of the weekly mean."""
    scores = np.asarray(scores, dtype=float)
    labels = np.array([int(s.label) for s in samples])
    pooled = auc(scores, labels)
    weeks = np.array([s.target_week for s in samples])
    per_week = {}
    for w in np.unique(weeks):
        sel = weeks == w
        n_pos = int(labels[sel].sum())
        n_neg = int(sel.sum() - n_pos)
        a = auc(scores[sel], labels[sel]) if n_pos and n_neg else None
        per_week[int(w)] = (a, n_pos, n_neg)
    defined = [a for a, _, _ in per_week.values() if a is not None]
    ci = None
    if bootstrap:
        ci = bootstrap_auc_ci(scores, labels, [s.account_id for s in samples], bootstrap, seed)
    return EvalReport(
        pooled,
        per_week,
        float(np.mean(defined)) if defined else None,
        len(samples),
        config_hash,
        ci,
        int(labels.sum()),
    )


def check_disjoint(samples: list[WindowSample], train_accounts) -> None:
    leaked = sorted({s.account_id for s in samples} & set(train_accounts or ()))
    if leaked:
        raise LeakageError(f"leakage: {len(leaked)} evaluation accounts were used in training, e.g. {leaked[:3]}")


def evaluate(scorer, samples: list[WindowSample], train_accounts=None, bootstrap: int = 0, seed: int = 0) -> EvalReport:
    """Score every window and summarise. ``train_accounts`` guards against leakage."""
    check_disjoint(samples, train_accounts)
    scores, _ = scorer.predict(samples)
    return report_from_scores(scores, samples, model_hash(scorer), bootstrap, seed)


# ---------------------------------------------------------------- time series


def score_timeseries(scorer, samples: list[WindowSample]) -> list[ScoreRecord]:
    """Weekly account probability plus every member's score, in week order."""
    samples = sorted(samples, key=lambda s: (s.account_id, s.target_week))
    if not samples:
        return []
    probs, inds = scorer.predict(samples)
    return [
        ScoreRecord(
            s.account_id,
            s.target_week,
            float(p),
            {m.individual_id: float(v) for m, v in zip(s.individuals, ind)},
        )
        for s, p, ind in zip(samples, probs, inds)
    ]


def write_timeseries_csv(records: list[ScoreRecord], path) -> None:
    """Columns: account_id, target_week, account_score, then one column per
    individual (blank before the individual's first contact)."""
    ids = []
    for r in records:
        for i in r.individual_scores:
            if i not in ids:
                ids.append(i)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["account_id", "target_week", "account_score", *ids])
        for r in records:
            writer.writerow(
                [r.account_id, r.target_week, repr(r.account_probability)]
                + [repr(r.individual_scores[i]) if i in r.individual_scores else "" for i in ids]
            )


# ------------------------------------------------------- volume correlation


def pearson(x, y) -> float | None:
    """Pearson correlation, or None when either series has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(dx @ dy / math.sqrt(sxx * syy))


@dataclass
class CorrelationReport:
    r_converted: float | None
    r_not_converted: float | None
    interaction_p_value: float | None
    per_account: dict[str, float] = field(default_factory=dict)
    n_excluded_short: int = 0
    n_excluded_constant: int = 0

    def to_dict(self) -> dict:
        return {
            "r_converted": self.r_converted,
            "r_not_converted": self.r_not_converted,
            "interaction_p_value": self.interaction_p_value,
            "n_accounts": len(self.per_account),
            "n_excluded_short": self.n_excluded_short,
            "n_excluded_constant": self.n_excluded_constant,
            "per_account_r": dict(sorted(self.per_account.items())),
        }


def _ols_interaction_p(volume, score, converted) -> float | None:
    """Two-sided p-value of the volume x converted coefficient in
    score ~ 1 + volume + converted + volume*converted."""
    v = np.asarray(volume, dtype=float)
    c = np.asarray(converted, dtype=float)
    X = np.column_stack([np.ones_like(v), v, c, v * c])
    y = np.asarray(score, dtype=float)
    n, k = X.shape
    if n <= k or np.linalg.matrix_rank(X) < k:
        return None
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    sigma2 = float(resid @ resid) / (n - k)
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = math.sqrt(cov[3, 3])
    if se == 0.0:
        return None
    t = beta[3] / se
    return float(2.0 * stats.t.sf(abs(t), n - k))


def activity_score_correlation(
    records: list[ScoreRecord],
    events: list[ActivityEvent],
    labels: list[ConversionLabel],
    epoch_week: int,
    min_weeks: int = 3,
) -> CorrelationReport:
    """Relate each account's weekly activity volume to its weekly score.

    The volume paired with the score for target week t is the account's total
    activity count in week t-1, the most recent week the score could see.
    """
    volume: dict[tuple[str, int], int] = defaultdict(int)
    for e in events:
        volume[(e.account_id, absolute_week(e.timestamp) - epoch_week)] += 1
    converted = {lb.account_id: lb.converted for lb in labels}
    by_acc: dict[str, list[ScoreRecord]] = defaultdict(list)
    for r in records:
        by_acc[r.account_id].append(r)

    per_account: dict[str, float] = {}
    short = constant = 0
    pooled_v, pooled_s, pooled_c = [], [], []
    for acc, recs in sorted(by_acc.items()):
        if len(recs) < min_weeks:
            short += 1
            continue
        v = [volume.get((acc, r.target_week - 1), 0) for r in recs]
        s = [r.account_probability for r in recs]
        r_ = pearson(v, s)
        if r_ is None:
            constant += 1
            continue
        per_account[acc] = r_
        flag = float(converted.get(acc, False))
        pooled_v += v
        pooled_s += s
        pooled_c += [flag] * len(v)

    def mean_r(flag):
        vals = [r for a, r in per_account.items() if converted.get(a, False) == flag]
        return float(np.mean(vals)) if vals else None

    return CorrelationReport(
        mean_r(True),
        mean_r(False),
        _ols_interaction_p(pooled_v, pooled_s, pooled_c),
        per_account,
        short,
        constant,
    )
