"""Synthetic buying-group activity logs with a planted account-level intent signal.

Each account carries a latent intent trajectory in [0, 1]. Members see it
through noisy personal multipliers, which drive how often they are active,
how many activities they log, and which activity types they pick. The
account's weekly conversion hazard is logistic(signal_strength * intent - offset),
with the offset solved so the expected converted fraction hits the target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .datamodel import (
    AccountStatic,
    ActivityEvent,
    ActivityType,
    ConversionLabel,
    Dataset,
    IndividualStatic,
    absolute_week,
)

SOURCES = ("web", "event", "referral", "ad")
SOURCE_PROBS = (0.4, 0.2, 0.2, 0.2)

# activity-type logits at zero intent and their slope in intent
_TYPE_BASE = np.array([2.0, 0.6, -0.4, -0.6, 1.0, -0.8, 0.6, -1.0, -1.4])
_TYPE_SLOPE = np.array([-0.6, 1.6, 1.0, -2.0, 0.2, 2.0, 0.4, 1.2, 1.8])

# empirical ratio between the 90th percentile and the base mean of the
# weekly count sampler under the default mixture of propensity and intent
_P90_PER_MEAN = 3.0
_NB_DISPERSION = 1.5
_SECONDS_PER_WEEK = 7 * 24 * 3600


class CalibrationError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_accounts: int = 100
    group_size_range: tuple[int, int] = (3, 25)
    mean_group_size: float = 4.6
    span_weeks: int = 35
    conversion_rate: float = 0.1
    activity_rate_90pct: float = 8.0
    max_weekly_activities: int = 114
    duration_90pct_weeks: int = 27
    seed: int = 0
    signal_strength: float = 5.0
    opt_out_rate: float = 0.03
    start_date: str = "2021-01-03"

    def __post_init__(self):
        self.group_size_range = tuple(int(v) for v in self.group_size_range)
        lo, hi = self.group_size_range
        if not 1 <= lo <= hi <= 25:
            raise ValueError(f"group_size_range must lie within [1, 25], got {self.group_size_range}")
        for name in ("n_accounts", "span_weeks", "max_weekly_activities", "duration_90pct_weeks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.activity_rate_90pct <= 0 or self.mean_group_size < lo:
            raise ValueError("activity_rate_90pct must be positive and mean_group_size >= minimum group size")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be >= 0")
        if self.span_weeks < 6:
            raise ValueError("span_weeks must allow at least one scoreable week")
        if date.fromisoformat(self.start_date).weekday() != 6:
            raise ValueError("start_date must be a Sunday")

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown generator setting {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in str(raw).replace("[", "").replace("]", "").split(","))
            elif isinstance(default, str):
                kwargs[key] = str(raw)
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class _Account:
    start: int
    length: int
    intent: np.ndarray


def _lifespan_upper(cfg: SynthConfig) -> int:
    """Largest account lifespan such that the 90th percentile of member
    activity durations lands on ``duration_90pct_weeks`` (capped by the span)."""

    def p90(upper: int) -> float:
        lengths = np.arange(5, upper + 1)
        durations = np.concatenate([L - np.arange(0, L // 2 + 1) for L in lengths])
        # weight so every lifespan is equally likely and offsets uniform within it
        weights = np.concatenate([np.full(L // 2 + 1, 1.0 / (L // 2 + 1)) for L in lengths])
        order = np.argsort(durations, kind="stable")
        cdf = np.cumsum(weights[order]) / weights.sum()
        return float(durations[order][np.searchsorted(cdf, 0.9)])

    best = 5
    for upper in range(5, cfg.span_weeks + 1):
        if p90(upper) <= cfg.duration_90pct_weeks:
            best = upper
    return best


def _draw_account(cfg: SynthConfig, index: int, upper: int) -> _Account:
    rng = np.random.default_rng([cfg.seed, index, 0])
    length = int(rng.integers(5, upper + 1))
    start = int(rng.integers(0, cfg.span_weeks - length + 1))
    warming = rng.random() < 0.2
    drift = rng.uniform(0.06, 0.15) if warming else rng.uniform(-0.02, 0.01)
    x = rng.uniform(0.0, 0.2)
    intent = np.empty(length)
    for t in range(length):
        intent[t] = x
        x = float(np.clip(x + drift + rng.normal(0.0, 0.03), 0.0, 1.0))
    return _Account(start, length, intent)


def _hazard_weeks(acc: _Account) -> tuple[np.ndarray, np.ndarray]:
    """Eligible conversion weeks (relative to the span start) and their intent."""
    weeks = np.arange(acc.start + 4, acc.start + acc.length + 1)
    rel = np.minimum(weeks - acc.start, acc.length - 1)
    return weeks, acc.intent[rel]


def _solve_offset(cfg: SynthConfig, accounts: list[_Account]) -> float:
    intents = [_hazard_weeks(a)[1] for a in accounts]
    width = max(len(it) for it in intents)
    grid = np.zeros((len(intents), width))
    valid = np.zeros_like(grid, dtype=bool)
    for i, it in enumerate(intents):
        grid[i, : len(it)] = it
        valid[i, : len(it)] = True

    def converted_fraction(offset: float) -> float:
        # log(1 - h) = -softplus(logit); P(converted) = 1 - prod(1 - h)
        log_survive = np.where(valid, -np.logaddexp(0.0, cfg.signal_strength * grid - offset), 0.0).sum(axis=1)
        return float(np.mean(-np.expm1(log_survive)))

    if not 0.0 < cfg.conversion_rate < 1.0:
        raise CalibrationError(f"conversion_rate must lie in (0, 1), got {cfg.conversion_rate}")
    lo, hi = -60.0, 60.0
    f_lo, f_hi = converted_fraction(lo) - cfg.conversion_rate, converted_fraction(hi) - cfg.conversion_rate
    if f_lo < 0 or f_hi > 0:
        raise CalibrationError(f"conversion_rate {cfg.conversion_rate} is not reachable with this configuration")
    return float(brentq(lambda o: converted_fraction(o) - cfg.conversion_rate, lo, hi, xtol=1e-12))


def _group_size(cfg: SynthConfig, rng) -> int:
    lo, hi = cfg.group_size_range
    extra = cfg.mean_group_size - lo
    if extra <= 0 or lo == hi:
        return lo
    return int(min(hi, lo + rng.geometric(1.0 / (extra + 1.0)) - 1))


def _account_events(cfg: SynthConfig, index: int, acc: _Account, offset: float, epoch: datetime):
    rng = np.random.default_rng([cfg.seed, index, 1])
    account_id = f"acc{index:05d}"
    K = _group_size(cfg, rng)
    base_mean = cfg.activity_rate_90pct / _P90_PER_MEAN

    weeks, hz_intent = _hazard_weeks(acc)
    hazard = expit(cfg.signal_strength * hz_intent - offset)
    fired = np.flatnonzero(rng.random(hazard.size) < hazard)
    label = ConversionLabel(account_id, False)
    if fired.size:
        week = int(weeks[fired[0]])
        when = epoch + timedelta(weeks=week, seconds=int(rng.integers(0, _SECONDS_PER_WEEK)))
        label = ConversionLabel(account_id, True, when)

    events: list[ActivityEvent] = []
    statics: list[IndividualStatic] = []
    for k in range(K):
        ind_id = f"ind{index:05d}_{k:02d}"
        statics.append(
            IndividualStatic(
                ind_id,
                SOURCES[int(rng.choice(len(SOURCES), p=SOURCE_PROBS))],
                bool(rng.random() < cfg.opt_out_rate),
                bool(rng.random() < 0.15),
            )
        )
        onboard = int(rng.integers(0, acc.length // 2 + 1))
        propensity = rng.lognormal(0.0, 0.6)
        multiplier = rng.lognormal(0.0, 0.3)
        seen = False
        for t in range(onboard, acc.length):
            perceived = float(np.clip(acc.intent[t] * multiplier + rng.normal(0.0, 0.05), 0.0, 1.0))
            p_active = expit(-0.9 + 2.8 * perceived + 0.5 * np.log(propensity))
            # the onboarding week always carries the first contact
            if seen and rng.random() >= p_active:
                continue
            seen = True
            mean = base_mean * propensity * (0.5 + 1.5 * perceived)
            r = _NB_DISPERSION
            n = 1 + int(rng.negative_binomial(r, r / (r + max(mean - 1.0, 1e-9))))
            n = min(n, cfg.max_weekly_activities)
            logits = _TYPE_BASE + _TYPE_SLOPE * perceived
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            types = rng.choice(len(ActivityType), size=n, p=probs)
            secs = np.sort(rng.integers(0, _SECONDS_PER_WEEK, size=n))
            week_start = epoch + timedelta(weeks=acc.start + t)
            for s_, a_ in zip(secs, types):
                events.append(
                    ActivityEvent(account_id, ind_id, week_start + timedelta(seconds=int(s_)), ActivityType(int(a_)))
                )
    revenue = round(float(rng.lognormal(np.log(5e6), 1.0)), 2)
    employees = int(rng.lognormal(np.log(200.0), 1.0)) + 1
    return events, label, statics, AccountStatic(account_id, revenue, employees)


def generate(cfg: SynthConfig):
    """Returns (dataset, ground_truth) where ground_truth maps account id ->
    {absolute week number: intent}. Ground truth is for diagnostics only."""
    epoch = datetime.fromisoformat(cfg.start_date).replace(tzinfo=timezone.utc)
    upper = _lifespan_upper(cfg)
    accounts = [_draw_account(cfg, i, upper) for i in range(cfg.n_accounts)]
    offset = _solve_offset(cfg, accounts)
    epoch_abs = absolute_week(epoch)
    events, labels, individuals, acc_statics = [], [], [], []
    truth: dict[str, dict[int, float]] = {}
    for i, acc in enumerate(accounts):
        evs, label, stat, acc_static = _account_events(cfg, i, acc, offset, epoch)
        events.extend(evs)
        labels.append(label)
        individuals.extend(stat)
        acc_statics.append(acc_static)
        truth[acc_static.account_id] = {
            epoch_abs + acc.start + t: float(v) for t, v in enumerate(acc.intent)
        }
    return Dataset(events, labels, individuals, acc_statics), truth


def write_ground_truth(truth: dict[str, dict[int, float]], path) -> None:
    from .datamodel import week_start

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("account_id", "week_start", "intent"))
        for acc in sorted(truth):
            for wk in sorted(truth[acc]):
                writer.writerow((acc, week_start(wk).date().isoformat(), f"{truth[acc][wk]:.6f}"))


def read_ground_truth(path) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts = datetime.fromisoformat(row["week_start"]).replace(tzinfo=timezone.utc)
            out.setdefault(row["account_id"], {})[absolute_week(ts)] = float(row["intent"])
    return out


def weekly_activity_p90(ds: Dataset) -> float:
    """90th percentile of activities per active individual-week."""
    counts: dict[tuple, int] = {}
    for e in ds.events:
        key = (e.individual_id, absolute_week(e.timestamp))
        counts[key] = counts.get(key, 0) + 1
    return float(np.percentile(list(counts.values()), 90)) if counts else 0.0


def duration_p90(ds: Dataset) -> float:
    """90th percentile of per-individual activity duration in weeks (first to last, inclusive)."""
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    for e in ds.events:
        w = absolute_week(e.timestamp)
        first[e.individual_id] = min(first.get(e.individual_id, w), w)
        last[e.individual_id] = max(last.get(e.individual_id, w), w)
    spans = [last[i] - first[i] + 1 for i in first]
    return float(np.percentile(spans, 90)) if spans else 0.0
