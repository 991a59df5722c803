"""Weekly bucketing, rolling windows with next-week labels, and account-level splits."""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    N_ACTIVITIES,
    SEQ_LEN,
    WINDOW_LEN,
    AccountStatic,
    ActivityEvent,
    ConversionLabel,
    Dataset,
    IndividualStatic,
    IndividualWindow,
    WeekSequence,
    WindowSample,
    absolute_week,
)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def bucket_weeks(events: list[ActivityEvent], epoch_week: int, seq_len: int = SEQ_LEN) -> list[WeekSequence]:
    """Group one individual's events into Sunday-start calendar weeks.

    Within a week activities are time-ordered and only the most recent
    ``seq_len`` are kept; deltas are hours between consecutive kept activities.
    Frequency counts cover every event of the week.
    """
    by_week: dict[int, list[ActivityEvent]] = defaultdict(list)
    for e in events:
        by_week[absolute_week(e.timestamp) - epoch_week].append(e)
    out = []
    for week in sorted(by_week):
        evs = sorted(by_week[week], key=lambda e: (e.timestamp, int(e.activity)))
        counts = np.bincount([int(e.activity) for e in evs], minlength=N_ACTIVITIES).astype(np.int64)
        kept = evs[-seq_len:]
        n = len(kept)
        codes = np.zeros(seq_len, dtype=np.int64)
        deltas = np.zeros(seq_len)
        codes[:n] = [int(e.activity) for e in kept]
        for i in range(1, n):
            deltas[i] = (kept[i].timestamp - kept[i - 1].timestamp).total_seconds() / 3600.0
        out.append(WeekSequence(week, codes, n, deltas, counts))
    return out


def baseline2_featurize(events: list[ActivityEvent], epoch_week: int) -> list[tuple[int, np.ndarray]]:
    """Per-week activity-type counts (no truncation), one entry per active week."""
    return [(w.week_index, w.counts) for w in bucket_weeks(events, epoch_week)]


def _window_weeks(weeks: dict[int, WeekSequence], target: int, window_len: int, compress: bool, seq_len: int):
    if not compress:
        return tuple(weeks.get(w) or WeekSequence.inactive(w, seq_len) for w in range(target - window_len, target))
    # compress: most recent active weeks before the target, older slots padded inactive
    active = [weeks[w] for w in sorted(weeks) if w < target][-window_len:]
    pad = [WeekSequence.inactive(target - window_len + i, seq_len) for i in range(window_len - len(active))]
    return tuple(pad + active)


def build_windows(
    events: list[ActivityEvent],
    label: ConversionLabel | None,
    statics: dict[str, IndividualStatic],
    account_static: AccountStatic,
    epoch_week: int,
    window_len: int = WINDOW_LEN,
    seq_len: int = SEQ_LEN,
    compress: bool = False,
) -> list[WindowSample]:
    """Rolling-window samples for one account.

    Target weeks run from the account's first active week + ``window_len``
    through min(last active week + 1, conversion week). An individual takes
    part in a window once their first contact precedes the target week.
    """
    if not events:
        return []
    by_ind: dict[str, list[ActivityEvent]] = defaultdict(list)
    for e in events:
        by_ind[e.individual_id].append(e)
    first_contact = {ind: min(e.timestamp for e in evs) for ind, evs in by_ind.items()}
    order = sorted(by_ind, key=lambda ind: (first_contact[ind], ind))
    weeks = {ind: {w.week_index: w for w in bucket_weeks(by_ind[ind], epoch_week, seq_len)} for ind in order}
    first_week = {ind: absolute_week(first_contact[ind]) - epoch_week for ind in order}

    all_weeks = [w for ws in weeks.values() for w in ws]
    start, last = min(all_weeks) + window_len, max(all_weeks) + 1
    conv_week = None
    if label is not None and label.converted:
        conv_week = absolute_week(label.conversion_time) - epoch_week
        last = min(last, conv_week)

    account_id = events[0].account_id
    samples = []
    for target in range(start, last + 1):
        members = tuple(
            IndividualWindow(ind, _window_weeks(weeks[ind], target, window_len, compress, seq_len), statics[ind])
            for ind in order
            if first_week[ind] < target
        )
        samples.append(WindowSample(account_id, target, members, account_static, target == conv_week))
    return samples


def split_accounts(account_ids, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Deterministic account-level partition into (train, test)."""
    ids = sorted(set(account_ids))
    if not ids:
        return [], []
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(ids))
    n_test = int(round(spec.test_fraction * len(ids)))
    if len(ids) > 1:
        # both sides non-empty whenever possible
        n_test = min(max(n_test, 1), len(ids) - 1)
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return train, test


# ---------------------------------------------------------------- whole dataset


def _account_job(args):
    return build_windows(*args)


def build_all_windows(
    ds: Dataset,
    account_ids=None,
    window_len: int = WINDOW_LEN,
    compress: bool = False,
    workers: int = 1,
) -> dict[str, list[WindowSample]]:
    """Windows for every (or the given) account, keyed by account id in sorted order.

    Individuals who opted out of email are excluded before windowing.
    """
    statics = {s.individual_id: s for s in ds.individuals}
    acc_statics = {a.account_id: a for a in ds.accounts}
    labels = {lb.account_id: lb for lb in ds.labels}
    epoch = ds.epoch_week()
    excluded = {s.individual_id for s in ds.individuals if s.opt_out_email}
    by_acc = ds.events_by_account()
    wanted = sorted(by_acc) if account_ids is None else sorted(set(account_ids) & set(by_acc))
    jobs = []
    for acc in wanted:
        evs = [e for e in by_acc[acc] if e.individual_id not in excluded]
        jobs.append((evs, labels.get(acc), statics, acc_statics[acc], epoch, window_len, SEQ_LEN, compress))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_account_job, jobs, chunksize=16))
    else:
        results = [_account_job(j) for j in jobs]
    return dict(zip(wanted, results))


# ---------------------------------------------------------------- sample manifests


def dataset_fingerprint(directory) -> str:
    h = hashlib.sha256()
    for name in sorted(p.name for p in Path(directory).glob("*.csv")):
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def write_manifest(path, samples: list[WindowSample], header: dict) -> None:
    """Line-delimited JSON: one header object, then one sample reference per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            ref = {"account_id": s.account_id, "target_week": s.target_week, "label": int(s.label)}
            fh.write(json.dumps(ref, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}:1: empty manifest")
    header = json.loads(lines[0])
    refs = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            refs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{i}: {exc}") from None
    return header, refs


def load_manifest_samples(path, ds: Dataset | None = None) -> tuple[dict, list[WindowSample]]:
    """Rebuild the referenced WindowSamples from the dataset named in the header."""
    from .datamodel import read_dataset

    header, refs = read_manifest(path)
    if ds is None:
        ds = read_dataset(Path(header["data"]))
    windows = build_all_windows(
        ds, {r["account_id"] for r in refs}, header.get("window_len", WINDOW_LEN), header.get("compress", False)
    )
    lookup = {(s.account_id, s.target_week): s for ws in windows.values() for s in ws}
    samples = []
    for i, r in enumerate(refs, start=2):
        s = lookup.get((r["account_id"], r["target_week"]))
        if s is None or int(s.label) != r["label"]:
            raise ValueError(f"{path}:{i}: reference {r} does not match the dataset")
        samples.append(s)
    return header, samples
