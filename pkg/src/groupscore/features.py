"""Numeric encoding of WindowSamples: static vocabularies, standardization, batch packing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import N_ACTIVITIES, AccountStatic, IndividualStatic, WindowSample


@dataclass
class StaticEncoder:
    """One-hot source vocabulary plus opt-out flags for individuals; z-scored
    revenue and headcount for accounts. Fitted on training accounts only."""

    sources: list[str]
    revenue_mean: float = 0.0
    revenue_std: float = 1.0
    employees_mean: float = 0.0
    employees_std: float = 1.0

    @classmethod
    def fit(cls, samples: list[WindowSample]) -> "StaticEncoder":
        accounts: dict[str, AccountStatic] = {}
        sources = set()
        for s in samples:
            accounts[s.account_id] = s.account_static
            sources.update(m.static.source_of_arrival for m in s.individuals)
        rev = np.array([a.revenue for a in accounts.values()], dtype=float)
        emp = np.array([a.num_employees for a in accounts.values()], dtype=float)

        def stats(x):
            if x.size == 0:
                return 0.0, 1.0
            sd = float(x.std())
            return float(x.mean()), sd if sd > 0 else 1.0

        (rm, rs), (em, es) = stats(rev), stats(emp)
        return cls(sorted(sources), rm, rs, em, es)

    @property
    def individual_dim(self) -> int:
        return len(self.sources) + 2

    @property
    def account_dim(self) -> int:
        return 2

    def encode_individual(self, static: IndividualStatic) -> np.ndarray:
        v = np.zeros(self.individual_dim)
        # unseen categories keep an all-zero one-hot block
        if static.source_of_arrival in self.sources:
            v[self.sources.index(static.source_of_arrival)] = 1.0
        v[-2] = float(static.opt_out_email)
        v[-1] = float(static.opt_out_phone)
        return v

    def encode_account(self, static: AccountStatic) -> np.ndarray:
        return np.array(
            [
                (static.revenue - self.revenue_mean) / self.revenue_std,
                (static.num_employees - self.employees_mean) / self.employees_std,
            ]
        )

    def to_dict(self) -> dict:
        return {
            "sources": self.sources,
            "revenue_mean": self.revenue_mean,
            "revenue_std": self.revenue_std,
            "employees_mean": self.employees_mean,
            "employees_std": self.employees_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StaticEncoder":
        return cls(**d)


@dataclass
class EncodedSample:
    account_id: str
    target_week: int
    label: float
    individual_ids: list[str]
    codes: np.ndarray  # (K, W, S) int
    lens: np.ndarray  # (K, W) int
    logdt: np.ndarray  # (K, W, S) log(1 + hours since previous activity)
    logcounts: np.ndarray  # (K, W, 9) log(1 + count)
    ind_static: np.ndarray  # (K, Di)
    acc_static: np.ndarray  # (Da,)

    @property
    def size(self) -> int:
        return len(self.individual_ids)


def encode_sample(sample: WindowSample, encoder: StaticEncoder) -> EncodedSample:
    K = len(sample.individuals)
    if K == 0:
        raise ValueError(f"sample {sample.account_id}@{sample.target_week} has no individuals")
    W = len(sample.individuals[0].weeks)
    S = len(sample.individuals[0].weeks[0].codes)
    codes = np.zeros((K, W, S), dtype=np.int64)
    lens = np.zeros((K, W), dtype=np.int64)
    dts = np.zeros((K, W, S))
    counts = np.zeros((K, W, N_ACTIVITIES))
    for k, member in enumerate(sample.individuals):
        for w, seq in enumerate(member.weeks):
            codes[k, w] = seq.codes
            lens[k, w] = seq.valid_len
            dts[k, w] = seq.deltas
            counts[k, w] = seq.counts
    return EncodedSample(
        sample.account_id,
        sample.target_week,
        float(sample.label),
        [m.individual_id for m in sample.individuals],
        codes,
        lens,
        np.log1p(dts),
        np.log1p(counts),
        np.stack([encoder.encode_individual(m.static) for m in sample.individuals]),
        encoder.encode_account(sample.account_static),
    )


@dataclass
class Batch:
    """Individuals of all samples stacked along the first axis (M rows);
    ``owner``/``slot`` locate each row in the (B, Kmax) account grid."""

    codes: np.ndarray
    lens: np.ndarray
    logdt: np.ndarray
    logcounts: np.ndarray
    ind_static: np.ndarray
    owner: np.ndarray
    slot: np.ndarray
    sizes: np.ndarray
    acc_static: np.ndarray
    labels: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.sizes)

    @property
    def kmax(self) -> int:
        return int(self.sizes.max())

    def kmask(self) -> np.ndarray:
        return np.arange(self.kmax)[None, :] < self.sizes[:, None]


def make_batch(encoded: list[EncodedSample]) -> Batch:
    sizes = np.array([e.size for e in encoded], dtype=np.int64)
    return Batch(
        codes=np.concatenate([e.codes for e in encoded]),
        lens=np.concatenate([e.lens for e in encoded]),
        logdt=np.concatenate([e.logdt for e in encoded]),
        logcounts=np.concatenate([e.logcounts for e in encoded]),
        ind_static=np.concatenate([e.ind_static for e in encoded]),
        owner=np.repeat(np.arange(len(encoded)), sizes),
        slot=np.concatenate([np.arange(n) for n in sizes]),
        sizes=sizes,
        acc_static=np.stack([e.acc_static for e in encoded]),
        labels=np.array([e.label for e in encoded]),
    )
