"""Three-level hierarchical attention network with pluggable group aggregation.

Activity layer: embedded activity codes of one week -> GRU -> attention.
Week layer: the window's week vectors -> GRU -> attention (inactive weeks masked).
Personalized layer: one shared affine map from [week context, individual
statics] to the individual's logit. Aggregation combines the individuals
into the account probability.

Neural aggregators read each individual's representation together with its
personalized logit, so the individual scores stay on the gradient path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .datamodel import N_ACTIVITIES, WeekSequence, WindowSample
from .features import Batch, EncodedSample, StaticEncoder, encode_sample, make_batch

NEURAL_AGGREGATORS = ("fnn", "m2o_gru", "m2m_gru_attn")
STATISTICAL_AGGREGATORS = ("max_prob", "noisy_or", "geo_mean")
AGGREGATORS = NEURAL_AGGREGATORS + STATISTICAL_AGGREGATORS


@dataclass
class ModelConfig:
    aggregator: str = "m2m_gru_attn"
    activity_hidden: int = 40
    week_hidden: int = 20
    window_len: int = 4
    seq_len: int = 9
    use_time_deltas: bool = False
    embed_dim: int = 16
    agg_hidden: int = 20
    fnn_hidden: tuple[int, int] = (32, 16)
    ind_static_dim: int = 6
    acc_static_dim: int = 2
    # 1: individual loss, group score = mean of individual scores
    # 2: weekly activity frequencies replace the activity layer
    baseline: int | None = None

    def __post_init__(self):
        self.fnn_hidden = tuple(self.fnn_hidden)
        if self.baseline == 1:
            if self.aggregator != "mean":
                raise ValueError("baseline 1 uses the 'mean' group score")
        elif self.baseline == 2:
            if self.aggregator != "m2m_gru_attn":
                raise ValueError("baseline 2 aggregates with m2m_gru_attn")
        elif self.baseline is not None:
            raise ValueError(f"unknown baseline {self.baseline}")
        elif self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATORS}")
        for name in ("activity_hidden", "week_hidden", "window_len", "seq_len", "embed_dim", "agg_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def frequency_input(self) -> bool:
        return self.baseline == 2

    @property
    def individual_loss(self) -> bool:
        return self.baseline == 1

    @property
    def week_input_dim(self) -> int:
        return N_ACTIVITIES if self.frequency_input else self.activity_hidden

    @property
    def rep_dim(self) -> int:
        return self.week_hidden + self.ind_static_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fnn_hidden"] = list(self.fnn_hidden)
        return d


def init_params(config: ModelConfig, seed: int = 0) -> nn.Params:
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    if not config.frequency_input:
        p["embed"] = nn.uniform_init(rng, (N_ACTIVITIES, config.embed_dim), config.embed_dim)
        act_in = config.embed_dim + int(config.use_time_deltas)
        p.update(nn.init_gru(rng, "act_gru", act_in, config.activity_hidden))
        p.update(nn.init_attention(rng, "act_att", config.activity_hidden))
    p.update(nn.init_gru(rng, "week_gru", config.week_input_dim, config.week_hidden))
    p.update(nn.init_attention(rng, "week_att", config.week_hidden))
    p.update(nn.init_dense(rng, "personal", config.rep_dim, 1))
    agg_in = config.rep_dim + 1
    if config.aggregator == "fnn":
        h1, h2 = config.fnn_hidden
        p.update(nn.init_dense(rng, "fnn1", agg_in + config.acc_static_dim, h1))
        p.update(nn.init_dense(rng, "fnn2", h1, h2))
        p.update(nn.init_dense(rng, "fnn3", h2, 1))
    elif config.aggregator in ("m2o_gru", "m2m_gru_attn"):
        p.update(nn.init_gru(rng, "agg_gru", agg_in, config.agg_hidden))
        if config.aggregator == "m2m_gru_attn":
            p.update(nn.init_attention(rng, "agg_att", config.agg_hidden))
        p.update(nn.init_dense(rng, "head", config.agg_hidden + config.acc_static_dim, 1))
    return p


@dataclass
class Output:
    account_prob: np.ndarray  # (B,)
    ind_logit: np.ndarray  # (M,)
    ind_prob: np.ndarray  # (M,)
    activity_attention: np.ndarray | None  # (n_active_weeks, S)
    active_index: np.ndarray | None  # flat (M*W) indices of active weeks
    week_attention: np.ndarray  # (M, W)
    agg_attention: np.ndarray | None  # (B, Kmax)


@dataclass
class _Tape:
    batch: Batch
    out: Output
    caches: dict = field(default_factory=dict)


# ------------------------------------------------------------------- layers


def _activity_layer(params, config, batch: Batch, tape: _Tape):
    M, W, S = batch.codes.shape
    flat_lens = batch.lens.reshape(-1)
    idx = np.flatnonzero(flat_lens > 0)
    rep = np.zeros((M * W, config.activity_hidden))
    if idx.size == 0:
        tape.caches["act"] = (idx, None, None, None)
        return rep, idx, np.zeros((0, S))
    mask = np.arange(S)[None, :] < flat_lens[idx, None]
    codes = np.where(mask, batch.codes.reshape(-1, S)[idx], 0)
    X = params["embed"][codes]
    if config.use_time_deltas:
        X = np.concatenate([X, batch.logdt.reshape(-1, S)[idx][..., None]], axis=2)
    states, gcache = nn.gru_forward(X, mask, params["act_gru.W"], params["act_gru.U"], params["act_gru.b"])
    ctx, alpha, acache = nn.attention_forward(
        states, mask, params["act_att.W"], params["act_att.b"], params["act_att.u"]
    )
    rep[idx] = ctx
    tape.caches["act"] = (idx, (codes, mask), gcache, acache)
    return rep, idx, alpha


def _activity_backward(params, config, drep, tape: _Tape, grads):
    idx, cm, gcache, acache = tape.caches["act"]
    grads["embed"] = np.zeros_like(params["embed"])
    for k in ("act_gru.W", "act_gru.U", "act_gru.b", "act_att.W", "act_att.b", "act_att.u"):
        grads[k] = np.zeros_like(params[k])
    if idx.size == 0:
        return
    codes, mask = cm
    dstates, grads["act_att.W"], grads["act_att.b"], grads["act_att.u"] = nn.attention_backward(drep[idx], acache)
    dX, grads["act_gru.W"], grads["act_gru.U"], grads["act_gru.b"] = nn.gru_backward(dstates, gcache)
    E = config.embed_dim
    onehot = ((codes[..., None] == np.arange(N_ACTIVITIES)) & mask[..., None]).reshape(-1, N_ACTIVITIES)
    grads["embed"] = onehot.T.astype(float) @ dX[..., :E].reshape(-1, E)


def pool_logits(logits, kmask, kind: str):
    """Statistical group pooling of individual logits (B, Kmax) under ``kmask``.

    Works in log space: noisy-or as 1 - exp(-sum softplus(P)), the geometric
    mean as exp(mean(log sigmoid(P))). Returns (probabilities, backward cache).
    """
    P = np.asarray(logits, dtype=float)
    kmask = np.asarray(kmask, dtype=bool)
    sizes = kmask.sum(axis=1)
    if np.any(sizes == 0):
        raise ValueError("every group needs at least one individual")
    p = nn.sigmoid(P)
    if kind == "max_prob":
        arg = np.argmax(np.where(kmask, P, -np.inf), axis=1)
        return p[np.arange(len(P)), arg], arg
    if kind == "noisy_or":
        S = np.where(kmask, nn.softplus(P), 0.0).sum(axis=1)
        return -np.expm1(-S), S
    if kind == "geo_mean":
        return np.exp(np.where(kmask, -nn.softplus(-P), 0.0).sum(axis=1) / sizes), None
    if kind == "mean":
        return np.where(kmask, p, 0.0).sum(axis=1) / sizes, None
    raise ValueError(f"{kind!r} is not a statistical aggregator")


def forward(params: nn.Params, config: ModelConfig, batch: Batch) -> tuple[Output, _Tape]:
    """Batched forward pass; the tape feeds :func:`backward`."""
    M, W, S = batch.codes.shape
    tape = _Tape(batch, None)
    if config.frequency_input:
        week_rep = batch.logcounts.reshape(M * W, N_ACTIVITIES)
        act_idx, act_alpha = None, None
    else:
        week_rep, act_idx, act_alpha = _activity_layer(params, config, batch, tape)

    X2 = week_rep.reshape(M, W, -1)
    full = np.ones((M, W), dtype=bool)
    H2, g2 = nn.gru_forward(X2, full, params["week_gru.W"], params["week_gru.U"], params["week_gru.b"])
    active = batch.lens > 0
    ctx2, alpha2, a2 = nn.attention_forward(H2, active, params["week_att.W"], params["week_att.b"], params["week_att.u"])
    tape.caches["week"] = (g2, a2)

    o = np.concatenate([ctx2, batch.ind_static], axis=1)
    P = (o @ params["personal.W"] + params["personal.b"])[:, 0]
    p = nn.sigmoid(P)
    tape.caches["personal"] = o

    B, K = batch.n_samples, batch.kmax
    kmask = batch.kmask()
    agg_alpha = None
    agg = config.aggregator
    if agg in NEURAL_AGGREGATORS:
        V = np.concatenate([o, P[:, None]], axis=1)
        packed = np.zeros((B, K, V.shape[1]))
        packed[batch.owner, batch.slot] = V
        if agg == "fnn":
            pooled = packed.sum(axis=1) / batch.sizes[:, None]
            x1 = np.concatenate([pooled, batch.acc_static], axis=1)
            a1 = x1 @ params["fnn1.W"] + params["fnn1.b"]
            h1 = np.maximum(a1, 0.0)
            a2_ = h1 @ params["fnn2.W"] + params["fnn2.b"]
            h2 = np.maximum(a2_, 0.0)
            z = (h2 @ params["fnn3.W"] + params["fnn3.b"])[:, 0]
            tape.caches["agg"] = (x1, a1, h1, a2_, h2)
        else:
            states, ga = nn.gru_forward(packed, kmask, params["agg_gru.W"], params["agg_gru.U"], params["agg_gru.b"])
            if agg == "m2o_gru":
                summary = states[:, -1]  # frozen past the last real individual
                aa = None
            else:
                summary, agg_alpha, aa = nn.attention_forward(
                    states, kmask, params["agg_att.W"], params["agg_att.b"], params["agg_att.u"]
                )
            xh = np.concatenate([summary, batch.acc_static], axis=1)
            z = (xh @ params["head.W"] + params["head.b"])[:, 0]
            tape.caches["agg"] = (states.shape, ga, aa, xh)
        prob = nn.sigmoid(z)
    else:
        Pg = np.zeros((B, K))
        Pg[batch.owner, batch.slot] = P
        prob, tape.caches["agg"] = pool_logits(Pg, kmask, agg)

    out = Output(prob, P, p, act_alpha, act_idx, alpha2, agg_alpha)
    tape.out = out
    return out, tape


def backward(
    params: nn.Params,
    config: ModelConfig,
    tape: _Tape,
    d_account: np.ndarray | None = None,
    d_individual: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(account prob) and/or dL/d(individual probs)."""
    batch, out = tape.batch, tape.out
    M, W, S = batch.codes.shape
    B, K = batch.n_samples, batch.kmax
    grads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}
    p, prob = out.ind_prob, out.account_prob
    dP = np.zeros(M)
    do = np.zeros((M, config.rep_dim))
    if d_individual is not None:
        dP += d_individual * p * (1.0 - p)

    agg = config.aggregator
    if d_account is not None:
        if agg in NEURAL_AGGREGATORS:
            dz = d_account * prob * (1.0 - prob)
            if agg == "fnn":
                x1, a1, h1, a2, h2 = tape.caches["agg"]
                dz2 = dz[:, None]
                grads["fnn3.W"] = h2.T @ dz2
                grads["fnn3.b"] = dz2.sum(axis=0)
                da2 = (dz2 @ params["fnn3.W"].T) * (a2 > 0)
                grads["fnn2.W"] = h1.T @ da2
                grads["fnn2.b"] = da2.sum(axis=0)
                da1 = (da2 @ params["fnn2.W"].T) * (a1 > 0)
                grads["fnn1.W"] = x1.T @ da1
                grads["fnn1.b"] = da1.sum(axis=0)
                dpooled = (da1 @ params["fnn1.W"].T)[:, : config.rep_dim + 1]
                dpacked = np.broadcast_to((dpooled / batch.sizes[:, None])[:, None, :], (B, K, dpooled.shape[1]))
            else:
                shape, ga, aa, xh = tape.caches["agg"]
                dz2 = dz[:, None]
                grads["head.W"] = xh.T @ dz2
                grads["head.b"] = dz2.sum(axis=0)
                dsummary = (dz2 @ params["head.W"].T)[:, : config.agg_hidden]
                if agg == "m2o_gru":
                    dstates = np.zeros(shape)
                    dstates[:, -1] = dsummary
                else:
                    dstates, grads["agg_att.W"], grads["agg_att.b"], grads["agg_att.u"] = nn.attention_backward(
                        dsummary, aa
                    )
                dpacked, grads["agg_gru.W"], grads["agg_gru.U"], grads["agg_gru.b"] = nn.gru_backward(dstates, ga)
            dV = dpacked[batch.owner, batch.slot]
            do += dV[:, : config.rep_dim]
            dP += dV[:, config.rep_dim]
        else:
            own = batch.owner
            if agg == "max_prob":
                arg = tape.caches["agg"]
                winners = np.flatnonzero(batch.slot == arg[own])
                dP[winners] += d_account[own[winners]] * p[winners] * (1.0 - p[winners])
            elif agg == "noisy_or":
                S_ = tape.caches["agg"]
                dP += d_account[own] * np.exp(-S_)[own] * p
            elif agg == "geo_mean":
                dP += d_account[own] * prob[own] * (1.0 - p) / batch.sizes[own]
            else:
                dP += d_account[own] * p * (1.0 - p) / batch.sizes[own]

    o = tape.caches["personal"]
    grads["personal.W"] = o.T @ dP[:, None]
    grads["personal.b"] = np.array([dP.sum()])
    do += dP[:, None] * params["personal.W"][:, 0][None, :]

    g2, a2 = tape.caches["week"]
    dH2, grads["week_att.W"], grads["week_att.b"], grads["week_att.u"] = nn.attention_backward(
        do[:, : config.week_hidden], a2
    )
    dX2, grads["week_gru.W"], grads["week_gru.U"], grads["week_gru.b"] = nn.gru_backward(dH2, g2)
    if not config.frequency_input:
        _activity_backward(params, config, dX2.reshape(M * W, -1), tape, grads)
    return grads


# ---------------------------------------------------------- losses per batch


def batch_loss(params, config: ModelConfig, batch: Batch, w: float, with_grad: bool = True):
    """Mean per-sample weighted cross-entropy and its parameter gradients.

    Group models score the account probability. Baseline 1 copies the
    account label to every individual and averages their losses per sample.
    """
    out, tape = forward(params, config, batch)
    y = batch.labels
    B = batch.n_samples
    if config.individual_loss:
        yk = y[batch.owner]
        per = nn.weighted_bce(out.ind_prob, yk, w) / batch.sizes[batch.owner]
        loss = float(per.sum() / B)
        if not with_grad:
            return loss, None, out
        d_ind = nn.weighted_bce_grad(out.ind_prob, yk, w) / batch.sizes[batch.owner] / B
        return loss, backward(params, config, tape, d_individual=d_ind), out
    loss = float(nn.weighted_bce(out.account_prob, y, w).mean())
    if not with_grad:
        return loss, None, out
    d_acc = nn.weighted_bce_grad(out.account_prob, y, w) / B
    return loss, backward(params, config, tape, d_account=d_acc), out


# -------------------------------------------------------------- scorer facade


@dataclass
class Scorer:
    """A trained (or freshly initialised) model with its static encoder."""

    config: ModelConfig
    params: nn.Params
    encoder: StaticEncoder

    def encode(self, samples: list[WindowSample]) -> list[EncodedSample]:
        return [encode_sample(s, self.encoder) for s in samples]

    def predict_encoded(self, encoded: list[EncodedSample], batch_size: int = 256):
        """Account probabilities (n,) and per-sample individual score arrays."""
        probs, inds = [], []
        for i in range(0, len(encoded), batch_size):
            chunk = encoded[i : i + batch_size]
            batch = make_batch(chunk)
            out, _ = forward(self.params, self.config, batch)
            probs.append(out.account_prob)
            bounds = np.cumsum(batch.sizes)[:-1]
            inds.extend(np.split(out.ind_prob, bounds))
        return (np.concatenate(probs) if probs else np.zeros(0)), inds

    def predict(self, samples: list[WindowSample], batch_size: int = 256):
        return self.predict_encoded(self.encode(samples), batch_size)


# -------------------------------------------------- single-instance helpers


def _one_week_batch(seq: WeekSequence, encoder_dim: int) -> Batch:
    S = len(seq.codes)
    return Batch(
        codes=np.asarray(seq.codes, dtype=np.int64).reshape(1, 1, S),
        lens=np.array([[seq.valid_len]]),
        logdt=np.log1p(np.asarray(seq.deltas, dtype=float)).reshape(1, 1, S),
        logcounts=np.log1p(np.asarray(seq.counts, dtype=float)).reshape(1, 1, -1),
        ind_static=np.zeros((1, encoder_dim)),
        owner=np.zeros(1, dtype=np.int64),
        slot=np.zeros(1, dtype=np.int64),
        sizes=np.ones(1, dtype=np.int64),
        acc_static=np.zeros((1, 2)),
        labels=np.zeros(1),
    )


def encode_week(seq: WeekSequence, config: ModelConfig, params: nn.Params) -> np.ndarray:
    """Activity-layer representation of one week (zero vector when inactive)."""
    batch = _one_week_batch(seq, config.ind_static_dim)
    if config.frequency_input:
        return batch.logcounts[0, 0]
    rep, _, _ = _activity_layer(params, config, batch, _Tape(batch, None))
    return rep[0]


def encode_individual(week_reps, params: nn.Params, active=None) -> tuple[np.ndarray, np.ndarray]:
    """Week-layer context of one individual from (W, R) week vectors.

    ``active`` masks inactive weeks out of the attention; by default a week
    is active when its vector is nonzero. Returns (context, attention weights).
    """
    X = np.asarray(week_reps, dtype=float)[None]
    if active is None:
        active = np.any(X[0] != 0.0, axis=1)
    mask = np.asarray(active, dtype=bool)[None]
    H, _ = nn.gru_forward(X, np.ones_like(mask), params["week_gru.W"], params["week_gru.U"], params["week_gru.b"])
    ctx, alpha, _ = nn.attention_forward(H, mask, params["week_att.W"], params["week_att.b"], params["week_att.u"])
    return ctx[0], alpha[0]


def personalize(rep, params: nn.Params) -> tuple[float, float]:
    """(logit, probability) of one individual's representation o_k."""
    logit = float(np.asarray(rep, dtype=float) @ params["personal.W"][:, 0] + params["personal.b"][0])
    return logit, float(nn.sigmoid(logit))


@dataclass
class AccountResult:
    account_prob: float
    individual_scores: dict[str, float]
    individual_logits: dict[str, float]
    week_attention: dict[str, np.ndarray]
    agg_attention: dict[str, float] | None


def forward_account(sample: WindowSample, config: ModelConfig, params: nn.Params, encoder: StaticEncoder):
    """Score one window: account probability, individual scores and attention."""
    if not sample.individuals:
        raise ValueError(f"sample {sample.account_id}@{sample.target_week} has no individuals")
    enc = encode_sample(sample, encoder)
    out, _ = forward(params, config, make_batch([enc]))
    ids = enc.individual_ids
    agg_att = None
    if out.agg_attention is not None:
        agg_att = {i: float(a) for i, a in zip(ids, out.agg_attention[0])}
    return AccountResult(
        float(out.account_prob[0]),
        {i: float(v) for i, v in zip(ids, out.ind_prob)},
        {i: float(v) for i, v in zip(ids, out.ind_logit)},
        {i: out.week_attention[k] for k, i in enumerate(ids)},
        agg_att,
    )


# ------------------------------------------------- aggregator closed forms


def agg_max(p) -> float:
    return float(np.max(p))


def agg_noisy_or(p) -> float:
    return float(1.0 - np.prod(1.0 - np.asarray(p, dtype=float)))


def agg_geo_mean(p) -> float:
    p = np.asarray(p, dtype=float)
    return float(np.prod(p) ** (1.0 / p.size))
