"""Mini-batch Adam training, the hidden-size x weight-penalty grid, model checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import han, nn
from .datamodel import WindowSample
from .features import StaticEncoder, make_batch

log = logging.getLogger(__name__)

HIDDEN_GRID = (40, 56)
WEIGHT_GRID = (500.0, 750.0)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_penalty: float = 500.0
    activity_hidden: int = 40
    week_hidden: int = 20
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    aggregator: str = "m2m_gru_attn"
    use_time_deltas: bool = False
    baseline: int | None = None

    def __post_init__(self):
        for name in ("learning_rate", "activity_hidden", "week_hidden", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_penalty < 1:
            raise ValueError("weight_penalty must be >= 1")
        if self.baseline == 1:
            self.aggregator = "mean"
        elif self.baseline == 2:
            self.aggregator = "m2m_gru_attn"

    def model_config(self, encoder: StaticEncoder) -> han.ModelConfig:
        return han.ModelConfig(
            aggregator=self.aggregator,
            activity_hidden=self.activity_hidden,
            week_hidden=self.week_hidden,
            use_time_deltas=self.use_time_deltas,
            ind_static_dim=encoder.individual_dim,
            acc_static_dim=encoder.account_dim,
            baseline=self.baseline,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {
            "learning_rate": float,
            "weight_penalty": float,
            "activity_hidden": int,
            "week_hidden": int,
            "epochs": int,
            "batch_size": int,
            "seed": int,
            "aggregator": str,
            "use_time_deltas": _parse_bool,
            "baseline": lambda v: None if v in ("", "None", None) else int(v),
        }
        unknown = set(values) - set(kinds)
        if unknown:
            raise ValueError(f"unknown training settings: {sorted(unknown)}")
        return cls(**{k: kinds[k](v) for k, v in values.items()})


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{i}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class TrainResult:
    scorer: han.Scorer
    config: TrainConfig
    loss_curve: list[float] = field(default_factory=list)


def train(samples: list[WindowSample], config: TrainConfig, encoder: StaticEncoder | None = None, epoch_hook=None):
    """Fit a model from scratch; returns the scorer and the per-epoch mean loss.

    ``epoch_hook(epoch, scorer, loss)`` is called after every epoch.
    """
    if not samples:
        raise ValueError("empty training set")
    if not any(s.label for s in samples):
        raise ValueError("training set has no positive samples; the weighted loss is degenerate")
    encoder = encoder or StaticEncoder.fit(samples)
    mconf = config.model_config(encoder)
    params = han.init_params(mconf, config.seed)
    scorer = han.Scorer(mconf, params, encoder)
    encoded = scorer.encode(samples)
    opt = nn.Adam(params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    curve = []
    n = len(encoded)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = make_batch([encoded[i] for i in idx])
            loss, grads, _ = han.batch_loss(params, mconf, batch, config.weight_penalty)
            opt.step(grads)
            total += loss * len(idx)
        curve.append(total / n)
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, curve[-1])
        if epoch_hook is not None:
            epoch_hook(epoch, scorer, curve[-1])
    return TrainResult(scorer, config, curve)


@dataclass
class GridResult:
    best: TrainResult
    best_auc: float
    table: list[tuple[int, float, float]]  # (activity_hidden, weight_penalty, validation auc)


def grid_search(
    train_samples: list[WindowSample],
    validation_samples: list[WindowSample],
    base: TrainConfig,
    hidden_grid=HIDDEN_GRID,
    weight_grid=WEIGHT_GRID,
) -> GridResult:
    """Exhaustive grid; the best validation AUC wins, ties going to smaller
    weight penalty, then smaller hidden size."""
    from .evaluation import auc

    labels = np.array([s.label for s in validation_samples], dtype=float)
    best = None
    table = []
    for w in sorted(weight_grid):
        for hidden in sorted(hidden_grid):
            cfg = replace(base, activity_hidden=hidden, weight_penalty=w)
            result = train(train_samples, cfg)
            scores, _ = result.scorer.predict(validation_samples)
            score = auc(scores, labels)
            table.append((hidden, w, score))
            log.info("grid hidden=%d w=%g validation auc %.4f", hidden, w, score)
            if best is None or score > best[1]:
                best = (result, score)
    return GridResult(best[0], best[1], table)


# ---------------------------------------------------------------- checkpoints


def save_model(directory, scorer: han.Scorer, extra: dict | None = None) -> None:
    header = {
        "format": "groupscore-checkpoint/1",
        "model": scorer.config.to_dict(),
        "encoder": scorer.encoder.to_dict(),
    }
    header.update(extra or {})
    nn.save_checkpoint(directory, scorer.params, header)


def load_model(directory) -> tuple[han.Scorer, dict]:
    params, header = nn.load_checkpoint(directory)
    if header.get("format") != "groupscore-checkpoint/1":
        raise ValueError(f"{directory}: not a model checkpoint")
    mconf = han.ModelConfig(**header["model"])
    encoder = StaticEncoder.from_dict(header["encoder"])
    return han.Scorer(mconf, params, encoder), header
