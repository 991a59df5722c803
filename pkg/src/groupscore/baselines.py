"""The two comparison models.

Baseline 1 keeps the activity and week layers and the personalized layer but
drops group aggregation: every individual is trained against the account
label and the group score is the mean individual score.

Baseline 2 replaces the activity layer with log(1 + count) weekly
frequency vectors and keeps the many-to-many GRU + attention aggregation.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import han
from .datamodel import ActivityEvent, N_ACTIVITIES
from .features import StaticEncoder
from .ingest import baseline2_featurize

__all__ = [
    "baseline1_config",
    "baseline2_config",
    "baseline1_forward",
    "baseline2_featurize",
    "baseline2_forward",
    "frequency_window",
]


def baseline1_config(base: han.ModelConfig | None = None) -> han.ModelConfig:
    base = base or han.ModelConfig()
    return replace(base, aggregator="mean", baseline=1)


def baseline2_config(base: han.ModelConfig | None = None) -> han.ModelConfig:
    base = base or han.ModelConfig()
    return replace(base, aggregator="m2m_gru_attn", baseline=2)


def baseline1_forward(sample, params, config: han.ModelConfig, encoder: StaticEncoder):
    """(per-individual probabilities, group score) for one window."""
    if config.baseline != 1:
        raise ValueError("config is not a baseline-1 configuration")
    result = han.forward_account(sample, config, params, encoder)
    return result.individual_scores, result.account_prob


def baseline2_forward(sample, params, config: han.ModelConfig, encoder: StaticEncoder) -> float:
    if config.baseline != 2:
        raise ValueError("config is not a baseline-2 configuration")
    return han.forward_account(sample, config, params, encoder).account_prob


def frequency_window(events: list[ActivityEvent], epoch_week: int, target_week: int, window_len: int = 4):
    """(window_len, 9) count matrix for the weeks before ``target_week``;
    inactive weeks are zero rows."""
    counts = dict(baseline2_featurize(events, epoch_week))
    out = np.zeros((window_len, N_ACTIVITIES), dtype=np.int64)
    for i, w in enumerate(range(target_week - window_len, target_week)):
        if w in counts:
            out[i] = counts[w]
    return out
