from dataclasses import replace

import numpy as np
import pytest

from groupscore import han
from groupscore.evaluation import AUCUndefinedError, auc
from groupscore.features import StaticEncoder, encode_sample, make_batch
from groupscore.ingest import build_all_windows
from groupscore.synthgen import SynthConfig, generate
from groupscore.trainer import (
    TrainConfig,
    grid_search,
    load_model,
    parse_key_values,
    save_model,
    train,
)

FAST = dict(activity_hidden=6, week_hidden=4, batch_size=8)


@pytest.fixture(scope="module")
def samples():
    ds, _ = generate(SynthConfig(n_accounts=24, seed=8, conversion_rate=0.4))
    return [s for ws in build_all_windows(ds).values() for s in ws]


def two_accounts(samples):
    pos = next(s for s in samples if s.label)
    neg_acc = next(s.account_id for s in samples if s.account_id != pos.account_id and not s.label)
    return [s for s in samples if s.account_id in (pos.account_id, neg_acc)]


def test_two_account_descent(samples):
    toy = two_accounts(samples)
    res = train(toy, TrainConfig(epochs=50, weight_penalty=5, **FAST))
    assert len(res.loss_curve) == 50
    assert res.loss_curve[-1] < res.loss_curve[0]


def test_same_seed_same_curve_and_params(samples):
    cfg = TrainConfig(epochs=3, seed=4, aggregator="fnn", **FAST)
    a, b = train(samples, cfg), train(samples, cfg)
    assert a.loss_curve == b.loss_curve
    for k in a.scorer.params:
        np.testing.assert_array_equal(a.scorer.params[k], b.scorer.params[k])
    c = train(samples, replace(cfg, seed=5))
    assert c.loss_curve != a.loss_curve


def test_no_positive_samples_is_an_error(samples):
    with pytest.raises(ValueError, match="no positive"):
        train([s for s in samples if not s.label], TrainConfig(epochs=1, **FAST))
    with pytest.raises(ValueError, match="empty"):
        train([], TrainConfig(epochs=1))


def test_config_validation_and_text_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(weight_penalty=0.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    cfg = TrainConfig(aggregator="noisy_or", use_time_deltas=True, seed=9)
    assert TrainConfig.from_mapping(parse_key_values(cfg.to_text())) == cfg
    assert TrainConfig(baseline=1).aggregator == "mean"
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_mapping({"momentum": "0.9"})


def test_parse_key_values_comments_and_errors():
    assert parse_key_values("# c\nepochs = 5  # five\n\nseed=1\n") == {"epochs": "5", "seed": "1"}
    with pytest.raises(ValueError, match="cfg:2"):
        parse_key_values("epochs=5\nbogus\n", "cfg")


def test_weight_penalty_is_linear_in_positive_terms(samples):
    enc = StaticEncoder.fit(samples)
    cfg = TrainConfig(**FAST).model_config(enc)
    params = han.init_params(cfg, 0)
    pos = [encode_sample(s, enc) for s in samples if s.label][:3]
    neg = [encode_sample(s, enc) for s in samples if not s.label][:5]
    lp = lambda w: han.batch_loss(params, cfg, make_batch(pos), w, with_grad=False)[0]
    ln = lambda w: han.batch_loss(params, cfg, make_batch(neg), w, with_grad=False)[0]
    assert lp(1000.0) == pytest.approx(2 * lp(500.0), rel=1e-14)
    assert ln(1000.0) == ln(500.0)


def test_grid_runs_four_fits_and_breaks_ties(samples, monkeypatch):
    import groupscore.trainer as tr

    calls = []
    real = tr.train

    def counting(s, cfg, *a, **k):
        calls.append((cfg.activity_hidden, cfg.weight_penalty))
        return real(s, replace(cfg, activity_hidden=4), *a, **k)

    monkeypatch.setattr(tr, "train", counting)
    accs = sorted({s.account_id for s in samples})
    val_ids = set(accs[:8])
    val = [s for s in samples if s.account_id in val_ids]
    fit = [s for s in samples if s.account_id not in val_ids]
    res = grid_search(fit, val, TrainConfig(epochs=1, **FAST))
    assert sorted(calls) == [(40, 500.0), (40, 750.0), (56, 500.0), (56, 750.0)]
    assert len(res.table) == 4
    assert res.best_auc == max(a for _, _, a in res.table)
    first_best = next(row for row in res.table if row[2] == res.best_auc)
    # the stub shrinks the hidden size, so only the penalty identifies the winner
    assert res.best.config.weight_penalty == first_best[1]
    # the table is ordered so the first maximum has the smaller w, then smaller hidden size
    assert [r[:2] for r in res.table] == [(40, 500.0), (56, 500.0), (40, 750.0), (56, 750.0)]


def test_grid_with_single_class_validation_fails(samples):
    neg = [s for s in samples if not s.label]
    with pytest.raises(AUCUndefinedError):
        grid_search(samples, neg[:20], TrainConfig(epochs=1, **FAST), hidden_grid=(4,), weight_grid=(500,))


@pytest.mark.parametrize("agg,baseline", [("m2m_gru_attn", None), ("mean", 1), ("m2m_gru_attn", 2)])
def test_checkpoint_round_trip_preserves_auc(tmp_path, samples, agg, baseline):
    res = train(samples, TrainConfig(epochs=2, aggregator=agg, baseline=baseline, **FAST))
    save_model(tmp_path, res.scorer, {"note": "x"})
    back, header = load_model(tmp_path)
    assert header["note"] == "x" and back.config == res.scorer.config
    a, _ = res.scorer.predict(samples)
    b, _ = back.predict(samples)
    assert np.max(np.abs(a - b)) < 1e-6
    labels = [s.label for s in samples]
    assert abs(auc(a, labels) - auc(b, labels)) < 1e-6


def test_load_rejects_foreign_checkpoint(tmp_path):
    from groupscore import nn

    nn.save_checkpoint(tmp_path, {"x": np.zeros(1)}, {"format": "other"})
    with pytest.raises(ValueError, match="not a model checkpoint"):
        load_model(tmp_path)
