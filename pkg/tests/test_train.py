import json

import numpy as np
import pytest

from hybridasr import numgrad as ng
from hybridasr.model import E2E, unigram_distribution
from hybridasr.optim import Adam, clip_grad_norm, global_norm
from hybridasr.train import (LossBreakdown, TrainConfig, TrainingDivergedError, Utterance, fit, hash_fraction,
                             make_batches, multiobjective_loss, split_by_hash)

from conftest import tiny_model_config


def utterances(rng, n, d=5, v=4):
    out = []
    for i in range(n):
        t = int(rng.integers(4, 10))
        y = list(rng.integers(1, v - 1, size=int(rng.integers(1, 3))))
        out.append(Utterance(f"utt{i:03d}", rng.normal(size=(t, d)), y))
    return out


def test_alpha_endpoints_and_breakdown_identity(rng):
    cfg_m = tiny_model_config(subsample=(2,), precision="double", init_scale=0.3)
    model = E2E(cfg_m)
    batch = utterances(rng, 3)
    u = unigram_distribution([b.target for b in batch], 4)
    b0 = multiobjective_loss(batch, model, TrainConfig(alpha=0.0), u)
    b1 = multiobjective_loss(batch, model, TrainConfig(alpha=1.0), u)
    bh = multiobjective_loss(batch, model, TrainConfig(alpha=0.5), u)
    assert b0.L.item() == b0.L_att.item()
    assert b1.L.item() == b1.L_ctc.item()
    assert bh.L.item() == 0.5 * bh.L_ctc.item() + 0.5 * bh.L_att.item()
    assert b0.L_att.item() == bh.L_att.item() and b1.L_ctc.item() == bh.L_ctc.item()


def test_breakdown_arithmetic():
    two, four = ng.Tensor(2.0), ng.Tensor(4.0)
    total = ng.add(ng.scale(two, 0.5), ng.scale(four, 0.5))
    assert LossBreakdown(total, two, four, 1, 1).values()["L"] == 3.0


def test_batch_loss_is_token_weighted_mean_of_utterances(rng):
    model = E2E(tiny_model_config(subsample=(2,), precision="single", init_scale=0.3))
    batch = utterances(rng, 4)
    u = unigram_distribution([b.target for b in batch], 4)
    cfg = TrainConfig()
    full = multiobjective_loss(batch, model, cfg, u)
    ctc_sum = att_sum = 0.0
    for utt in batch:
        one = multiobjective_loss([utt], model, cfg, u)
        ctc_sum += one.L_ctc.item() * one.ctc_tokens
        att_sum += one.L_att.item() * one.att_tokens
    assert abs(full.L_ctc.item() - ctc_sum / full.ctc_tokens) <= 1e-5
    assert abs(full.L_att.item() - att_sum / full.att_tokens) <= 1e-5


def test_infeasible_utterances_are_excluded(rng):
    model = E2E(tiny_model_config(subsample=(2,), precision="double"))
    ok = Utterance("ok", rng.normal(size=(8, 5)), [1, 2])
    bad = Utterance("bad", rng.normal(size=(4, 5)), [1, 1, 2])
    b = multiobjective_loss([ok, bad], model, TrainConfig(smoothing=0.0))
    assert b.excluded == ["bad"] and b.utt_ids == ["ok"]
    assert multiobjective_loss([bad], model, TrainConfig(smoothing=0.0)) is None


def test_clipping_bounds_global_norm():
    rng = np.random.default_rng(0)
    params = [ng.Tensor(rng.normal(size=(3, 3)), requires_grad=True) for _ in range(3)]
    for p in params:
        p.grad = rng.normal(size=p.shape) * 10
    before = clip_grad_norm(params, 5.0)
    assert before > 5.0
    assert global_norm(params) <= 5.0 + 1e-6
    with pytest.raises(ValueError):
        clip_grad_norm(params, 0.0)


def test_adam_first_step_moves_by_lr():
    p = ng.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.3, -2.0])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.2)
    with pytest.raises(ValueError):
        TrainConfig(clip=0)


def test_hash_split_is_deterministic():
    utts = [Utterance(f"u{i}", np.zeros((1, 1)), [1]) for i in range(200)]
    train, valid = split_by_hash(utts, 0.05)
    assert len(train) + len(valid) == 200 and 0 < len(valid) < 30
    assert all(hash_fraction(u.utt_id) < 0.05 for u in valid)
    assert {u.utt_id for u in split_by_hash(list(reversed(utts)), 0.05)[1]} == {u.utt_id for u in valid}
    _, one = split_by_hash(utts[:3], 0.0001)
    assert len(one) == 1


def test_steps_per_epoch(tmp_path, rng):
    utts = [Utterance(f"u{i:03d}", rng.normal(size=(4, 5)), [1]) for i in range(50)]
    assert len(make_batches(utts, 16)) == 4
    cfg_m = tiny_model_config(subsample=(1,), precision="single", init_scale=0.1)
    res = fit(utts, cfg_m, TrainConfig(epochs=1, batch_size=16), tmp_path, valid_utts=utts[:5])
    assert res.steps == 4


def test_fit_writes_metrics_and_is_reproducible(tmp_path, rng):
    utts = utterances(rng, 24)
    cfg_m = tiny_model_config(subsample=(2,), precision="double", init_scale=0.1)
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-2)
    a = fit(utts, cfg_m, cfg, tmp_path / "a", extra={"token_checksum": "x"})
    b = fit(utts, cfg_m, cfg, tmp_path / "b", extra={"token_checksum": "x"})
    rows = [json.loads(line) for line in a.metrics_path.read_text().splitlines()]
    assert [(r["epoch"], r["split"]) for r in rows] == [(e, s) for e in (1, 2, 3) for s in ("train", "valid")]
    assert set(rows[0]) == {"epoch", "split", "L", "L_ctc", "L_att"}
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.best_checkpoint.read_bytes() == b.best_checkpoint.read_bytes()
    assert rows[-2]["L"] < rows[0]["L"]


def test_divergence_reports_batch(tmp_path, rng, monkeypatch):
    import hybridasr.train as tr

    utts = utterances(rng, 4)
    real = tr.multiobjective_loss

    def broken(batch, model, cfg, unigram=None):
        b = real(batch, model, cfg, unigram)
        b.L = ng.Tensor(np.nan)
        return b

    monkeypatch.setattr(tr, "multiobjective_loss", broken)
    with pytest.raises(TrainingDivergedError, match="batch"):
        fit(utts, tiny_model_config(subsample=(2,)), TrainConfig(epochs=1), tmp_path, valid_utts=utts)
