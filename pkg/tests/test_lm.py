import math

import numpy as np
import pytest

from hybridasr import numgrad as ng
from hybridasr.dataio import IngestionError
from hybridasr.lm import CharRnnLm, LmConfig, lm_step, lm_train, perplexity, renormalize_without_blank
from hybridasr.numgrad import ContractError

from conftest import tiny_lm


def test_step_is_a_log_distribution_and_deterministic():
    lm = tiny_lm(v=6)
    s = lm.initial_state(1)
    a, s1 = lm_step(lm, s, 5)
    b, _ = lm_step(lm, s, 5)
    assert abs(np.logaddexp.reduce(a)) <= 1e-6
    assert np.array_equal(a, b)
    c, _ = lm_step(lm, s1, 2)
    assert abs(np.logaddexp.reduce(c)) <= 1e-6
    with pytest.raises(ContractError):
        lm_step(lm, s, 6)


def test_chain_rule_matches_sequence_nll():
    lm = tiny_lm(v=6)
    seq = [2, 3, 3, 1, 4]
    state, total, prev = lm.initial_state(1), 0.0, lm.eos
    for c in seq + [lm.eos]:
        lp, state = lm_step(lm, state, prev)
        total += lp[c]
        prev = c
    nll, counts = lm.sequence_nll([seq])
    assert abs(total + nll.item()) <= 1e-6
    assert counts == [len(seq) + 1]


def test_gradients_match_central_differences():
    lm = CharRnnLm(5, LmConfig(embed=3, units=4, layers=2, precision="double", init_scale=0.5, seed=2))
    seqs = [[1, 2, 3], [3, 3]]
    worst = 0.0
    for name, original in list(lm.params.items()):
        def f(x, name=name, original=original):
            lm.params[name] = x
            try:
                return ng.reduce_sum(lm.sequence_nll(seqs)[0])
            finally:
                lm.params[name] = original

        worst = max(worst, ng.grad_check(f, original.data, eps=1e-2, stencil=4))
    assert worst <= 1e-6


def test_untrained_perplexity_near_vocabulary_size():
    v = 8
    lm = CharRnnLm(v, LmConfig(embed=8, units=16, layers=2, precision="double"))
    rng = np.random.default_rng(0)
    corpus = [list(rng.integers(1, v - 1, size=6)) for _ in range(20)]
    ppl = perplexity(lm, corpus)
    assert v / 1.5 <= ppl <= v * 1.5


def test_training_learns_alternation():
    corpus = [[2, 3] * 6 for _ in range(16)]
    cfg = LmConfig(embed=8, units=16, layers=1, epochs=15, batch_size=8, bptt=5, lr=1e-2, precision="double")
    lm, ppl = lm_train(corpus, 5, cfg)
    assert ppl[-1] < ppl[0]
    assert all(p >= 1.0 for p in ppl)
    s = lm.initial_state(1)
    _, s = lm_step(lm, s, 4)
    lp, _ = lm_step(lm, s, 2)
    assert lp[3] > lp[2]  # p(b|a) > p(a|a)


def test_memorizes_single_sequence():
    seq = [2, 3, 4]
    cfg = LmConfig(embed=8, units=16, layers=1, epochs=50, batch_size=1, lr=1e-2, precision="double")
    lm, _ = lm_train([seq], 6, cfg)
    state, prev, out = lm.initial_state(1), lm.eos, []
    for _ in range(len(seq) + 1):
        lp, state = lm_step(lm, state, prev)
        prev = int(np.argmax(lp))
        out.append(prev)
    assert out == seq + [lm.eos]


def test_empty_corpus_rejected():
    with pytest.raises(IngestionError):
        lm_train([], 5, LmConfig(epochs=1))


def test_renormalization_excludes_blank():
    lp = np.log(np.array([0.5, 0.25, 0.25]))
    out = renormalize_without_blank(lp)
    assert out[0] == -np.inf
    np.testing.assert_allclose(np.exp(out[1:]), [0.5, 0.5])


def test_checkpoint_roundtrip(tmp_path):
    lm = tiny_lm(v=6)
    lm.save(tmp_path / "lm.ckpt", {"token_checksum": "abc"})
    loaded, manifest = CharRnnLm.load(tmp_path / "lm.ckpt")
    assert manifest["model_type"] == "lm" and manifest["token_checksum"] == "abc"
    a, _ = lm_step(lm, lm.initial_state(1), 2)
    b, _ = lm_step(loaded, loaded.initial_state(1), 2)
    assert np.array_equal(a, b)
    assert math.isfinite(float(a.sum()))
