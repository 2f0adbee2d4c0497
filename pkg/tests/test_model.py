import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridasr import numgrad as ng
from hybridasr.ctc import ctc_nll
from hybridasr.model import (E2E, EncoderConfig, LengthError, ModelConfig, check_unigram, encoder_output_length,
                             unigram_distribution)
from hybridasr.numgrad import ContractError, Tensor

from conftest import tiny_model, tiny_model_config


def keep_every(t, schedule):
    # independent formulation: literally keep indices 0, s, 2s, ...
    idx = list(range(t))
    for s in schedule:
        idx = idx[::s]
    return len(idx)


def feats(rng, lengths, d=5, scale=1.0):
    return [rng.normal(size=(t, d)) * scale for t in lengths]


def test_default_schedule_lengths():
    cfg = EncoderConfig()
    assert encoder_output_length(16, cfg) == 4
    assert encoder_output_length(17, cfg) == 5
    assert cfg.total_subsampling == 4
    assert encoder_output_length(17, EncoderConfig(kind="vggblstm", subsample=(1, 1, 1, 1))) == 4


@settings(max_examples=100, deadline=None)
@given(t=st.integers(1, 200), schedule=st.lists(st.integers(1, 3), min_size=1, max_size=5))
def test_length_formula_matches_keep_every(t, schedule):
    cfg = EncoderConfig(num_layers=len(schedule), subsample=tuple(schedule))
    assert encoder_output_length(t, cfg) == keep_every(t, schedule)


def test_encoder_output_lengths_follow_formula(rng):
    model = tiny_model(subsample=(2, 1, 2))
    enc = model.encode(feats(rng, [17, 9, 4]))
    assert enc.output_lengths == [keep_every(t, (2, 1, 2)) for t in (17, 9, 4)]
    assert enc.h.shape[:2] == (3, 5)
    vgg = tiny_model(kind="vggblstm", idim=8)
    enc = vgg.encode(feats(rng, [17, 8], d=8))
    assert enc.output_lengths == [4, 2]


def test_too_short_input_raises(rng):
    with pytest.raises(LengthError):
        tiny_model(kind="vggblstm", idim=8).encode(feats(rng, [3], d=8))
    with pytest.raises(ContractError):
        tiny_model().encode(feats(rng, [4], d=7))


def test_zero_params_zero_input_gives_zero_encoding():
    model = tiny_model(subsample=(1, 2))
    zeros = {k: np.zeros_like(v) for k, v in model.numpy_params().items()}
    enc = E2E(model.cfg, zeros).encode([np.zeros((6, 5))])
    assert not np.any(enc.h.data)


def test_singleton_attention_for_both_kinds(rng):
    for att in ("location", "dot"):
        model = tiny_model(att=att)
        enc = model.encode(feats(rng, [1]))
        actx = model.attention_context(enc)
        ctx, w = model.attend(actx, Tensor(rng.normal(size=(1, 4))), Tensor(np.ones((1, 1))))
        np.testing.assert_allclose(w.data, [[1.0]])
        np.testing.assert_allclose(ctx.data, enc.h.data[:, 0])


def test_dot_attention_equal_scores_is_uniform(rng):
    model = tiny_model(att="dot")
    enc = model.encode(feats(rng, [5]))
    actx = model.attention_context(enc)
    _, w = model.attend(actx, Tensor(np.zeros((1, 4))), Tensor(np.full((1, 5), 0.2)))
    np.testing.assert_allclose(w.data, 0.2)


def test_location_attention_rejects_non_distribution(rng):
    model = tiny_model()
    actx = model.attention_context(model.encode(feats(rng, [4])))
    with pytest.raises(ContractError):
        model.attend(actx, Tensor(np.zeros((1, 4))), Tensor(np.full((1, 4), 0.5)))


@pytest.mark.parametrize("att", ["location", "dot"])
def test_attention_weights_are_distributions_over_valid_frames(att, rng):
    model = tiny_model(att=att)
    enc = model.encode(feats(rng, [7, 3]))
    actx = model.attention_context(enc)
    state = model.initial_state(actx)
    for tok in [3, 1, 2, 2]:
        logits, state = model.decoder_step([tok, tok], state, actx)
        w = state.att_w.data
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(w[1, 3:] == 0)
        np.testing.assert_allclose(ng.softmax(logits).data.sum(axis=1), 1.0, atol=1e-12)


def test_decoder_step_is_deterministic_and_validates_ids(rng):
    model = tiny_model()
    actx = model.attention_context(model.encode(feats(rng, [5])))
    s0 = model.initial_state(actx)
    a, _ = model.decoder_step([3], s0, actx)
    b, _ = model.decoder_step([3], s0, actx)
    assert np.array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        model.decoder_step([4], s0, actx)


def test_teacher_forced_product_matches_cross_entropy(rng):
    model = tiny_model()
    enc = model.encode(feats(rng, [6]))
    target = [1, 2, 2]
    actx = model.attention_context(enc)
    state = model.initial_state(actx)
    logp, prev = 0.0, 3
    for c in target + [3]:
        logits, state = model.decoder_step([prev], state, actx)
        logp += ng.log_softmax(logits).data[0, c]
        prev = c
    loss = model.forward_att_loss(enc, [target], smoothing=0.0).item()
    assert abs(math.exp(logp) - math.exp(-loss * (len(target) + 1))) < 1e-12


def test_full_smoothing_against_uniform_at_uniform_logits(rng):
    model = tiny_model(v=6)
    params = model.numpy_params()
    params["dec.out.w"] = np.zeros_like(params["dec.out.w"])
    params["dec.out.b"] = np.zeros_like(params["dec.out.b"])
    model = E2E(model.cfg, params)
    enc = model.encode(feats(rng, [5]))
    loss = model.forward_att_loss(enc, [[1, 2]], smoothing=1.0, unigram=np.full(6, 1 / 6)).item()
    assert abs(loss - math.log(6)) < 1e-12


def test_unigram_validation():
    with pytest.raises(ContractError):
        check_unigram(np.array([0.5, 0.6]), 2)
    with pytest.raises(ContractError):
        check_unigram(None, 2)
    u = unigram_distribution([[1, 2, 2], [2]], 4)
    np.testing.assert_allclose(u, [0, 1 / 6, 3 / 6, 2 / 6])


def test_batch_permutation_invariance(rng):
    model = tiny_model(subsample=(2,), precision="single", init_scale=0.1, seed=9)
    xs = feats(rng, [9, 5, 7])
    ys = [[1, 2], [2], [1, 1, 2]]
    u = unigram_distribution(ys, 4)

    def per_utt(order):
        enc = model.encode([xs[i] for i in order])
        ce, _ = model.att_loss(enc, [ys[i] for i in order], 0.1, u)
        nll = ctc_nll(model.ctc_logits(enc), enc.output_lengths, [ys[i] for i in order])
        back = np.argsort(order)
        return ce.data[back], nll.data[back]

    a = per_utt([0, 1, 2])
    b = per_utt([2, 0, 1])
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-5)


def test_losses_finite_at_default_init_scale(rng):
    for kind in ("blstmp", "vggblstm"):
        model = E2E(tiny_model_config(kind=kind, idim=8, init_scale=0.1, precision="single"))
        enc = model.encode(feats(rng, [12, 9], d=8))
        ce, _ = model.att_loss(enc, [[1, 2], [2]], 0.05, np.array([0, 0.4, 0.4, 0.2]))
        nll = ctc_nll(model.ctc_logits(enc), enc.output_lengths, [[1, 2], [2]])
        assert np.isfinite(ce.data).all() and np.isfinite(nll.data).all()


def test_init_forget_bias_and_checkpoint_roundtrip(tmp_path):
    model = tiny_model(precision="single", init_scale=0.1)
    b = model.params["enc.0.fw.b"].data
    h = len(b) // 4
    assert np.all(b[h : 2 * h] == 1.0) and np.all(np.abs(b[:h]) <= 0.1)
    model.save(tmp_path / "m.ckpt", {"epoch": 3})
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"E2EASR01"
    assert (tmp_path / "m.yaml").is_file()
    loaded, manifest = E2E.load(tmp_path / "m.ckpt")
    assert manifest["epoch"] == 3 and manifest["precision"] == "single"
    for k, v in model.params.items():
        assert np.array_equal(v.data, loaded.params[k].data)
    assert ModelConfig.from_dict(model.cfg.to_dict()) == model.cfg


# -- gradients against central differences ----------------------------------


def param_check(model, loss_fn, names=None, eps=1e-2):
    """Worst coordinate-wise relative error over the listed parameter tensors.

    The five-point stencil with a wide step keeps roundoff below the bar on
    coordinates whose gradient is tiny next to the loss value. Pass a narrow
    ``eps`` when relu or max-pool kinks are in play.
    """
    worst = 0.0
    for name in names or list(model.params):
        original = model.params[name]

        def f(x, name=name):
            model.params[name] = x
            try:
                return loss_fn()
            finally:
                model.params[name] = original

        worst = max(worst, ng.grad_check(f, original.data, eps=eps, stencil=4))
    return worst


@pytest.mark.parametrize("kind", ["blstmp", "vggblstm"])
def test_encoder_gradients(kind):
    rng = np.random.default_rng(21)
    cfg = tiny_model_config(kind=kind, idim=8, subsample=(1, 2), init_scale=0.5)
    model = E2E(cfg)
    xs = feats(rng, [9, 6], d=8)
    r = None

    def loss():
        nonlocal r
        enc = model.encode(xs)
        if r is None:
            r = np.random.default_rng(0).normal(size=enc.h.shape)
        return ng.reduce_sum(ng.mul(enc.h, Tensor(r)))

    names = [n for n in model.params if n.startswith(("enc.", "vgg."))]
    assert param_check(model, loss, names, eps=1e-4 if kind == "vggblstm" else 3e-3) <= 1e-6


@pytest.mark.parametrize("att", ["location", "dot"])
@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_attention_decoder_gradients(att, smoothing):
    rng = np.random.default_rng(22)
    model = tiny_model(att=att, subsample=(2,), init_scale=0.5)
    xs = feats(rng, [8, 5])
    ys = [[1, 2, 2], [2]]
    u = unigram_distribution(ys, 4)

    def loss():
        return model.forward_att_loss(model.encode(xs), ys, smoothing, u)

    names = [n for n in model.params if n.startswith(("att.", "dec."))] + ["enc.0.fw.wh"]
    assert param_check(model, loss, names) <= 1e-6


def test_ctc_head_gradients():
    rng = np.random.default_rng(23)
    model = tiny_model(subsample=(2,), init_scale=0.5)
    xs = feats(rng, [8, 6])

    def loss():
        enc = model.encode(xs)
        return ng.reduce_sum(ctc_nll(model.ctc_logits(enc), enc.output_lengths, [[1, 2], [2, 2]]))

    assert param_check(model, loss, ["ctc.w", "ctc.b", "enc.0.bw.wx", "enc.0.proj.w"]) <= 1e-6
