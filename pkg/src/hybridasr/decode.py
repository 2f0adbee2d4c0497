"""Label-synchronous beam search over joint CTC/attention scores with optional LM fusion.

Each extension of a hypothesis ``g`` by symbol ``c`` adds::

    ctc_weight * (log psi(g + c) - log psi(g))
    + (1 - ctc_weight) * log p_att(c | g)
    + lm_weight * log p_lm(c | g)

where ``psi`` is the CTC prefix probability, so the CTC increments telescope
to the probability of the finished sequence as a complete labeling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .ctc import CTCPrefixScorer
from .dataio import FeatureStore, TokenTable
from .lm import CharRnnLm, renormalize_without_blank
from .model import E2E, EncoderOutput

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class DecodeConfig:
    beam_size: int = 20
    ctc_weight: float = 0.3
    lm_weight: float = 0.3
    max_len_ratio: float = 1.0
    min_len_ratio: float = 0.0
    nbest: int = 1

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError("beam_size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigurationError("ctc_weight must lie in [0, 1]")
        if self.lm_weight < 0:
            raise ConfigurationError("lm_weight must be >= 0")
        if not 0.0 <= self.min_len_ratio <= self.max_len_ratio:
            raise ConfigurationError("need 0 <= min_len_ratio <= max_len_ratio")
        if self.nbest < 1:
            raise ConfigurationError("nbest must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple
    score: float = 0.0
    att: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    row: int = 0

    def key(self):
        return (-self.score, self.tokens[-1] if self.tokens else -1, len(self.tokens), self.tokens)


@dataclass
class DecodeResult:
    tokens: list
    score: float
    att: float
    ctc: float
    lm: float
    truncated: bool = False


def length_limits(frames: int, cfg: DecodeConfig) -> tuple:
    return max(1, int(cfg.max_len_ratio * frames)), int(cfg.min_len_ratio * frames)


def check_token_tables(asr_manifest: dict, lm_manifest: dict | None) -> None:
    if lm_manifest is None:
        return
    a, b = asr_manifest.get("token_checksum"), lm_manifest.get("token_checksum")
    if a is None or b is None or a != b:
        raise ConfigurationError("ASR model and language model were built with different token tables")


def beam_search(model: E2E, enc: EncoderOutput, cfg: DecodeConfig, lm: CharRnnLm | None = None) -> list:
    """Search one utterance (batch of one) and return the ranked ``nbest`` results."""
    if enc.h.shape[0] != 1:
        raise ValueError("beam_search decodes one utterance at a time")
    v = model.cfg.odim
    eos = v - 1
    if lm is not None and lm.vocab_size != v:
        raise ConfigurationError(f"LM vocabulary ({lm.vocab_size}) differs from the ASR model ({v})")
    use_ctc = cfg.ctc_weight > 0
    use_att = cfg.ctc_weight < 1
    use_lm = lm is not None and cfg.lm_weight > 0
    frames = enc.output_lengths[0]
    maxlen, minlen = length_limits(frames, cfg)
    labels = np.arange(1, eos)

    with ng.no_grad():
        actx1 = model.attention_context(enc)
        scorer = None
        if use_ctc:
            logits = model.ctc_logits(enc).data[0, :frames].astype(np.float64)
            lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
            scorer = CTCPrefixScorer(lp, eos=eos)
        state = model.initial_state(actx1)
        lm_state = lm.initial_state(1) if use_lm else None
        live = [Hypothesis(())]
        finished = []
        contexts = {1: actx1}
        for i in range(maxlen + 1):
            n = len(live)
            if n not in contexts:
                contexts[n] = actx1.repeat(n)
            prev = [h.tokens[-1] if h.tokens else eos for h in live]
            logits, new_state = model.decoder_step(prev, state, contexts[n])
            att_lp = logits.data.astype(np.float64)
            att_lp = att_lp - np.logaddexp.reduce(att_lp, axis=1, keepdims=True)
            if use_lm:
                lm_lp, new_lm_state = lm.step(lm_state, prev)
                lm_lp = renormalize_without_blank(lm_lp)
            parts = []
            if i < maxlen:
                parts.append(labels)
            if i >= minlen:
                parts.append(np.array([eos]))
            symbols = np.concatenate(parts)
            cands = []
            for k, h in enumerate(live):
                att = att_lp[k, symbols]
                inc = (1.0 - cfg.ctc_weight) * att if use_att else np.zeros(len(symbols))
                if use_ctc:
                    psi = scorer.extend(h.tokens, symbols)
                    with np.errstate(invalid="ignore"):
                        inc = inc + cfg.ctc_weight * (psi - h.ctc)
                if use_lm:
                    lmv = lm_lp[k, symbols]
                    inc = inc + cfg.lm_weight * lmv
                total = h.score + inc
                for j, c in enumerate(symbols):
                    if not np.isfinite(total[j]):
                        continue
                    cands.append(Hypothesis(
                        h.tokens + (int(c),),
                        float(total[j]),
                        h.att + float(att[j]),
                        float(psi[j]) if use_ctc else 0.0,
                        h.lm + (float(lmv[j]) if use_lm else 0.0),
                        k,
                    ))
            cands.sort(key=Hypothesis.key)
            next_live = []
            for c in cands[: cfg.beam_size]:
                (finished if c.tokens[-1] == eos else next_live).append(c)
            if not next_live:
                break
            rows = [h.row for h in next_live]
            state = new_state.rows(rows)
            if use_lm:
                lm_state = type(new_lm_state)([ng.Tensor(x.data[rows]) for x in new_lm_state.h],
                                               [ng.Tensor(x.data[rows]) for x in new_lm_state.c])
            for r, h in enumerate(next_live):
                h.row = r
            live = next_live

    if finished:
        finished.sort(key=Hypothesis.key)
        return [DecodeResult(list(h.tokens[:-1]), h.score, h.att, h.ctc, h.lm) for h in finished[: cfg.nbest]]
    live.sort(key=Hypothesis.key)
    return [DecodeResult(list(h.tokens), h.score, h.att, h.ctc, h.lm, truncated=True) for h in live[: cfg.nbest]]


def recognize(model: E2E, feats: np.ndarray, cfg: DecodeConfig, lm: CharRnnLm | None = None) -> list:
    with ng.no_grad():
        enc = model.encode([feats])
    return beam_search(model, enc, cfg, lm)


@dataclass
class DecodeSetResult:
    hyps: dict
    nbest: dict
    errors: dict = field(default_factory=dict)


def decode_set(data: dict, model: E2E, table: TokenTable, cfg: DecodeConfig, out_dir,
               lm: CharRnnLm | None = None, store: FeatureStore | None = None) -> DecodeSetResult:
    """Decode every utterance of a data.json dict into ``hyp.txt`` and ``nbest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or FeatureStore()
    hyps, nbest, errors = {}, {}, {}
    for utt in sorted(data["utts"]):
        rec = data["utts"][utt]
        try:
            feats = store.get(rec["input"][0]["feat"], utt)
            results = recognize(model, feats, cfg, lm)
        except Exception as e:  # noqa: BLE001 - per-utterance failures are recorded, the run continues
            errors[utt] = f"{type(e).__name__}: {e}"
            logger.error("decoding %s failed: %s", utt, e)
            continue
        hyps[utt] = table.decode(results[0].tokens)
        nbest[utt] = [
            {"text": table.decode(r.tokens), "score": r.score, "att": r.att, "ctc": r.ctc, "lm": r.lm}
            for r in results
        ]
    with open(out_dir / "hyp.txt", "w", encoding="utf-8") as f:
        for utt in sorted(hyps):
            f.write(f"{utt}\t{hyps[utt]}\n")
    (out_dir / "nbest.json").write_text(json.dumps(nbest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if errors:
        (out_dir / "errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return DecodeSetResult(hyps, nbest, errors)
