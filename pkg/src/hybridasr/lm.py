"""Character-level LSTM language model used for shallow fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import numgrad as ng
from .dataio import IngestionError
from .numgrad import ContractError, Tensor
from .optim import Adam, clip_grad_norm

logger = logging.getLogger(__name__)


@dataclass
class LmConfig:
    embed: int = 128
    units: int = 650
    layers: int = 2
    epochs: int = 20
    batch_size: int = 32
    bptt: int = 35
    lr: float = 1e-3
    clip: float = 5.0
    init_scale: float = 0.1
    seed: int = 1
    precision: str = "single"


@dataclass
class LmState:
    h: list  # per layer [B, H]
    c: list


class CharRnnLm:
    def __init__(self, vocab_size: int, cfg: LmConfig = LmConfig(), params: dict | None = None):
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.dtype = ng.dtype_of(cfg.precision)
        specs = [("embed", (vocab_size, cfg.embed))]
        din = cfg.embed
        for i in range(cfg.layers):
            specs += [(f"lstm.{i}.wx", (din, 4 * cfg.units)), (f"lstm.{i}.wh", (cfg.units, 4 * cfg.units)),
                      (f"lstm.{i}.b", (4 * cfg.units,))]
            din = cfg.units
        specs += [("out.w", (cfg.units, vocab_size)), ("out.b", (vocab_size,))]
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for name, shape in specs:
                v = rng.uniform(-cfg.init_scale, cfg.init_scale, size=shape)
                if name.startswith("lstm.") and name.endswith(".b"):
                    v[cfg.units : 2 * cfg.units] = 1.0
                params[name] = v
        self.params = {n: Tensor(np.asarray(params[n], dtype=self.dtype), requires_grad=True, name=n) for n, _ in specs}

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    def parameters(self) -> list:
        return list(self.params.values())

    def initial_state(self, batch: int = 1) -> LmState:
        z = np.zeros((batch, self.cfg.units), dtype=self.dtype)
        return LmState([Tensor(z) for _ in range(self.cfg.layers)], [Tensor(z) for _ in range(self.cfg.layers)])

    def forward(self, inputs: np.ndarray, mask: np.ndarray, state: LmState) -> tuple:
        """Run [B, T] token ids through the network: ``(logp [B, T, V], final state)``."""
        p = self.params
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.size and (inputs.min() < 0 or inputs.max() >= self.vocab_size):
            raise ContractError(f"token ids must lie in 0..{self.vocab_size - 1}")
        bsz, steps = inputs.shape
        u = self.cfg.units
        m = Tensor(np.asarray(mask, dtype=self.dtype))
        x = ng.embedding_lookup(p["embed"], inputs)
        hs, cs = [], []
        for i in range(self.cfg.layers):
            xp = ng.add(ng.matmul(x, p[f"lstm.{i}.wx"]), p[f"lstm.{i}.b"])
            y = ng.lstm(xp, p[f"lstm.{i}.wh"], m, state.h[i], state.c[i])
            x = ng.slice_(y, (slice(None), slice(None), slice(0, u)))
            hs.append(ng.reshape(ng.slice_(y, (slice(None), steps - 1, slice(0, u))), (bsz, u)))
            cs.append(ng.reshape(ng.slice_(y, (slice(None), steps - 1, slice(u, None))), (bsz, u)))
        logp = ng.log_softmax(ng.add(ng.matmul(x, p["out.w"]), p["out.b"]), axis=-1)
        return logp, LmState(hs, cs)

    def step(self, state: LmState, tokens) -> tuple:
        """Batched single step without recording: ``(logp [B, V] array, new state)``."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        with ng.no_grad():
            logp, new = self.forward(tokens, np.ones(tokens.shape), state)
        return logp.data[:, 0, :], new

    def sequence_nll(self, seqs, state: LmState | None = None) -> tuple:
        """Summed next-token NLL per sequence (sos prepended, eos appended) on the tape."""
        bsz = len(seqs)
        steps = max(len(s) for s in seqs) + 1
        inputs = np.full((bsz, steps), self.eos, dtype=np.int64)
        targets = np.zeros((bsz, steps, self.vocab_size))
        mask = np.zeros((bsz, steps))
        for b, s in enumerate(seqs):
            inputs[b, 1 : len(s) + 1] = s
            out = list(s) + [self.eos]
            targets[b, np.arange(len(out)), out] = 1.0
            mask[b, : len(out)] = 1.0
        logp, _ = self.forward(inputs, mask, state or self.initial_state(bsz))
        nll = ng.scale(ng.reduce_sum(ng.reduce_sum(ng.mul(logp, Tensor(targets.astype(self.dtype))), axis=2), axis=1), -1.0)
        return nll, [len(s) + 1 for s in seqs]

    def save(self, path, extra: dict | None = None) -> dict:
        config = {"vocab_size": self.vocab_size, "lm": asdict(self.cfg)}
        return checkpoint.save(path, {k: v.data for k, v in self.params.items()}, "lm", config,
                               self.cfg.precision, extra)

    @classmethod
    def load(cls, path) -> tuple:
        manifest, params = checkpoint.load(path)
        if manifest.get("model_type") != "lm":
            raise checkpoint.CheckpointError(f"{path}: not a language-model checkpoint")
        cfg = manifest["config"]
        return cls(cfg["vocab_size"], LmConfig(**cfg["lm"]), params), manifest


def lm_step(model: CharRnnLm, state: LmState, token: int) -> tuple:
    """Single-history step: ``(logprobs [V], new_state)``."""
    if not 0 <= int(token) < model.vocab_size:
        raise ContractError(f"token id {token} outside 0..{model.vocab_size - 1}")
    logp, new = model.step(state, [token])
    return logp[0], new


def perplexity(model: CharRnnLm, corpus, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with ng.no_grad():
        for i in range(0, len(corpus), batch_size):
            nll, n = model.sequence_nll(corpus[i : i + batch_size])
            total += float(nll.data.sum())
            count += sum(n)
    return math.exp(total / count)


def _chunks(seqs, bptt: int, eos: int):
    """Split sos-prefixed, eos-terminated sequences into BPTT windows.

    Yields ``(inputs [B, n], targets [B, n], mask [B, n])`` per window; the
    recurrent state is carried (detached) across windows of one batch.
    """
    bsz = len(seqs)
    full = [[eos] + list(s) + [eos] for s in seqs]
    length = max(len(f) for f in full) - 1
    inputs = np.full((bsz, length), eos, dtype=np.int64)
    targets = np.zeros((bsz, length), dtype=np.int64)
    mask = np.zeros((bsz, length))
    for b, f in enumerate(full):
        n = len(f) - 1
        inputs[b, :n] = f[:-1]
        targets[b, :n] = f[1:]
        mask[b, :n] = 1.0
    for start in range(0, length, bptt):
        sl = slice(start, start + bptt)
        yield inputs[:, sl], targets[:, sl], mask[:, sl]


def lm_train(corpus, vocab_size: int, cfg: LmConfig = LmConfig(), valid=None) -> tuple:
    """Train on token-id sequences; returns ``(model, perplexities)``.

    ``perplexities[0]`` is measured before any update and each later entry
    after one epoch, on ``valid`` when given, otherwise on ``corpus``.
    """
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise IngestionError("cannot train a language model on an empty corpus")
    model = CharRnnLm(vocab_size, cfg)
    evalset = [list(s) for s in valid] if valid else corpus
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = sorted(range(len(corpus)), key=lambda i: (len(corpus[i]), i))
    batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    ppl = [perplexity(model, evalset)]
    for epoch in range(1, cfg.epochs + 1):
        for bi in rng.permutation(len(batches)):
            seqs = [corpus[i] for i in batches[bi]]
            state = model.initial_state(len(seqs))
            for inputs, targets, mask in _chunks(seqs, cfg.bptt, model.eos):
                logp, state = model.forward(inputs, mask, state)
                onehot = np.zeros(logp.shape, dtype=model.dtype)
                np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
                onehot *= mask[..., None]
                loss = ng.scale(ng.reduce_sum(ng.mul(logp, Tensor(onehot))), -1.0 / max(mask.sum(), 1.0))
                ng.zero_grad(model.parameters())
                ng.backward(loss)
                clip_grad_norm(model.parameters(), cfg.clip)
                opt.step()
                state = LmState([h.detach() for h in state.h], [c.detach() for c in state.c])
        ppl.append(perplexity(model, evalset))
        logger.info("lm epoch %d perplexity %.3f", epoch, ppl[-1])
    return model, ppl


def renormalize_without_blank(logp: np.ndarray, blank: int = 0) -> np.ndarray:
    """Log-distribution over every symbol except blank (blank gets -inf)."""
    out = np.array(logp, dtype=np.float64)
    out[..., blank] = -np.inf
    keep = np.delete(out, blank, axis=-1)
    return out - np.logaddexp.reduce(keep, axis=-1, keepdims=True)
