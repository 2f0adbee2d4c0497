"""CTC loss (log-domain forward recursion on the tape) and the CTC prefix scorer."""

from __future__ import annotations

import numpy as np

from . import numgrad as ng
from .numgrad import ContractError, Tensor

NEG = -1e30
BLANK = 0


class CTCInfeasibleError(ValueError):
    """The target needs more frames than the input provides."""


def min_frames(target) -> int:
    """Frames needed to emit ``target``: one per label plus one blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def is_feasible(target, frames: int) -> bool:
    return min_frames(target) <= frames


def ctc_nll(logits: Tensor, lengths, targets) -> Tensor:
    """Per-utterance negative log-likelihoods, shape [B].

    ``logits`` is [B, T, V] (padded); ``lengths`` gives each utterance's
    valid frame count.  The recursion runs over the blank-interleaved label
    sequence with stay / advance / skip transitions, each frame combining
    them with logsumexp.  Padded frames leave the forward variables
    unchanged.
    """
    bsz, steps, v = logits.shape
    targets = [list(y) for y in targets]
    for y, t in zip(targets, lengths):
        if any(c == BLANK for c in y):
            raise ContractError("CTC targets must not contain blank")
        if any(c < 0 or c >= v for c in y):
            raise ContractError(f"CTC target ids must lie in 1..{v - 1}")
        if not is_feasible(y, t):
            raise CTCInfeasibleError(f"target of length {len(y)} needs {min_frames(y)} frames, got {t}")
    dt = logits.dtype
    s_max = 2 * max(len(y) for y in targets) + 1
    ext = np.zeros((bsz, s_max), dtype=np.int64)
    skip = np.full((bsz, s_max), NEG)
    start = np.full((bsz, s_max), NEG)
    final = np.full((bsz, s_max), NEG)
    for b, y in enumerate(targets):
        n = 2 * len(y) + 1
        ext[b, 1:n:2] = y
        for s in range(3, n, 2):
            if ext[b, s] != ext[b, s - 2]:
                skip[b, s] = 0.0
        start[b, : min(2, n)] = 0.0
        final[b, max(n - 2, 0) : n] = 0.0
    onehot = np.zeros((bsz, v, s_max))
    onehot[np.arange(bsz)[:, None], ext, np.arange(s_max)[None, :]] = 1.0

    def const(a):
        return Tensor(np.asarray(a, dtype=dt))

    logp = ng.log_softmax(logits, axis=-1)
    emit = ng.bmm(logp, const(onehot))  # [B, T, S]
    alpha = ng.add(ng.slice_(emit, (slice(None), 0)), const(start))
    pad1 = const(np.full((bsz, 1), NEG))
    pad2 = const(np.full((bsz, 2), NEG))
    skip_t = const(skip)
    lengths = np.asarray(lengths)
    for t in range(1, steps):
        advance = ng.concat([pad1, ng.slice_(alpha, (slice(None), slice(0, s_max - 1)))], axis=1)
        if s_max > 2:
            jump = ng.concat([pad2, ng.slice_(alpha, (slice(None), slice(0, s_max - 2)))], axis=1)
        else:
            jump = const(np.full((bsz, s_max), NEG))
        jump = ng.add(jump, skip_t)
        new = ng.add(ng.reduce_logsumexp(ng.stack([alpha, advance, jump], axis=-1), axis=-1),
                     ng.slice_(emit, (slice(None), t)))
        live = (lengths > t).astype(dt)
        if live.all():
            alpha = new
        else:
            m = np.broadcast_to(live[:, None], (bsz, s_max))
            alpha = ng.add(ng.mul(new, const(m)), ng.mul(alpha, const(1.0 - m)))
    return ng.scale(ng.reduce_logsumexp(ng.add(alpha, const(final)), axis=1), -1.0)


def ctc_loss(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of one target given [T, V] logits (scalar)."""
    if logits.ndim != 2:
        raise ContractError(f"ctc_loss expects [T, V] logits, got {logits.shape}")
    t, v = logits.shape
    nll = ctc_nll(ng.reshape(logits, (1, t, v)), [t], [target])
    return ng.reshape(nll, ())


def greedy_collapse(logprobs: np.ndarray) -> list:
    """Best-path decoding (debug aid): argmax per frame, merge repeats, drop blanks."""
    best = np.asarray(logprobs).argmax(axis=-1)
    out, prev = [], None
    for c in best:
        if c != prev and c != BLANK:
            out.append(int(c))
        prev = c
    return out


class CTCPrefixScorer:
    """Label-synchronous prefix probabilities for joint decoding.

    For each cached prefix ``g`` the scorer stores, per frame ``t``, the log
    mass of paths over frames ``1..t`` that emit exactly ``g`` and end in a
    non-blank (``r_nb``) or blank (``r_b``).  ``score(g, c)`` is the log
    probability that a complete labeling begins with ``g + c``; scoring the
    end symbol returns the probability of ``g`` as a complete labeling.
    """

    def __init__(self, logprobs, eos: int | None = None, blank: int = BLANK):
        lp = np.asarray(logprobs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] < 1:
            raise ContractError(f"expected [T, V] log-probabilities, got shape {lp.shape}")
        norm = np.logaddexp.reduce(lp, axis=1)
        if np.any(np.abs(norm) > 1e-6):
            raise ContractError("each frame of log-probabilities must be normalized")
        self.logprobs = lp
        self.eos = eos
        self.blank = blank
        r = np.full((lp.shape[0], 2), -np.inf)
        r[:, 1] = np.cumsum(lp[:, blank])
        self._cache = {(): (r, 0.0)}

    @property
    def frames(self) -> int:
        return self.logprobs.shape[0]

    def state(self, prefix) -> tuple:
        """Cached ``(r [T, 2] as (non-blank, blank), prefix log-prob)``."""
        try:
            return self._cache[tuple(prefix)]
        except KeyError:
            raise ContractError(f"prefix {tuple(prefix)} has not been scored yet")

    def full_mass(self, prefix) -> float:
        r, _ = self.state(prefix)
        return float(np.logaddexp(r[-1, 0], r[-1, 1]))

    def extend(self, prefix, symbols) -> np.ndarray:
        """Prefix log-probabilities of ``prefix + c`` for each ``c`` in ``symbols``."""
        prefix = tuple(int(c) for c in prefix)
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if np.any(symbols == self.blank):
            raise ContractError("cannot extend a prefix with blank")
        r_g, _ = self.state(prefix)
        out = np.empty(len(symbols))
        is_eos = symbols == self.eos if self.eos is not None else np.zeros(len(symbols), bool)
        if is_eos.any():
            out[is_eos] = np.logaddexp(r_g[-1, 0], r_g[-1, 1])
        labels = symbols[~is_eos]
        if len(labels) == 0:
            return out
        lp = self.logprobs
        steps = lp.shape[0]
        x = lp[:, labels]  # [T, C]
        last = prefix[-1] if prefix else None
        # mass available to start a new label at frame t+1, per candidate
        phi = np.where(labels[None, :] == last, r_g[:, 1:2], np.logaddexp(r_g[:, 0:1], r_g[:, 1:2]))
        r_nb = np.full((steps, len(labels)), -np.inf)
        r_b = np.full((steps, len(labels)), -np.inf)
        if not prefix:
            r_nb[0] = x[0]
        for t in range(1, steps):
            r_nb[t] = np.logaddexp(r_nb[t - 1], phi[t - 1]) + x[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_nb[t - 1]) + lp[t, self.blank]
        psi = np.logaddexp.reduce(np.vstack([r_nb[:1], phi[:-1] + x[1:]]), axis=0)
        out[~is_eos] = psi
        for j, c in enumerate(labels):
            self._cache[prefix + (int(c),)] = (np.stack([r_nb[:, j], r_b[:, j]], axis=1), float(psi[j]))
        return out

    def score(self, prefix, c: int) -> float:
        return float(self.extend(prefix, [c])[0])

    def prefix_score(self, prefix) -> float:
        return self.state(prefix)[1]


def prefix_init(logprobs, eos: int | None = None) -> CTCPrefixScorer:
    return CTCPrefixScorer(logprobs, eos=eos)


def prefix_step(scorer: CTCPrefixScorer, prefix, c: int) -> float:
    return scorer.score(prefix, c)
