"""Multiobjective (CTC + attention) training over length-sorted mini-batches."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .ctc import ctc_nll, is_feasible
from .dataio import FeatureStore, utt_shape, utt_tokenids
from .model import E2E, ModelConfig, encoder_output_length, unigram_distribution
from .numgrad import Tensor
from .optim import Adam, clip_grad_norm

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 5.0
    smoothing: float = 0.05
    seed: int = 1
    valid_fraction: float = 0.05

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip norm must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Utterance:
    utt_id: str
    feats: np.ndarray
    target: list


@dataclass
class LossBreakdown:
    """``L = alpha * L_ctc + (1 - alpha) * L_att`` for one batch.

    ``L_ctc`` is the CTC negative log-likelihood per label and ``L_att`` the
    cross entropy per decoder step (labels plus eos), both pooled over the
    batch.
    """

    L: Tensor
    L_ctc: Tensor
    L_att: Tensor
    ctc_tokens: int
    att_tokens: int
    utt_ids: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def values(self) -> dict:
        return {"L": self.L.item(), "L_ctc": self.L_ctc.item(), "L_att": self.L_att.item()}


def load_utterances(data: dict, store: FeatureStore | None = None) -> list:
    store = store or FeatureStore()
    out = []
    for utt in sorted(data["utts"]):
        rec = data["utts"][utt]
        feats = store.get(rec["input"][0]["feat"], utt)
        if feats.shape != utt_shape(rec):
            raise ValueError(f"{utt}: features have shape {feats.shape}, data.json says {utt_shape(rec)}")
        out.append(Utterance(utt, feats, utt_tokenids(rec)))
    return out


def hash_fraction(utt_id: str) -> float:
    digest = hashlib.md5(utt_id.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) / 0x100000000


def split_by_hash(utts: list, fraction: float) -> tuple:
    """Deterministic train/validation split on a hash of the utterance id.

    At least one utterance goes to validation when there are two or more.
    """
    valid = [u for u in utts if hash_fraction(u.utt_id) < fraction]
    if not valid and len(utts) > 1 and fraction > 0:
        valid = [min(utts, key=lambda u: hash_fraction(u.utt_id))]
    ids = {u.utt_id for u in valid}
    return [u for u in utts if u.utt_id not in ids], valid


def make_batches(utts: list, batch_size: int) -> list:
    order = sorted(utts, key=lambda u: (len(u.feats), u.utt_id))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def filter_feasible(utts: list, model_cfg: ModelConfig) -> tuple:
    keep, dropped = [], []
    for u in utts:
        t_out = encoder_output_length(len(u.feats), model_cfg.encoder)
        if t_out >= 1 and len(u.target) >= 1 and is_feasible(u.target, t_out):
            keep.append(u)
        else:
            dropped.append(u.utt_id)
    if dropped:
        logger.warning("excluded %d CTC-infeasible utterances", len(dropped))
    return keep, dropped


def multiobjective_loss(batch: list, model: E2E, cfg: TrainConfig, unigram=None) -> LossBreakdown | None:
    """One shared encoder pass feeding both the CTC head and the attention decoder."""
    batch, dropped = filter_feasible(batch, model.cfg)
    if not batch:
        return None
    targets = [u.target for u in batch]
    enc = model.encode([u.feats for u in batch])
    nll = ctc_nll(model.ctc_logits(enc), enc.output_lengths, targets)
    ctc_tokens = sum(len(y) for y in targets)
    l_ctc = ng.scale(ng.reduce_sum(nll), 1.0 / ctc_tokens)
    ce, counts = model.att_loss(enc, targets, cfg.smoothing, unigram)
    att_tokens = sum(counts)
    l_att = ng.scale(ng.reduce_sum(ce), 1.0 / att_tokens)
    total = ng.add(ng.scale(l_ctc, cfg.alpha), ng.scale(l_att, 1.0 - cfg.alpha))
    return LossBreakdown(total, l_ctc, l_att, ctc_tokens, att_tokens, [u.utt_id for u in batch], dropped)


class _Accumulator:
    def __init__(self, alpha: float):
        self.alpha = alpha
        self.ctc = self.att = 0.0
        self.nc = self.na = 0

    def add(self, b: LossBreakdown):
        self.ctc += b.L_ctc.item() * b.ctc_tokens
        self.att += b.L_att.item() * b.att_tokens
        self.nc += b.ctc_tokens
        self.na += b.att_tokens

    def row(self, epoch: int, split: str) -> dict:
        l_ctc = self.ctc / max(self.nc, 1)
        l_att = self.att / max(self.na, 1)
        return {"epoch": epoch, "split": split, "L": self.alpha * l_ctc + (1.0 - self.alpha) * l_att,
                "L_ctc": l_ctc, "L_att": l_att}


def evaluate(model: E2E, utts: list, cfg: TrainConfig, unigram=None, epoch: int = 0) -> dict:
    """Validation losses; the attention branch is scored against plain one-hot targets."""
    acc = _Accumulator(cfg.alpha)
    plain = dataclasses.replace(cfg, smoothing=0.0)
    with ng.no_grad():
        for batch in make_batches(utts, cfg.batch_size):
            b = multiobjective_loss(batch, model, plain, unigram)
            if b is not None:
                acc.add(b)
    return acc.row(epoch, "valid")


@dataclass
class FitResult:
    model: E2E
    best_checkpoint: Path
    metrics_path: Path
    history: list
    steps: int


def fit(train_utts: list, model_cfg: ModelConfig, cfg: TrainConfig, out_dir, valid_utts: list | None = None,
        extra: dict | None = None) -> FitResult:
    """Train, writing ``metrics.jsonl`` and the best-validation ``model.best.ckpt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_utts:
        raise ValueError("training set is empty")
    if valid_utts is None:
        train_utts, valid_utts = split_by_hash(train_utts, cfg.valid_fraction)
    train_utts, _ = filter_feasible(train_utts, model_cfg)
    if not valid_utts:
        valid_utts = train_utts
    unigram = unigram_distribution([u.target for u in train_utts], model_cfg.odim)
    model = E2E(model_cfg)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    batches = make_batches(train_utts, cfg.batch_size)
    metrics_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "model.best.ckpt"
    best = math.inf
    history, steps = [], 0
    extra = dict(extra or {})
    with open(metrics_path, "w", encoding="utf-8") as mf:
        for epoch in range(1, cfg.epochs + 1):
            acc = _Accumulator(cfg.alpha)
            for bi in rng.permutation(len(batches)):
                try:
                    b = multiobjective_loss(batches[bi], model, cfg, unigram)
                    if b is None:
                        continue
                    if not np.isfinite(b.L.item()):
                        raise ng.NumericDomainError("non-finite loss")
                    ng.zero_grad(model.parameters())
                    ng.backward(b.L)
                except ng.NumericDomainError as e:
                    raise TrainingDivergedError(f"epoch {epoch}, batch {int(bi)}: {e}") from e
                clip_grad_norm(model.parameters(), cfg.clip)
                opt.step()
                steps += 1
                acc.add(b)
            rows = [acc.row(epoch, "train"), evaluate(model, valid_utts, cfg, unigram, epoch)]
            for row in rows:
                mf.write(json.dumps(row) + "\n")
                history.append(row)
            mf.flush()
            logger.info("epoch %d train L=%.4f valid L=%.4f L_att=%.4f", epoch, rows[0]["L"], rows[1]["L"],
                        rows[1]["L_att"])
            if rows[1]["L"] < best:
                best = rows[1]["L"]
                model.save(best_path, dict(extra, epoch=epoch, unigram=list(map(float, unigram))))
    if cfg.epochs == 0 or not best_path.exists():
        model.save(best_path, dict(extra, epoch=0, unigram=list(map(float, unigram))))
    best_model, _ = E2E.load(best_path)
    return FitResult(best_model, best_path, metrics_path, history, steps)
