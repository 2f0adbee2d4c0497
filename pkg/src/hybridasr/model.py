"""Attention-based encoder-decoder with a shared-encoder CTC head.

Encoders: a pyramid BLSTM (``blstmp``) that drops frames between layers, or
two VGG blocks followed by BLSTM layers (``vggblstm``). Attention is either
location-aware or dot-product. The decoder is an input-feeding LSTM.

All batched tensors are padded; per-utterance lengths travel alongside and
every padded position is masked out of recurrences, attention and losses.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import numgrad as ng
from .numgrad import ContractError, Tensor

NEG = -1e30


class LengthError(ValueError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "blstmp"
    num_layers: int = 4
    units: int = 320
    projection: int = 320
    subsample: tuple = (1, 2, 2, 1)
    vgg_channels: tuple = (64, 128)

    def __post_init__(self):
        self.subsample = tuple(int(s) for s in self.subsample)
        self.vgg_channels = tuple(int(c) for c in self.vgg_channels)
        if self.kind not in ("blstmp", "vggblstm"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "blstmp" and len(self.subsample) != self.num_layers:
            raise ValueError("subsample schedule needs one factor per layer")
        if any(s < 1 for s in self.subsample):
            raise ValueError("subsample factors must be >= 1")

    @property
    def total_subsampling(self) -> int:
        return 4 if self.kind == "vggblstm" else math.prod(self.subsample)


@dataclass
class AttentionConfig:
    kind: str = "location"
    dim: int = 320
    conv_channels: int = 10
    conv_width: int = 100

    def __post_init__(self):
        if self.kind not in ("location", "dot"):
            raise ValueError(f"unknown attention kind {self.kind!r}")


@dataclass
class DecoderConfig:
    units: int = 320
    layers: int = 1
    embed: int = 320


@dataclass
class ModelConfig:
    idim: int
    odim: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    precision: str = "single"
    init_scale: float = 0.1
    seed: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["subsample"] = list(self.encoder.subsample)
        d["encoder"]["vgg_channels"] = list(self.encoder.vgg_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["attention"] = AttentionConfig(**d.get("attention", {}))
        d["decoder"] = DecoderConfig(**d.get("decoder", {}))
        return cls(**d)


def subsampled_length(t: int, schedule) -> int:
    for s in schedule:
        t = -(-t // s)
    return t


def encoder_output_length(t: int, cfg: EncoderConfig) -> int:
    if cfg.kind == "vggblstm":
        return (t // 2) // 2
    return subsampled_length(t, cfg.subsample)


@dataclass
class EncoderOutput:
    h: Tensor  # [B, T', E]
    input_lengths: list
    output_lengths: list

    def mask(self) -> np.ndarray:
        return length_mask(self.output_lengths, self.h.shape[1], self.h.dtype)


def length_mask(lengths, steps: int, dtype=np.float64) -> np.ndarray:
    return (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


@dataclass
class AttentionContext:
    """Per-utterance quantities reused at every decoder step."""

    h: Tensor  # [B, T', E]
    proj: Tensor  # [B, T', A]
    mask: np.ndarray  # [B, T'] 1/0
    lengths: list

    def additive_mask(self) -> Tensor:
        return ng.constant(np.where(self.mask > 0, 0.0, NEG), like=self.h)

    def repeat(self, n: int) -> "AttentionContext":
        """Tile a single-utterance context ``n`` times (beam search, no tape)."""
        return AttentionContext(
            Tensor(np.repeat(self.h.data, n, axis=0)),
            Tensor(np.repeat(self.proj.data, n, axis=0)),
            np.repeat(self.mask, n, axis=0),
            list(self.lengths) * n,
        )


@dataclass
class DecoderState:
    h: list  # per layer [B, H]
    c: list
    att_w: Tensor  # [B, T']
    ctx: Tensor  # [B, E]

    def rows(self, idx) -> "DecoderState":
        """Select (and possibly repeat) batch rows; used by beam search."""
        idx = np.asarray(idx)
        return DecoderState(
            [Tensor(x.data[idx]) for x in self.h],
            [Tensor(x.data[idx]) for x in self.c],
            Tensor(self.att_w.data[idx]),
            Tensor(self.ctx.data[idx]),
        )


def pad_batch(feats: list, dtype) -> tuple:
    lengths = [len(f) for f in feats]
    dim = feats[0].shape[1]
    out = np.zeros((len(feats), max(lengths), dim), dtype=dtype)
    for i, f in enumerate(feats):
        if f.shape[1] != dim:
            raise ContractError(f"feature dim {f.shape[1]} differs from {dim}")
        out[i, : len(f)] = f
    return out, lengths


class E2E:
    """Hybrid CTC/attention network. Parameters live in ``self.params``."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None):
        self.cfg = cfg
        self.dtype = ng.dtype_of(cfg.precision)
        specs = self._param_specs()
        if params is None:
            params = self._init_params(specs)
        else:
            for name, shape in specs:
                if name not in params:
                    raise ContractError(f"missing parameter {name}")
                if tuple(params[name].shape) != tuple(shape):
                    raise ContractError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {
            name: Tensor(np.asarray(params[name], dtype=self.dtype), requires_grad=True, name=name)
            for name, _ in specs
        }

    # -- parameters --------------------------------------------------------

    def _param_specs(self) -> list:
        c = self.cfg
        enc, att, dec = c.encoder, c.attention, c.decoder
        specs = []
        self._lstm_biases = set()

        def lstm(prefix, din, h):
            specs.extend([(f"{prefix}.wx", (din, 4 * h)), (f"{prefix}.wh", (h, 4 * h)), (f"{prefix}.b", (4 * h,))])
            self._lstm_biases.add(f"{prefix}.b")

        din = c.idim
        if enc.kind == "vggblstm":
            c1, c2 = enc.vgg_channels
            for name, cin, cout in (("vgg.0", 1, c1), ("vgg.1", c1, c1), ("vgg.2", c1, c2), ("vgg.3", c2, c2)):
                specs += [(f"{name}.w", (cout, cin, 3, 3)), (f"{name}.b", (cout,))]
            din = c2 * ((c.idim // 2) // 2)
        for i in range(enc.num_layers):
            lstm(f"enc.{i}.fw", din, enc.units)
            lstm(f"enc.{i}.bw", din, enc.units)
            specs += [(f"enc.{i}.proj.w", (2 * enc.units, enc.projection)), (f"enc.{i}.proj.b", (enc.projection,))]
            din = enc.projection
        e = enc.projection
        if att.kind == "location":
            specs += [
                ("att.enc.w", (e, att.dim)),
                ("att.enc.b", (att.dim,)),
                ("att.dec.w", (dec.units, att.dim)),
                ("att.conv.w", (att.conv_channels, 1, 1, att.conv_width)),
                ("att.loc.w", (att.conv_channels, att.dim)),
                ("att.g.w", (att.dim, 1)),
            ]
        else:
            specs += [("att.k.w", (e, att.dim)), ("att.q.w", (dec.units, att.dim))]
        specs.append(("dec.embed", (c.odim, dec.embed)))
        din = dec.embed + e
        for i in range(dec.layers):
            lstm(f"dec.{i}", din, dec.units)
            din = dec.units
        specs += [("dec.out.w", (dec.units + e, c.odim)), ("dec.out.b", (c.odim,))]
        specs += [("ctc.w", (e, c.odim)), ("ctc.b", (c.odim,))]
        return specs

    def _init_params(self, specs) -> dict:
        rng = np.random.default_rng(self.cfg.seed)
        s = self.cfg.init_scale
        out = {}
        for name, shape in specs:
            v = rng.uniform(-s, s, size=shape)
            if name in self._lstm_biases:
                h = shape[0] // 4
                v[h : 2 * h] = 1.0
            out[name] = v
        return out

    def parameters(self) -> list:
        return list(self.params.values())

    def numpy_params(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, extra: dict | None = None) -> dict:
        return checkpoint.save(path, self.numpy_params(), "asr", self.cfg.to_dict(), self.cfg.precision, extra)

    @classmethod
    def load(cls, path) -> tuple:
        manifest, params = checkpoint.load(path)
        if manifest.get("model_type") != "asr":
            raise checkpoint.CheckpointError(f"{path}: not an ASR checkpoint")
        return cls(ModelConfig.from_dict(manifest["config"]), params), manifest

    # -- encoder -----------------------------------------------------------

    def _const(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def _blstm_layer(self, x: Tensor, lengths, i: int) -> Tensor:
        p = self.params
        bsz, steps, _ = x.shape
        h = self.cfg.encoder.units
        mask = self._const(length_mask(lengths, steps))
        zeros = self._const(np.zeros((bsz, h)))
        outs = []
        for direction, rev in (("fw", False), ("bw", True)):
            pre = f"enc.{i}.{direction}"
            xp = ng.add(ng.matmul(x, p[f"{pre}.wx"]), p[f"{pre}.b"])
            y = ng.lstm(xp, p[f"{pre}.wh"], mask, zeros, zeros, reverse=rev)
            outs.append(ng.slice_(y, (slice(None), slice(None), slice(0, h))))
        y = ng.concat(outs, axis=-1)
        return ng.tanh(ng.add(ng.matmul(y, p[f"enc.{i}.proj.w"]), p[f"enc.{i}.proj.b"]))

    def _vgg(self, x: Tensor, lengths) -> tuple:
        p = self.params
        bsz, steps, dim = x.shape
        y = ng.reshape(x, (bsz, 1, steps, dim))

        def masked(y, lens):
            m = length_mask(lens, y.shape[2])[:, None, :, None]
            return ng.mul(y, self._const(np.broadcast_to(m, y.shape)))

        for block in (0, 2):
            for k in (block, block + 1):
                y = ng.relu(ng.conv2d(y, p[f"vgg.{k}.w"], p[f"vgg.{k}.b"], padding=1))
                y = masked(y, lengths)
            y = ng.maxpool2d(y, 2)
            lengths = [n // 2 for n in lengths]
            y = masked(y, lengths)
        b, ch, t2, f2 = y.shape
        y = ng.reshape(ng.transpose(y, (0, 2, 1, 3)), (b, t2, ch * f2))
        return y, lengths

    def encode(self, feats) -> EncoderOutput:
        """Encode a list of [T_i, D] feature matrices (or one matrix)."""
        if isinstance(feats, np.ndarray) and feats.ndim == 2:
            feats = [feats]
        enc = self.cfg.encoder
        for f in feats:
            if f.shape[1] != self.cfg.idim:
                raise ContractError(f"features have {f.shape[1]} columns, model expects {self.cfg.idim}")
            if encoder_output_length(len(f), enc) < 1:
                raise LengthError(f"{len(f)} frames is too short for subsampling factor {enc.total_subsampling}")
        padded, lengths = pad_batch(feats, self.dtype)
        in_lengths = list(lengths)
        x = Tensor(padded)
        if enc.kind == "vggblstm":
            x, lengths = self._vgg(x, lengths)
            schedule = [1] * enc.num_layers
        else:
            schedule = enc.subsample
        for i, s in enumerate(schedule):
            x = self._blstm_layer(x, lengths, i)
            if s > 1:
                x = ng.slice_(x, (slice(None), slice(None, None, s)))
                lengths = [-(-n // s) for n in lengths]
        return EncoderOutput(x, in_lengths, lengths)

    # -- CTC head ----------------------------------------------------------

    def ctc_logits(self, enc: EncoderOutput) -> Tensor:
        return ng.add(ng.matmul(enc.h, self.params["ctc.w"]), self.params["ctc.b"])

    # -- attention ---------------------------------------------------------

    def attention_context(self, enc: EncoderOutput) -> AttentionContext:
        p = self.params
        if self.cfg.attention.kind == "location":
            proj = ng.add(ng.matmul(enc.h, p["att.enc.w"]), p["att.enc.b"])
        else:
            proj = ng.matmul(enc.h, p["att.k.w"])
        return AttentionContext(enc.h, proj, enc.mask(), list(enc.output_lengths))

    def attend(self, actx: AttentionContext, query: Tensor, prev_w: Tensor) -> tuple:
        """Return ``(context [B, E], weights [B, T'])``."""
        p = self.params
        cfg = self.cfg.attention
        bsz, steps, _ = actx.h.shape
        if cfg.kind == "location":
            w = prev_w.data
            if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
                raise ContractError("previous attention weights are not a distribution")
            width = cfg.conv_width
            f = ng.conv2d(
                ng.reshape(prev_w, (bsz, 1, 1, steps)),
                p["att.conv.w"],
                padding=((0, 0), (width // 2, width - 1 - width // 2)),
            )
            f = ng.transpose(ng.reshape(f, (bsz, cfg.conv_channels, steps)), (0, 2, 1))
            loc = ng.matmul(f, p["att.loc.w"])
            dq = ng.expand(ng.matmul(query, p["att.dec.w"]), 1, steps)
            e = ng.tanh(ng.add(ng.add(actx.proj, dq), loc))
            scores = ng.reshape(ng.matmul(e, p["att.g.w"]), (bsz, steps))
        else:
            q = ng.reshape(ng.matmul(query, p["att.q.w"]), (bsz, cfg.dim, 1))
            scores = ng.reshape(ng.bmm(actx.proj, q), (bsz, steps))
        weights = ng.softmax(ng.add(scores, actx.additive_mask()), axis=-1)
        context = ng.reshape(ng.bmm(ng.reshape(weights, (bsz, 1, steps)), actx.h), (bsz, actx.h.shape[2]))
        return context, weights

    # -- decoder -----------------------------------------------------------

    def initial_state(self, actx: AttentionContext) -> DecoderState:
        bsz = actx.h.shape[0]
        units = self.cfg.decoder.units
        zeros = np.zeros((bsz, units), dtype=self.dtype)
        uniform = actx.mask / actx.mask.sum(axis=1, keepdims=True)
        return DecoderState(
            [self._const(zeros) for _ in range(self.cfg.decoder.layers)],
            [self._const(zeros) for _ in range(self.cfg.decoder.layers)],
            self._const(uniform),
            self._const(np.zeros((bsz, actx.h.shape[2]))),
        )

    def decoder_step(self, prev_tokens, state: DecoderState, actx: AttentionContext) -> tuple:
        """One label step for a batch of histories: ``(logits [B, V], new_state)``."""
        p = self.params
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64).reshape(-1)
        if prev_tokens.size and (prev_tokens.min() < 0 or prev_tokens.max() >= self.cfg.odim):
            raise ContractError(f"token ids must lie in 0..{self.cfg.odim - 1}")
        bsz = len(prev_tokens)
        units = self.cfg.decoder.units
        one = self._const(np.ones((bsz, 1)))
        x = ng.concat([ng.embedding_lookup(p["dec.embed"], prev_tokens), state.ctx], axis=-1)
        hs, cs = [], []
        for i in range(self.cfg.decoder.layers):
            xp = ng.reshape(ng.add(ng.matmul(x, p[f"dec.{i}.wx"]), p[f"dec.{i}.b"]), (bsz, 1, 4 * units))
            y = ng.lstm(xp, p[f"dec.{i}.wh"], one, state.h[i], state.c[i])
            h = ng.reshape(ng.slice_(y, (slice(None), slice(None), slice(0, units))), (bsz, units))
            c = ng.reshape(ng.slice_(y, (slice(None), slice(None), slice(units, None))), (bsz, units))
            hs.append(h)
            cs.append(c)
            x = h
        ctx, w = self.attend(actx, hs[-1], state.att_w)
        logits = ng.add(ng.matmul(ng.concat([hs[-1], ctx], axis=-1), p["dec.out.w"]), p["dec.out.b"])
        return logits, DecoderState(hs, cs, w, ctx)

    def att_loss(self, enc: EncoderOutput, targets: list, smoothing: float = 0.0, unigram=None) -> tuple:
        """Teacher-forced cross entropy against smoothed targets.

        Returns ``(ce_sums [B], step_counts)`` where each utterance sums over
        its ``L + 1`` steps (labels then eos).
        """
        v = self.cfg.odim
        eos = v - 1
        if smoothing > 0:
            unigram = check_unigram(unigram, v)
        bsz = len(targets)
        steps = max(len(y) for y in targets) + 1
        ys_in = np.full((bsz, steps), eos, dtype=np.int64)
        q = np.zeros((bsz, steps, v))
        for b, y in enumerate(targets):
            y = list(y)
            if any(t < 0 or t >= v for t in y):
                raise ContractError(f"target ids must lie in 0..{v - 1}")
            ys_in[b, 1 : len(y) + 1] = y
            out = y + [eos]
            q[b, np.arange(len(out)), out] = 1.0 - smoothing
            if smoothing > 0:
                q[b, : len(out)] += smoothing * unigram
        actx = self.attention_context(enc)
        state = self.initial_state(actx)
        logits = []
        for n in range(steps):
            lg, state = self.decoder_step(ys_in[:, n], state, actx)
            logits.append(lg)
        logp = ng.log_softmax(ng.stack(logits, axis=1), axis=-1)
        ce = ng.scale(ng.reduce_sum(ng.reduce_sum(ng.mul(logp, self._const(q)), axis=2), axis=1), -1.0)
        return ce, [len(y) + 1 for y in targets]

    def forward_att_loss(self, enc: EncoderOutput, targets: list, smoothing: float = 0.0, unigram=None) -> Tensor:
        """Token-weighted mean cross entropy over the batch (per step, eos included)."""
        ce, counts = self.att_loss(enc, targets, smoothing, unigram)
        return ng.scale(ng.reduce_sum(ce), 1.0 / sum(counts))


def check_unigram(unigram, v: int) -> np.ndarray:
    if unigram is None:
        raise ContractError("label smoothing needs a unigram distribution")
    u = np.asarray(unigram, dtype=np.float64)
    if u.shape != (v,) or np.any(u < 0) or abs(u.sum() - 1.0) > 1e-6:
        raise ContractError("unigram must be a length-V probability vector")
    return u


def unigram_distribution(targets, v: int) -> np.ndarray:
    """Label frequencies over the training targets, each utterance adding one eos; blank excluded."""
    counts = np.zeros(v)
    for y in targets:
        np.add.at(counts, np.asarray(y, dtype=np.int64), 1.0)
        counts[v - 1] += 1.0
    counts[0] = 0.0
    total = counts.sum()
    if total <= 0:
        raise ContractError("cannot build a unigram distribution from empty targets")
    return counts / total
