"""Six-stage recipe driver: prep, feats, json, lmtrain, asrtrain, decode+score.

Every stage reads the previous stage's artifacts from the experiment dir and
leaves a ``.done.<stage>`` marker holding a hash of the configuration it ran
with. The hash is cumulative, so editing an early section invalidates every
later stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import dataio
from .decode import DecodeConfig, check_token_tables, decode_set
from .features import FbankConfig, extract_dir
from .lm import CharRnnLm, LmConfig, lm_train
from .model import AttentionConfig, DecoderConfig, E2E, EncoderConfig, ModelConfig
from .score import corpus_error_rate, read_hyp_file
from .train import TrainConfig, fit, load_utterances

logger = logging.getLogger(__name__)

EXP_ROOT_ENV = "HYBRIDASR_EXP_ROOT"
STAGES = ("prep", "feats", "json", "lmtrain", "asrtrain", "decode")
SETS = ("train", "dev", "test")


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _build(cls, section: dict | None, where: str, **defaults):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    for k, v in defaults.items():
        if k in names:
            section.setdefault(k, v)
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{where}' section: {e}") from e


@dataclass
class LmSection:
    enabled: bool = True
    config: LmConfig = field(default_factory=LmConfig)


@dataclass
class RecipeConfig:
    exp_dir: Path
    data: dict  # set name -> source data dir (None when absent)
    precision: str = "single"
    seed: int = 1
    fbank: FbankConfig = field(default_factory=FbankConfig)
    model: dict = field(default_factory=dict)  # ModelConfig minus idim/odim
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LmSection = field(default_factory=LmSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    decode_sets: tuple = ("test",)
    raw: dict = field(default_factory=dict)

    def model_config(self, idim: int, odim: int) -> ModelConfig:
        m = self.model
        return ModelConfig(idim=idim, odim=odim, encoder=m["encoder"], attention=m["attention"],
                           decoder=m["decoder"], precision=self.precision,
                           init_scale=m.get("init_scale", 0.1), seed=self.seed)

    def stage_hash(self, stage: int) -> str:
        """Hash of every section that stages 0..``stage`` depend on."""
        keys = ["data", "precision", "seed"]
        if stage >= 1:
            keys.append("fbank")
        if stage >= 3:
            keys.append("lm")
        if stage >= 4:
            keys += ["model", "train"]
        if stage >= 5:
            keys += ["decode"]
        sub = {k: self.raw.get(k) for k in keys}
        return hashlib.sha256(json.dumps(sub, sort_keys=True, default=str).encode("utf-8")).hexdigest()


_TOP_KEYS = {"exp_dir", "data", "precision", "seed", "fbank", "model", "train", "lm", "decode"}


def parse_config(raw: dict, base_dir=None, exp_root: str | None = None) -> RecipeConfig:
    if not isinstance(raw, dict):
        raise ConfigError("recipe config must be a mapping")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    base = Path(base_dir or ".")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else (base / p)

    data = raw.get("data") or {}
    bad = sorted(set(data) - set(SETS))
    if bad:
        raise ConfigError(f"unknown key(s) in 'data': {', '.join(bad)}")
    if not data.get("train"):
        raise ConfigError("'data.train' is required")
    sets = {s: (resolve(data[s]) if data.get(s) else None) for s in SETS}

    exp_root = exp_root if exp_root is not None else os.environ.get(EXP_ROOT_ENV)
    exp = Path(exp_root) if exp_root else resolve(raw.get("exp_dir", "exp"))
    precision = raw.get("precision", "single")
    if precision not in ("single", "double"):
        raise ConfigError("precision must be 'single' or 'double'")
    seed = int(raw.get("seed", 1))

    fbank = _build(FbankConfig, raw.get("fbank"), "fbank")
    m = dict(raw.get("model") or {})
    bad = sorted(set(m) - {"encoder", "attention", "decoder", "init_scale"})
    if bad:
        raise ConfigError(f"unknown key(s) in 'model': {', '.join(bad)}")
    model = {
        "encoder": _build(EncoderConfig, m.get("encoder"), "model.encoder"),
        "attention": _build(AttentionConfig, m.get("attention"), "model.attention"),
        "decoder": _build(DecoderConfig, m.get("decoder"), "model.decoder"),
        "init_scale": float(m.get("init_scale", 0.1)),
    }
    train = _build(TrainConfig, raw.get("train"), "train", seed=seed)
    lm_raw = dict(raw.get("lm") or {})
    enabled = bool(lm_raw.pop("enabled", True))
    lm = LmSection(enabled, _build(LmConfig, lm_raw, "lm", seed=seed, precision=precision))
    dec_raw = dict(raw.get("decode") or {})
    decode_sets = tuple(dec_raw.pop("sets", ["test"] if sets["test"] else ["dev"] if sets["dev"] else []))
    for s in decode_sets:
        if s not in SETS or sets.get(s) is None:
            raise ConfigError(f"decode set {s!r} has no data directory")
    decode = _build(DecodeConfig, dec_raw, "decode")
    return RecipeConfig(exp, sets, precision, seed, fbank, model, train, lm, decode, decode_sets, raw)


def load_config(path, exp_root: str | None = None) -> RecipeConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    return parse_config(raw or {}, base_dir=path.parent, exp_root=exp_root)


# ---------------------------------------------------------------------------
# stage artifacts


class Layout:
    def __init__(self, exp: Path):
        self.exp = Path(exp)

    def data(self, s):
        return self.exp / "data" / s

    def ark(self, s):
        return self.exp / "feats" / f"{s}.ark"

    def json(self, s):
        return self.exp / "dump" / s / "data.json"

    @property
    def tokens(self):
        return self.exp / "dump" / "tokens.txt"

    @property
    def lm_ckpt(self):
        return self.exp / "lm" / "rnnlm.ckpt"

    @property
    def asr_dir(self):
        return self.exp / "asr"

    @property
    def asr_ckpt(self):
        return self.exp / "asr" / "model.best.ckpt"

    def decode_dir(self, s):
        return self.exp / "decode" / s

    def score_dir(self, s):
        return self.exp / "score" / s

    def marker(self, stage: int):
        return self.exp / f".done.{stage}"


def _require(paths, stage: int):
    for p in paths:
        if not Path(p).exists():
            raise PrerequisiteError(f"missing {p}; run stage {stage} ({STAGES[stage]}) first")


def _present_sets(cfg: RecipeConfig) -> list:
    return [s for s in SETS if cfg.data[s] is not None]


def stage_prep(cfg: RecipeConfig, lay: Layout) -> None:
    for s in _present_sets(cfg):
        src = cfg.data[s]
        if not src.is_dir():
            raise PrerequisiteError(f"data directory {src} for '{s}' does not exist")
        d = dataio.parse_data_dir(src)
        if d.source == "feats.scp":
            # make archive references absolute so the copy is self-contained
            d.utterances = {u: str((src / p).resolve()) if not Path(p).is_absolute() else p
                            for u, p in d.utterances.items()}
        out = lay.data(s)
        if out.exists():
            shutil.rmtree(out)
        dataio.write_data_dir(d, out)


def stage_feats(cfg: RecipeConfig, lay: Layout) -> None:
    sets = _present_sets(cfg)
    _require([lay.data(s) for s in sets], 0)
    lay.ark("x").parent.mkdir(parents=True, exist_ok=True)
    for s in sets:
        d = dataio.parse_data_dir(lay.data(s))
        if d.source == "wav.scp":
            report = extract_dir(d, lay.ark(s), cfg.fbank)
            if report.errors:
                logger.warning("%s: %d utterances failed feature extraction", s, len(report.errors))
        else:
            store = dataio.FeatureStore()
            dataio.write_text_ark({u: store.get(p, u) for u, p in d.utterances.items()}, lay.ark(s))


def stage_json(cfg: RecipeConfig, lay: Layout) -> None:
    sets = _present_sets(cfg)
    _require([lay.data(s) for s in sets], 0)
    _require([lay.ark(s) for s in sets], 1)
    train = dataio.parse_data_dir(lay.data("train"))
    table = dataio.build_token_table(train.transcripts.values())
    lay.tokens.parent.mkdir(parents=True, exist_ok=True)
    table.save(lay.tokens)
    for s in sets:
        d = dataio.parse_data_dir(lay.data(s))
        feats = dataio.read_text_ark(lay.ark(s))
        ark = str(lay.ark(s).resolve())
        index = {u: (ark, m.shape) for u, m in feats.items() if u in d.utterances}
        dropped = sorted(set(d.utterances) - set(index))
        if dropped:
            logger.warning("%s: %d utterances have no features and are left out", s, len(dropped))
            d = dataio.DataDir({u: d.utterances[u] for u in index}, {u: d.transcripts[u] for u in index},
                               {u: d.utt2spk[u] for u in index}, d.source, d.path)
        lay.json(s).parent.mkdir(parents=True, exist_ok=True)
        dataio.write_json(dataio.make_json(d, index, table).data, lay.json(s))


def _token_corpus(path) -> list:
    data = dataio.load_json(path)
    return [dataio.utt_tokenids(data["utts"][u]) for u in sorted(data["utts"])]


def stage_lmtrain(cfg: RecipeConfig, lay: Layout) -> None:
    if not cfg.lm.enabled:
        logger.info("language model disabled; skipping stage 3")
        return
    _require([lay.json("train"), lay.tokens], 2)
    table = dataio.TokenTable.load(lay.tokens)
    valid = _token_corpus(lay.json("dev")) if cfg.data["dev"] is not None else None
    model, ppl = lm_train(_token_corpus(lay.json("train")), len(table), cfg.lm.config, valid)
    lay.lm_ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(lay.lm_ckpt, {"token_checksum": table.checksum()})
    (lay.lm_ckpt.parent / "perplexity.json").write_text(json.dumps(ppl, indent=2) + "\n", encoding="utf-8")


def stage_asrtrain(cfg: RecipeConfig, lay: Layout) -> None:
    _require([lay.json("train"), lay.tokens], 2)
    table = dataio.TokenTable.load(lay.tokens)
    store = dataio.FeatureStore()
    train = load_utterances(dataio.load_json(lay.json("train")), store)
    valid = load_utterances(dataio.load_json(lay.json("dev")), store) if cfg.data["dev"] is not None else None
    model_cfg = cfg.model_config(train[0].feats.shape[1], len(table))
    fit(train, model_cfg, cfg.train, lay.asr_dir, valid, extra={"token_checksum": table.checksum()})


def stage_decode(cfg: RecipeConfig, lay: Layout, decode_cfg: DecodeConfig | None = None) -> dict:
    decode_cfg = decode_cfg or cfg.decode
    _require([lay.asr_ckpt], 4)
    _require([lay.tokens] + [lay.json(s) for s in cfg.decode_sets], 2)
    table = dataio.TokenTable.load(lay.tokens)
    model, manifest = E2E.load(lay.asr_ckpt)
    lm = None
    if cfg.lm.enabled and decode_cfg.lm_weight > 0:
        _require([lay.lm_ckpt], 3)
        lm, lm_manifest = CharRnnLm.load(lay.lm_ckpt)
        check_token_tables(manifest, lm_manifest)
    check_token_tables(manifest, {"token_checksum": table.checksum()})
    rates = {}
    for s in cfg.decode_sets:
        data = dataio.load_json(lay.json(s))
        decode_set(data, model, table, decode_cfg, lay.decode_dir(s), lm)
        rates[s] = score_set(data, lay.decode_dir(s) / "hyp.txt", lay.score_dir(s))
    return rates


def score_set(data: dict, hyp_path, out_dir) -> dict:
    refs = {u: rec["output"][0]["text"] for u, rec in data["utts"].items()}
    hyps = read_hyp_file(hyp_path)
    # utterances that failed to decode count as empty hypotheses
    hyps = {u: hyps.get(u, "") for u in refs} if set(hyps) <= set(refs) else hyps
    out = {}
    for unit, stem in (("char", "cer"), ("word", "wer")):
        report = corpus_error_rate(refs, hyps, unit)
        report.write(out_dir, stem)
        out[stem] = report.rate
    return out


STAGE_FUNCS = (stage_prep, stage_feats, stage_json, stage_lmtrain, stage_asrtrain, stage_decode)


def run(cfg: RecipeConfig, stage: int = 0, stop_stage: int = 5, force: bool = False) -> list:
    """Run stages ``stage..stop_stage``; returns the stages that actually ran."""
    if not 0 <= stage <= stop_stage <= 5:
        raise ConfigError("need 0 <= stage <= stop_stage <= 5")
    lay = Layout(cfg.exp_dir)
    lay.exp.mkdir(parents=True, exist_ok=True)
    ran = []
    for k in range(stage, stop_stage + 1):
        marker = lay.marker(k)
        h = cfg.stage_hash(k)
        if not force and marker.is_file() and marker.read_text(encoding="utf-8").strip() == h:
            logger.info("stage %d (%s) already done", k, STAGES[k])
            continue
        logger.info("stage %d (%s)", k, STAGES[k])
        for later in range(k, 6):
            lay.marker(later).unlink(missing_ok=True)
        STAGE_FUNCS[k](cfg, lay)
        marker.write_text(h + "\n", encoding="utf-8")
        ran.append(k)
    return ran
