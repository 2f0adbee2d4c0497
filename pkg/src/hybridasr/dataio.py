"""Kaldi-style data directories, character token tables, text archives and data.json."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BLANK = "<blank>"
UNK = "<unk>"
EOS = "<eos>"
SPACE = "<space>"


class IngestionError(ValueError):
    """Input data is missing or unreadable."""


class ConsistencyError(IngestionError):
    """Files of one data directory disagree with each other."""


class ArkParseError(IngestionError):
    def __init__(self, msg: str, path=None, lineno: int | None = None):
        where = f"{path}:{lineno}: " if lineno is not None else ""
        super().__init__(where + msg)
        self.lineno = lineno


class ArkShapeError(ArkParseError):
    pass


# ---------------------------------------------------------------------------
# data directories


@dataclass
class DataDir:
    """A parsed Kaldi data directory.

    ``utterances`` maps utt_id to the wav.scp or feats.scp payload; ``source``
    records which of the two it came from.
    """

    utterances: dict
    transcripts: dict
    utt2spk: dict
    source: str = "wav.scp"
    path: str | None = None

    @property
    def utt_ids(self) -> list:
        return sorted(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)


def _read_table(path: Path, allow_empty_payload: bool = False) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(maxsplit=1)
            key = parts[0]
            payload = parts[1].strip() if len(parts) > 1 else ""
            if not payload and not allow_empty_payload:
                raise IngestionError(f"{path}:{lineno}: missing payload for {key!r}")
            if key in out:
                raise ConsistencyError(f"{path}:{lineno}: duplicate utterance id {key!r}")
            out[key] = payload
    return out


def _write_table(path: Path, table: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(table):
            f.write(f"{key} {table[key]}\n")


def parse_data_dir(path) -> DataDir:
    """Read ``text``, ``utt2spk`` and ``wav.scp``/``feats.scp`` and cross-check ids.

    Transcripts may be empty strings. Every id must appear in all three
    files; orphans are reported together.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"data directory {path} does not exist")
    for name in ("text", "utt2spk"):
        if not (path / name).is_file():
            raise ConsistencyError(f"{path}: required file '{name}' is missing")
    if (path / "wav.scp").is_file():
        source = "wav.scp"
    elif (path / "feats.scp").is_file():
        source = "feats.scp"
    else:
        raise ConsistencyError(f"{path}: neither 'wav.scp' nor 'feats.scp' is present")

    text = _read_table(path / "text", allow_empty_payload=True)
    utt2spk = _read_table(path / "utt2spk")
    utts = _read_table(path / source)

    ids = set(text) | set(utt2spk) | set(utts)
    orphans = {
        name: sorted(ids - set(table))
        for name, table in (("text", text), ("utt2spk", utt2spk), (source, utts))
        if ids - set(table)
    }
    if orphans:
        detail = "; ".join(f"missing from {k}: {', '.join(v)}" for k, v in orphans.items())
        raise ConsistencyError(f"{path}: inconsistent utterance ids ({detail})")
    order = sorted(ids)
    return DataDir(
        utterances={u: utts[u] for u in order},
        transcripts={u: text[u] for u in order},
        utt2spk={u: utt2spk[u] for u in order},
        source=source,
        path=str(path),
    )


def write_data_dir(d: DataDir, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_table(path / "text", d.transcripts)
    _write_table(path / "utt2spk", d.utt2spk)
    _write_table(path / d.source, d.utterances)


# ---------------------------------------------------------------------------
# token table


@dataclass
class TokenTable:
    """Character vocabulary with blank=0, unk=1 and a shared sos/eos at V-1."""

    tokens: list

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise IngestionError("token table contains duplicate tokens")
        if self.tokens[:2] != [BLANK, UNK] or self.tokens[-1] != EOS:
            raise IngestionError("token table must start with <blank>, <unk> and end with <eos>")

    blank = 0
    unk = 1

    @property
    def eos(self) -> int:
        return len(self.tokens) - 1

    sos = eos

    def __len__(self) -> int:
        return len(self.tokens)

    @staticmethod
    def symbol(ch: str) -> str:
        return SPACE if ch == " " else ch

    def tokenize(self, text: str) -> list:
        return [self.symbol(ch) for ch in text]

    def encode(self, text: str) -> list:
        return [self.token_to_id.get(tok, self.unk) for tok in self.tokenize(text)]

    def count_unknown(self, text: str) -> int:
        return sum(tok not in self.token_to_id for tok in self.tokenize(text))

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if tok == EOS:
                break
            if tok == BLANK:
                continue
            out.append(" " if tok == SPACE else tok)
        return "".join(out)

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        return "".join(f"{tok} {i}\n" for i, tok in enumerate(self.tokens))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenTable":
        tokens = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                tok, idx = line.rsplit(maxsplit=1)
                if int(idx) != len(tokens):
                    raise IngestionError(f"{path}:{lineno}: ids must be contiguous from 0")
                tokens.append(tok)
        return cls(tokens)


def build_token_table(transcripts) -> TokenTable:
    transcripts = list(transcripts)
    if not transcripts:
        raise IngestionError("cannot build a token table from an empty corpus")
    chars = sorted({ch for text in transcripts for ch in text})
    return TokenTable([BLANK, UNK] + [TokenTable.symbol(ch) for ch in chars] + [EOS])


# ---------------------------------------------------------------------------
# Kaldi text archives


def write_text_ark(feats: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt in sorted(feats):
            mat = np.asarray(feats[utt])
            if mat.ndim != 2:
                raise ArkShapeError(f"{utt}: expected a 2-D matrix, got shape {mat.shape}")
            f.write(f"{utt}  [\n")
            for r, row in enumerate(mat):
                body = " ".join(f"{v:.9g}" for v in row)
                f.write(f"  {body}" + (" ]\n" if r == len(mat) - 1 else " \n"))
            if len(mat) == 0:
                f.write("  ]\n")


def read_text_ark(path) -> dict:
    """Parse a Kaldi text archive into ``{utt_id: float64 matrix}``."""
    out = {}
    utt, rows, start = None, None, None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if utt is None:
                if len(fields) < 2 or fields[1] != "[":
                    raise ArkParseError("expected '<utt_id> [' to open a matrix", path, lineno)
                utt, rows, start = fields[0], [], lineno
                if utt in out:
                    raise ArkParseError(f"duplicate utterance {utt!r}", path, lineno)
                fields = fields[2:]
                if not fields:
                    continue
            closing = fields[-1] == "]"
            if closing:
                fields = fields[:-1]
            if "[" in fields or "]" in fields:
                raise ArkParseError("unexpected bracket inside a matrix", path, lineno)
            if fields:
                try:
                    rows.append([float(v) for v in fields])
                except ValueError:
                    raise ArkParseError("non-numeric value in matrix row", path, lineno)
                if len(rows[-1]) != len(rows[0]):
                    raise ArkShapeError(
                        f"ragged row in {utt!r}: {len(rows[-1])} columns, expected {len(rows[0])}", path, lineno
                    )
            if closing:
                out[utt] = np.array(rows, dtype=np.float64).reshape(len(rows), len(rows[0]) if rows else 0)
                utt = None
    if utt is not None:
        raise ArkParseError(f"matrix for {utt!r} opened at line {start} is never closed", path, start)
    return out


class FeatureStore:
    """Lazy, cached reader for features referenced from data.json."""

    def __init__(self):
        self._arks: dict = {}

    def get(self, ark_path, utt: str) -> np.ndarray:
        key = os.fspath(ark_path)
        if key not in self._arks:
            self._arks[key] = read_text_ark(key)
        try:
            return self._arks[key][utt]
        except KeyError:
            raise IngestionError(f"{key}: no features for {utt!r}")


# ---------------------------------------------------------------------------
# data.json


@dataclass
class MakeJsonResult:
    data: dict
    unk_count: int = 0
    warnings: list = field(default_factory=list)


def make_json(d: DataDir, feats: dict, table: TokenTable) -> MakeJsonResult:
    """Build the data.json dict.

    ``feats`` maps utt_id to ``(ark_path, (T, D))``. Characters outside the
    table become ``<unk>``; how many is returned alongside the data.
    """
    missing = [u for u in d.utt_ids if u not in feats]
    if missing:
        raise ConsistencyError(f"no features for: {', '.join(missing)}")
    utts, unk = {}, 0
    v = len(table)
    for u in d.utt_ids:
        ark, shape = feats[u]
        text = d.transcripts[u]
        ids = table.encode(text)
        n_unk = table.count_unknown(text)
        unk += n_unk
        tokens = [table.tokens[i] if i != table.unk else UNK for i in ids]
        utts[u] = {
            "input": [{"feat": os.fspath(ark), "name": "input1", "shape": [int(shape[0]), int(shape[1])]}],
            "output": [
                {
                    "name": "target1",
                    "shape": [len(ids), v],
                    "text": text,
                    "token": " ".join(tokens),
                    "tokenid": " ".join(str(i) for i in ids),
                }
            ],
            "utt2spk": d.utt2spk[u],
        }
    warnings = [f"{unk} characters mapped to {UNK}"] if unk else []
    for w in warnings:
        logger.warning(w)
    return MakeJsonResult({"utts": utts}, unk, warnings)


def dumps_json(data: dict) -> str:
    return json.dumps(data, indent=4, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(data: dict, path) -> None:
    Path(path).write_text(dumps_json(data), encoding="utf-8")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "utts" not in data:
        raise IngestionError(f"{path}: not a data.json file (no 'utts' key)")
    return data


def utt_tokenids(record: dict) -> list:
    ids = record["output"][0]["tokenid"]
    return [int(i) for i in ids.split()] if ids else []


def utt_shape(record: dict) -> tuple:
    return tuple(record["input"][0]["shape"])
