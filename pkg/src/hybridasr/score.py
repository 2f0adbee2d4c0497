"""Character and word error rates by Levenshtein alignment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        """Percent error; an empty reference counts each error as 100%."""
        return 100.0 * self.errors / max(self.ref_len, 1)

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def edit_distance(ref, hyp) -> ErrorCounts:
    """Unit-cost alignment; ties go to fewer insertions, then fewer deletions.

    Each DP cell holds the lexicographic minimum of (cost, insertions,
    deletions), which is additive along a path, so the cellwise minimum is
    the tie-broken optimum.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    prev = [(j, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i)]
        for j in range(1, m + 1):
            c, ins, dele = prev[j - 1]
            diag = (c + (ref[i - 1] != hyp[j - 1]), ins, dele)
            c, ins, dele = cur[j - 1]
            left = (c + 1, ins + 1, dele)
            c, ins, dele = prev[j]
            up = (c + 1, ins, dele + 1)
            cur.append(min(diag, left, up))
        prev = cur
    cost, ins, dele = prev[m]
    return ErrorCounts(cost - ins - dele, ins, dele, n)


def units(text: str, unit: str) -> list:
    if unit == "char":
        return list(text.replace("<space>", " "))
    if unit == "word":
        return text.replace("<space>", " ").split()
    raise ScoringError(f"unknown unit {unit!r}; expected 'char' or 'word'")


@dataclass
class CorpusReport:
    unit: str
    per_utt: dict
    total: ErrorCounts

    @property
    def rate(self) -> float:
        return self.total.rate

    def to_text(self) -> str:
        lines = []
        for utt, c in self.per_utt.items():
            lines.append(f"{utt} {c.substitutions} {c.insertions} {c.deletions} {c.ref_len} {c.rate:.2f}")
        t = self.total
        lines.append(f"TOTAL {t.substitutions} {t.insertions} {t.deletions} {t.ref_len} {t.rate:.2f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        body = {
            "unit": self.unit,
            "utts": {u: dict(asdict(c), rate=c.rate) for u, c in self.per_utt.items()},
            "total": dict(asdict(self.total), rate=self.total.rate),
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str | None = None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.unit
        (out_dir / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")
        (out_dir / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")


def corpus_error_rate(refs: dict, hyps: dict, unit: str = "char") -> CorpusReport:
    if set(refs) != set(hyps):
        only_ref = sorted(set(refs) - set(hyps))
        only_hyp = sorted(set(hyps) - set(refs))
        raise ScoringError(f"utterance sets differ: only in reference {only_ref}, only in hypothesis {only_hyp}")
    per_utt = {}
    total = ErrorCounts()
    for utt in sorted(refs):
        c = edit_distance(units(refs[utt], unit), units(hyps[utt], unit))
        per_utt[utt] = c
        total = total + c
    return CorpusReport(unit, per_utt, total)


def read_hyp_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt, _, text = line.partition("\t")
            out[utt] = text
    return out
