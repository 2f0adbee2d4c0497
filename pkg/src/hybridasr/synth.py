"""Synthetic template corpus standing in for a real speech database.

Each letter gets a fixed random 80-dim template; an utterance of L letters
is L blocks of ``frames_per_symbol`` copies of the letter templates plus
Gaussian noise. Output is two Kaldi-style data dirs (``train``, ``test``)
whose ``feats.scp`` points at a text archive in the same directory.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DataDir, write_data_dir, write_text_ark

FEAT_DIM = 80
MIN_LEN, MAX_LEN = 3, 8


@dataclass
class SynthCorpus:
    root: Path
    train: Path
    test: Path
    templates: np.ndarray


def _utterance(rng, templates, letters, frames_per_symbol, noise_sigma):
    n = int(rng.integers(MIN_LEN, MAX_LEN + 1))
    ids = [int(rng.integers(len(letters)))]
    while len(ids) < n:
        # no immediate repeats: a doubled letter would just be a longer block
        c = int(rng.integers(len(letters) - 1))
        ids.append(c if c < ids[-1] else c + 1)
    feats = np.repeat(templates[ids], frames_per_symbol, axis=0)
    if noise_sigma > 0:
        feats = feats + rng.normal(0.0, noise_sigma, size=feats.shape)
    return "".join(letters[i] for i in ids), feats


def synth_corpus(seed: int, num_train: int, num_test: int, vocab_size: int, frames_per_symbol: int,
                 noise_sigma: float, out_dir) -> SynthCorpus:
    if not 2 <= vocab_size <= 26:
        raise ValueError("vocab_size must lie in 2..26")
    if num_train < 1 or num_test < 0 or frames_per_symbol < 1 or noise_sigma < 0:
        raise ValueError("num_train and frames_per_symbol must be positive, num_test and noise_sigma nonnegative")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    letters = string.ascii_lowercase[:vocab_size]
    templates = rng.normal(0.0, 1.0, size=(vocab_size, FEAT_DIM))
    paths = {}
    for split, count in (("train", num_train), ("test", num_test)):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        text, spk, scp, feats = {}, {}, {}, {}
        for i in range(count):
            utt = f"{split}{i:05d}"
            text[utt], feats[utt] = _utterance(rng, templates, letters, frames_per_symbol, noise_sigma)
            spk[utt] = f"spk{i % 10}"
            scp[utt] = "feats.ark"
        write_data_dir(DataDir(scp, text, spk, source="feats.scp"), d)
        write_text_ark(feats, d / "feats.ark")
        paths[split] = d
    return SynthCorpus(out_dir, paths["train"], paths["test"], templates)
