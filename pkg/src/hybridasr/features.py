"""Log-Mel filterbank extraction from 16-bit PCM mono WAV files."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DataDir, IngestionError, write_text_ark

logger = logging.getLogger(__name__)


class WaveformLengthError(ValueError):
    pass


class WavFormatError(IngestionError):
    pass


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    frame_length: int = 400
    frame_shift: int = 160
    fft_size: int = 512
    num_mels: int = 80
    fmin: float = 20.0
    fmax: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (0 < self.frame_shift <= self.frame_length <= self.fft_size):
            raise ValueError("need 0 < frame_shift <= frame_length <= fft_size")
        if not (0 <= self.fmin < self.high_freq <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.num_mels < 1:
            raise ValueError("num_mels must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def high_freq(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax


def num_frames(num_samples: int, cfg: FbankConfig) -> int:
    return 1 + (num_samples - cfg.frame_length) // cfg.frame_shift


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FbankConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.high_freq), cfg.num_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular filters on the HTK Mel scale, shape [num_mels, fft_size // 2 + 1]."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.high_freq), cfg.num_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel(waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Frame, window (Hamming), power spectrum, Mel filter, natural log with floor."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a mono waveform, got shape {x.shape}")
    if len(x) < cfg.frame_length:
        raise WaveformLengthError(f"waveform of {len(x)} samples is shorter than one frame ({cfg.frame_length})")
    t = num_frames(len(x), cfg)
    idx = np.arange(cfg.frame_length)[None, :] + cfg.frame_shift * np.arange(t)[:, None]
    frames = x[idx] * np.hamming(cfg.frame_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def read_wav(path, expected_rate: int | None = None) -> np.ndarray:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError, OSError) as e:
        raise WavFormatError(f"{path}: unreadable wav ({e})")
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64)


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    data = np.clip(np.round(np.asarray(samples)), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(data.tobytes())


@dataclass
class ExtractionReport:
    ark: str
    shapes: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def index(self) -> dict:
        return {u: (self.ark, shape) for u, shape in self.shapes.items()}


def extract_dir(d: DataDir, ark_path, cfg: FbankConfig = FbankConfig()) -> ExtractionReport:
    """Extract features for every wav.scp entry; bad files are reported, not fatal."""
    if len(d) == 0:
        raise IngestionError("data directory has no utterances")
    if d.source != "wav.scp":
        raise IngestionError("extract_dir needs a wav.scp data directory")
    base = Path(d.path) if d.path else Path(".")
    report = ExtractionReport(ark=str(ark_path))
    feats = {}
    for utt in d.utt_ids:
        wav = Path(d.utterances[utt])
        if not wav.is_absolute() and not wav.exists():
            wav = base / wav
        try:
            mat = logmel(read_wav(wav, cfg.sample_rate), cfg)
        except (IngestionError, WaveformLengthError) as e:
            report.errors[utt] = str(e)
            logger.warning("skipping %s: %s", utt, e)
            continue
        feats[utt] = mat
        report.shapes[utt] = mat.shape
    write_text_ark(feats, ark_path)
    return report
