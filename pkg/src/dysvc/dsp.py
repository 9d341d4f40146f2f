"""Audio I/O, log-mel analysis, mel cepstra and Griffin-Lim synthesis.

Framing never pads: a waveform of ``N`` samples yields
``floor((N - win_length) / hop_length) + 1`` frames, and the inverse STFT
returns ``(T - 1) * hop_length + win_length`` samples.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import signal

from .nncore.checkpoint import IntegrityError

CANONICAL_RATE = 16000
FEATURE_MAGIC = b"DYSF1"


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = CANONICAL_RATE
    n_mels: int = 80
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    fmin: float = 80.0
    fmax: float = 7600.0
    log_floor: float = 1e-10

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def window_seconds(self) -> float:
        return self.win_length / self.sample_rate


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x D natural-log energies
    hop: float = 0.016
    window: float = 0.064
    sample_rate: int = CANONICAL_RATE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelCepstrum:
    frames: np.ndarray  # T x C, c_1..c_C
    order: int


@dataclass
class MagnitudeSpectrogram:
    frames: np.ndarray  # T x (n_fft/2 + 1)
    fft_size: int = 1024
    hop_samples: int = 256
    window: str = "hann"


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, target_rate: int = CANONICAL_RATE) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"{path}: malformed or unsupported WAV ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise AudioFormatError(f"{path}: unsupported encoding, need 16-bit PCM (got {8 * width}-bit)")
    if not raw:
        raise AudioFormatError(f"{path}: zero-length audio")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    wav = Waveform(samples, rate)
    if rate != target_rate:
        wav = resample(wav, target_rate)
    return wav


def save_wav(waveform: Waveform, path) -> None:
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(waveform.sample_rate))
        fh.writeframes(pcm.tobytes())


def resample(waveform: Waveform, rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling (Kaiser window)."""
    g = gcd(int(rate), int(waveform.sample_rate))
    up, down = int(rate) // g, int(waveform.sample_rate) // g
    out = signal.resample_poly(waveform.samples, up, down, window=("kaiser", 5.0))
    return Waveform(np.clip(out, -1.0, 1.0), int(rate))


# ---------------------------------------------------------------------------
# mel analysis


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: float, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``n_mels x (fft_size//2 + 1)``."""
    if n_mels < 2:
        raise ValueError("n_mels must be >= 2")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={fmin}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def filterbank_for(config: FeatureConfig) -> np.ndarray:
    return mel_filterbank(config.n_mels, config.n_fft, config.sample_rate, config.fmin, config.fmax)


def filter_centers(config: FeatureConfig) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))[1:-1]


def _window(config: FeatureConfig) -> np.ndarray:
    win = signal.get_window("hann", config.win_length)
    if config.n_fft > config.win_length:
        pad = config.n_fft - config.win_length
        win = np.pad(win, (pad // 2, pad - pad // 2))
    return win


def frame_count(n_samples: int, config: FeatureConfig) -> int:
    if n_samples < config.n_fft:
        return 0
    return (n_samples - config.n_fft) // config.hop_length + 1


def stft(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    n = frame_count(len(samples), config)
    if n == 0:
        raise ValueError(f"waveform of {len(samples)} samples is shorter than one window ({config.n_fft})")
    frames = np.lib.stride_tricks.sliding_window_view(samples, config.n_fft)[:: config.hop_length][:n]
    return np.fft.rfft(frames * _window(config), axis=-1)


def istft(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`."""
    win = _window(config)
    frames = np.fft.irfft(spec, n=config.n_fft, axis=-1) * win
    n_frames = spec.shape[0]
    length = (n_frames - 1) * config.hop_length + config.n_fft
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        s = t * config.hop_length
        out[s : s + config.n_fft] += frames[t]
        norm[s : s + config.n_fft] += win * win
    # edge samples covered only by the window tails are left unnormalized
    safe = norm > 1e-3 * norm.max()
    return np.where(safe, out / np.where(safe, norm, 1.0), out)


def magnitude(waveform: Waveform, config: FeatureConfig = FeatureConfig()) -> MagnitudeSpectrogram:
    return MagnitudeSpectrogram(np.abs(stft(waveform.samples, config)), config.n_fft, config.hop_length)


def logmel(waveform: Waveform, config: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    """Natural-log mel energies of the STFT magnitude, floored before the log."""
    if waveform.sample_rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {waveform.sample_rate} Hz")
    mag = np.abs(stft(waveform.samples, config))
    energies = mag @ filterbank_for(config).T
    frames = np.log(np.maximum(energies, config.log_floor))
    return MelSpectrogram(frames, config.hop_seconds, config.window_seconds, config.sample_rate)


def mel_cepstrum(mel: MelSpectrogram | np.ndarray, order: int) -> MelCepstrum:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if order >= frames.shape[-1] or order < 1:
        raise ValueError(f"order must satisfy 1 <= order < {frames.shape[-1]}, got {order}")
    ceps = sfft.dct(frames, type=2, norm="ortho", axis=-1)
    return MelCepstrum(ceps[:, 1 : order + 1], order)


def inverse_mel_cepstrum(ceps: np.ndarray) -> np.ndarray:
    """Inverse of a full-order cepstrum *including* c_0 (shape T x D)."""
    return sfft.idct(ceps, type=2, norm="ortho", axis=-1)


# ---------------------------------------------------------------------------
# synthesis


def mel_to_magnitude(mel: MelSpectrogram | np.ndarray, config: FeatureConfig = FeatureConfig(),
                     iterations: int = 200) -> MagnitudeSpectrogram:
    """Nonnegative inversion of the mel projection.

    Starts from the clamped pseudo-inverse and refines it with multiplicative
    updates for ``||F s - m||²`` which keep every entry nonnegative.
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    fb = filterbank_for(config)
    if frames.ndim != 2 or frames.shape[1] != fb.shape[0]:
        raise ValueError(f"mel has {frames.shape[-1]} bands, filterbank has {fb.shape[0]}")
    target = np.exp(frames.astype(np.float64)).T  # D x T
    floor = config.log_floor
    if np.all(target <= floor * (1 + 1e-6)):
        return MagnitudeSpectrogram(np.zeros((frames.shape[0], fb.shape[1])), config.n_fft, config.hop_length)
    s = np.maximum(np.linalg.pinv(fb) @ target, floor)
    numer = fb.T @ target
    gram = fb.T @ fb
    for _ in range(iterations):
        s *= numer / (gram @ s + 1e-30)
    return MagnitudeSpectrogram(np.maximum(s.T, 0.0), config.n_fft, config.hop_length)


def spectral_convergence(samples: np.ndarray, mag: np.ndarray, config: FeatureConfig) -> float:
    est = np.abs(stft(samples, config))
    return float(np.linalg.norm(est - mag) / max(np.linalg.norm(mag), 1e-300))


def griffin_lim(mag: MagnitudeSpectrogram | np.ndarray, iterations: int = 60, seed: int = 0,
                config: FeatureConfig = FeatureConfig(), momentum: float = 0.99,
                history: list | None = None) -> Waveform:
    """Phase retrieval from a magnitude spectrogram (fast Griffin-Lim).

    ``history``, when given, receives the spectral-convergence error after
    every iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    frames = mag.frames if isinstance(mag, MagnitudeSpectrogram) else np.asarray(mag, dtype=np.float64)
    length = (frames.shape[0] - 1) * config.hop_length + config.n_fft
    if not np.any(frames > 0):
        if history is not None:
            history.extend([0.0] * iterations)
        return Waveform(np.zeros(length), config.sample_rate)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(frames.shape))
    norm = np.linalg.norm(frames)
    previous = np.zeros_like(angles)
    x = np.zeros(length)
    for _ in range(iterations):
        x = istft(frames * angles, config)
        rebuilt = stft(x, config)
        if history is not None:
            history.append(float(np.linalg.norm(np.abs(rebuilt) - frames) / norm))
        accel = rebuilt - (momentum / (1.0 + momentum)) * previous
        previous = rebuilt
        angles = accel / np.maximum(np.abs(accel), 1e-16)
    x = istft(frames * angles, config)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, config.sample_rate)


# ---------------------------------------------------------------------------
# DYSF1 feature cache


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError("features must be a T x D matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", *frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(FEATURE_MAGIC):
        raise IntegrityError(f"{path}: bad magic, not a DYSF1 feature file")
    try:
        t, d = struct.unpack_from("<QQ", blob, len(FEATURE_MAGIC))
    except struct.error as exc:
        raise IntegrityError(f"{path}: truncated header") from exc
    start = len(FEATURE_MAGIC) + 16
    if len(blob) - start != 4 * t * d:
        raise IntegrityError(f"{path}: expected {t}x{d} floats, found {(len(blob) - start) // 4}")
    return np.frombuffer(blob, dtype="<f4", offset=start).reshape(t, d).copy()
