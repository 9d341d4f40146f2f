"""Synthetic parallel corpus for desk-scale runs.

Each speaker is a harmonic-plus-noise generator.  Utterances share their
content across speakers: a sequence of toned syllables, each an onset
(noise burst or voiced glide) followed by a vowel with formant targets and a
tone-shaped pitch contour.  Speakers differ in pitch, vocal-tract scaling
(formant shift), spectral tilt, breathiness and speaking rate.  The patient
voice additionally centralizes its formants, weakens its onsets and adds
pitch and amplitude jitter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from ..dsp import Waveform, save_wav

RATE = 16000
CONTROL = 80  # samples per control frame (5 ms)
NEUTRAL = np.array([500.0, 1500.0, 2500.0])
BANDWIDTHS = np.array([90.0, 120.0, 180.0])
GAINS = np.array([1.0, 0.55, 0.3])

VOWELS = {
    "a": (800.0, 1250.0, 2550.0),
    "i": (290.0, 2300.0, 3050.0),
    "u": (330.0, 780.0, 2300.0),
    "ao": (680.0, 1000.0, 2450.0),
    "e": (520.0, 1800.0, 2550.0),
    "o": (520.0, 900.0, 2400.0),
}

# base syllable -> (onset kind, onset parameter, vowel)
SYLLABLES = {
    "ba": ("burst", 700.0, "a"),
    "di": ("burst", 3600.0, "i"),
    "gu": ("burst", 1900.0, "u"),
    "ma": ("nasal", (260.0, 1100.0, 2300.0), "a"),
    "ni": ("nasal", (260.0, 1800.0, 2600.0), "i"),
    "hao": ("breath", 1400.0, "ao"),
    "shi": ("fric", 4800.0, "i"),
    "lu": ("glide", (380.0, 1150.0, 2500.0), "u"),
    "ke": ("burst", 2600.0, "e"),
    "wo": ("glide", (320.0, 700.0, 2300.0), "o"),
}

TONES = {
    1: [1.12, 1.12],
    2: [0.92, 1.0, 1.22],
    3: [0.95, 0.8, 0.82, 1.0],
    4: [1.25, 1.05, 0.82],
    5: [1.0, 0.96],
}


@dataclass(frozen=True)
class Voice:
    f0: float
    formant_scale: float
    tilt: float
    rate: float = 1.0
    breath: float = 0.05
    slur: float = 0.0
    jitter: float = 0.0
    gender: str = "U"


DEFAULT_VOICES = {
    "P01": Voice(f0=115.0, formant_scale=1.0, tilt=1.7, rate=1.4, breath=0.3, slur=0.55, jitter=0.06, gender="M"),
    "SP01": Voice(f0=215.0, formant_scale=1.17, tilt=1.0, breath=0.04, gender="F"),
    "SP02": Voice(f0=128.0, formant_scale=0.94, tilt=1.25, rate=0.95, breath=0.06, gender="M"),
}


@dataclass
class Segment:
    start: int
    end: int
    label: str


def utterance_content(index: int, seed: int = 0, min_syl: int = 2, max_syl: int = 3) -> list[str]:
    rng = np.random.default_rng([seed, index])
    bases = sorted(SYLLABLES)
    n = int(rng.integers(min_syl, max_syl + 1))
    return [f"{bases[int(rng.integers(len(bases)))]}{int(rng.integers(1, 6))}" for _ in range(n)]


def _split_token(token: str) -> tuple[str, int]:
    return token[:-1], int(token[-1])


def synthesize(tokens: Sequence[str], voice: Voice, seed: int) -> tuple[np.ndarray, list[Segment]]:
    """Render ``tokens`` with ``voice``; returns samples and labelled segments."""
    rng = np.random.default_rng(seed)
    dur = lambda base: max(1, int(round(base * voice.rate * rng.uniform(0.9, 1.1) * RATE / CONTROL)))
    # control tracks: f0, formants (3), voiced amp, noise amp, noise centre
    f0, formants, voiced, noise, centre, labels = [], [], [], [], [], []

    def push(n, f, fm, va, na, nc, label):
        f0.extend(np.broadcast_to(f, n) if np.ndim(f) == 0 else f)
        formants.extend(np.broadcast_to(fm, (n, 3)))
        voiced.extend([va] * n)
        noise.extend([na] * n)
        centre.extend([nc] * n)
        labels.extend([label] * n)

    def shape(fm):
        fm = np.asarray(fm, dtype=float)
        return voice.formant_scale * ((1 - voice.slur) * fm + voice.slur * NEUTRAL)

    push(dur(0.06), voice.f0, shape(NEUTRAL), 0.0, 0.0, 1000.0, "sil")
    onset_gain = 1.0 - 0.6 * voice.slur
    for token in tokens:
        base, tone = _split_token(token)
        kind, param, vowel = SYLLABLES[base]
        target = shape(VOWELS[vowel])
        n_on = dur(0.035)
        if kind in ("burst", "fric", "breath"):
            level = {"burst": 0.5, "fric": 0.35, "breath": 0.25}[kind]
            push(n_on, voice.f0, target, 0.0, level * onset_gain, param * voice.formant_scale, base)
        else:
            push(n_on, voice.f0, shape(param), 0.45, 0.0, 1000.0, base)
        n_v = dur(0.12)
        knots = np.array(TONES[tone])
        contour = voice.f0 * np.interp(np.linspace(0, 1, n_v), np.linspace(0, 1, len(knots)), knots)
        push(n_v, contour, target, 1.0, 0.0, 1000.0, base)
        push(dur(0.025), voice.f0, target, 0.0, 0.0, 1000.0, "sil")
    push(dur(0.04), voice.f0, shape(NEUTRAL), 0.0, 0.0, 1000.0, "sil")

    f0 = np.asarray(f0)
    formants = _smooth(np.asarray(formants), 3)
    voiced = _smooth(np.asarray(voiced)[:, None], 2)[:, 0]
    noise_amp = _smooth(np.asarray(noise)[:, None], 1)[:, 0]
    n_ctrl = len(f0)
    if voice.jitter:
        wobble = _smooth(rng.normal(size=(n_ctrl, 2)), 6)
        f0 = f0 * (1 + voice.jitter * wobble[:, 0] / (np.std(wobble[:, 0]) + 1e-9))
        voiced = voiced * np.clip(1 + 2 * voice.jitter * wobble[:, 1] / (np.std(wobble[:, 1]) + 1e-9), 0.3, 1.7)

    n = n_ctrl * CONTROL
    t_ctrl = (np.arange(n_ctrl) + 0.5) * CONTROL
    t = np.arange(n)
    f0_s = np.interp(t, t_ctrl, f0)
    phase = 2 * np.pi * np.cumsum(f0_s) / RATE
    n_harm = int(7600 // (0.8 * f0.min()))
    k = np.arange(1, n_harm + 1)
    freqs = k[None, :] * f0[:, None]  # n_ctrl x K
    env = 0.02 + sum(GAINS[i] * np.exp(-0.5 * ((freqs - formants[:, i : i + 1]) / BANDWIDTHS[i]) ** 2)
                     for i in range(3))
    amps = voiced[:, None] * env * k[None, :] ** (-voice.tilt) * (freqs < 7800)
    harm = np.zeros(n)
    for j in range(n_harm):
        a = np.interp(t, t_ctrl, amps[:, j])
        if a.any():
            harm += a * np.sin((j + 1) * phase)

    white = rng.normal(size=n)
    out = 0.5 * harm
    # onset noise: band-pass white noise around each segment's centre
    noise_s = np.interp(t, t_ctrl, noise_amp)
    for cf in sorted(set(centre)):
        if cf <= 0:
            continue
        mask_ctrl = (np.asarray(centre) == cf) & (np.asarray(noise) > 0)
        if not mask_ctrl.any():
            continue
        lo, hi = cf * 0.7, min(cf * 1.35, 7800.0)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=RATE, output="sos")
        band = signal.sosfilt(sos, white)
        gate = np.interp(t, t_ctrl, _smooth(mask_ctrl[:, None].astype(float), 1)[:, 0])
        out += 0.2 * noise_s * gate * band / (np.std(band) + 1e-12)
    if voice.breath:
        sos = signal.butter(2, 3000.0, btype="lowpass", fs=RATE, output="sos")
        breath = signal.sosfilt(sos, rng.normal(size=n))
        out += voice.breath * 0.08 * np.interp(t, t_ctrl, voiced) * breath / np.std(breath)
    out += 2e-4 * white
    peak = np.max(np.abs(out))
    out = 0.6 * out / peak if peak > 0 else out
    segments = []
    labels_arr = labels
    start = 0
    for i in range(1, n_ctrl + 1):
        if i == n_ctrl or labels_arr[i] != labels_arr[start]:
            segments.append(Segment(start * CONTROL, i * CONTROL, labels_arr[start]))
            start = i
    return out, segments


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 0:
        return x
    kernel = np.hanning(2 * width + 3)[1:-1]
    kernel /= kernel.sum()
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    return np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(x.shape[1])], axis=1)


def frame_labels(segments: Sequence[Segment], n_frames: int, hop: int = 256, win: int = 1024) -> list[str]:
    """Label of the segment under each analysis frame's centre sample."""
    centres = np.arange(n_frames) * hop + win // 2
    starts = np.array([s.start for s in segments])
    idx = np.clip(np.searchsorted(starts, centres, side="right") - 1, 0, len(segments) - 1)
    return [segments[i].label for i in idx]


def split_for(index: int, n_utts: int, n_val: int, n_test: int) -> str:
    if index >= n_utts - n_test:
        return "test"
    if index >= n_utts - n_test - n_val:
        return "validation"
    return "train"


def write_corpus(out_dir, n_utts: int = 60, voices: dict[str, Voice] | None = None, seed: int = 0,
                 n_val: int = 6, n_test: int = 6) -> Path:
    """Render a parallel corpus; returns the path of its JSON-lines manifest.

    Alongside each WAV a ``.lab`` file holds ``start_sample end_sample label``
    lines, used only by the toy recognizer.
    """
    voices = voices or DEFAULT_VOICES
    out_dir = Path(out_dir)
    records = []
    for spk_i, (speaker, voice) in enumerate(sorted(voices.items())):
        (out_dir / "wav" / speaker).mkdir(parents=True, exist_ok=True)
        for i in range(n_utts):
            utt = f"u{i + 1:03d}"
            tokens = utterance_content(i, seed)
            samples, segs = synthesize(tokens, voice, seed=hash_seed(seed, spk_i, i))
            rel = Path("wav") / speaker / f"{utt}.wav"
            save_wav(Waveform(samples, RATE), out_dir / rel)
            (out_dir / rel).with_suffix(".lab").write_text(
                "".join(f"{s.start} {s.end} {s.label}\n" for s in segs))
            records.append({"utt_id": utt, "speaker_id": speaker, "audio_path": str(rel),
                            "transcript": tokens, "split": split_for(i, n_utts, n_val, n_test)})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    genders = {s: v.gender for s, v in voices.items()}
    (out_dir / "speakers.json").write_text(json.dumps(genders, sort_keys=True, indent=1) + "\n")
    return manifest


def hash_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def read_labels(wav_path) -> list[Segment]:
    lab = Path(wav_path).with_suffix(".lab")
    segs = []
    for line in lab.read_text().splitlines():
        a, b, label = line.split()
        segs.append(Segment(int(a), int(b), label))
    return segs
