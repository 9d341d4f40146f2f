"""A toy syllable recognizer for synthetic corpora.

Stands in for an external ASR engine: a logistic-regression frame classifier
over log-mel frames with ±4 frames of context, trained on labelled frames of
normal speakers.  Decoding smooths frame decisions with a majority vote and
collapses runs into toneless syllable tokens.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from ..dsp import FeatureConfig, Waveform, logmel

SILENCE = "sil"


def stack_context(frames: np.ndarray, width: int = 2) -> np.ndarray:
    padded = np.pad(frames, ((width, width), (0, 0)), mode="edge")
    return np.concatenate([padded[i : i + len(frames)] for i in range(2 * width + 1)], axis=1)


def _majority(labels: np.ndarray, width: int) -> np.ndarray:
    out = labels.copy()
    for t in range(len(labels)):
        window = labels[max(0, t - width) : t + width + 1]
        values, counts = np.unique(window, return_counts=True)
        out[t] = values[np.argmax(counts)]
    return out


class ToyRecognizer:
    def __init__(self, config: FeatureConfig = FeatureConfig(), context: int = 4, min_run: int = 5, seed: int = 0):
        self.config = config
        self.context = context
        self.min_run = min_run
        self.seed = seed
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None
        self.model: LogisticRegression | None = None

    def fit(self, utterances: Sequence[tuple[np.ndarray, Sequence[str]]]) -> "ToyRecognizer":
        """Fit on ``(logmel frames, per-frame labels)`` pairs."""
        frames = np.concatenate([f for f, _ in utterances])
        self.mean, self.std = frames.mean(0), frames.std(0) + 1e-3
        x = np.concatenate([self._inputs(f) for f, _ in utterances])
        y = np.concatenate([np.asarray(lab) for _, lab in utterances])
        self.model = LogisticRegression(max_iter=500, C=0.5, random_state=self.seed).fit(x, y)
        return self

    def _inputs(self, frames: np.ndarray) -> np.ndarray:
        return stack_context((frames - self.mean) / self.std, self.context)

    def frame_accuracy(self, frames: np.ndarray, labels: Sequence[str]) -> float:
        return float(np.mean(self.model.predict(self._inputs(frames)) == np.asarray(labels)))

    def decode_frames(self, frames: np.ndarray) -> list[str]:
        if self.model is None:
            raise RuntimeError("recognizer is not fitted")
        labels = _majority(self.model.predict(self._inputs(frames)), 2)
        tokens, start = [], 0
        for t in range(1, len(labels) + 1):
            if t == len(labels) or labels[t] != labels[start]:
                if labels[start] != SILENCE and t - start >= self.min_run:
                    if not tokens or tokens[-1][1] < start - 1 or tokens[-1][0] != labels[start]:
                        tokens.append((str(labels[start]), t))
                start = t
        return [tok for tok, _ in tokens]

    def transcribe(self, waveform: Waveform) -> list[str]:
        return self.decode_frames(logmel(waveform, self.config).frames)
