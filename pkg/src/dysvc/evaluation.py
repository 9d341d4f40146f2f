"""Objective metrics: DTW-aligned MCD, CER/SER and reference-speaker ranking."""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .dsp import MelCepstrum, Waveform

STAGES = ("dysarthric", "vtn", "vtn+vae")
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
SCORE_HEADER = ["speaker", "gender", "stage", "mcd_db", "ser_pct"]
_TONE = re.compile(r"^(.*\D)[1-5]$")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dynamic time warping


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]
    cost: float

    def __len__(self) -> int:
        return len(self.pairs)


def euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between the rows of ``a`` and ``b``."""
    return cdist(a, b, "euclidean")


def dtw_from_cost(cost: np.ndarray) -> AlignmentPath:
    """Minimum-cost monotone path through a local cost matrix.

    Steps are (+1, +1), (+1, 0) and (0, +1) with unit weight.  During the
    backtrace ties prefer the diagonal, then (+1, 0), then (0, +1).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise MetricError("DTW needs two nonempty sequences")
    n, m = cost.shape
    c = cost.tolist()
    inf = math.inf
    acc = [[inf] * m for _ in range(n)]
    acc[0][0] = c[0][0]
    for j in range(1, m):
        acc[0][j] = acc[0][j - 1] + c[0][j]
    for i in range(1, n):
        prev, row, ci = acc[i - 1], acc[i], c[i]
        row[0] = prev[0] + ci[0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = best + ci[j]
    i, j = n - 1, m - 1
    pairs = [(i, j)]
    while i or j:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1][j - 1], acc[i - 1][j], acc[i][j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return AlignmentPath(pairs, acc[n - 1][m - 1])


def dtw_align(a, b, distance: Callable[[np.ndarray, np.ndarray], np.ndarray] = euclidean) -> AlignmentPath:
    a, b = np.atleast_2d(np.asarray(a, dtype=np.float64)), np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("DTW needs two nonempty sequences")
    return dtw_from_cost(distance(a, b))


# ---------------------------------------------------------------------------
# mel-cepstral distortion


def mcd(reference: MelCepstrum | np.ndarray, converted: MelCepstrum | np.ndarray) -> float:
    """Mean per-pair distortion in dB along the DTW path (c_0 excluded)."""
    ref = reference.frames if isinstance(reference, MelCepstrum) else np.asarray(reference, dtype=np.float64)
    conv = converted.frames if isinstance(converted, MelCepstrum) else np.asarray(converted, dtype=np.float64)
    if ref.shape[1] != conv.shape[1]:
        raise MetricError(f"cepstral order mismatch: {ref.shape[1]} vs {conv.shape[1]}")
    dist = euclidean(ref, conv)
    path = dtw_from_cost(dist)
    idx = np.array(path.pairs)
    return float(MCD_SCALE * dist[idx[:, 0], idx[:, 1]].mean())


# ---------------------------------------------------------------------------
# error rates


def validate_tokens(tokens: Sequence[str]) -> list[str]:
    tokens = list(tokens)
    for tok in tokens:
        if not isinstance(tok, str) or not tok or any(ch.isspace() for ch in tok):
            raise MetricError(f"invalid token {tok!r}")
    return tokens


def strip_tone(tokens: Sequence[str]) -> list[str]:
    """Drop one trailing pinyin tone digit (1-5) from every token."""
    out = []
    for tok in validate_tokens(tokens):
        m = _TONE.match(tok)
        out.append(m.group(1) if m else tok)
    return out


@dataclass(frozen=True)
class ErrorRateResult:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return 100.0 * self.errors / self.reference_length

    def __add__(self, other: "ErrorRateResult") -> "ErrorRateResult":
        return ErrorRateResult(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_length + other.reference_length,
        )


def error_rate(reference: Sequence[str], hypothesis: Sequence[str]) -> ErrorRateResult:
    """Unit-cost Levenshtein alignment, split into S, D and I counts."""
    ref, hyp = validate_tokens(reference), validate_tokens(hypothesis)
    if not ref:
        raise MetricError("reference must be nonempty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorRateResult(int(s), dl, ins, n)


def corpus_error_rate(references: Mapping[str, Sequence[str]], hypotheses: Mapping[str, Sequence[str]],
                      syllables: bool = True) -> ErrorRateResult:
    """Pool S/D/I over utterances; with ``syllables`` both sides are tone-stripped (SER)."""
    missing = sorted(set(references) - set(hypotheses))
    if missing:
        raise MetricError(f"no hypothesis for utterances: {missing}")
    total = ErrorRateResult(0, 0, 0, 0)
    for utt in sorted(references):
        ref, hyp = references[utt], hypotheses[utt]
        if syllables:
            ref, hyp = strip_tone(ref), strip_tone(hyp)
        total = total + error_rate(ref, hyp)
    return total


class Transcriber(Protocol):
    """Anything that can turn audio into a token sequence (an ASR engine)."""

    def transcribe(self, waveform: Waveform) -> list[str]: ...


def read_transcripts(path) -> dict[str, list[str]]:
    """Parse ``utt_id<TAB>tok tok tok`` lines."""
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt, sep, rest = line.partition("\t")
        if not sep or not utt:
            raise MetricError(f"{path}:{lineno}: expected 'utt_id<TAB>tokens'")
        if utt in out:
            raise MetricError(f"{path}:{lineno}: duplicate utterance {utt!r}")
        out[utt] = rest.split()
    return out


def write_transcripts(path, transcripts: Mapping[str, Sequence[str]]) -> None:
    lines = [f"{utt}\t{' '.join(toks)}\n" for utt, toks in sorted(transcripts.items())]
    Path(path).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# score tables and ranking


@dataclass
class ScoreRow:
    speaker: str
    gender: str
    stage: str
    mcd_db: float | None = None
    ser_pct: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise MetricError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        for name in ("mcd_db", "ser_pct"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise MetricError(f"{name} for {self.speaker}/{self.stage} is not finite")


@dataclass
class SpeakerScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            key = (row.speaker, row.stage)
            if key in seen:
                raise MetricError(f"duplicate row for speaker {row.speaker!r}, stage {row.stage!r}")
            seen.add(key)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def get(self, speaker: str, stage: str) -> ScoreRow:
        for row in self.rows:
            if row.speaker == speaker and row.stage == stage:
                return row
        raise MetricError(f"no row for speaker {speaker!r}, stage {stage!r}")

    def speakers(self) -> list[str]:
        return sorted({r.speaker for r in self.rows})

    def merged(self, other: "SpeakerScoreTable") -> "SpeakerScoreTable":
        """Combine two tables; metric fields missing on one side are filled from the other."""
        rows = {(r.speaker, r.stage): ScoreRow(**vars(r)) for r in self.rows}
        for r in other.rows:
            key = (r.speaker, r.stage)
            if key not in rows:
                rows[key] = ScoreRow(**vars(r))
                continue
            cur = rows[key]
            cur.mcd_db = r.mcd_db if r.mcd_db is not None else cur.mcd_db
            cur.ser_pct = r.ser_pct if r.ser_pct is not None else cur.ser_pct
        return SpeakerScoreTable(sorted(rows.values(), key=_row_order))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in sorted(self.rows, key=_row_order):
            writer.writerow([r.speaker, r.gender, r.stage, _fmt(r.mcd_db), _fmt(r.ser_pct)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SpeakerScoreTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise MetricError(f"score table header must be {','.join(SCORE_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 5:
                raise MetricError(f"line {lineno}: expected 5 columns, got {len(rec)}")
            speaker, gender, stage, m, s = rec
            rows.append(ScoreRow(speaker, gender, stage, _parse(m), _parse(s)))
        return cls(rows)


def _row_order(row: ScoreRow):
    return row.speaker, STAGES.index(row.stage)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def _parse(text: str) -> float | None:
    return float(text) if text.strip() else None


_CRITERIA = {"MCD": "mcd_db", "SER": "ser_pct"}


def rank_reference_speakers(table: SpeakerScoreTable | Iterable[ScoreRow], criterion: str,
                            stage: str | None = None) -> list[str]:
    """Speakers sorted best-first (lower is better), ties broken by speaker id."""
    rows = list(table)
    if stage is not None:
        rows = [r for r in rows if r.stage == stage]
    if not rows:
        raise MetricError("no rows to rank")
    stages = {r.stage for r in rows}
    if len(stages) > 1:
        raise MetricError(f"rows span several stages {sorted(stages)}; pass stage=")
    try:
        column = _CRITERIA[criterion.upper()]
    except KeyError:
        raise MetricError(f"unknown criterion {criterion!r}; expected MCD or SER") from None
    absent = [r.speaker for r in rows if getattr(r, column) is None]
    if absent:
        raise MetricError(f"criterion column {column} missing for speakers {sorted(absent)}")
    return [r.speaker for r in sorted(rows, key=lambda r: (getattr(r, column), r.speaker))]


def stage_delta(table: SpeakerScoreTable, speaker: str, metric: str, stage_a: str, stage_b: str) -> float:
    column = _CRITERIA.get(metric.upper(), metric)
    values = []
    for stage in (stage_a, stage_b):
        value = getattr(table.get(speaker, stage), column)
        if value is None:
            raise MetricError(f"{column} missing for speaker {speaker!r}, stage {stage!r}")
        values.append(value)
    return values[0] - values[1]
