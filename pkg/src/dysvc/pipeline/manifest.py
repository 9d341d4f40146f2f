"""JSON-lines corpus manifests.

One record per line with exactly the fields ``utt_id``, ``speaker_id``,
``audio_path`` (relative paths resolve against the manifest's directory),
``transcript`` (list of tokens or a space separated string) and ``split``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import ManifestError

SPLITS = ("train", "validation", "test")
FIELDS = ("utt_id", "speaker_id", "audio_path", "transcript", "split")


@dataclass(frozen=True)
class ManifestRecord:
    utt_id: str
    speaker_id: str
    audio_path: Path
    transcript: tuple[str, ...]
    split: str
    line: int = 0

    @property
    def key(self) -> tuple[str, str]:
        return (self.speaker_id, self.utt_id)


class CorpusManifest:
    def __init__(self, records: Iterable[ManifestRecord], source: str = "<memory>"):
        self.source = source
        self.records = list(records)
        self._by_key = {}
        for rec in self.records:
            if rec.split not in SPLITS:
                raise ManifestError(f"{source}:{rec.line}: split {rec.split!r} not allowed; use one of {list(SPLITS)}")
            prev = self._by_key.get(rec.key)
            if prev is not None:
                raise ManifestError(
                    f"{source}: duplicate (utt_id, speaker_id) {rec.key[::-1]} on lines {prev.line} and {rec.line}")
            self._by_key[rec.key] = rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, speaker: str, utt_id: str) -> ManifestRecord:
        try:
            return self._by_key[(speaker, utt_id)]
        except KeyError:
            raise ManifestError(f"{self.source}: no record for speaker {speaker!r} utterance {utt_id!r}") from None

    def has(self, speaker: str, utt_id: str) -> bool:
        return (speaker, utt_id) in self._by_key

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def select(self, speakers: Iterable[str] | None = None, split: str | None = None) -> list[ManifestRecord]:
        wanted = None if speakers is None else set(speakers)
        return [r for r in self.records
                if (wanted is None or r.speaker_id in wanted) and (split is None or r.split == split)]

    def utt_ids(self, speaker: str, split: str) -> list[str]:
        return sorted(r.utt_id for r in self.select([speaker], split))

    def test_ids(self) -> set[str]:
        return {r.utt_id for r in self.records if r.split == "test"}

    def require_speakers(self, speakers: Iterable[str]) -> None:
        missing = sorted(set(speakers) - set(self.speakers()))
        if missing:
            raise ManifestError(f"{self.source}: configured speaker(s) {missing} have no records")


def _parse_line(text: str, lineno: int, base: Path, source: str) -> ManifestRecord:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{source}:{lineno}: cannot parse JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ManifestError(f"{source}:{lineno}: expected a JSON object")
    missing = [f for f in FIELDS if f not in obj]
    extra = sorted(set(obj) - set(FIELDS))
    if missing or extra:
        raise ManifestError(f"{source}:{lineno}: missing fields {missing}, unexpected fields {extra}")
    transcript = obj["transcript"]
    if isinstance(transcript, str):
        transcript = transcript.split()
    if not isinstance(transcript, list) or not all(isinstance(t, str) and t and not any(c.isspace() for c in t)
                                                   for t in transcript):
        raise ManifestError(f"{source}:{lineno}: transcript must be a list of nonempty tokens")
    for f in ("utt_id", "speaker_id", "audio_path", "split"):
        if not isinstance(obj[f], str) or not obj[f]:
            raise ManifestError(f"{source}:{lineno}: field {f!r} must be a nonempty string")
    path = Path(obj["audio_path"])
    if not path.is_absolute():
        path = base / path
    return ManifestRecord(obj["utt_id"], obj["speaker_id"], path, tuple(transcript), obj["split"], lineno)


def load_manifest(path, check_audio: bool = True) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, text in enumerate(path.read_text().splitlines(), start=1):
        if not text.strip():
            continue
        records.append(_parse_line(text, lineno, path.parent, str(path)))
    manifest = CorpusManifest(records, str(path))
    if check_audio:
        dangling = [f"line {r.line}: {r.audio_path}" for r in records if not r.audio_path.is_file()]
        if dangling:
            raise ManifestError(f"{path}: audio file(s) missing: {dangling[:5]}"
                                + (f" and {len(dangling) - 5} more" if len(dangling) > 5 else ""))
    return manifest
