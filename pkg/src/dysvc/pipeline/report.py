"""Report files: scores, plot-ready scatter data, loss curves and a summary.

``scores.csv``, ``scatter.csv``, ``losses.tsv`` and ``summary.txt`` depend
only on run results and are byte-identical across reruns with the same
configuration.  ``provenance.json`` adds hashes and a timestamp and is
therefore kept separate.
"""
from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path

from .. import evaluation as ev
from .stages import RunReport

LOSS_HEADER = "phase\tepoch\tname\tvalue\n"
SCATTER_STAGE = "vtn"


def scatter_csv(table: ev.SpeakerScoreTable, stage: str = SCATTER_STAGE) -> str:
    lines = ["speaker,gender,mcd_db,ser_pct"]
    for row in table:
        if row.stage == stage:
            lines.append(",".join([row.speaker, row.gender, ev._fmt(row.mcd_db), ev._fmt(row.ser_pct)]))
    return "\n".join(lines) + "\n"


def losses_tsv(curves: dict[str, list[dict]]) -> str:
    out = [LOSS_HEADER]
    for phase in sorted(curves):
        for entry in curves[phase]:
            epoch = entry["epoch"]
            for name in sorted(k for k in entry if k not in ("epoch", "phase")):
                value = entry[name]
                out.append(f"{phase}\t{epoch}\t{name}\t{'' if value is None else f'{value:.6f}'}\n")
    return "".join(out)


def _stage_of(table: ev.SpeakerScoreTable, metric: str, preferred: tuple[str, ...]) -> str | None:
    col = ev._CRITERIA[metric]
    for stage in preferred:
        if any(r.stage == stage and getattr(r, col) is not None for r in table):
            return stage
    return None


def summary_text(table: ev.SpeakerScoreTable) -> str:
    lines = []
    for metric, preferred, unit in (("MCD", ("vtn", "vtn+vae", "dysarthric"), "dB"),
                                    ("SER", ("vtn+vae", "vtn", "dysarthric"), "%")):
        stage = _stage_of(table, metric, preferred)
        if stage is None:
            lines.append(f"best reference speaker by {metric}: n/a (no {metric} scores)")
            continue
        rows = [r for r in table if r.stage == stage and getattr(r, ev._CRITERIA[metric]) is not None]
        ranking = ev.rank_reference_speakers(rows, metric)
        best = table.get(ranking[0], stage)
        lines.append(f"best reference speaker by {metric} ({stage}): {ranking[0]} "
                     f"({getattr(best, ev._CRITERIA[metric]):.2f} {unit}); ranking: {' '.join(ranking)}")
    lines.append("stage deltas (earlier stage minus later stage; positive = improvement):")
    for speaker in table.speakers():
        for metric, a, b in (("MCD", "dysarthric", "vtn"), ("SER", "dysarthric", "vtn"),
                             ("SER", "dysarthric", "vtn+vae")):
            try:
                delta = ev.stage_delta(table, speaker, metric, a, b)
            except ev.MetricError:
                continue
            lines.append(f"  {speaker} {metric} {a} -> {b}: {delta:.2f}")
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "scores.csv": report.table.to_csv(),
            "scatter.csv": scatter_csv(report.table),
            "losses.tsv": losses_tsv(report.curves),
            "summary.txt": summary_text(report.table),
        }
        written = {}
        for name, text in files.items():
            (out / name).write_text(text)
            written[name] = out / name
        prov = {**report.provenance, "written_at": _dt.datetime.now(_dt.timezone.utc).isoformat()}
        (out / "provenance.json").write_text(json.dumps(prov, sort_keys=True, indent=1) + "\n")
        written["provenance.json"] = out / "provenance.json"
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return written
