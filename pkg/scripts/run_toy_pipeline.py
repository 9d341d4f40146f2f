"""Build the toy corpus (if needed), run every stage and print the checks.

Usage: python scripts/run_toy_pipeline.py WORKDIR [--config configs/toy.ini]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from dysvc import dsp
from dysvc import evaluation as ev
from dysvc.pipeline import Pipeline, emit_report, load_config, load_manifest, stage2_diagnostics, toycorpus

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("workdir", type=Path)
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.ini")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    corpus = args.workdir / "corpus"
    manifest_path = corpus / "manifest.jsonl"
    if not manifest_path.is_file():
        toycorpus.write_corpus(corpus)
    start = time.time()
    pipe = Pipeline(load_config(args.config).with_seed(args.seed), load_manifest(manifest_path), args.workdir / "run")
    report = pipe.run_all()
    emit_report(report, pipe.out)
    checks = stage2_diagnostics(pipe)
    order = pipe.config.evaluation.mcd_order
    ratios = {}
    for row in report.table:
        if row.stage == "vtn":
            ratios[row.speaker] = row.mcd_db / report.table.get(row.speaker, "dysarthric").mcd_db
    checks["vtn_over_baseline_mcd"] = ratios
    checks["seconds"] = round(time.time() - start, 1)
    (pipe.out / "diagnostics.json").write_text(json.dumps(checks, indent=1, sort_keys=True) + "\n")
    print((pipe.out / "summary.txt").read_text(), end="")
    print(json.dumps(checks, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
