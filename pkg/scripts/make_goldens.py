"""Regenerate the byte-exact golden CLI outputs under tests/golden/.

Run from the repository root:

    python3 scripts/make_goldens.py

Golden runs use --no-figures so the comparisons stay independent of the
plotting backend; figure rendering is covered separately by the CLI tests.
Input paths are passed relative to the repository root so the recorded
manifests are machine-independent.
"""

from __future__ import annotations

import contextlib
import io
import json
import shutil
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from care.cli import main  # noqa: E402

GOLDEN = REPO_ROOT / "tests" / "golden"
INPUTS = GOLDEN / "inputs"

TRAIN_TINY = {
    "method": "care",
    "seed": 3,
    "steps": 12,
    "batch_size": 8,
    "lambda": 0.2,
    "source_n": 160,
    "target_n": 80,
    "hidden_dim": 6,
    "embed_dim": 3,
}

BENCH_TINY = {
    "seeds": [0, 1],
    "steps": 10,
    "batch_size": 8,
    "lambda": 0.2,
    "source_n": 120,
    "target_n": 60,
    "hidden_dim": 6,
    "embed_dim": 3,
}


def run(argv: list[str]) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = main(argv)
    if rc != 0:
        raise SystemExit(f"golden command failed rc={rc}: {argv}")
    return buf.getvalue()


def main_goldens() -> None:
    if Path.cwd() != REPO_ROOT:
        raise SystemExit("run from the repository root")
    for sub in ("stats", "weights", "weights_raw", "verify", "bench", "train"):
        shutil.rmtree(GOLDEN / sub, ignore_errors=True)
    INPUTS.mkdir(parents=True, exist_ok=True)
    (INPUTS / "train_tiny.json").write_text(json.dumps(TRAIN_TINY, indent=2, sort_keys=True) + "\n")
    (INPUTS / "bench_tiny.json").write_text(json.dumps(BENCH_TINY, indent=2, sort_keys=True) + "\n")

    run([
        "stats",
        "--source", "fixtures/sim_source.json",
        "--target", "fixtures/real_target.jsonl",
        "--out", "tests/golden/stats",
        "--no-figures",
    ])
    run([
        "weights",
        "--source", "fixtures/sim_source.json",
        "--target", "fixtures/real_target.jsonl",
        "--out", "tests/golden/weights",
        "--no-figures",
    ])
    run([
        "weights",
        "--source", "fixtures/sim_source.json",
        "--target", "fixtures/real_target.jsonl",
        "--out", "tests/golden/weights_raw",
        "--raw-ratio",
        "--no-figures",
    ])
    run([
        "verify",
        "--trials", "120",
        "--seed", "7",
        "--max-support", "3",
        "--out", "tests/golden/verify",
        "--no-figures",
    ])
    run([
        "bench",
        "--config", "tests/golden/inputs/bench_tiny.json",
        "--out", "tests/golden/bench",
        "--no-figures",
    ])
    stdout = run([
        "train",
        "--config", "tests/golden/inputs/train_tiny.json",
        "--out", "tests/golden/train",
        "--no-figures",
    ])
    (GOLDEN / "train" / "stdout.txt").write_text(stdout)
    # the train report embeds a wall time; goldens must stay byte-exact,
    # so only the stdout metrics line and the manifest are kept
    (GOLDEN / "train" / "train_report.json").unlink()

    print("golden files regenerated under tests/golden/")


if __name__ == "__main__":
    main_goldens()
