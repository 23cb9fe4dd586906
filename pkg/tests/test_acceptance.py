"""Acceptance criteria. Each test records one [PASS]/[FAIL] line for the summary.

The three trend criteria share one ablation over 5 seeds (25 training runs),
computed once per session.
"""

import os
import resource
import subprocess
import sys
import time

import numpy as np
import pytest

import conftest
import oracles
from sipe import data, evaluate, gradcheck, prototypes, seeds, train
from sipe.tensor import Tensor

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SEEDS = (0, 1, 2, 3, 4)
TRAIN_SIZE, EVAL_SIZE = 500, 100
TRAIN_SEED, EVAL_SEED = 0, 10**6
MAJORITY = 4


def record(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def cpu_seconds() -> float:
    own = resource.getrusage(resource.RUSAGE_SELF)
    kids = resource.getrusage(resource.RUSAGE_CHILDREN)
    return own.ru_utime + own.ru_stime + kids.ru_utime + kids.ru_stime


@pytest.fixture(scope="session")
def ablation():
    train_set = data.generate(TRAIN_SIZE, TRAIN_SEED)
    eval_set = data.generate(EVAL_SIZE, EVAL_SEED)
    report, results = evaluate.ablation(train_set, eval_set, SEEDS)
    with open(os.path.join(ROOT, "acceptance_report.txt"), "w") as f:
        f.write(report.text())
    return report, results


def test_gradient_soundness():
    t0 = time.process_time()
    worst = max(g.max_rel for s in (0, 1, 2) for g in gradcheck.check(s))
    seconds = time.process_time() - t0
    passed = worst < gradcheck.TOLERANCE and seconds < 60
    record("gradient soundness", passed,
           f"max rel err {worst:.1e} (< {gradcheck.TOLERANCE:g}) over 3 seeds in {seconds:.0f}s CPU (< 60s)")


def random_case(rng):
    k = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(1, 9, size=2))
    c = int(rng.integers(1, 7))
    f = rng.normal(size=(c, h, w))
    f[:, rng.random((h, w)) < 0.1] = 0.0
    y = rng.integers(0, 2, size=k)
    y[rng.integers(0, k)] = 1
    maps = rng.random((k + 1, h, w))
    maps[1:][y == 0] = 0.0
    return f, maps, y


def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    mismatches = []
    worst = 0.0
    for case in range(50):
        f, maps, y = random_case(rng)
        r = seeds.locate(f, maps, y)
        if not np.array_equal(r, oracles.locate(f, maps, y)):
            mismatches.append(f"locate#{case}")
        fh = rng.normal(size=(int(rng.integers(1, 7)),) + f.shape[1:])
        got = prototypes.extract(Tensor(fh), r, y, maps).vectors.data
        want = oracles.prototypes(fh, r, y, maps)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-300)
        rel = float(np.max(np.where(want == 0, np.abs(got), rel)))
        worst = max(worst, rel)
        if rel > 1e-12:
            mismatches.append(f"extract#{case}")
        if not np.array_equal(evaluate.pseudo_labels(maps, y), oracles.pseudo_labels(maps, y)):
            mismatches.append(f"pseudo_labels#{case}")
    record("oracle equivalence", not mismatches,
           f"50 instances, locate/pseudo_labels bitwise, extract max rel err {worst:.1e}"
           + (f"; mismatches: {', '.join(mismatches)}" if mismatches else ""))


def test_table4_trend(ablation):
    report, results = ablation
    cam = report["table4:CAM"].miou * 100
    ipe = report["table4:+IPE"].miou * 100
    gsc = report["table4:+IPE+GSC"].miou * 100
    seconds = sum(r.seconds for name in ("cls-only", "hierarchical/bpm") for r in results[name])
    passed = cam + 1.0 <= ipe and ipe + 2.0 <= gsc and seconds < 30 * 60
    record("table 4 trend", passed,
           f"CAM {cam:.2f}, +IPE {ipe:.2f} (needs >= {cam + 1:.2f}), +IPE+GSC {gsc:.2f} (needs >= {ipe + 2:.2f}); "
           f"{seconds / 60:.1f} min CPU (< 30)")


def test_table5_trend(ablation):
    _, results = ablation
    wins = 0
    notes = []
    for i, seed in enumerate(SEEDS):
        est = {name: results[name][i].metrics["iscam_est"] for name in evaluate.TABLE5}
        best = max(est, key=est.get)
        ours = results["hierarchical/bpm"][i].metrics
        ok = best == "hierarchical/bpm" and ours["iscam_est"] >= ours["iscam_thr"]
        wins += ok
        notes.append(f"s{seed}:{'y' if ok else 'n'}({best},{100 * ours['iscam_est']:.1f}/{100 * ours['iscam_thr']:.1f})")
    record("table 5 trend", wins >= MAJORITY, f"{wins}/5 seeds (needs {MAJORITY}); " + " ".join(notes))


def test_seeding_beats_fixed_threshold(ablation):
    _, results = ablation
    runs = results["hierarchical/bpm"]
    wins = sum(r.metrics["seeds"] > r.metrics["cam_thr"] for r in runs)
    detail = " ".join(f"s{r.seed}:{100 * r.metrics['seeds']:.1f}/{100 * r.metrics['cam_thr']:.1f}" for r in runs)
    record("structure seeds vs best fixed threshold", wins >= MAJORITY,
           f"{wins}/5 seeds (needs {MAJORITY}); seeds/threshold mIoU {detail}")


def test_invariant_suites():
    before = cpu_seconds()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", os.path.join(ROOT, "tests"),
         "--ignore", os.path.join(ROOT, "tests", "test_acceptance.py")],
        cwd=ROOT, capture_output=True, text=True,
    )
    seconds = cpu_seconds() - before
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record("invariant suites", proc.returncode == 0 and seconds < 300, f"{summary}; {seconds:.0f}s CPU (< 300)")


def test_determinism(tmp_path):
    data.save(data.generate(TRAIN_SIZE, TRAIN_SEED), tmp_path / "train")
    data.save(data.generate(20, EVAL_SEED), tmp_path / "eval")
    outputs = []
    for run in ("a", "b"):
        ckpt = tmp_path / f"{run}.ckpt"
        subprocess.run([sys.executable, "-m", "sipe.cli", "train", "--data", str(tmp_path / "train"),
                        "--out", str(ckpt), "--seed", "3"], check=True, capture_output=True)
        subprocess.run([sys.executable, "-m", "sipe.cli", "infer", "--ckpt", str(ckpt), "--data",
                        str(tmp_path / "eval"), "--out", str(tmp_path / f"{run}-pred")], check=True, capture_output=True)
        report = subprocess.run([sys.executable, "-m", "sipe.cli", "eval", "--pred", str(tmp_path / f"{run}-pred"),
                                 "--gt", str(tmp_path / "eval")], check=True, capture_output=True).stdout
        outputs.append((ckpt.read_bytes(), (tmp_path / f"{run}.log").read_bytes(), report))
    same = [a == b for a, b in zip(*outputs)]
    record("determinism", all(same),
           f"checkpoint identical: {same[0]}, training log identical: {same[1]}, eval report identical: {same[2]}")
