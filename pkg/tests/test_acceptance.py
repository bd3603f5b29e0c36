"""Desk-scale acceptance criteria.

Each test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line and asserts the
criterion at its stated tolerance.  Experiment settings come from
``configs/desk.txt``.  Criterion 10 uses the IDX files in ``$CFA_IDX_DIR``
(MNIST file names) when set, and otherwise writes the scikit-learn digits
set to IDX files.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cfa import harness as H
from cfa import losses as L
from cfa import tensor as T
from cfa.amalgamation import AmalgamationConfig, amalgamate
from cfa.memory import Exemplar, ReplayMemory, populate
from cfa.metrics import RMatrix, metric_acc, metric_bwt, metric_fwt
from conftest import ROOT, check_op_grad
from test_amalgamation import full_pipeline_gradient_errors
from test_metrics import oracle

pytestmark = pytest.mark.acceptance

DESK = H.ExperimentConfig(**H.read_config_file(ROOT / "configs" / "desk.txt"))
SEEDS = range(5)
_cache: dict = {}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def seed_runs(cfg):
    """Per-seed CFA results for ``cfg``, cached across criteria."""
    key = tuple(sorted(cfg.to_dict().items()))
    if key not in _cache:
        _cache[key] = [H.run_cfa_experiment(cfg.replace(seed=s)) for s in SEEDS]
    return _cache[key]


def mean_of(results, metric):
    return float(np.mean([r.metrics[metric] for r in results]))


def test_1_gradient_correctness(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    ops = [
        (T.add, [(3, 4), (3, 4)]), (T.sub, [(3, 4), (3, 4)]), (T.mul, [(3, 4), (3, 4)]),
        (lambda a: T.scale(a, 0.7), [(3, 4)]), (T.relu, [(3, 4)]), (T.exp, [(3, 4)]),
        (T.matmul, [(3, 4), (4, 2)]), (T.linear, [(3, 4), (4, 2), (2,)]),
        (lambda a: T.sum(a, axis=0), [(3, 4)]), (T.mean, [(3, 4)]), (T.norm, [(3, 4)]),
        (T.softmax, [(3, 4)]), (T.log_softmax, [(3, 4)]), (lambda a: T.clip_min(a, 0.1), [(3, 4)]),
        (lambda a, b: T.concat([a, b], axis=0), [(2, 4), (1, 4)]), (lambda a: T.slice_rows(a, 1, 3), [(4, 2)]),
    ]
    worst = 0.0
    for op, shapes in ops:
        out_shape = op(*[T.Tensor(np.ones(s)) for s in shapes]).shape
        w = rng.normal(size=out_shape)
        worst = max(worst, check_op_grad(lambda *ts: T.sum(T.mul(op(*ts), T.Tensor(w))),
                                         [rng.normal(size=s) for s in shapes], rng))
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    wl = rng.normal(size=(3, 4))
    worst = max(worst, check_op_grad(lambda a: T.sum(T.mul(T.log(a), T.Tensor(wl))), [x], rng))
    pipeline = max(full_pipeline_gradient_errors(probes=100))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and pipeline < 1e-4 and elapsed < 60
    report(capsys, 1, ok, f"max rel err ops {worst:.2e}, full loss (100 probes) {pipeline:.2e}, {elapsed:.1f}s")


def test_2_loss_identities(capsys):
    rng = np.random.default_rng(1)
    p = rng.normal(size=8)
    self_kl = abs(L.kl_features(p, p).item())
    min_kl = min(
        min(L.kl_features(a, b).item(), L.kl_soft(a, T.softmax(T.Tensor(b)).data).item())
        for a, b in (rng.normal(scale=3, size=(2, 6)) for _ in range(1000))
    )
    lin = max(
        abs(L.final_loss(*c, 0.5).total - (L.final_loss(*c, 0.0).total + L.final_loss(*c, 1.0).total) / 2)
        for c in rng.uniform(0, 10, size=(200, 3))
    )
    s, t1, t2 = (rng.normal(size=(4, 5)) for _ in range(3))
    add_m = abs(L.loss_m(s, [t1, t2]).item() - L.loss_m(s, [t1]).item() - L.loss_m(s, [t2]).item())
    r1, r2, o1, o2 = rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    add_r = abs(L.loss_r([r1, r2], [o1, o2]).item() - L.loss_r([r1], [o1]).item() - L.loss_r([r2], [o2]).item())
    ok = self_kl == 0.0 and min_kl >= 0.0 and lin <= 1e-12 and add_m <= 1e-12 and add_r <= 1e-12
    report(capsys, 2, ok, f"KL(p,p)={self_kl:.1e}, min KL={min_kl:.2e}, linearity {lin:.1e}, "
                          f"additivity {add_m:.1e}/{add_r:.1e}")


def test_3_metric_oracle(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        t = int(rng.integers(2, 7))
        r, b = rng.uniform(size=(t, t)), rng.uniform(size=t)
        expect = oracle(r.tolist(), b.tolist())
        got = (metric_acc(r), metric_bwt(r), metric_fwt(r, b))
        worst = max(worst, *(abs(g - e) for g, e in zip(got, expect)))
    R = RMatrix(2)
    for i, j, v in [(1, 1, 0.9), (1, 2, 0.6), (2, 1, 0.8), (2, 2, 0.9)]:
        R.set(i, j, v)
    R.set_baseline(2, 0.5)
    R.set_baseline(1, 0.5)
    worked = (metric_acc(R), metric_bwt(R), metric_fwt(R))
    worked_ok = all(abs(a - b) <= 1e-15 for a, b in zip(worked, (0.85, -0.1, 0.1)))
    ok = worst <= 1e-12 and worked_ok
    report(capsys, 3, ok, f"oracle max diff {worst:.1e}, worked example {tuple(round(v, 12) for v in worked)}")


def test_4_memory_invariants(capsys, tmp_path):
    rng = np.random.default_rng(3)
    violations = []
    bit_exact = True
    for policy in ("fixed", "grow"):
        for budget in (10, 100):
            mem = ReplayMemory(policy, budget)
            for step in range(10_000):
                task = 1 + step // 2000
                cls = 2 * (task - 1) + int(rng.integers(2))
                cand = Exemplar(rng.normal(size=3), task, cls, rng.normal(size=2), float(rng.exponential()))
                # classes already holding their fair share may only get tighter
                cap = mem.budget * max(len(set(mem.tasks) | {task}), 1) if policy == "grow" else budget
                known = set(mem.class_counts()) | {cls}
                share = cap // len(known)
                before = {c: mem.max_distance(c) for c, n in mem.class_counts().items()
                          if n >= share and len(mem) >= cap}
                mem.try_insert(cand)
                if len(mem) > mem.capacity:
                    violations.append(f"{policy}/{budget}: {len(mem)} > {mem.capacity}")
                for c, d in before.items():
                    if mem.max_distance(c) is not None and mem.max_distance(c) > d:
                        violations.append(f"{policy}/{budget}: class {c} max {d} -> {mem.max_distance(c)}")
            mem.save(tmp_path / f"{policy}{budget}")
            back = ReplayMemory.load(tmp_path / f"{policy}{budget}")
            for a, b in zip(mem.entries, back.entries):
                bit_exact &= a.input.tobytes() == b.input.tobytes() and a.teacher_logits.tobytes() == b.teacher_logits.tobytes()
                bit_exact &= np.float64(a.distance_to_class_mean).tobytes() == np.float64(b.distance_to_class_mean).tobytes()
            bit_exact &= len(back) == len(mem)
    ok = not violations and bit_exact
    report(capsys, 4, ok, f"4 x 10000 insertions, {len(violations)} violations, round-trip bit-exact={bit_exact}")


def test_5_single_teacher_fidelity(capsys):
    start = time.perf_counter()
    cfg = DESK.replace(n_tasks=1)
    task = H.build_stream(cfg).arrive()
    teacher = H.train_teacher(task, cfg, H.derive_seed(cfg.seed, "teacher"))
    memory = ReplayMemory("fixed", 200)
    populate(memory, teacher, 1, task.x_train, task.y_train)
    student = H.new_network(cfg, task.input_dim, task.class_ids, H.derive_seed(cfg.seed, "student"))
    # library defaults: per-sample Adam steps at lr 1e-4
    result = amalgamate([teacher], memory, student, AmalgamationConfig(alpha=1.0, epochs=100))
    x = memory.snapshot()
    agree = float(np.mean(result.student.predict(x) == teacher.predict(x)))
    elapsed = time.perf_counter() - start
    report(capsys, 5, agree >= 0.95 and elapsed < 120, f"agreement {agree:.4f} on {len(x)} exemplars, {elapsed:.1f}s")


def test_6_forgetting_mitigation(capsys):
    start = time.perf_counter()
    cfa = seed_runs(DESK)
    naive = [H.run_naive_baseline(DESK.replace(seed=s)) for s in SEEDS]
    elapsed = time.perf_counter() - start
    acc, bwt, naive_bwt = mean_of(cfa, "acc"), mean_of(cfa, "bwt"), mean_of(naive, "bwt")
    ok = acc >= 0.90 and bwt >= -0.05 and naive_bwt <= -0.50 and elapsed < 600
    report(capsys, 6, ok, f"CFA_grow ACC {acc:.4f} BWT {bwt:.4f}; naive ACC {mean_of(naive, 'acc'):.4f} "
                          f"BWT {naive_bwt:.4f}; {elapsed:.0f}s")


def test_7_alpha_ablation_shape(capsys):
    acc = {a: mean_of(seed_runs(DESK.replace(alpha=a)), "acc") for a in (1.0, 0.5, 0.0)}
    ok = acc[0.5] > acc[1.0] and acc[0.5] > acc[0.0]
    report(capsys, 7, ok, "ACC " + ", ".join(f"alpha={a}: {v:.4f}" for a, v in acc.items()))


def test_8_budget_monotonicity(capsys):
    budgets = (50, 100, 200, 400)
    acc = [mean_of(seed_runs(DESK.replace(memory_policy="fixed", memory_budget=b)), "acc") for b in budgets]
    ok = all(b >= a - 0.02 for a, b in zip(acc, acc[1:]))
    report(capsys, 8, ok, "CFA_fixed ACC " + ", ".join(f"{b}: {a:.4f}" for b, a in zip(budgets, acc)))


def test_9_reproducibility(capsys, tmp_path):
    def run(name):
        out = tmp_path / name
        cmd = [sys.executable, "-m", "cfa.cli", "run", "--config", str(ROOT / "configs" / "desk.txt"),
               "--seed", "7", "--output-dir", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        return out

    a, b = run("a"), run("b")
    files = ["R.csv", "metrics.json"] + sorted(
        str(p.relative_to(a)) for p in (a / "checkpoints").glob("student_*"))
    differing = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    report(capsys, 9, not differing and len(files) > 2,
           f"{len(files)} files compared, differing: {differing or 'none'}")


def _idx_paths(tmp_path):
    root = os.environ.get("CFA_IDX_DIR")
    if root:
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        found = []
        for n in names:
            hits = [p for p in (Path(root) / n, Path(root) / (n + ".gz")) if p.exists()]
            found.append(str(hits[0]) if hits else "")
        return found, "idx files in $CFA_IDX_DIR"
    datasets = pytest.importorskip("sklearn.datasets")
    from cfa.data import write_idx

    digits = datasets.load_digits()
    write_idx(tmp_path / "images.idx", np.round(digits.images * 255 / 16).astype(np.uint8))
    write_idx(tmp_path / "labels.idx", digits.target.astype(np.uint8))
    return [str(tmp_path / "images.idx"), str(tmp_path / "labels.idx"), "", ""], "scikit-learn digits as IDX"


def test_10_idx_path(capsys, tmp_path):
    (tr_img, tr_lab, te_img, te_lab), origin = _idx_paths(tmp_path)
    cfg = DESK.replace(
        source="idx", idx_train_images=tr_img, idx_train_labels=tr_lab, idx_test_images=te_img,
        idx_test_labels=te_lab, idx_max_train_per_class=1000,
    )
    cfa = H.run_cfa_experiment(cfg)
    naive = H.run_naive_baseline(cfg)
    gap = cfa.metrics["acc"] - naive.metrics["acc"]
    report(capsys, 10, gap >= 0.20, f"{origin}: CFA ACC {cfa.metrics['acc']:.4f}, naive ACC "
                                    f"{naive.metrics['acc']:.4f}, gap {gap:.4f}")
