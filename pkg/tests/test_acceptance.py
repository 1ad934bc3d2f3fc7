"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The experiment criteria (6-8) share one set of 2000-step runs on the
default synthetic fixture over seeds 0, 1, 2. Expect roughly a quarter of
an hour for this module on a single CPU core.
"""

import copy
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ccssl import autodiff as ad
from ccssl import contrastive as cc
from ccssl import data as dt
from ccssl import semisup as ss
from ccssl import trainer as tr

import oracles
from conftest import VERDICTS

SEEDS = [0, 1, 2]
SMOKE = Path(__file__).parent / "fixtures" / "smoke_config.json"


def verdict(number, ok, detail):
    VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[number])
    return ok


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(rng, t_push=None):
    n, d = int(rng.integers(2, 9)), int(rng.integers(4, 17))
    t_push = rng.uniform(0.0, 1.0) if t_push is None else t_push
    q_hat = rng.integers(0, int(rng.integers(1, 4)), size=n)
    q = rng.uniform(0.2, 1.0, size=n)
    q[rng.random(n) < 0.5] = rng.uniform(t_push, 1.0)
    return cc.ContrastiveBatch.from_images(unit_rows(rng, 2 * n, d), q_hat, q,
                                           tau=rng.uniform(0.1, 1.0), t_push=t_push)


def test_criterion_1_matrix_oracle():
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst_structure, worst_weight = 0.0, 0.0
    for _ in range(100):
        cb = random_batch(rng)
        w_con, w_cla, w_tgt = oracles.matrices(cb.image_of.tolist(), cb.q_hat_view.tolist(),
                                               cb.q_view.tolist(), cb.t_push)
        got_cla = cc.class_aware_matrix(cb)
        worst_structure = max(worst_structure,
                              np.abs(cc.contrastive_matrix(cb.image_of) - w_con).max(),
                              np.abs(got_cla - w_cla).max())
        worst_weight = max(worst_weight, np.abs(cc.reweight_target(got_cla, cb) - w_tgt).max())
    elapsed = time.perf_counter() - start
    ok = worst_structure == 0.0 and worst_weight <= 1e-12 and elapsed < 10
    verdict(1, ok, f"0/1 max diff {worst_structure:g}, weights max diff {worst_weight:.2e}, "
                   f"{elapsed:.2f}s")
    assert ok


def test_criterion_2_loss_oracle():
    rng = np.random.default_rng(1002)
    worst_lc, worst_nce = 0.0, 0.0
    for _ in range(100):
        cb = random_batch(rng)
        z = cb.z.data.tolist()
        lc = oracles.class_contrastive(z, cb.tau, cb.image_of.tolist(), cb.q_hat_view.tolist(),
                                       cb.q_view.tolist(), cb.t_push)
        nce = oracles.infonce(z, cb.tau, cb.image_of.tolist())
        worst_lc = max(worst_lc, abs(cc.class_contrastive_loss(cb).item() - lc))
        worst_nce = max(worst_nce, abs(cc.infonce_loss(cb.z, cb.tau, cb.image_of).item() - nce))
    ok = worst_lc <= 1e-10 and worst_nce <= 1e-10
    verdict(2, ok, f"L_c max |diff| {worst_lc:.2e}, InfoNCE max |diff| {worst_nce:.2e}")
    assert ok


def test_criterion_3_reductions():
    rng = np.random.default_rng(1003)
    worst_a, worst_b = 0.0, 0.0
    for _ in range(50):
        cb = random_batch(rng)
        high = cc.ContrastiveBatch(cb.z, cb.image_of, cb.q_hat_view, cb.q_view, cb.tau,
                                   min(1.0, cb.q_view.max() + 1e-3))
        worst_a = max(worst_a, abs(cc.class_contrastive_loss(high).item()
                                   - cc.infonce_loss(cb.z, cb.tau, cb.image_of).item()))
        sup = cc.ContrastiveBatch(cb.z, cb.image_of, cb.q_hat_view, np.ones(cb.n_views), cb.tau, 0.0)
        expected = oracles.supervised_contrastive(cb.z.data.tolist(), cb.tau, cb.q_hat_view.tolist())
        worst_b = max(worst_b, abs(cc.class_contrastive_loss(sup).item() - expected))
    same = cc.ContrastiveBatch.from_images(np.tile([[0.0, 1.0, 0.0]], (4, 1)), [1, 1], [1.0, 1.0],
                                           t_push=0.0)
    c_err = abs(cc.class_contrastive_loss(same).item() - 4 * math.log(3))
    ok = worst_a <= 1e-9 and worst_b <= 1e-9 and c_err <= 1e-9
    verdict(3, ok, f"(a) {worst_a:.1e}  (b) {worst_b:.1e}  (c) {c_err:.1e}")
    assert ok


def _rel_grad_error(fn, x0):
    x = ad.Tensor(x0, requires_grad=True)
    ad.backward(fn(x))
    numeric = ad.finite_difference_grad(lambda v: fn(ad.Tensor(v)).item(), x0, h=1e-5)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    return ad.relative_error(analytic, numeric)


def test_criterion_4_gradients():
    rng = np.random.default_rng(1004)
    start = time.perf_counter()
    worst = {"L_c": 0.0, "L_u": 0.0, "L_x": 0.0}
    for _ in range(20):
        cb = random_batch(rng)

        def lc(z, cb=cb):
            return cc.class_contrastive_loss(
                cc.ContrastiveBatch(z, cb.image_of, cb.q_hat_view, cb.q_view, cb.tau, cb.t_push))

        worst["L_c"] = max(worst["L_c"], _rel_grad_error(lc, cb.z.data.copy()))

        n, c = int(rng.integers(2, 12)), int(rng.integers(2, 8))
        probs = ad.row_softmax(ad.Tensor(rng.standard_normal((n, c)) * 3)).data
        plb = ss.pseudo_label(probs, float(np.quantile(probs.max(axis=1), 0.5)))
        worst["L_u"] = max(worst["L_u"], _rel_grad_error(
            lambda x: ss.unsupervised_loss(plb, x), rng.standard_normal((n, c)) * 2))
        y = rng.integers(0, c, n)
        worst["L_x"] = max(worst["L_x"], _rel_grad_error(
            lambda x: ss.supervised_loss(x, y), rng.standard_normal((n, c)) * 2))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 60
    verdict(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


def test_criterion_5_baseline_identity():
    configs = [tr.ExperimentConfig.load(SMOKE).with_overrides({"lambda_c": 0.0, "total_steps": 200}),
               tr.ExperimentConfig.load(SMOKE).with_overrides({"use_contrastive": False,
                                                                "total_steps": 200})]
    labeled, unlabeled, _ = tr.load_datasets(configs[0])
    states = [tr.init_state(c, labeled.image_shape, c.synth.num_known) for c in configs]
    mismatch = None
    for step in range(200):
        for i, cfg in enumerate(configs):
            batch = dt.compose_batch(labeled, unlabeled, cfg.batch_size, cfg.mu, states[i].rngs["sample"])
            states[i], _ = tr.train_step(states[i], batch, cfg)
        a, b = states[0].params.arrays(), states[1].params.arrays()
        if any(a[k].tobytes() != b[k].tobytes() for k in a):
            mismatch = step
            break
    ok = mismatch is None
    verdict(5, ok, "200 steps bit-identical" if ok else f"trajectories split at step {mismatch}")
    assert ok


# -- desk-scale experiments ---------------------------------------------------


@pytest.fixture(scope="module")
def experiments():
    """Baseline and component-ablation runs shared by criteria 6-8."""
    base = tr.ExperimentConfig()
    cells = tr.PRESETS["baseline"][:1] + tr.COMPONENT_CELLS
    start = time.perf_counter()
    rows, agg = tr.run_grid(base, cells, SEEDS, out_dir=None, figures=False)
    by_cell = {}
    for r in rows:
        by_cell.setdefault(r["cell"], {})[r["seed"]] = r
    times = {"total": time.perf_counter() - start}
    return by_cell, agg, times


def _mean(cell, key):
    return float(np.mean([cell[s][key] for s in SEEDS]))


def test_criterion_6_directional(experiments):
    by_cell, _, times = experiments
    fm, full = by_cell["fixmatch"], by_cell["full"]
    gain = _mean(full, "top1") - _mean(fm, "top1")
    ood_fm, ood_cc = _mean(fm, "mean_ood_mask_rate"), _mean(full, "mean_ood_mask_rate")
    # six of the fifteen shared runs belong to this criterion
    budget = times["total"] * 6 / 15
    ok = gain >= 0.02 and ood_cc < ood_fm and budget < 15 * 60
    verdict(6, ok, f"top-1 FixMatch {_mean(fm, 'top1'):.4f} vs CCSSL {_mean(full, 'top1'):.4f} "
                   f"(gain {100 * gain:+.2f} pts, need >= +2); OOD-mask {ood_fm:.4f} vs {ood_cc:.4f}; "
                   f"~{budget / 60:.1f} min")
    assert ok


def test_criterion_7_pseudo_label_quality(experiments):
    by_cell, _, _ = experiments
    fm, full = by_cell["fixmatch"], by_cell["full"]
    wins = [full[s]["best_pseudo_label_accuracy"] >= fm[s]["best_pseudo_label_accuracy"] for s in SEEDS]
    ok = sum(wins) >= 2
    pairs = ", ".join(f"seed {s}: {fm[s]['best_pseudo_label_accuracy']:.4f} vs "
                      f"{full[s]['best_pseudo_label_accuracy']:.4f}" for s in SEEDS)
    verdict(7, ok, f"CCSSL >= FixMatch in {sum(wins)}/3 ({pairs})")
    assert ok


def test_criterion_8_ablation_structure(experiments):
    by_cell, agg, _ = experiments
    names = [name for name, _ in tr.COMPONENT_CELLS]
    rows = [r for r in agg if r["cell"] in names]
    one_row_each = sorted(r["cell"] for r in rows) == sorted(names) and all(r["runs"] == 3 for r in rows)
    full, contrastive = _mean(by_cell["full"], "top1"), _mean(by_cell["contrastive"], "top1")
    ok = one_row_each and full >= contrastive
    verdict(8, ok, f"{len(rows)} summary rows; full {full:.4f} vs contrastive-only {contrastive:.4f}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    runs = [(tr.ExperimentConfig.load(SMOKE), "smoke"),
            (tr.ExperimentConfig().with_overrides({"total_steps": 60, "eval_interval": 20}), "default")]
    same = []
    for cfg, tag in runs:
        blobs = []
        for k in range(2):
            out = tmp_path / f"{tag}{k}"
            tr.run_experiment(copy.deepcopy(cfg), out, figures=False)
            blobs.append((out / "metrics.jsonl").read_bytes())
        same.append(blobs[0] == blobs[1] and len(blobs[0]) > 0)
    ok = all(same)
    verdict(9, ok, "metrics JSONL byte-identical on repeat" if ok else f"mismatch: {same}")
    assert ok
