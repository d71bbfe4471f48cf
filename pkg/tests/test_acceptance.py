"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Tolerances and runtime budgets are pinned below. Runtime is wall-clock on
one CPU core; the training criteria run their sweeps serially.
"""
import math
import struct
import time

import numpy as np
import pytest

from mfcap import autodiff as ad
from mfcap.artifacts import csv_body, read_records_csv
from mfcap.capacity import ChannelSpec, fixed_variance_capacity, mc_capacity_estimate, solve_noise_for_capacity
from mfcap.cli import main
from mfcap.data import IDXError, parse_idx, serialize_idx
from mfcap.experiments import ExperimentConfig, SweepSpec, aggregate, run_sweep
from mfcap.mean_field import (
    GaussianPrior,
    LearnedNoise,
    VariationalParam,
    gaussian_kl_to_standard,
    learned_variance_regularizer,
)
from mfcap.special_math import Rng

from gradcases import ALL_CASES
from objcases import equivalence_pair

# criterion 1
BETA_REFERENCE = {0.01: 0.68, 0.1: 0.65, 1.0: 0.45, 10.0: 0.12, 100.0: 0.014}
BETA_TOL_BITS = 0.01
BETA_BUDGET_S = 10.0
# criterion 2
MC_SAMPLES = 10**6
MC_MAX_SE = 3.0
MC_BUDGET_S = 5.0
# criterion 3
EQUIV_CASES = 100
EQUIV_BUDGET_S = 1.0
# criterion 4
GRAD_INSTANCES = 100
GRAD_RTOL, GRAD_ATOL = 1e-5, 1e-8
GRAD_BUDGET_S = 30.0
# criterion 5
KL_DRAWS = 100
KL_MAX_VAR = 1e-20
KL_BUDGET_S = 1.0
# criterion 6
ROUND_TRIP_CASES = 1000
ROUND_TRIP_RTOL = 1e-10
ROUND_TRIP_BUDGET_S = 1.0
# criterion 7
USHAPE_CAPACITIES = (0.05, 0.5, 2.0, 10.0, math.inf)
USHAPE_BUDGET_S = 15 * 60.0
# criterion 8
PRIOR_CAPACITIES = (2.0, 5.0, 10.0)
PRIOR_BUDGET_S = 20 * 60.0
# criterion 9
SIZE_VALUES = (50, 200, 1000)
SIZE_CAPACITIES = (2.0, 5.0, 10.0, math.inf)
SIZE_BUDGET_S = 30 * 60.0
# criterion 10
FUZZ_BUFFERS = 10**4
IDX_BUDGET_S = 5.0
# criterion 11
DETERMINISM_BUDGET_S = 2 * 60.0

REPEATS = 3


def _line(report, number, ok, title, detail, elapsed, budget):
    status = "PASS" if ok else "FAIL"
    report(f"[{status}] criterion {number:>2} {title}: {detail}; {elapsed:.1f} s (budget {budget:g} s)")


def _vae_base(paths, **kw):
    return ExperimentConfig(kind="vae", dataset="idx", train_images=paths["train_images"],
                            test_images=paths["test_images"], n_train=200, n_test=500, hidden_width=64,
                            depth=3, epochs=500, batch_size=100, eval_every=500, seed=0, **kw)


def _means(records, metric):
    return {row["axis_value"]: row["mean"] for row in aggregate(records, metric)}


def test_c01_beta_table(tmp_path, capsys, acceptance_report):
    start = time.perf_counter()
    code = main(["beta-table", "--betas", ",".join(str(b) for b in BETA_REFERENCE), "--out", str(tmp_path / "b.csv")])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    rows = [r.split(",") for r in (tmp_path / "b.csv").read_text().splitlines()[1:]]
    errors = [abs(float(bits) - BETA_REFERENCE[float(beta)]) for beta, bits, _ in rows]
    ok = code == 0 and len(rows) == len(BETA_REFERENCE) and max(errors) <= BETA_TOL_BITS and elapsed < BETA_BUDGET_S
    values = ", ".join(f"{float(r[1]):.4f}" for r in rows)
    _line(acceptance_report, 1, ok, "beta-table reproduction",
          f"bits [{values}], max |err| {max(errors):.4f} (tol {BETA_TOL_BITS})", elapsed, BETA_BUDGET_S)
    assert ok


def test_c02_monte_carlo_capacity(acceptance_report):
    start = time.perf_counter()
    bits, se = mc_capacity_estimate(ChannelSpec(1.0, 1.0), MC_SAMPLES, Rng(0))
    elapsed = time.perf_counter() - start
    z = abs(bits - 0.5) / se
    ok = z < MC_MAX_SE and elapsed < MC_BUDGET_S
    _line(acceptance_report, 2, ok, "closed form vs Monte Carlo",
          f"{bits:.5f} +/- {se:.5f} bits, |z| {z:.2f} (tol {MC_MAX_SE})", elapsed, MC_BUDGET_S)
    assert ok


def test_c03_objective_equivalence(acceptance_report):
    g = np.random.default_rng(3)
    start = time.perf_counter()
    pairs = [equivalence_pair(g) for _ in range(EQUIV_CASES)]
    elapsed = time.perf_counter() - start
    mismatches = sum(a.total != b.total for a, b in pairs)
    ok = mismatches == 0 and elapsed < EQUIV_BUDGET_S
    _line(acceptance_report, 3, ok, "dual-path objective identity",
          f"{mismatches}/{EQUIV_CASES} configurations differ (tol: bit-identical)", elapsed, EQUIV_BUDGET_S)
    assert ok


def test_c04_gradient_suite(acceptance_report):
    g = np.random.default_rng(4)
    failures, worst = [], 0.0
    start = time.perf_counter()
    for i in range(GRAD_INSTANCES):
        case = ALL_CASES[i % len(ALL_CASES)]
        fn, inputs = case(g)
        try:
            worst = max(worst, ad.check_grad(fn, inputs, rtol=GRAD_RTOL, atol=GRAD_ATOL))
        except AssertionError as exc:
            failures.append(f"{case.__name__}: {exc}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < GRAD_BUDGET_S
    _line(acceptance_report, 4, ok, "gradient suite",
          f"{GRAD_INSTANCES - len(failures)}/{GRAD_INSTANCES} instances over {len(ALL_CASES)} cases pass, "
          f"worst rel err {worst:.1e} (tol {GRAD_RTOL:g} rel or {GRAD_ATOL:g} abs)", elapsed, GRAD_BUDGET_S)
    assert ok, failures[:3]


def test_c05_kl_consistency(acceptance_report):
    g = np.random.default_rng(5)
    start = time.perf_counter()
    diffs = []
    for _ in range(KL_DRAWS):
        shape = (3, 4)
        mu, lv = g.normal(0.0, 2.0, size=shape), g.uniform(-6.0, 3.0, size=shape)
        p = VariationalParam(ad.Tensor(mu), LearnedNoise(ad.Tensor(lv, requires_grad=True)), GaussianPrior(1.0))
        diffs.append(learned_variance_regularizer(p, 1.0).item() + gaussian_kl_to_standard(mu, lv).sum())
    elapsed = time.perf_counter() - start
    var = float(np.var(diffs))
    ok = var < KL_MAX_VAR and elapsed < KL_BUDGET_S
    _line(acceptance_report, 5, ok, "beta=1 regularizer vs analytic KL",
          f"constant {np.mean(diffs):.6g}, variance {var:.1e} (tol {KL_MAX_VAR:g})", elapsed, KL_BUDGET_S)
    assert ok


def test_c06_capacity_round_trip(acceptance_report):
    g = np.random.default_rng(6)
    bits = g.uniform(1e-3, 40.0, size=ROUND_TRIP_CASES)
    prior = 10.0 ** g.uniform(-3.0, 3.0, size=ROUND_TRIP_CASES)
    start = time.perf_counter()
    back = [fixed_variance_capacity(ChannelSpec(pv, solve_noise_for_capacity(b, pv))).per_dim_bits
            for b, pv in zip(bits, prior)]
    elapsed = time.perf_counter() - start
    worst = float(np.max(np.abs(np.array(back) - bits) / bits))
    ok = worst < ROUND_TRIP_RTOL and elapsed < ROUND_TRIP_BUDGET_S
    _line(acceptance_report, 6, ok, "capacity/noise round trip",
          f"worst rel err {worst:.1e} over {ROUND_TRIP_CASES} cases (tol {ROUND_TRIP_RTOL:g})",
          elapsed, ROUND_TRIP_BUDGET_S)
    assert ok


def test_c07_u_shape(mnist_paths, acceptance_report):
    base = ExperimentConfig(kind="classifier", dataset="idx", n_train=500, hidden_width=128, depth=3,
                            epochs=200, batch_size=100, eval_every=200, seed=0, **mnist_paths)
    start = time.perf_counter()
    records = run_sweep(SweepSpec("capacity_bits", USHAPE_CAPACITIES, REPEATS, base))
    elapsed = time.perf_counter() - start
    means = _means(records, "test_ll")
    lo, hi = means[USHAPE_CAPACITIES[0]], means[USHAPE_CAPACITIES[-1]]
    interior = {c: means[c] for c in USHAPE_CAPACITIES[1:-1]}
    best = max(interior, key=interior.get)
    ok = interior[best] > lo and interior[best] > hi and elapsed < USHAPE_BUDGET_S
    shown = ", ".join(f"{c:g}: {m:.4g}" for c, m in means.items())
    _line(acceptance_report, 7, ok, "classifier U-shape",
          f"mean test_ll {{{shown}}}, best interior {best:g} bits", elapsed, USHAPE_BUDGET_S)
    assert ok


def test_c08_improper_prior(mnist_paths, acceptance_report):
    start = time.perf_counter()
    means = {}
    for prior in ("gaussian", "improper"):
        base = _vae_base(mnist_paths, prior=prior)
        means[prior] = _means(run_sweep(SweepSpec("capacity_bits", PRIOR_CAPACITIES, REPEATS, base)),
                              "test_elbo_noisy")
    elapsed = time.perf_counter() - start
    holds = {c: means["gaussian"][c] >= means["improper"][c] for c in PRIOR_CAPACITIES}
    ok = all(holds.values()) and elapsed < PRIOR_BUDGET_S
    shown = ", ".join(f"{c:g}: {means['gaussian'][c]:.3f} vs {means['improper'][c]:.3f}" for c in PRIOR_CAPACITIES)
    _line(acceptance_report, 8, ok, "Gaussian vs improper prior",
          f"mean test ELBO gaussian vs improper {{{shown}}}", elapsed, PRIOR_BUDGET_S)
    assert ok


def test_c09_dataset_size(mnist_paths, acceptance_report):
    start = time.perf_counter()
    argmax, table = [], []
    for n in SIZE_VALUES:
        base = _vae_base(mnist_paths).replace(n_train=n)
        means = _means(run_sweep(SweepSpec("capacity_bits", SIZE_CAPACITIES, REPEATS, base)), "test_elbo_noisy")
        scored = {c: (m if math.isfinite(m) else -math.inf) for c, m in means.items()}
        argmax.append(max(SIZE_CAPACITIES, key=lambda c: scored[c]))
        table.append(f"n={n}: " + " ".join(f"{c:g}:{m:.2f}" for c, m in means.items()))
    elapsed = time.perf_counter() - start
    ok = all(a <= b for a, b in zip(argmax, argmax[1:])) and elapsed < SIZE_BUDGET_S
    _line(acceptance_report, 9, ok, "dataset-size interaction",
          f"argmax capacity {[f'{a:g}' for a in argmax]} over sizes {list(SIZE_VALUES)} "
          f"({'; '.join(table)})", elapsed, SIZE_BUDGET_S)
    assert ok


def _random_buffer(g):
    kind = g.integers(0, 3)
    if kind == 0:
        return g.bytes(int(g.integers(0, 48)))
    ndim = int(g.integers(0, 5))
    head = bytes([0, 0, int(g.choice([8, 8, 8, 9, 13])), ndim])
    dims = g.integers(0, 5 if kind == 1 else 2**32, size=ndim)
    body = g.bytes(int(g.integers(0, 200)))
    return head + struct.pack(f">{ndim}I", *(int(d) for d in dims)) + body


def test_c10_idx_parser(acceptance_report):
    g = np.random.default_rng(10)
    start = time.perf_counter()
    crashes, parsed = [], 0
    for _ in range(FUZZ_BUFFERS):
        buf = _random_buffer(g)
        try:
            parse_idx(buf)
            parsed += 1
        except IDXError:
            pass
        except Exception as exc:  # any other exception is a crash
            crashes.append(f"{type(exc).__name__}: {exc}")
    fixture = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 204, 255])
    fixture_ok = np.array_equal(parse_idx(fixture), [[0.0, 0.2, 0.8, 1.0]])
    arr = g.integers(0, 256, size=(7, 5, 5)).astype(np.uint8)
    images = parse_idx(serialize_idx(arr))
    labels = g.integers(0, 10, size=13)
    round_trip = (np.array_equal(np.rint(images * 255.0).reshape(arr.shape), arr)
                  and np.array_equal(parse_idx(serialize_idx(labels)), labels)
                  and serialize_idx(images) == serialize_idx(arr))
    elapsed = time.perf_counter() - start
    ok = not crashes and fixture_ok and round_trip and elapsed < IDX_BUDGET_S
    _line(acceptance_report, 10, ok, "IDX parser",
          f"{len(crashes)} crashes in {FUZZ_BUFFERS} fuzz buffers ({parsed} parsed), fixture "
          f"{'exact' if fixture_ok else 'WRONG'}, round trip {'identity' if round_trip else 'BROKEN'}",
          elapsed, IDX_BUDGET_S)
    assert ok, crashes[:3]


def _smoke_configs(paths):
    vae = [f"train_images = {paths['train_images']}", f"test_images = {paths['test_images']}",
           "kind = vae", "dataset = idx", "n_test = 100", "hidden_width = 16", "epochs = 3"]
    clf = [f"{k} = {v}" for k, v in paths.items()] + [
        "kind = classifier", "dataset = idx", "n_train = 200", "n_test = 200", "hidden_width = 32", "epochs = 3",
        "sweep_axis = capacity_bits", "sweep_values = 0.05, 2, inf", "repeats = 2"]
    return {
        "u-shape": ("sweep", clf),
        "prior": ("sweep", vae + ["n_train = 100", "prior = improper", "sweep_axis = capacity_bits",
                                  "sweep_values = 2, 10", "repeats = 2"]),
        "size": ("sweep", vae + ["capacity_bits = 5", "sweep_axis = dataset_size", "sweep_values = 50, 200"]),
        "train": ("train", vae + ["n_train = 100", "capacity_bits = 3"]),
    }


def test_c11_determinism(mnist_paths, tmp_path, capsys, acceptance_report):
    start = time.perf_counter()
    identical, rows = {}, 0
    for name, (command, lines) in _smoke_configs(mnist_paths).items():
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text("\n".join(lines) + "\n")
        bodies = []
        for attempt in range(2):
            out = tmp_path / f"{name}-{attempt}.csv"
            code = main([command, "--config", str(cfg), "--seed", "17", "--out", str(out)])
            assert code == 0
            bodies.append(csv_body(out.read_text()))
        rows += len(read_records_csv(tmp_path / f"{name}-0.csv")[1])
        identical[name] = bodies[0] == bodies[1]
    capsys.readouterr()
    elapsed = time.perf_counter() - start
    ok = all(identical.values()) and elapsed < DETERMINISM_BUDGET_S
    shown = ", ".join(f"{k}: {'same' if v else 'DIFFERENT'}" for k, v in identical.items())
    _line(acceptance_report, 11, ok, "byte-identical reruns",
          f"{shown} ({rows} rows per pass)", elapsed, DETERMINISM_BUDGET_S)
    assert ok
