"""Acceptance gate: one test per release criterion.

Every test prints a single pass/fail line (visible with `pytest -s`) and
asserts the same condition, so the suite doubles as a human-readable
checklist. Oracles are independent of the code under test: exhaustive
mask enumeration, finite differences, and projected-gradient solvers.
"""

import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from dropreg.dropout_schemes import (
    DropoutScheme,
    MaskSample,
    characteristic_matrix,
    regularizer_dropblock,
    regularizer_generalized,
    sample_mask_batch,
    theta_correction,
)
from dropreg.matrix_kernel import DenseMatrix, SeededRng, svd
from dropreg.spectral_regularizer import (
    FactorPair,
    balance_report,
    block_norms,
    duplicate_halving,
    global_minimizer,
    k_support_sq,
    rebalance,
    theta_for_width,
    width_scaled_penalty,
)
from dropreg.trainer import (
    FULL_BATCH_DETERMINISTIC,
    TrainingConfig,
    expected_objective_exact,
    sgd_step,
    train,
)

DM = DenseMatrix.from_array


def _report(num, ok, detail):
    print(f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------- criterion 1


def test_criterion_01_block_mask_deterministic_equivalence():
    """Enumerated expected objective == fit + block penalty (100 instances)."""
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        r = int(rng.integers(1, 5))
        blocks = int(rng.integers(1, 12 // r + 1))
        d = r * blocks
        a, b, n = rng.integers(2, 5, size=3)
        u = rng.normal(size=(a, d))
        v = rng.normal(size=(b, d))
        x = rng.normal(size=(b, n))
        y = rng.normal(size=(a, n))
        theta = float(rng.uniform(0.2, 0.9))
        scheme = DropoutScheme.dropblock_partitioned(theta, r)
        exact = expected_objective_exact(DM(u), DM(v), DM(x), DM(y), scheme)
        fp = FactorPair(DM(u), DM(v), r)
        closed = float(np.sum((y - u @ v.T @ x) ** 2)) + regularizer_dropblock(
            fp, DM(x), theta
        )
        worst = max(worst, abs(exact - closed))
    elapsed = time.perf_counter() - start
    _report(
        1,
        worst < 1e-9 and elapsed < 10.0,
        f"max |enumeration - closed form| = {worst:.3g}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_generalized_equivalence_all_schemes():
    """Enumeration vs <cbar, U'U (.) V'V> for all three neuron-mask schemes."""
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    worst = 0.0
    cases = []
    for theta in (0.3, 0.55, 0.8):
        cases.append(DropoutScheme.bernoulli(theta))
        cases.append(DropoutScheme.dropblock_partitioned(theta, 2))
        cases.append(DropoutScheme.dropblock_original(theta, 3))
        cases.append(DropoutScheme.dropblock_original(theta, 5))
    for scheme in cases:
        for _ in range(3):
            d = 10 if scheme.variant != "dropblock_partitioned" else 8
            a, b, n = rng.integers(2, 4, size=3)
            u = rng.normal(size=(a, d))
            v = rng.normal(size=(b, d))
            x = rng.normal(size=(b, n))
            y = rng.normal(size=(a, n))
            exact = expected_objective_exact(DM(u), DM(v), DM(x), DM(y), scheme)
            cm = characteristic_matrix(scheme, d)
            closed = float(np.sum((y - u @ v.T @ x) ** 2)) + regularizer_generalized(
                cm, DM(u), DM(x.T @ v)
            )
            worst = max(worst, abs(exact - closed))
    elapsed = time.perf_counter() - start
    _report(
        2,
        worst < 1e-9 and elapsed < 10.0,
        f"max |enumeration - characteristic form| = {worst:.3g}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------- criterion 3


def test_criterion_03_weight_mask_equals_unit_mask_form():
    """2^(b*d) weight-mask enumeration vs the unit-mask closed form.

    The identity requires the data rows to be mutually orthogonal, so the
    instances are drawn that way (rotated Gaussian rows, norms kept).
    """
    rng = np.random.default_rng(103)
    start = time.perf_counter()
    worst = 0.0
    shapes = [(2, 8), (4, 4), (8, 2), (2, 4), (4, 2)]
    for i in range(50):
        b, d = shapes[i % len(shapes)]
        a, n = int(rng.integers(2, 4)), int(rng.integers(max(2, b), b + 3))
        u = rng.normal(size=(a, d))
        v = rng.normal(size=(b, d))
        q, _ = np.linalg.qr(rng.normal(size=(n, b)))
        x = rng.uniform(0.5, 1.5, size=b)[:, None] * q.T
        y = rng.normal(size=(a, n))
        theta = float(rng.uniform(0.3, 0.8))
        exact = expected_objective_exact(
            DM(u), DM(v), DM(x), DM(y), DropoutScheme.dropconnect(theta)
        )
        fp = FactorPair(DM(u), DM(v), 1)
        closed = float(np.sum((y - u @ v.T @ x) ** 2)) + regularizer_dropblock(
            fp, DM(x), theta
        )
        worst = max(worst, abs(exact - closed))
    elapsed = time.perf_counter() - start
    _report(
        3,
        worst < 1e-9 and elapsed < 30.0,
        f"max |enumeration - unit-mask form| = {worst:.3g}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------- criterion 4


def _conjugate_oracle_batch(spectra, r, iters=20000):
    """sup_x sum_i a_i x_i - 0.25 sum_{i<=r} x_i^2 over descending x >= 0.

    Reduced to r variables (the tail rides at x_r), solved by projected
    gradient ascent on nonnegative increments, batched over spectra.
    """
    coeff = np.stack(
        [np.concatenate([a[: r - 1], [a[r - 1 :].sum()]]) for a in spectra]
    )
    t = np.zeros_like(coeff)
    step = 1.0 / (1 + r * r)
    for _ in range(iters):
        x = np.cumsum(t[:, ::-1], axis=1)[:, ::-1]
        grad_x = coeff - 0.5 * x
        t = np.maximum(t + step * np.cumsum(grad_x, axis=1), 0.0)
    x = np.cumsum(t[:, ::-1], axis=1)[:, ::-1]
    return np.sum(coeff * x, axis=1) - 0.25 * np.sum(x**2, axis=1)


def test_criterion_04_envelope_matches_double_conjugate():
    rng = np.random.default_rng(104)
    groups = {1: [], 2: [], 3: [], 4: []}
    for _ in range(200):
        p = int(rng.integers(2, 6))
        a = np.sort(rng.uniform(0.05, 2.5, size=p))[::-1]
        r = int(rng.integers(1, min(p, 4) + 1))
        groups[r].append(a)
    worst_rel = 0.0
    for r, spectra in groups.items():
        if not spectra:
            continue
        oracle = _conjugate_oracle_batch(spectra, r)
        for a, o in zip(spectra, oracle):
            closed, _ = k_support_sq(a, r, 1.0)
            worst_rel = max(worst_rel, abs(closed - o) / max(o, 1e-12))
    # endpoints: squared nuclear norm at r = 1, squared Frobenius when uniform
    endpoint_err = 0.0
    for _ in range(20):
        a = np.sort(rng.uniform(0.1, 2.0, size=5))[::-1]
        v1, _ = k_support_sq(a, 1, 1.0)
        endpoint_err = max(endpoint_err, abs(v1 - np.sum(a) ** 2))
        uniform = np.full(5, float(rng.uniform(0.1, 2.0)))
        v2, _ = k_support_sq(uniform, 5, 1.0)
        endpoint_err = max(endpoint_err, abs(v2 - np.sum(uniform**2)))
    _report(
        4,
        worst_rel < 1e-3 and endpoint_err < 1e-10,
        f"max relative gap to conjugate oracle = {worst_rel:.3g}, "
        f"endpoint error = {endpoint_err:.3g}",
    )


# ---------------------------------------------------------------- criterion 5


def _ksup_batch(x, r_arr, beta_arr):
    """Batched admissible-branch envelope on descending nonneg rows."""
    rows, p = x.shape
    heads = np.concatenate([np.zeros((rows, 1)), np.cumsum(x**2, axis=1)], axis=1)
    tails = np.concatenate(
        [np.cumsum(x[:, ::-1], axis=1)[:, ::-1], np.zeros((rows, 1))], axis=1
    )
    best = np.full(rows, -np.inf)
    best_rho = np.ones(rows, dtype=int)
    for rho in range(1, int(r_arr.max()) + 1):
        active = r_arr >= rho
        denom = r_arr - rho + 1
        tail = tails[:, rho - 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            val = heads[:, rho - 1] + np.where(active, tail**2 / np.maximum(denom, 1), 0.0)
        if rho == 1:
            feasible = active
        else:
            prev = x[:, rho - 2]
            feasible = active & (
                tail / np.maximum(denom, 1) <= prev + 1e-12 * np.maximum(1.0, prev)
            )
        update = feasible & (val > best)
        best[update] = val[update]
        best_rho[update] = rho
    return beta_arr * best, best_rho


def _shrinkage_oracle(spectra, r_arr, beta_arr, restarts=20, iters=10000, seed=0):
    """Projected-gradient minimization of sum (m - x)^2 + beta*ksup(x)
    over descending nonnegative spectra, batched over instances and restarts."""
    rng = np.random.default_rng(seed)
    n, p = spectra.shape
    m = np.repeat(spectra, restarts, axis=0)
    r_rep = np.repeat(r_arr, restarts)
    b_rep = np.repeat(beta_arr, restarts)
    t = rng.uniform(0.0, 1.0, size=m.shape) * m.max(axis=1, keepdims=True)
    t[::restarts] = 0.0  # one restart from the origin
    tri = np.triu(np.ones((p, p)))
    l_max = (2 + 2 * beta_arr.max() * r_arr.max()) * np.linalg.eigvalsh(tri.T @ tri).max()
    step = 1.0 / l_max
    z, acc = t.copy(), 1.0
    idx = np.arange(p)[None, :]
    for _ in range(iters):
        x = np.cumsum(z[:, ::-1], axis=1)[:, ::-1]
        x = np.maximum(np.maximum.accumulate(x[:, ::-1], axis=1)[:, ::-1], 0.0)
        _, rho = _ksup_batch(x, r_rep, b_rep)
        in_tail = idx >= (rho[:, None] - 1)
        tail = np.where(in_tail, x, 0.0).sum(axis=1)
        denom = r_rep - rho + 1
        grad_pen = np.where(
            in_tail, (2 * b_rep * tail / denom)[:, None] * np.ones_like(x), 2 * b_rep[:, None] * x
        )
        grad = 2 * (x - m) + grad_pen
        t_new = np.maximum(z - step * np.cumsum(grad, axis=1), 0.0)
        acc_new = (1 + np.sqrt(1 + 4 * acc * acc)) / 2
        z = t_new + ((acc - 1) / acc_new) * (t_new - t)
        t, acc = t_new, acc_new
    x = np.cumsum(t[:, ::-1], axis=1)[:, ::-1]
    x = np.maximum(np.maximum.accumulate(x[:, ::-1], axis=1)[:, ::-1], 0.0)
    pen, _ = _ksup_batch(x, r_rep, b_rep)
    values = np.sum((m - x) ** 2, axis=1) + pen
    return values.reshape(n, restarts).min(axis=1)


def test_criterion_05_closed_form_minimizer_matches_oracle():
    rng = np.random.default_rng(105)
    start = time.perf_counter()
    thetas = [0.2, 0.5, 0.8]
    spectra, r_arr, beta_arr, closed = [], [], [], []
    for i in range(100):
        rows, cols = rng.integers(3, 7, size=2)
        y = rng.normal(size=(rows, cols))
        r = int(rng.integers(1, 4))
        theta_bar = thetas[i % 3]
        result, _ = global_minimizer(DM(y), r, theta_bar)
        m = np.zeros(6)
        s = svd(DM(y)).singular_values
        m[: len(s)] = s
        spectra.append(m)
        r_arr.append(r)
        beta_arr.append((1 - theta_bar) / theta_bar)
        closed.append(result.objective)
    oracle = _shrinkage_oracle(
        np.stack(spectra), np.array(r_arr), np.array(beta_arr), seed=105
    )
    closed = np.array(closed)
    worst_rel = float(np.max(np.abs(closed - oracle) / np.maximum(oracle, 1e-12)))
    never_above = bool(np.all(closed <= oracle + 1e-6))
    elapsed = time.perf_counter() - start
    _report(
        5,
        worst_rel < 1e-5 and never_above and elapsed < 60.0,
        f"max relative gap = {worst_rel:.3g}, closed form never above oracle: "
        f"{never_above}, {elapsed:.2f}s",
    )


# ------------------------------------------------------- criteria 6 and 7


_DESK = {}


def _desk_scale_run():
    """Shared desk-scale deterministic training run for criteria 6 and 7."""
    if _DESK:
        return _DESK
    a, b, d, n, r, theta_bar = 8, 10, 6, 40, 2, 0.5
    rng_np = np.random.default_rng(106)
    x = rng_np.normal(size=(b, n))
    y = rng_np.normal(size=(a, d)) @ rng_np.normal(size=(b, d)).T @ x
    u0 = rng_np.normal(size=(a, d))
    v0 = rng_np.normal(size=(b, d))
    theta_train = theta_for_width(theta_bar, r, d)
    scheme = DropoutScheme.dropblock_partitioned(theta_train, r)
    eta = 0.5 / float(svd(DM(x)).singular_values[0]) ** 2
    trace = None
    for _ in range(10):
        try:
            cfg = TrainingConfig(
                eta, 20000, 0, scheme, mode=FULL_BATCH_DETERMINISTIC, log_stride=500
            )
            trace = train(DM(x), DM(y), DM(u0), DM(v0), cfg)
            break
        except Exception:
            eta /= 2
    result, _ = global_minimizer(DM(y), r, theta_bar)
    _DESK.update(trace=trace, x=DM(x), optimum=result.objective, r=r)
    return _DESK


def test_criterion_06_desk_scale_reaches_global_minimum():
    start = time.perf_counter()
    run = _desk_scale_run()
    elapsed = time.perf_counter() - start
    final = run["trace"].records[-1].deterministic_obj
    gap = (final - run["optimum"]) / run["optimum"]
    _report(
        6,
        -1e-9 <= gap <= 1e-2 and elapsed < 120.0,
        f"relative gap to closed-form optimum = {gap:.3g}, {elapsed:.1f}s",
    )


def test_criterion_07_converged_factors_are_balanced():
    run = _desk_scale_run()
    trace = run["trace"]
    fp = FactorPair(trace.final_u, trace.final_v, run["r"])
    report = balance_report(fp, run["x"], tau=0.01)
    _report(
        7,
        report.max_ratio <= 1.01,
        f"balance max ratio = {report.max_ratio:.6f}",
    )


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_duplicate_halving_scaling():
    rng = np.random.default_rng(108)
    u = rng.normal(size=(3, 6))
    v = rng.normal(size=(5, 6))
    x = DM(rng.normal(size=(5, 9)))
    fp = FactorPair(DM(u), DM(v), 2)
    theta = 0.4
    base_product = fp.product(x)
    base_penalty = regularizer_dropblock(fp, x, theta)
    one = duplicate_halving(fp)
    prod_rel = np.abs(one.product(x) - base_product).max() / np.abs(base_product).max()
    pen_rel = abs(regularizer_dropblock(one, x, theta) - base_penalty / 2) / base_penalty
    five = fp
    for _ in range(5):
        five = duplicate_halving(five)
    five_rel = abs(
        regularizer_dropblock(five, x, theta) - base_penalty / 32
    ) / base_penalty
    ok = prod_rel < 1e-12 and pen_rel < 1e-10 and five_rel < 1e-8
    _report(
        8,
        ok,
        f"product drift = {prod_rel:.3g}, single-halving error = {pen_rel:.3g}, "
        f"5-fold error = {five_rel:.3g}",
    )


# ---------------------------------------------------------------- criterion 9


def test_criterion_09_rebalance_decreases_width_scaled_objective():
    rng = np.random.default_rng(109)
    ok = True
    detail = []
    for trial in range(10):
        u = rng.normal(size=(3, 6))
        v = rng.normal(size=(4, 6))
        u[:, :2] *= float(rng.uniform(3.0, 8.0))  # force imbalance
        fp = FactorPair(DM(u), DM(v), 2)
        x = DM(rng.normal(size=(4, 7)))
        before = width_scaled_penalty(fp, x)
        budget = 2 * fp.num_blocks
        for _ in range(4):
            out = rebalance(fp, x, budget)
            drift = np.abs(out.product(x) - fp.product(x)).max()
            value = width_scaled_penalty(out, x)
            if drift > 1e-10 * max(1.0, np.abs(fp.product(x)).max()) or value >= before:
                ok = False
                detail.append(f"trial {trial}: drift {drift:.3g}, {before:.6g} -> {value:.6g}")
            budget *= 2
    _report(9, ok, "; ".join(detail) if detail else "strict decrease at every budget, product preserved")


# --------------------------------------------------------------- criterion 10


def test_criterion_10_identity_data_nuclear_norm_limit():
    """With X = I and full width, training matches the rank-one-block optimum."""
    rng = np.random.default_rng(110)
    worst = 0.0
    for _ in range(5):
        size = 5
        y = rng.normal(size=(size, size))
        theta_bar = 0.5
        result, _ = global_minimizer(DM(y), 1, theta_bar)
        theta_train = theta_for_width(theta_bar, 1, size)
        scheme = DropoutScheme.bernoulli(theta_train)
        u0 = 0.5 * rng.normal(size=(size, size))
        v0 = 0.5 * rng.normal(size=(size, size))
        eta = 0.05
        trace = None
        for _ in range(10):
            try:
                cfg = TrainingConfig(
                    eta, 60000, 0, scheme, mode=FULL_BATCH_DETERMINISTIC, log_stride=5000
                )
                trace = train(
                    DM(np.eye(size)), DM(y), DM(u0), DM(v0), cfg
                )
                break
            except Exception:
                eta /= 2
        final = trace.records[-1].deterministic_obj
        worst = max(worst, (final - result.objective) / result.objective)
    _report(10, worst < 0.01, f"max relative excess over nuclear-norm optimum = {worst:.3g}")


# --------------------------------------------------------------- criterion 11


def test_criterion_11_theta_correction_drop_rates():
    worst = 0.0
    d = 20
    per_batch = 50000
    for theta, w in itertools.product((0.2, 0.5, 0.8), (3, 5)):
        corrected = theta_correction(theta, w)
        scheme = DropoutScheme.dropblock_original(corrected, w)
        rng = SeededRng(1100 + int(theta * 10) * 10 + w, stream_id=0)
        masks = sample_mask_batch(scheme, d, rng, per_batch)
        drop = 1.0 - masks.mean()  # 10^6 neuron samples
        worst = max(worst, abs(drop - (1 - theta)))
    _report(11, worst < 0.005, f"max |empirical - target drop rate| = {worst:.4f}")


# --------------------------------------------------------------- criterion 12


def test_criterion_12_sgd_step_gradient_fidelity():
    rng = np.random.default_rng(112)
    h = 1e-5
    worst = 0.0
    for _ in range(50):
        a, b, d = rng.integers(2, 5, size=3)
        u = rng.normal(size=(a, d))
        v = rng.normal(size=(b, d))
        xt = rng.normal(size=(b, 1))
        yt = rng.normal(size=(a, 1))
        theta = float(rng.uniform(0.3, 0.9))
        z = (rng.uniform(size=d) < theta).astype(float)
        eta = 1e-3

        def loss(uu, vv):
            return float(np.sum((uu @ np.diag(z) @ vv.T @ xt / theta - yt) ** 2))

        u2, v2 = sgd_step(DM(u), DM(v), DM(xt), DM(yt), MaskSample(z), eta, theta)
        grad_u = 2.0 * (u - u2.data) / eta
        grad_v = 2.0 * (v - v2.data) / eta
        fd_u = np.zeros_like(u)
        for idx in np.ndindex(u.shape):
            up, dn = u.copy(), u.copy()
            up[idx] += h
            dn[idx] -= h
            fd_u[idx] = (loss(up, v) - loss(dn, v)) / (2 * h)
        fd_v = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            up, dn = v.copy(), v.copy()
            up[idx] += h
            dn[idx] -= h
            fd_v[idx] = (loss(u, up) - loss(u, dn)) / (2 * h)
        scale = max(1.0, np.abs(fd_u).max(), np.abs(fd_v).max())
        worst = max(
            worst,
            np.abs(grad_u - fd_u).max() / scale,
            np.abs(grad_v - fd_v).max() / scale,
        )
    _report(12, worst < 1e-6, f"max relative deviation from finite differences = {worst:.3g}")


# --------------------------------------------------------------- criterion 13


def test_criterion_13_cli_reproducibility(tmp_path):
    paths = [tmp_path / "run1.csv", tmp_path / "run2.csv"]
    for p in paths:
        proc = subprocess.run(
            [
                sys.executable, "-m", "dropreg.experiment_cli",
                "--experiment", "det_equivalence",
                "--iters", "300",
                "--seed", "17",
                "--mc-samples", "100",
                "--out", str(p),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
    identical = paths[0].read_bytes() == paths[1].read_bytes()
    _report(13, identical, "two identical runs produced byte-identical CSV traces")
