"""End-to-end acceptance checks; each test prints a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
when output capture is on).
"""

import csv
import io
import math
import time

import numpy as np
import pytest

from iclgd import cli
from iclgd import closed_form as cf
from iclgd import identities

SNRS = (0.5, 1.0, 2.0)
GRID_N = "5,10,20,39,41,60,100"


@pytest.fixture
def report(capsys):
    def _report(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return _report


def run_cli(argv, tmp_path, name):
    path = tmp_path / name
    code = cli.main([*argv, "--out", str(path)])
    return code, path.read_bytes()


def rows_of(data):
    return list(csv.DictReader(io.StringIO(data.decode())))


def _z(estimate, stderr, analytic):
    return abs(float(estimate) - float(analytic)) / float(stderr)


def test_1_expected_loss_reproduction(tmp_path, report):
    start, worst, checked, codes = time.perf_counter(), 0.0, 0, []
    for snr in SNRS:
        code, data = run_cli(["sweep-expected-loss", "--n", "40", "--m", "1", "--eta", "1",
                              "--snr", str(snr), "--N", GRID_N, "--samples", "1000000",
                              "--seed", "101"], tmp_path, f"mean_{snr}.csv")
        codes.append(code)
        for r in rows_of(data):
            worst = max(worst, _z(r["gd_mean_mc"], r["gd_mean_stderr"], r["gd_mean_analytic"]))
            checked += 1
            if r["validity"] == "valid":
                worst = max(worst, _z(r["ls_mean_mc"], r["ls_mean_stderr"], r["ls_mean_analytic"]))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 4 and codes == [0, 0, 0] and checked == 3 * (7 + 5) and elapsed <= 120
    assert report(1, ok, f"{checked} MC means, max |z| = {worst:.2f} (limit 4), {elapsed:.0f}s (limit 120s)")


def test_2_second_moment_reproduction(tmp_path, report):
    start, worst, checked, codes, spots = time.perf_counter(), 0.0, 0, [], {}
    for snr in SNRS:
        code, data = run_cli(["sweep-second-moment", "--n", "40", "--eta", "1", "--snr", str(snr),
                              "--N", GRID_N, "--samples", "1000000", "--seed", "202"],
                             tmp_path, f"m2_{snr}.csv")
        codes.append(code)
        for r in rows_of(data):
            N = int(r["N"])
            worst = max(worst, _z(r["gd_m2_mc"], r["gd_m2_stderr"], r["gd_m2_analytic"]))
            checked += 1
            if r["validity"] == "valid":
                worst = max(worst, _z(r["ls_m2_mc"], r["ls_m2_stderr"], r["ls_m2_analytic"]))
                checked += 1
            if snr == 1.0:
                spots[N] = r
    spot_ok = (
        abs(float(spots[20]["gd_m2_analytic"]) - 84.40275) < 1e-9
        and abs(float(spots[60]["ls_m2_analytic"]) - 31.23529) < 1e-5
        and abs(float(spots[20]["ls_m2_analytic"]) - 20.34608) < 1e-5
    )
    elapsed = time.perf_counter() - start
    # ls second moments exist at N in {5, 10, 20, 60, 100}; gd at all seven points
    ok = worst <= 4 and spot_ok and codes == [0, 0, 0] and checked == 3 * 12 and elapsed <= 300
    assert report(2, ok, f"{checked} MC second moments, max |z| = {worst:.2f} (limit 4), "
                         f"spot values {'match' if spot_ok else 'differ'}, {elapsed:.0f}s (limit 300s)")


def test_3_bound_coverage(tmp_path, report):
    start, worst_margin, rows_seen, codes = time.perf_counter(), -math.inf, 0, []
    for estimator, grid in (("gd", "8,20,60"), ("ls", "60,80")):
        code, data = run_cli(["bound-cdf", "--estimator", estimator, "--n", "40", "--N", grid,
                              "--snr", "1", "--delta", "0.05,0.1,0.2,0.3,0.5,0.8",
                              "--samples", "1000000", "--seed", "303"], tmp_path, f"{estimator}.csv")
        codes.append(code)
        for r in rows_of(data):
            d, count = float(r["delta"]), int(r["count"])
            limit = d + 3 * math.sqrt(d * (1 - d) / count)
            worst_margin = max(worst_margin, float(r["exceedance"]) - limit)
            rows_seen += r["pass"] == "true" and count >= 10**6
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and rows_seen == 5 * 6 and worst_margin <= 0 and elapsed <= 300
    assert report(3, ok, f"{rows_seen}/30 (N, delta) rows covered, largest exceedance minus "
                         f"allowance = {worst_margin:.4f}, {elapsed:.0f}s (limit 300s)")


def test_4_variance_self_consistency(report):
    start, worst = time.perf_counter(), 0.0
    levels = (0.0, 0.5, 1.0, 3.0)
    for n in range(1, 51):
        for N in range(1, 101):
            for s in levels:
                for v in levels:
                    moments = cf.gd_second_moment_m1(n, N, 1.0, s, v)
                    mean = cf.gd_expected_loss(n, N, 1, 1.0, s, v).mean
                    V = cf.gd_variance_eta1(n, N, s, v)
                    diff = abs(moments.second_moment - mean * mean - V)
                    worst = max(worst, diff / V if V > 0 else diff)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed <= 10
    assert report(4, ok, f"80000 grid points, max relative gap {worst:.2e} (limit 1e-9), "
                         f"{elapsed:.1f}s (limit 10s)")


def test_5_optimal_step(tmp_path, report):
    start = time.perf_counter()
    code, data = run_cli(["optimal-eta", "--n", "40", "--N", "5:100:5", "--signal2", "1",
                          "--sigma2", "0", "--samples", "1000000", "--seed", "505"],
                         tmp_path, "eta.csv")
    rows = rows_of(data)
    exact_gap, weakest = 0.0, math.inf
    for r in rows:
        N = int(r["N"])
        target = 1 - N / (N + 40 + 1)
        exact_gap = max(exact_gap, abs(float(r["mean_opt_analytic"]) - target) / target)
        if N <= 60:
            weakest = min(weakest, float(r["improvement_z"]))
    elapsed = time.perf_counter() - start
    ok = code == 0 and len(rows) == 20 and exact_gap <= 1e-14 and weakest > 2 and elapsed <= 180
    assert report(5, ok, f"analytic loss at optimal step off by {exact_gap:.1e} relative, smallest "
                         f"improvement {weakest:.1f} combined stderr for N <= 60 (need > 2), "
                         f"{elapsed:.0f}s (limit 180s)")


def test_6_identity_suite(tmp_path, report):
    start = time.perf_counter()
    code, data = run_cli(["verify-identities", "--samples", "1000000", "--seed", "606"],
                         tmp_path, "identities.csv")
    rows = rows_of(data)
    failed = [(r["id"], r["n"], r["N"], r["max_z"]) for r in rows if r["pass"] != "true"]
    covered = {int(r["id"]) for r in rows}
    max_z = max(float(r["max_z"]) for r in rows)
    elapsed = time.perf_counter() - start
    ok = code == 0 and not failed and covered == set(range(1, 31)) and elapsed <= 600
    assert report(6, ok, f"{len(rows) - len(failed)}/{len(rows)} (identity, n, N) checks pass, "
                         f"max z {max_z:.2f} (limit 5), {len(covered)} ids, {elapsed:.0f}s (limit 600s)"
                         + (f", failures {failed}" if failed else ""))


def test_7_rebuild_from_identities(report):
    rs = np.random.default_rng(707)
    worst = 0.0
    for _ in range(20):
        n, N = int(rs.integers(1, 80)), int(rs.integers(1, 300))
        eta, s, v = rs.uniform(0, 2), rs.uniform(0, 4), rs.uniform(0, 4)
        rebuilt = identities.gd_second_moment_from_identities(n, N, eta, s, v)
        direct = cf.gd_second_moment_m1(n, N, eta, s, v).second_moment
        worst = max(worst, abs(rebuilt - direct) / abs(direct))
    assert report(7, worst <= 1e-9, f"20 random points, max relative gap {worst:.2e} (limit 1e-9)")


DETERMINISM_RUNS = {
    "sweep-expected-loss": ["--N", "10,40,60", "--samples", "40000"],
    "sweep-second-moment": ["--N", "10,60", "--samples", "40000"],
    "bound-cdf": ["--N", "20", "--samples", "40000"],
    "optimal-eta": ["--N", "10,30", "--sigma2", "0", "--samples", "40000"],
    "breakdown": ["--N", "1:100"],
    "verify-identities": ["--quick"],
}


def test_8_determinism_across_workers(tmp_path, report):
    differing = []
    for command, extra in DETERMINISM_RUNS.items():
        outputs = set()
        for workers in ("1", "3"):
            _, data = run_cli([command, *extra, "--seed", "808", "--workers", workers],
                              tmp_path, f"{command}_{workers}.csv")
            outputs.add(data)
        if len(outputs) != 1:
            differing.append(command)
    ls_run = ["--estimator", "ls", "--N", "60", "--samples", "40000", "--seed", "808"]
    ls_outputs = {run_cli(["bound-cdf", *ls_run, "--workers", w], tmp_path, f"ls_{w}.csv")[1]
                  for w in ("1", "2")}
    if len(ls_outputs) != 1:
        differing.append("bound-cdf --estimator ls")
    ok = not differing
    assert report(8, ok, "all 6 subcommands byte-identical for --workers 1 and 3"
                  if ok else f"outputs differ for {differing}")
