"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, bundled, bundled_specs
from test_amalgam import hand_system
from freebrw.amalgam import fh_divergence_onset, hd_amalgam, z6_z2_z6
from freebrw.finite_dims import hd_fin
from freebrw.genfun import (
    critical_exponent_fit, dimensions, f_word, radius_R, truncation_convergence, xi_solve,
    z_star, z_star_S,
)
from freebrw.group_model import FreeProductSpec, cyclic, iter_words_by_block_length
from freebrw.oracle import convolution_powers, first_passage_set_series, first_visit_series, total_variation
from freebrw.simulator import OffspringDistribution, Target, embedded_gw, estimate_Z_infty_many, marginal_distribution

Z3Z2 = FreeProductSpec([cyclic(3), cyclic(2)], [0.5, 0.5], 0.5)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_z3_z2_boundary_dimension():
    t = time.perf_counter()
    zs = z_star_S(Z3Z2)
    hd = math.log(zs) / math.log(0.5)
    dt = time.perf_counter() - t
    ok = abs(zs - 2 ** -0.5) <= 1e-10 and abs(hd - 0.5) <= 1e-9 and dt < 1
    report(1, ok, f"z*_S={zs!r} HD(Omega)={hd!r} time={dt:.3f}s")


def test_criterion_02_ladder_boundary_dimension():
    spec = bundled("ladder_ladder").spec
    t = time.perf_counter()
    zs = z_star_S(spec)
    dt = time.perf_counter() - t
    ok = abs(zs - (math.sqrt(5) - 2)) <= 1e-9 and dt < 1
    report(2, ok, f"z*_S={zs!r} sqrt(5)-2={math.sqrt(5) - 2!r} time={dt:.3f}s")


def test_criterion_03_z_star_at_one():
    worst, parts = 0.0, []
    ok = True
    for name, spec in bundled_specs():
        z = z_star(spec, 1.0)
        phi = dimensions(spec, 1.0).phi
        worst = max(worst, abs(z - 1))
        ok &= abs(z - 1) <= 1e-6 and phi == 0
        parts.append(name)
    report(3, ok, f"max |z*(1)-1|={worst:.2e} over {len(parts)} specs, Phi(1)=0")


def test_criterion_04_amalgam():
    spec = z6_z2_z6()
    onset = fh_divergence_onset(spec)
    worst, ok = 0.0, True
    for lam in np.linspace(1.0, onset - 1e-4, 9):
        rep = hd_amalgam(spec, lam)
        fa, fb = hand_system(lam)
        ref = math.log(2 * fa + 2 * fb) / math.log(2)
        worst = max(worst, abs(rep.hd_lambda - ref))
        ok &= rep.hd_omega == 1 and rep.rho == 2.0
    ok &= worst <= 1e-10
    report(4, ok, f"HD_H(Omega)=1, rho_H=2, max |HD_H(Lambda) - hand|={worst:.2e}")


def test_criterion_05_two_finite_factors():
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    while count < 20:
        n1, n2 = (int(v) for v in rng.integers(2, 10, size=2))
        if n1 == n2 == 2:
            continue
        a = float(rng.uniform(0.05, 0.95))
        spec = FreeProductSpec([cyclic(n1), cyclic(n2)], [0.5, 0.5], a)
        closed = -math.log(math.sqrt((n1 - 1) * (n2 - 1))) / math.log(a)
        worst = max(worst, abs(hd_fin(spec, 1.0).hd_omega - closed))
        count += 1
    report(5, worst <= 1e-10, f"max |PF - closed form|={worst:.2e} over 20 triples")


def test_criterion_06_oracle_equivalence():
    # cap 10k: the gap at N = 200 is the same for caps 10k to 50k
    lam, N, cap = 1.01, 200, 10_000
    t = time.perf_counter()
    sol = xi_solve(Z3Z2, lam)
    words = [w for w in iter_words_by_block_length(Z3Z2, 3) if 0 < w.length <= 3]
    lower, worst = True, 0.0
    for w in words:
        exact = f_word(Z3Z2, sol, w)
        val = first_visit_series(Z3Z2, w, N, state_cap=cap).value(lam)
        lower &= val <= exact + 1e-12
        worst = max(worst, exact - val)
    xi1 = xi_solve(Z3Z2, 1.0).xi
    xi_gap = max(abs(xi1[i - 1] - first_passage_set_series(Z3Z2, i, N, state_cap=cap).value(1.0))
                 for i in (1, 2))
    dt = time.perf_counter() - t
    ok = lower and worst < 1e-6 and xi_gap < 1e-6 and dt < 30
    report(6, ok, f"{len(words)} words, lower bound {lower}, max gap={worst:.2e}, "
                  f"xi(1) gap={xi_gap:.2e}, time={dt:.1f}s")


def _grid_reports():
    out = {}
    for name, spec in bundled_specs():
        R = radius_R(spec).value
        out[name] = [dimensions(spec, lam) for lam in np.linspace(1.0, R, 100)]
    return out


@pytest.fixture(scope="module")
def grid_reports():
    return _grid_reports()


def test_criterion_07_half_dimension_bound(grid_reports):
    ok, notes = True, []
    for name, reps in grid_reports.items():
        phis = np.array([r.phi for r in reps])
        excess = max(r.phi - r.hd_omega / 2 for r in reps)
        inc = bool(np.all(np.diff(phis) > 0))
        if excess > 1e-9 or not inc:
            ok = False
            notes.append(f"{name}: max Phi-HD/2={excess:.3e} increasing={inc}")
    report(7, ok, "; ".join(notes) or f"{len(grid_reports)} specs, 100 points each")


def test_criterion_08_z_star_location(grid_reports):
    ok, count = True, 0
    for name, reps in grid_reports.items():
        for r in reps:
            count += 1
            ok &= r.checks["below_Fi_radius"]
            if r.lam > 1:
                ok &= 0 < r.z_star < 1
    report(8, ok, f"{count} dimension reports checked")


def test_criterion_09_truncation():
    spec = bundled("ladder_ladder").spec
    tab = truncation_convergence(spec, (2, 4, 8, 16))
    zs = tab.z
    dec = all(b < a for a, b in zip(zs, zs[1:]))
    ok = dec and tab.gaps[2] < tab.gaps[1]
    report(9, ok, f"z*_d={[round(z, 12) for z in zs]} gaps={[f'{g:.2e}' for g in tab.gaps]}")


def test_criterion_10_simulation():
    lam, reps, G = 1.05, 100_000, 60
    spec = bundled("z3_z3_z3").spec
    nu = OffspringDistribution.geometric_truncated(lam)
    t = time.perf_counter()
    sol = xi_solve(spec, lam)
    words = ["1:1", "2:2", "3:1", "1:1.2:1", "2:2.3:2"]
    targets = [Target.of_words([spec.parse_word(w)], w) for w in words]
    ests, _ = estimate_Z_infty_many(spec, nu, targets, reps, G, seed=101)
    zs = [e.z_score(f_word(spec, sol, spec.parse_word(w))) for e, w in zip(ests, words)]
    gw = embedded_gw(spec, nu, 1, 1, reps, seed=102, G=G)
    gw_z = (gw.stage1_mean - sol.xi[0]) / gw.stage1_stderr
    emp, _ = marginal_distribution(spec, nu, 3, 10 ** 6, seed=103)
    tv = total_variation(emp, convolution_powers(spec, 3).distribution(3))
    dt = time.perf_counter() - t
    ok = max(abs(z) for z in zs) < 3 and abs(gw_z) < 3 and tv < 0.01 and dt < 300
    report(10, ok, f"Z_inf z-scores={[round(z, 2) for z in zs]} GW z={gw_z:.2f} "
                   f"TV={tv:.4f} time={dt:.1f}s")


def test_criterion_11_phase_transitions():
    sub = bundled("z3_z3_z3")
    sup = bundled("free2_z2")
    lam_sub, lam_sup = sub.nu.mean, sup.nu.mean
    assert max(xi_solve(sub.spec, lam_sub).xi) < 1 and xi_solve(sup.spec, lam_sup).xi[0] > 1
    ext = embedded_gw(sub.spec, sub.nu, 1, 20, 1000, seed=111, G=60).extinction
    surv = embedded_gw(sup.spec, sup.nu, 1, 20, 1000, seed=112, G=40, stage_cap=50).survival
    c = critical_exponent_fit(Z3Z2).exponent
    ok = ext >= 0.99 and surv >= 0.05
    report(11, ok, f"extinction={ext:.3f} survival={surv:.3f} exponent c={c:.3f} (reported only)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
