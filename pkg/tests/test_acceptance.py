"""Acceptance criteria, one test per criterion.

Each test records ``PASS``/``FAIL`` (or ``INFO`` for the informational
baseline contrast) with a short detail line; the terminal summary prints
them together.  Runtimes exclude one warm-up call where a JIT compile would
otherwise dominate a sub-second budget.
"""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest
from numba import njit

from missing_physics import cli, expr, plant, symreg, ude
from missing_physics.campaign import detect_monod_form, run_optimal_campaign, run_random_baseline
from missing_physics.config import CampaignConfig
from missing_physics.design import pairwise_criterion
from missing_physics.ode import ControlProfile, IntegrationGrid, integrate

from .conftest import ACCEPTANCE

SEEDS = (0, 1, 2, 3, 4)


def record(key, ok, detail, info=False):
    ACCEPTANCE[key] = ("INFO" if info else ("PASS" if ok else "FAIL"), detail)


@njit
def _decay(t, x, u, args):
    return -x


def _switch(t, x, u):
    return np.array([u - 0.3 * x[0], x[0] * u])


def test_criterion_1_solver_accuracy():
    grid = IntegrationGrid(15.0, 15)
    zero = ControlProfile.constant(0.0, 15, 0.0, 1.0, 15.0)
    integrate(_decay, [1.0], zero, grid, (1e-8, 1e-8))  # warm-up compile
    t0 = time.perf_counter()
    sol = integrate(_decay, [1.0], zero, grid, (1e-8, 1e-8))
    decay_err = np.max(np.abs(sol.states[:, 0] - np.exp(-grid.measurement_times)))

    c = np.where(np.arange(15) < 6, 0.2, 0.9)
    full = integrate(_switch, [1.0, 0.0], ControlProfile(c, 0.0, 1.0, 15.0), grid)
    a = integrate(_switch, [1.0, 0.0], ControlProfile.constant(0.2, 6, 0, 1, 6.0), IntegrationGrid(6.0, 6))
    b = integrate(_switch, a.states[-1], ControlProfile.constant(0.9, 9, 0, 1, 9.0), IntegrationGrid(9.0, 9))
    split_err = np.max(np.abs(full.states - np.vstack([a.states, b.states])))
    elapsed = time.perf_counter() - t0

    ok = decay_err < 1e-6 and split_err < 1e-10 and elapsed < 1.0
    record(1, ok, f"decay error {decay_err:.2e} (<1e-6), split error {split_err:.2e} (<1e-10), {elapsed:.2f} s")
    assert ok


def test_criterion_2_plant_statistics():
    t0 = time.perf_counter()
    noise = plant.measurement_noise(2024, 10_000, 0.1)
    sd = float(noise.std(ddof=1))
    half = float(plant.monod(4.39, 0.421, 4.39))
    elapsed = time.perf_counter() - t0
    ok = 0.097 <= sd <= 0.103 and abs(half - 0.2105) < 1e-12 and elapsed < 5.0
    record(2, ok, f"noise SD {sd:.4f} in [0.097, 0.103], mu(K_s) = {half!r}, {elapsed:.2f} s")
    assert ok


def test_criterion_3_ude_gradient():
    p = plant.PlantParams()
    known = p.known()
    profiles = [p.zero_profile(), p.profile(np.full(15, 0.05)),
                p.profile(np.random.default_rng(9).uniform(0, 0.1, 15))]
    data = ude.TrainingSet([plant.run_experiment(p, prof, i) for i, prof in enumerate(profiles)], known)
    ude.loss_and_grad(ude.initial_params(np.random.default_rng(0)), data)  # warm-up
    t0 = time.perf_counter()
    h = 1e-5
    worst = 0.0
    for k in range(10):
        theta = ude.initial_params(np.random.default_rng(1000 + k))
        _, g = ude.loss_and_grad(theta, data)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (ude.loss(theta + e, data) - ude.loss(theta - e, data)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60.0
    record(3, ok, f"worst relative gradient error {worst:.2e} over 10 vectors (<=1e-4), {elapsed:.1f} s")
    assert ok


def _brute_force(cs):
    pairs = list(itertools.combinations(range(len(cs)), 2))
    return sum(max((cs[i][k] - cs[j][k]) ** 2 for k in range(len(cs[0]))) for i, j in pairs) / len(pairs)


def test_criterion_4_discrimination_oracle():
    pairwise_criterion(np.zeros((2, 15)))  # warm-up
    t0 = time.perf_counter()
    t = np.arange(1.0, 16.0)
    synthetic = np.stack([1 + 0.5 * np.sin(t), 2 * np.exp(-0.1 * t), 0.1 * t, np.cos(t) ** 2])
    mismatches = [M for M in (2, 3, 4)
                  if pairwise_criterion(synthetic[:M]) != _brute_force(synthetic[:M].tolist())]
    ten = np.zeros((10, 15))
    ten[0, 3] = 1.0
    norm_err = abs(pairwise_criterion(ten) - 9 / 45)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and norm_err < 1e-15 and elapsed < 1.0
    record(4, ok, f"exact match for M in (2, 3, 4): {not mismatches}, 1/45 normalizer error {norm_err:.1e}, {elapsed:.3f} s")
    assert ok


def test_criterion_5_planted_recovery():
    x = np.linspace(0.1, 20.0, 30)
    settings = CampaignConfig().gp
    t0 = time.perf_counter()
    a = symreg.search(x, 0.01 * x, settings, seed=5)
    b = symreg.search(x, 0.01 * x, settings, seed=5)
    elapsed = time.perf_counter() - t0
    best = min(a.best.values(), key=lambda c: c.loss)
    same = a.to_json() == b.to_json()
    ok = best.loss < 1e-8 and same and elapsed < 120.0
    record(5, ok, f"best '{best.equation}' l2 loss {best.loss:.1e} (<1e-8), identical repeat: {same}, {elapsed:.0f} s")
    assert ok


def test_criterion_6_table_arithmetic():
    t0 = time.perf_counter()
    prog = expr.parse("C_s / ((C_s - -4.631) / 0.42347)")
    probes = np.geomspace(0.25, 64.0, 8)
    err = float(np.max(np.abs(expr.evaluate(prog, probes) - 0.42347 * probes / (probes + 4.631))))
    ab = detect_monod_form(prog)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-9 and ab is not None and np.allclose(ab, (0.42347, 4.631), rtol=1e-9, atol=0) and elapsed < 1.0
    record(6, ok, f"probe error {err:.1e} (<1e-9), detected (a, b) = {ab}")
    assert ok


@pytest.fixture(scope="module")
def optimal_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("optimal")
    t0 = time.perf_counter()
    states = {s: run_optimal_campaign(CampaignConfig(seed=s), out_dir=root / f"seed_{s}") for s in SEEDS}
    return states, time.perf_counter() - t0


def _hit_text(hits):
    return "a={:.3f} b={:.2f}".format(*hits[0][1]) if hits else "none"


@pytest.mark.slow
def test_criterion_7_end_to_end(optimal_runs):
    states, elapsed = optimal_runs
    hits = {s: st.monod_hits() for s, st in states.items()}
    n = sum(bool(h) for h in hits.values())
    per_seed = ", ".join(f"seed {s}: {_hit_text(h)}" for s, h in hits.items())
    ok = n >= 3 and elapsed < 30 * 60
    record(7, ok, f"Monod recovered in {n}/5 campaigns (need >=3) in {elapsed / 60:.1f} min; {per_seed}")
    assert n >= 3
    assert elapsed < 30 * 60


@pytest.mark.slow
def test_criterion_8_baseline_contrast(optimal_runs):
    states, _ = optimal_runs
    optimal = sum(bool(st.monod_hits()) for st in states.values())
    random = 0
    for s in SEEDS:
        (base,) = run_random_baseline(CampaignConfig(seed=s), 1)
        random += bool(base.monod_hits())
    record(8, random < optimal, f"random-feed recoveries {random}/5 vs optimal {optimal}/5 "
           f"(strictly fewer expected: {random < optimal})", info=True)


def _listing(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    t0 = time.perf_counter()
    for name in ("a", "b"):
        assert cli.main(["campaign", "--seed", "42", "--out", str(tmp_path / name)]) == 0
    elapsed = time.perf_counter() - t0
    a, b = _listing(tmp_path / "a"), _listing(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing
    record(9, ok, f"{len(a)} artifacts, {len(differing)} differ, {elapsed / 60:.1f} min for two runs")
    assert ok, differing
