import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from scipy.stats import binom, chi2_contingency

from mrprune.annotation import Response, format_log, parse_log
from mrprune.synthgen import (
    ConfigError,
    GenConfig,
    PlanningError,
    elapsed_shift_hours,
    error_probability,
    format_config,
    format_crop_truth,
    format_worker_truth,
    generate,
    parse_config,
    plan_assignments,
    sample_population,
    simulate_annotations,
)

FLAT = dict(sigma_u=0.0, sigma_v=0.0, beta_t1=0.0, beta_t2=0.0)


def errors_vs_truth(log):
    truth = {c.crop_id: c.true_labels for c in log.crops}
    k = {f"q{i + 1}": i for i in range(log.config.n_questions)}
    return np.array([r.response is not truth[r.crop_id][k[r.question_id]] for r in log.records])


def hourly_error_rates(log, hours=8):
    t = elapsed_shift_hours(log.plan, log.workers)
    err = errors_vs_truth(log)
    bins = np.minimum(t.astype(int), hours - 1)
    return np.array([err[bins == h].mean() for h in range(hours)]), bins, err


class TestConfig:
    def test_defaults_valid(self):
        cfg = GenConfig()
        assert cfg.intercept == -3.135
        assert cfg.beta_t1 == pytest.approx(-0.919, abs=1e-3)
        assert cfg.beta_t2 == pytest.approx(0.356, abs=1e-3)

    def test_validation_lists_fields(self):
        with pytest.raises(ConfigError) as exc:
            GenConfig(n_crops=0, repeats=(5, 30), cant_solve_prob=1.0)
        text = str(exc.value)
        for name in ("n_crops", "repeats", "cant_solve_prob"):
            assert name in text

    def test_parse_aliases_and_ranges(self):
        cfg = parse_config("# minimal\nI = 2\nJ = 3\nK = 1\nn = 3\nseed = 7  # trailing\n")
        assert (cfg.n_crops, cfg.n_workers, cfg.n_questions, cfg.repeats, cfg.seed) == (2, 3, 1, (3, 3), 7)
        assert parse_config("repeats = 5-12\n").repeats == (5, 12)
        assert parse_config("day_effects = 0.1, -0.2\n").day_effects == (0.1, -0.2)

    def test_parse_errors_carry_lines(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("I = 2\nnonsense\nsigma_v = abc\nwhat = 1\n")
        problems = exc.value.problems
        assert any("line 2" in p for p in problems)
        assert any("line 3" in p for p in problems)
        assert any("line 4" in p and "unknown" in p for p in problems)

    def test_format_roundtrip(self):
        cfg = GenConfig(n_crops=7, repeats=(3, 9), day_effects=(0.5, -0.25), theory_check=True)
        assert parse_config(format_config(cfg)) == cfg


class TestPopulation:
    def test_zero_sigma(self):
        cfg = GenConfig(sigma_u=0.0, sigma_v=0.0)
        workers, crops = sample_population(cfg)
        assert all(c.ambiguity == 0.0 for c in crops)
        assert all(w.skill == 0.0 for w in workers)

    def test_skill_spread(self):
        workers, _ = sample_population(GenConfig(n_workers=10_000, n_crops=1), seed=1)
        sd = np.std([w.skill for w in workers], ddof=1)
        assert abs(sd - 1.20) <= 0.03 * 1.20

    def test_shifts_nonoverlapping(self):
        workers, _ = sample_population(GenConfig(n_workers=30), seed=2)
        for w in workers:
            ends = [s + h * 3600 for s, h in w.shifts]
            assert all(e <= s2 for e, (s2, _) in zip(ends, w.shifts[1:]))
            assert all(h > 0 for _, h in w.shifts)

    def test_skill_odds_ratio(self):
        cfg = GenConfig()
        p4 = error_probability(cfg, 0.0, 4.0)
        p0 = error_probability(cfg, 0.0, 0.0)
        ratio = (p4 / (1 - p4)) / (p0 / (1 - p0))
        assert ratio == pytest.approx(math.exp(4), rel=1e-9)
        assert ratio == pytest.approx(54.6, abs=0.05)


class TestPlan:
    def test_fixed_repeats(self):
        cfg = GenConfig(n_crops=100, n_workers=20, repeats=(11, 11))
        workers, crops = sample_population(cfg, seed=1)
        plan = plan_assignments(cfg, workers, crops, seed=2)
        assert len(plan) == 1100
        by_task = defaultdict(list)
        for a in plan:
            by_task[a.task].append(a.worker_id)
        assert all(len(ws) == 11 == len(set(ws)) for ws in by_task.values())

    def test_times_inside_shifts(self):
        cfg = GenConfig(n_crops=150, n_workers=12)
        workers, crops = sample_population(cfg, seed=3)
        plan = plan_assignments(cfg, workers, crops, seed=4)
        shifts = {w.worker_id: w.shifts for w in workers}
        for a in plan:
            assert any(s <= a.scheduled < s + h * 3600 for s, h in shifts[a.worker_id])
        assert [a.scheduled for a in plan] == sorted(a.scheduled for a in plan)

    def test_mean_repeat_count(self):
        cfg = GenConfig(n_crops=10_000, n_workers=60)
        workers, crops = sample_population(cfg, seed=5)
        plan = plan_assignments(cfg, workers, crops, seed=6)
        counts = Counter(a.task for a in plan)
        assert len(counts) == 10_000
        assert 8.3 <= np.mean(list(counts.values())) <= 8.7
        assert min(counts.values()) >= 5 and max(counts.values()) <= 12

    def test_too_few_workers(self):
        cfg = GenConfig(n_crops=5, n_workers=4, repeats=(11, 11))
        workers, crops = sample_population(cfg, seed=1)
        with pytest.raises(PlanningError) as exc:
            plan_assignments(cfg, workers, crops, seed=1)
        assert exc.value.shortfall > 0

    def test_insufficient_capacity(self):
        cfg = GenConfig(n_crops=3000, n_workers=12, days=1, shift_hours=1.0)
        workers, crops = sample_population(cfg, seed=1)
        with pytest.raises(PlanningError, match="capacity") as exc:
            plan_assignments(cfg, workers, crops, seed=1)
        assert exc.value.shortfall > 0


class TestSimulation:
    def test_determinism(self):
        cfg = GenConfig(n_crops=60, n_workers=15, seed=99)
        a, b = generate(cfg), generate(cfg)
        assert format_log(a.records) == format_log(b.records)
        assert format_crop_truth(a) == format_crop_truth(b)
        assert format_worker_truth(a) == format_worker_truth(b)
        assert format_log(generate(GenConfig(n_crops=60, n_workers=15, seed=98)).records) != format_log(a.records)

    def test_log_roundtrip(self):
        log = generate(GenConfig(n_crops=40, n_workers=15, cant_solve_prob=0.05, seed=4))
        text = format_log(log.records)
        assert format_log(parse_log(text)) == text

    def test_tiny_intercept_never_errs(self):
        log = generate(GenConfig(n_crops=12_000, n_workers=60, intercept=-20.0, seed=1, **FLAT))
        assert len(log.records) >= 100_000
        assert not errors_vs_truth(log).any()

    def test_unknown_profile(self):
        cfg = GenConfig(n_crops=5, n_workers=12)
        log = generate(cfg)
        with pytest.raises(ValueError, match="unknown"):
            simulate_annotations(log.plan, log.workers[:1], log.crops, cfg, seed=0)

    def test_cant_solve_rate(self):
        log = generate(GenConfig(n_crops=2000, n_workers=30, cant_solve_prob=0.1, seed=8))
        frac = np.mean([r.response is Response.CANT_SOLVE for r in log.records])
        se = math.sqrt(0.1 * 0.9 / len(log.records))
        assert abs(frac - 0.1) <= 3 * se

    def test_error_fraction_tracks_mean_probability(self):
        cfg = GenConfig(n_crops=3000, n_workers=30, beta_t1=0.0, beta_t2=0.0, seed=21)
        log = generate(cfg)
        skill = {w.worker_id: w.skill for w in log.workers}
        amb = {c.crop_id: c.ambiguity for c in log.crops}
        p = np.array([error_probability(cfg, amb[r.crop_id], skill[r.worker_id]) for r in log.records])
        err = errors_vs_truth(log)
        se = math.sqrt(np.sum(p * (1 - p))) / len(p)
        assert abs(err.mean() - p.mean()) <= 3 * se

    def test_majority_flip_rate_is_binomial_tail(self):
        cfg = GenConfig(n_crops=6000, n_workers=30, repeats=(5, 5), intercept=-1.0, seed=13, **FLAT)
        log = generate(cfg)
        truth = {c.crop_id: c.true_labels[0] for c in log.crops}
        wrong = Counter(r.crop_id for r in log.records if r.response is not truth[r.crop_id])
        flips = np.array([wrong[c.crop_id] >= 3 for c in log.crops])
        p = 1 / (1 + math.exp(1.0))
        expected = binom.sf(2, 5, p)
        se = math.sqrt(expected * (1 - expected) / len(flips))
        assert abs(flips.mean() - expected) <= 3 * se

    def test_bathtub(self):
        cfg = GenConfig(n_crops=6000, n_workers=40, beta_t1=-0.6, beta_t2=0.08, seed=3)
        rates, _, _ = hourly_error_rates(generate(cfg))
        interior = rates[1:-1].min()
        assert rates[0] > interior and rates[-1] > interior

    def test_flat_without_fatigue(self):
        cfg = GenConfig(n_crops=6000, n_workers=40, beta_t1=0.0, beta_t2=0.0, sigma_u=0.0, sigma_v=0.0, seed=3)
        _, bins, err = hourly_error_rates(generate(cfg))
        table = np.array([[np.sum(err & (bins == h)), np.sum(~err & (bins == h))] for h in range(8)])
        assert chi2_contingency(table)[1] > 0.001
