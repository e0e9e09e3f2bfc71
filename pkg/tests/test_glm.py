import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logit
from scipy.stats import chi2

from mrprune.annotation import flag_minorities, majority_outcomes, sessionize
from mrprune.synthgen import GenConfig, generate
from mrprune.glm import (
    DesignSpec,
    FittedModel,
    auc,
    build_design,
    class_weights,
    design_matrix,
    fit_logistic,
    likelihood_ratio_test,
    make_design,
    penalized_gradient,
    penalized_objective,
    predict,
    predict_design,
    predict_many,
    pseudo_r2,
    read_model,
    write_model,
)

INTERCEPT_ONLY = DesignSpec(include_question=False, include_day=False)


def labels(n_pos, n):
    y = np.zeros(n)
    y[:n_pos] = 1
    return y


def random_instance(rng, n=50):
    spec = DesignSpec(
        include_activity=True,
        include_activity_squared=True,
        include_worker=True,
        include_crop=True,
        include_question=True,
        include_day=False,
        ridge_lambda_worker=rng.uniform(0.1, 2),
        ridge_lambda_crop=rng.uniform(0.1, 2),
        class_balanced=bool(rng.integers(2)),
    )
    y = (rng.random(n) < 0.3).astype(float)
    y[:2] = [0, 1]
    return make_design(
        y,
        spec,
        activity=rng.uniform(0, 6, n),
        worker=rng.choice(["w1", "w2", "w3", "w4"], n),
        crop=rng.choice([f"c{i}" for i in range(8)], n),
        question=rng.choice(["q1", "q2"], n),
    )


@pytest.fixture(scope="module")
def ladder(small_log):
    records = small_log.records
    flags = flag_minorities(records, majority_outcomes(records))
    sessions = sessionize(records)
    fits = {}
    for name in ("base", "a", "aw", "ac", "awc"):
        design = build_design(records, flags, DesignSpec.ladder(name), sessions)
        model = fit_logistic(design)
        fits[name] = (model, auc(predict_design(model, design), flags))
    return fits


class TestDesign:
    def test_class_weights_example(self):
        w = class_weights(labels(10, 100))
        assert w[0] == pytest.approx(5.0)
        assert w[-1] == pytest.approx(100 / 180)

    def test_unweighted(self):
        d = make_design(labels(3, 10), INTERCEPT_ONLY)
        assert np.all(d.weights == 1.0)

    def test_intercept_only_single_column(self):
        X, pen, layout = design_matrix(make_design(labels(3, 10), INTERCEPT_ONLY))
        assert X.shape == (10, 1) and [c.block for c in layout] == ["intercept"]

    def test_activity_requires_sessions(self, small_log):
        records = small_log.records[:20]
        with pytest.raises(ValueError, match="sessions"):
            build_design(records, np.zeros(20, bool), DesignSpec.ladder("a"))

    def test_reference_level_without_ridge(self):
        d = make_design(labels(2, 4), DesignSpec(include_question=True, include_day=False), question=["q2", "q1", "q1", "q2"])
        _, _, layout = design_matrix(d)
        assert [c.level for c in layout if c.block == "question"] == ["q1"]

    def test_ridge_blocks_keep_all_levels(self):
        d = make_design(labels(2, 4), DesignSpec(include_worker=True, include_question=False, include_day=False), worker=["a", "b", "a", "c"])
        _, pen, layout = design_matrix(d)
        assert [c.level for c in layout if c.block == "worker"] == ["a", "b", "c"]
        assert pen.tolist() == [0.0, 1.0, 1.0, 1.0]

    def test_non_binary_labels(self):
        with pytest.raises(ValueError):
            make_design([0, 2], INTERCEPT_ONLY)

    def test_unknown_ladder(self):
        with pytest.raises(ValueError):
            DesignSpec.ladder("xyz")


class TestFit:
    def test_intercept_only_unweighted(self):
        m = fit_logistic(make_design(labels(25, 100), INTERCEPT_ONLY))
        assert m.intercept == pytest.approx(logit(0.25), abs=1e-6)
        assert m.converged

    def test_intercept_only_balanced(self):
        spec = DesignSpec(include_question=False, include_day=False, class_balanced=True)
        m = fit_logistic(make_design(labels(7, 100), spec))
        assert m.intercept == pytest.approx(0.0, abs=1e-6)

    def test_zero_rows(self):
        with pytest.raises(ValueError):
            fit_logistic(make_design([], INTERCEPT_ONLY))

    def test_nonconvergence_is_reported(self):
        rng = np.random.default_rng(0)
        m = fit_logistic(random_instance(rng, 200), max_iter=1)
        assert not m.converged and m.iterations == 1

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = random_instance(rng)
        X, pen, _ = design_matrix(d)
        coef = rng.normal(0, 0.5, X.shape[1])
        g = penalized_gradient(coef, X, d.y, d.weights, pen)
        h = 1e-5
        fd = np.empty_like(coef)
        for i in range(len(coef)):
            e = np.zeros_like(coef)
            e[i] = h
            fd[i] = (penalized_objective(coef + e, X, d.y, d.weights, pen) - penalized_objective(coef - e, X, d.y, d.weights, pen)) / (2 * h)
        assert np.all(np.abs(g - fd) <= 1e-6 * np.maximum(1.0, np.abs(fd)))

    @pytest.mark.parametrize("seed", range(5))
    def test_optimum_and_monotone_path(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = random_instance(rng, 300)
        tol = 1e-8
        m = fit_logistic(d, tol=tol)
        X, pen, layout = design_matrix(d)
        coef = np.array([_coef_of(m, c) for c in layout])
        assert np.max(np.abs(penalized_gradient(coef, X, d.y, d.weights, pen))) < 10 * tol
        path = np.array(m.objective_path)
        assert np.all(np.diff(path) >= -1e-12 * np.abs(path).max())

    def test_row_order_invariance(self):
        rng = np.random.default_rng(7)
        d = random_instance(rng, 200)
        perm = rng.permutation(200)
        d2 = make_design(
            d.y[perm],
            d.spec,
            activity=d.activity[perm],
            worker=d.factors["worker"][perm],
            crop=d.factors["crop"][perm],
            question=d.factors["question"][perm],
        )
        p1 = predict_design(fit_logistic(d), d)
        p2 = predict_design(fit_logistic(d2), d2)
        assert p2 == pytest.approx(p1[perm], abs=1e-8)

    def test_huge_ridge_shrinks_workers(self):
        rng = np.random.default_rng(8)
        d = random_instance(rng, 300)
        spec = DesignSpec(**{**d.spec.__dict__, "ridge_lambda_worker": 1e9})
        d = make_design(d.y, spec, d.activity, d.factors["worker"], d.factors["crop"], d.factors["question"])
        m = fit_logistic(d)
        assert max(abs(v) for v in m.worker_effects.values()) < 1e-6

    def test_warm_start_reaches_same_optimum(self):
        rng = np.random.default_rng(9)
        d = random_instance(rng, 300)
        cold = fit_logistic(d)
        warm = fit_logistic(d, init=cold)
        assert warm.iterations <= 2
        assert warm.intercept == pytest.approx(cold.intercept, abs=1e-8)

    def test_worker_recovery(self, small_log):
        records = small_log.records
        flags = flag_minorities(records, majority_outcomes(records))
        m = fit_logistic(build_design(records, flags, DesignSpec.ladder("awc"), sessionize(records)))
        counts = {}
        for r in records:
            counts[r.worker_id] = counts.get(r.worker_id, 0) + 1
        truth = {w.worker_id: w.skill for w in small_log.workers}
        busy = [w for w, c in counts.items() if c >= 200]
        assert len(busy) >= 8
        r = np.corrcoef([truth[w] for w in busy], [m.worker_effects[w] for w in busy])[0, 1]
        assert r >= 0.7


def _coef_of(model: FittedModel, col):
    if col.block == "intercept":
        return model.intercept
    if col.block in ("t1", "t2"):
        return getattr(model, f"beta_{col.block}")
    return model.effects(col.block)[col.level]


class TestPredict:
    def test_examples(self):
        m = FittedModel(intercept=0.0)
        assert predict(m) == 0.5
        m = FittedModel(intercept=-3.135)
        assert predict(m) == pytest.approx(0.0417, abs=1e-4)

    def test_unseen_is_zero_effect(self):
        m = FittedModel(intercept=-1.0, worker_effects={"w1": 0.0, "w2": 0.7})
        assert predict(m, worker_id="w1") == predict(m, worker_id="nobody")
        assert predict(m, worker_id="w2") > predict(m, worker_id="w1")

    def test_vectorized_matches_scalar(self):
        m = FittedModel(intercept=-1.0, beta_t1=-0.3, beta_t2=0.05, worker_effects={"w1": 0.4}, crop_effects={"c1": -0.2}, question_effects={"q2": 0.1})
        ps = predict_many(m, ["c1", "c2"], ["w1", "w9"], ["q2", "q1"], ["d", "d"], [1.5, 3.0])
        assert ps[0] == pytest.approx(predict(m, "c1", "w1", "q2", "d", 1.5), abs=1e-15)
        assert ps[1] == pytest.approx(predict(m, "c2", "w9", "q1", "d", 3.0), abs=1e-15)

    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        m = fit_logistic(random_instance(rng, 100))
        write_model(m, tmp_path / "m.json")
        back = read_model(tmp_path / "m.json")
        assert back == m
        assert back.to_json() == m.to_json()

    def test_json_omits_unused_blocks(self):
        m = fit_logistic(make_design(labels(3, 10), INTERCEPT_ONLY))
        assert m.to_dict()["effects"] == {}


class TestMetrics:
    def test_auc_examples(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0
        assert auc([0.2, 0.8], [1, 0]) == 0.0
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])

    @given(st.lists(st.tuples(st.integers(-500, 500), st.booleans()), min_size=2, max_size=40))
    def test_auc_invariant_to_monotone_transform(self, rows):
        s = np.array([r[0] / 100 for r in rows])
        y = np.array([r[1] for r in rows])
        if y.all() or not y.any():
            return
        assert auc(np.exp(s) * 3 + 1, y) == pytest.approx(auc(s, y), abs=1e-12)

    def test_auc_matches_pairwise_count(self):
        rng = np.random.default_rng(2)
        s = rng.integers(0, 5, 60).astype(float)
        y = rng.random(60) < 0.4
        pos, neg = s[y], s[~y]
        pairs = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        assert auc(s, y) == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)

    def test_pseudo_r2_null_model(self):
        m = fit_logistic(make_design(labels(30, 100), INTERCEPT_ONLY))
        assert pseudo_r2(m) == pytest.approx(0.0, abs=1e-10)
        with pytest.raises(ValueError):
            pseudo_r2(FittedModel(intercept=0.0))

    def test_pseudo_r2_near_one_under_separation(self):
        spec = DesignSpec(include_worker=True, include_question=False, include_day=False, ridge_lambda_worker=1e-6)
        y = np.array([1.0] * 50 + [0.0] * 50)
        d = make_design(y, spec, worker=["bad"] * 50 + ["good"] * 50)
        assert pseudo_r2(fit_logistic(d, max_iter=200)) > 0.99

    def test_lrt_identical(self):
        m = fit_logistic(make_design(labels(30, 100), INTERCEPT_ONLY))
        assert likelihood_ratio_test(m, m, 1) == (0.0, 1.0)

    def test_lrt_chi_square_tail(self):
        nested = FittedModel(intercept=0.0, spec=INTERCEPT_ONLY, log_likelihood=-100.0)
        full = FittedModel(intercept=0.0, spec=DesignSpec.ladder("a"), log_likelihood=-100.0 + 3.841 / 2)
        stat, p = likelihood_ratio_test(nested, full, 1)
        assert stat == pytest.approx(3.841)
        assert p == pytest.approx(chi2.sf(3.841, 1), abs=1e-12)
        assert p == pytest.approx(0.05, abs=1e-3)

    def test_lrt_rejects_worse_full_model(self):
        nested = FittedModel(intercept=0.0, spec=INTERCEPT_ONLY, log_likelihood=-10.0)
        full = FittedModel(intercept=0.0, spec=DesignSpec.ladder("a"), log_likelihood=-12.0)
        with pytest.raises(ValueError, match="non-nested fit"):
            likelihood_ratio_test(nested, full, 2)


class TestLadder:
    def test_auc_ordering(self, ladder):
        a = {k: v[1] for k, v in ladder.items()}
        assert a["awc"] >= a["aw"] >= a["a"] >= a["base"]

    def test_activity_lrt_significant(self):
        log = generate(GenConfig(n_crops=1500, n_workers=25, seed=5))
        records = log.records
        flags = flag_minorities(records, majority_outcomes(records))
        # a sparse log leaves long idle gaps inside shifts; a 60 min gap keeps one session per shift
        sessions = sessionize(records, 60.0)
        base = fit_logistic(build_design(records, flags, DesignSpec.ladder("base"), sessions))
        act = fit_logistic(build_design(records, flags, DesignSpec.ladder("a"), sessions))
        stat, p = likelihood_ratio_test(base, act, 2)
        assert p < 0.001

    def test_pseudo_r2_grows(self, ladder):
        assert pseudo_r2(ladder["awc"][0]) >= 1.5 * pseudo_r2(ladder["base"][0])

    def test_all_converge(self, ladder):
        assert all(m.converged for m, _ in ladder.values())
