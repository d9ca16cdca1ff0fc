import dataclasses

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from design import derive_all, enumerate_briefs, enumerate_profiles, features_frame, load_design_config
from errors import ConfigError, DegenerateError, InferenceError, RankError
from evaluators.synthetic_evaluator import load_synthetic_spec, synthetic_scores
from stats import (INTERCEPT, ColumnMeta, DesignMatrix, FeatureTerm, FitResult, InteractionBlock, ModelSpec,
                   build_design_matrix, cluster_robust_cov, fit_brief_interactions, fit_group_interactions,
                   fit_main_effects, fit_model, fit_ols, join_scores, main_effects_spec, main_terms, max_effect_table,
                   normalized_weights)


def _matrix(values, names):
    meta = [ColumnMeta(n, n, None, n) for n in names]
    return DesignMatrix(list(names), np.asarray(values, dtype=float), meta, np.arange(len(values)))


def _brute_force_cr0(X, e, clusters):
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((X.shape[1], X.shape[1]))
    for g in sorted(set(clusters)):
        s = np.zeros(X.shape[1])
        for i in range(len(e)):
            if clusters[i] == g:
                s += X[i] * e[i]
        meat += np.outer(s, s)
    return bread @ meat @ bread


@pytest.fixture(scope="module")
def planted_spec():
    return load_synthetic_spec("synthetic-planted")


@pytest.fixture(scope="module")
def planted_fit(full_features, planted_spec):
    return fit_main_effects(synthetic_scores(full_features, planted_spec), full_features)


# --- 最小二乘 ---
def test_qr_solution_matches_closed_form():
    X = _matrix([[1, 0], [1, 1], [1, 2], [1, 3]], [INTERCEPT, "x"])
    fit = fit_ols(X, [1.0, 3.0, 5.0, 7.0])
    assert_allclose(fit.coefficients.to_numpy(), [1.0, 2.0], atol=1e-12)
    assert fit.r_squared == pytest.approx(1.0)

    y = np.array([1.0, 2.0, 2.0, 5.0])
    fit = fit_ols(X, y)
    A = X.values
    assert_allclose(fit.coefficients.to_numpy(), np.linalg.solve(A.T @ A, A.T @ y), atol=1e-12)
    assert_allclose(fit.xtx_inv, np.linalg.inv(A.T @ A), atol=1e-12)


def test_collinear_columns_raise_rank_error():
    X = _matrix([[1, 0, 0], [1, 1, 1], [1, 2, 2], [1, 3, 3]], [INTERCEPT, "a", "a_copy"])
    with pytest.raises(RankError) as info:
        fit_ols(X, [1.0, 2.0, 2.0, 5.0])
    assert len(info.value.columns) == 1
    assert info.value.columns[0] in ("a", "a_copy")


def test_constant_response_is_degenerate():
    X = _matrix([[1, 0], [1, 1], [1, 2]], [INTERCEPT, "x"])
    with pytest.raises(DegenerateError):
        fit_ols(X, [4.0, 4.0, 4.0])


# --- 聚类稳健协方差 ---
def test_cr0_matches_brute_force_on_two_clusters():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 5.0]])
    y = np.array([1.0, 2.5, 2.0, 6.0])
    clusters = ["g1", "g1", "g2", "g2"]
    fit = fit_ols(_matrix(X, [INTERCEPT, "x"]), y)
    cov = cluster_robust_cov(X, fit.residuals, clusters, "CR0")
    assert_allclose(cov, _brute_force_cr0(X, fit.residuals, clusters), rtol=0, atol=1e-10)


def test_cr1_scales_cr0():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 5.0]])
    e = np.array([0.3, -0.2, 0.4, -0.5])
    clusters = [1, 1, 2, 2]
    cr0 = cluster_robust_cov(X, e, clusters, "CR0")
    cr1 = cluster_robust_cov(X, e, clusters, "CR1")
    G, N, k = 2, 4, 2
    assert_allclose(cr1, cr0 * (G / (G - 1)) * ((N - 1) / (N - k)), rtol=0, atol=1e-12)


def test_singleton_clusters_give_white_covariance():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(12), rng.normal(size=12), rng.normal(size=12)])
    e = rng.normal(size=12)
    bread = np.linalg.inv(X.T @ X)
    white = bread @ (X.T * e ** 2) @ X @ bread
    assert_allclose(cluster_robust_cov(X, e, np.arange(12), "CR0"), white, atol=1e-10)


def test_zero_residuals_give_zero_covariance():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 5.0]])
    assert_allclose(cluster_robust_cov(X, np.zeros(4), [1, 1, 2, 2], "CR1"), np.zeros((2, 2)), atol=0)


def test_covariance_needs_two_clusters():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    with pytest.raises(InferenceError):
        cluster_robust_cov(X, np.array([0.1, -0.2, 0.1]), ["only", "only", "only"])
    with pytest.raises(ConfigError):
        cluster_robust_cov(X, np.array([0.1, -0.2, 0.1]), [1, 2, 3], "CR3")


# --- 设计矩阵 ---
def test_reference_pair_has_only_intercept(full_features):
    frame = full_features.head(21600)
    spec = main_effects_spec(full_features)
    X = build_design_matrix(frame, spec)
    assert X.columns[0] == INTERCEPT
    reference = (
        (frame["skill_match"] == "exact") & (frame["experience_rel"] == "match") & (frame["rate_delta_eur"] == 0)
        & ~frame["remote_mismatch"] & ~frame["parttime_mismatch"] & frame["industry_match"] & frame["past_firm_large"]
        & (frame["reputation_level"] == "expert_badge") & (frame["education"] == "master")
        & (frame["name_group"] == "male_eu")
    ).to_numpy()
    assert reference.any()
    rows = X.values[reference]
    assert (rows[:, 0] == 1).all() and (rows[:, 1:] == 0).all()


def test_main_spec_columns_and_hash(full_features):
    spec = main_effects_spec(full_features)
    X = build_design_matrix(full_features.head(10), spec)
    assert "rate_delta_eur[-100]" in X.columns and "rate_delta_eur[0]" not in X.columns
    assert "name_group[female_eu]" in X.columns and "name_group[male_eu]" not in X.columns
    assert len(X.columns) == 20
    assert spec.spec_hash == main_effects_spec(full_features).spec_hash
    assert spec.spec_hash != main_effects_spec(full_features, adjustment="CR0").spec_hash


def test_moderator_cannot_interact_with_itself():
    term = FeatureTerm("name_group", "Name", ("male_eu", "female_eu"), "male_eu")
    with pytest.raises(ConfigError):
        InteractionBlock(term, ("female_eu",), ("name_group",))
    with pytest.raises(ConfigError):
        ModelSpec("mean_score", (term,), small_sample_adjustment="HC3")


# --- 恢复植入权重 ---
def test_noiseless_recovery_of_planted_weights(planted_fit, planted_spec):
    assert planted_fit.r_squared == pytest.approx(1.0, abs=1e-10)
    assert planted_fit.coefficients[INTERCEPT] == pytest.approx(planted_spec.intercept, abs=1e-8)
    for column, weight in planted_spec.planted_weights.items():
        assert planted_fit.coefficients[column] == pytest.approx(weight, abs=1e-8), column
    assert planted_fit.n_clusters == 16


def test_max_effect_ranking(planted_fit):
    table = max_effect_table(planted_fit)
    assert list(table["group"]) == ["Exp.", "Rep.", "Skills", "Rate", "Remote", "P-time", "Educ.", "Firm",
                                    "Industry", "Female", "Arabic"]
    assert list(table["rank"]) == list(range(1, 12))
    assert table.iloc[0]["column"] == "experience_rel[below]"
    assert table.iloc[3]["column"] == "rate_delta_eur[-100]"
    assert table.iloc[0]["max_effect"] == pytest.approx(-2.25, abs=1e-8)


def test_normalized_weights_sum_to_one(planted_fit):
    weights = normalized_weights(planted_fit)
    assert INTERCEPT not in weights.index
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert weights.idxmax() == "experience_rel[below]"


def test_noisy_rounded_recovery(full_features, planted_spec):
    noisy = planted_spec.model_copy(update={"noise_sd": 0.1, "rounding": "nearest_half", "seed": 7})
    fit = fit_main_effects(synthetic_scores(full_features, noisy), full_features)
    assert fit.r_squared > 0.95
    for column, weight in planted_spec.planted_weights.items():
        assert abs(fit.coefficients[column] - weight) <= 0.05, column


def test_group_interaction_equals_split_samples(full_features, planted_spec):
    planted = planted_spec.model_copy(update={
        "group_interaction_weights": {"name_group[female_eu]:experience_rel[below]": 0.07}})
    frame = full_features[full_features["name_group"].isin(["male_eu", "female_eu"])].reset_index(drop=True)
    scores = synthetic_scores(frame, planted)

    pooled = fit_group_interactions(scores, frame, "name_group=female_eu")
    column = "name_group[female_eu]:experience_rel[below]"
    assert pooled.coefficients[column] == pytest.approx(0.07, abs=1e-8)
    assert pooled.label == "group:name_group=female_eu"

    female = fit_main_effects(scores, frame[frame["name_group"] == "female_eu"])
    male = fit_main_effects(scores, frame[frame["name_group"] == "male_eu"])
    split = female.coefficients["experience_rel[below]"] - male.coefficients["experience_rel[below]"]
    assert pooled.coefficients[column] == pytest.approx(split, abs=1e-8)
    assert pooled.coefficients["skill_match[far]"] == pytest.approx(male.coefficients["skill_match[far]"], abs=1e-8)


def test_brief_moderation_recovery(full_features, planted_spec):
    planted = planted_spec.model_copy(update={
        "brief_interaction_weights": {"brief.work_location[remote_allowed]:skill_match[far]": -0.3}})
    scores = synthetic_scores(full_features, planted)
    fit = fit_brief_interactions(scores, full_features, "work_location=remote_allowed", matching_only=True)
    assert fit.coefficients["brief.work_location[remote_allowed]:skill_match[far]"] == pytest.approx(-0.3, abs=1e-8)
    assert fit.coefficients["brief.work_location[remote_allowed]:experience_rel[below]"] == pytest.approx(0.0, abs=1e-8)
    assert "brief.work_location[remote_allowed]:name_group[female_eu]" not in fit.columns


def test_brief_term_must_vary(pilot_design):
    profiles, briefs = pilot_design
    frame = features_frame(derive_all(profiles, briefs))
    scores = pd.DataFrame({"pair_id": frame["pair_id"], "mean_score": np.arange(len(frame), dtype=float) % 7})
    with pytest.raises(InferenceError):
        fit_brief_interactions(scores, frame, "contract_time=part_time")
    with pytest.raises(InferenceError):
        fit_brief_interactions(scores, frame, "work_location=onsite_required", reference="onsite_required")


# --- 推断细节 ---
def test_classical_covariance_without_clusters(pilot_design):
    profiles, briefs = pilot_design
    frame = features_frame(derive_all(profiles, briefs))
    rng = np.random.default_rng(3)
    frame["mean_score"] = 5.0 + rng.normal(size=len(frame))
    spec = main_effects_spec(frame, cluster_key=None)
    fit = fit_model(frame, spec)
    X = build_design_matrix(frame, spec).values
    n, k = X.shape
    sigma2 = float(fit.residuals @ fit.residuals) / (n - k)
    assert_allclose(fit.robust_se.to_numpy(), np.sqrt(np.diag(sigma2 * np.linalg.inv(X.T @ X))), rtol=1e-10)
    assert fit.n_clusters is None and fit.df_resid == n - k


def test_join_rejects_duplicate_or_disjoint_scores(pilot_design):
    profiles, briefs = pilot_design
    frame = features_frame(derive_all(profiles, briefs))
    duplicated = pd.DataFrame({"pair_id": [frame["pair_id"][0]] * 2, "mean_score": [1.0, 2.0]})
    with pytest.raises(InferenceError):
        join_scores(duplicated, frame)
    with pytest.raises(InferenceError):
        join_scores(pd.DataFrame({"pair_id": ["nope"], "mean_score": [1.0]}), frame)


def test_fit_result_json_round_trip(planted_fit):
    restored = FitResult.from_json(planted_fit.to_json())
    assert restored.columns == planted_fit.columns
    assert_allclose(restored.coefficients.to_numpy(), planted_fit.coefficients.to_numpy(), rtol=0, atol=0)
    assert restored.spec_hash == planted_fit.spec_hash
    pd.testing.assert_frame_equal(restored.to_frame(), planted_fit.to_frame())


def test_all_zero_coefficients_have_no_weights():
    columns = [INTERCEPT, "a[x]"]
    zero = pd.Series([1.0, 0.0], index=columns)
    fit = FitResult(columns=columns, coefficients=zero, robust_se=zero, p_values=zero, r_squared=0.0, n_obs=3,
                    n_clusters=None, df_resid=1)
    with pytest.raises(DegenerateError):
        normalized_weights(fit)


def test_cr1_needs_more_rows_than_columns():
    X = np.array([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(InferenceError):
        cluster_robust_cov(X, np.array([0.1, -0.1]), [1, 2], "CR1")
    assert cluster_robust_cov(X, np.array([0.1, -0.1]), [1, 2], "CR0").shape == (2, 2)


def test_brief_level_needs_reference_when_more_than_two_observed(pilot_design):
    profiles, briefs = pilot_design
    frame = features_frame(derive_all(profiles, briefs))
    frame["brief.work_location"] = np.array(["onsite_required", "remote_allowed", "hybrid"])[np.arange(len(frame)) % 3]
    scores = pd.DataFrame({"pair_id": frame["pair_id"], "mean_score": np.arange(len(frame), dtype=float) % 7})
    with pytest.raises(InferenceError, match="reference"):
        fit_brief_interactions(scores, frame, "work_location=remote_allowed")


# --- 估计量的不变性 ---
@pytest.fixture(scope="module")
def noisy_frame(full_features, planted_spec):
    noisy = planted_spec.model_copy(update={"noise_sd": 0.3, "rounding": "nearest_half", "seed": 19})
    return join_scores(synthetic_scores(full_features, noisy), full_features)


@pytest.fixture(scope="module")
def noisy_fit(noisy_frame):
    return fit_model(noisy_frame, main_effects_spec(noisy_frame))


def test_residuals_are_orthogonal_to_columns(noisy_frame, noisy_fit):
    X = build_design_matrix(noisy_frame, main_effects_spec(noisy_frame)).values
    y = noisy_frame["mean_score"].to_numpy(dtype=float)
    assert np.abs(X.T @ noisy_fit.residuals).max() / np.linalg.norm(y) <= 1e-8


def test_balanced_design_decouples_main_terms(noisy_frame, noisy_fit):
    for dropped in ("name_group", "education"):
        terms = tuple(t for t in main_terms(noisy_frame) if t.name != dropped)
        reduced = fit_model(noisy_frame, ModelSpec("mean_score", terms))
        kept = [c for c in reduced.columns if c != INTERCEPT]
        assert len(kept) < len(noisy_fit.columns) - 1
        assert_allclose(reduced.coefficients[kept].to_numpy(), noisy_fit.coefficients[kept].to_numpy(),
                        rtol=0, atol=1e-8)


def test_cr1_diagonal_dominates_cr0(noisy_frame, noisy_fit):
    X = build_design_matrix(noisy_frame, main_effects_spec(noisy_frame))
    clusters = noisy_frame["brief_id"].to_numpy()
    cr0 = cluster_robust_cov(X, noisy_fit.residuals, clusters, "CR0", noisy_fit.xtx_inv)
    cr1 = cluster_robust_cov(X, noisy_fit.residuals, clusters, "CR1", noisy_fit.xtx_inv)
    assert (np.diag(cr1) >= np.diag(cr0)).all()
    assert (np.diag(cr1) > 0).all()


@pytest.mark.parametrize("factor", [0.25, 3.7])
def test_max_effect_ranks_ignore_positive_rescaling(noisy_fit, factor):
    scaled = dataclasses.replace(noisy_fit, coefficients=noisy_fit.coefficients * factor)
    base, rescaled = max_effect_table(noisy_fit), max_effect_table(scaled)
    pd.testing.assert_frame_equal(base[["group", "column", "rank"]], rescaled[["group", "column", "rank"]])
    assert_allclose(rescaled["max_effect"].to_numpy(), base["max_effect"].to_numpy() * factor, rtol=1e-12)


@pytest.mark.parametrize("factor", [0.25, 3.7])
def test_normalized_weights_ignore_coefficient_scale(noisy_fit, factor):
    scaled = dataclasses.replace(noisy_fit, coefficients=noisy_fit.coefficients * factor)
    weights = normalized_weights(noisy_fit)
    pd.testing.assert_index_equal(normalized_weights(scaled).index, weights.index)
    assert_allclose(normalized_weights(scaled).to_numpy(), weights.to_numpy(), rtol=1e-12, atol=0)


# --- 第二个职业设计 ---
@pytest.fixture(scope="module")
def seo_features():
    config = load_design_config("paper-seo")
    return features_frame(derive_all(enumerate_profiles(config), enumerate_briefs(config)))


def test_seo_design_noiseless_recovery(seo_features, planted_spec):
    fit = fit_main_effects(synthetic_scores(seo_features, planted_spec), seo_features)
    assert fit.n_obs == 21600 * 16 and fit.n_clusters == 16
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    assert fit.coefficients[INTERCEPT] == pytest.approx(planted_spec.intercept, abs=1e-8)
    for column, weight in planted_spec.planted_weights.items():
        assert fit.coefficients[column] == pytest.approx(weight, abs=1e-8), column


def test_seo_design_noisy_rounded_recovery(seo_features, planted_spec):
    noisy = planted_spec.model_copy(update={"noise_sd": 0.1, "rounding": "nearest_half", "seed": 7})
    fit = fit_main_effects(synthetic_scores(seo_features, noisy), seo_features)
    assert fit.r_squared > 0.95
    for column, weight in planted_spec.planted_weights.items():
        assert abs(fit.coefficients[column] - weight) <= 0.02, column
