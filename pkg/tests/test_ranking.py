import itertools

import numpy as np
import pandas as pd
import pytest

import storage
from errors import ConfigError, DegenerateError, InferenceError, ParseError
from evaluators.synthetic_evaluator import SyntheticEvaluator, format_ranking_reply, linear_index, load_synthetic_spec
from design import derive_features
from ranking import (RankRecord, assign_groups, fit_rank_regression, parse_ranking, rank_scores, ranking_requests,
                     run_ranking_campaign, sample_triples)
from rendering import PromptBuilder, load_template_set
from stats import INTERCEPT, normalized_weights


@pytest.fixture
def session(tmp_path):
    s = storage.get_session_factory(f"sqlite:///{tmp_path / 'rank.db'}")()
    yield s
    s.close()
    storage.dispose_all()


@pytest.mark.parametrize("reply, expected", [
    ("1. Profil B\n2. Profil A\n3. Profil C\nJustification : B a le bon stack.", (2, 1, 3)),
    ("1) Profile C\n2) Profile B\n3) Profile A", (3, 2, 1)),
    ("1. **Profil A**\n2. **Profil C**\n3. **Profil B**", (1, 3, 2)),
    ("1: A\n2: B\n3: C", (1, 2, 3)),
    ("Classement :\n1 - Profil C\n2 - Profil A\n3 - Profil B", (2, 3, 1)),
    ("1. Profil B\n2. Profil A\n3. Profil C\nRappel : 1. Profil B", (2, 1, 3)),
])
def test_parse_ranking_accepts(reply, expected):
    assert parse_ranking(reply) == expected


@pytest.mark.parametrize("reply", [
    "",
    "Je ne peux pas classer ces profils.",
    "1. Profil A\n2. Profil B",
    "1. Profil A\n1. Profil B\n3. Profil C",
    "1. Profil A\n2. Profil A\n3. Profil C",
])
def test_parse_ranking_rejects(reply):
    with pytest.raises(ParseError):
        parse_ranking(reply)


def test_triples_are_disjoint_and_seeded(pilot_design):
    profiles, briefs = pilot_design
    triples = sample_triples(profiles, seed=4)
    assert len(triples) == len(profiles) // 3
    ids = [p.profile_id for t in triples for p in t]
    assert len(ids) == len(set(ids))
    assert [[p.profile_id for p in t] for t in sample_triples(profiles, seed=4)] == [[p.profile_id for p in t] for t in triples]
    assert sample_triples(profiles, seed=5) != triples

    groups = assign_groups(triples, briefs)
    assert [g.brief.brief_id for g in groups[:4]] == [briefs[0].brief_id, briefs[1].brief_id] * 2
    assert groups[0].group_id == "t00000"


def test_sampling_needs_three_profiles(pilot_design):
    profiles, briefs = pilot_design
    with pytest.raises(ConfigError):
        sample_triples(profiles[:2], seed=0)
    with pytest.raises(ConfigError):
        assign_groups(sample_triples(profiles, seed=0), [])


def test_ranking_requests_carry_presentation_order(pilot_builder, pilot_design):
    profiles, briefs = pilot_design
    groups = assign_groups(sample_triples(profiles, seed=1), briefs)
    request = ranking_requests(groups[:1], pilot_builder, "m")[0]
    assert request.task == "rank"
    assert request.profile_ids == tuple(p.profile_id for p in groups[0].profiles)
    assert request.labels == ("A", "B", "C")
    assert request.source_id == "t00000"


def test_rank_scores_invert_ranks():
    records = [
        RankRecord("t00000", "b1", ("p1", "p2", "p3"), (2, 1, 3), "", "ok"),
        RankRecord("t00001", "b1", ("p4", "p5", "p6"), None, "nonsense", "parse_error"),
    ]
    frame = rank_scores(records)
    assert list(frame["profile_id"]) == ["p1", "p2", "p3"]
    assert list(frame["rank_score"]) == [2.0, 3.0, 1.0]
    assert list(frame["pair_id"]) == ["p1-b1", "p2-b1", "p3-b1"]


@pytest.mark.parametrize("utilities", [(0.4, -1.2, 2.5), (7.0, 7.5, 6.0)])
def test_presentation_order_does_not_change_rank_scores(utilities):
    profile_utility = dict(zip(("p1", "p2", "p3"), utilities))
    frames = []
    for presented in itertools.permutations(profile_utility):
        reply = format_ranking_reply([profile_utility[p] for p in presented])
        record = RankRecord("t00000", "b1", presented, parse_ranking(reply), reply, "ok")
        frames.append(rank_scores([record]).sort_values("profile_id").reset_index(drop=True))
    for frame in frames[1:]:
        pd.testing.assert_frame_equal(frame, frames[0])
    best = max(profile_utility, key=profile_utility.get)
    assert frames[0].set_index("profile_id").loc[best, "rank_score"] == 3.0


def test_rank_regression_rejects_empty_and_constant(full_features):
    with pytest.raises(InferenceError):
        fit_rank_regression([], full_features)
    pair_ids = full_features["pair_id"].head(6)
    constant = pd.DataFrame({"group_id": ["t0", "t0", "t0", "t1", "t1", "t1"], "brief_id": full_features["brief_id"].head(6),
                             "pair_id": pair_ids, "rank_score": [2.0] * 6})
    with pytest.raises(DegenerateError):
        fit_rank_regression(constant, full_features)


def test_planted_utility_ranking_campaign(full_config, full_design, full_features, session):
    profiles, briefs = full_design
    spec = load_synthetic_spec("synthetic-planted")
    builder = PromptBuilder(load_template_set(full_config))
    groups = assign_groups(sample_triples(profiles, seed=0), briefs)
    assert len(groups) == len(profiles) // 3

    records, stats = run_ranking_campaign(groups, SyntheticEvaluator(spec), session, builder, concurrency=4)
    assert stats.complete and len(records) == len(groups)
    assert all(r.status == "ok" for r in records)

    by_group = {g.group_id: g for g in groups}
    for record in records:
        group = by_group[record.group_id]
        utilities = [linear_index(derive_features(p, group.brief), spec) for p in group.profiles]
        order = sorted(range(3), key=lambda i: (-utilities[i], i))
        assert [record.ranks[i] for i in order] == [1, 2, 3]

    fit = fit_rank_regression(records, full_features)
    assert fit.label == "rank" and fit.cluster_key == "group_id"
    assert fit.n_clusters == len(groups)
    recovered = {c: w for c, w in spec.planted_weights.items() if abs(w) >= 0.05}
    assert len(recovered) == 16
    for column, weight in recovered.items():
        assert np.sign(fit.coefficients[column]) == np.sign(weight), column
    weights = normalized_weights(fit)
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert INTERCEPT not in weights.index
