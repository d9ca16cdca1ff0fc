import json
from pathlib import Path

import pandas as pd
import pytest

from evaluators.synthetic_evaluator import load_synthetic_spec
from main import main
from stats import INTERCEPT


@pytest.fixture
def pilot_workspace(tmp_path, pilot_path):
    workspace = str(tmp_path / "ws")
    assert main(["design", "--workspace", workspace, "--config", str(pilot_path)]) == 0
    assert main(["render", "--workspace", workspace]) == 0
    return workspace


def _manifest(workspace, *parts):
    return json.loads(Path(workspace, *parts).read_text(encoding="utf-8"))


def test_pilot_pipeline_recovers_planted_weights(pilot_workspace):
    ws = pilot_workspace
    assert _manifest(ws, "design", "manifest.json")["counts"] == {"profiles": 45, "briefs": 2, "pairs": 90}
    assert _manifest(ws, "rendered", "manifest.json")["locale"] == "fr"

    assert main(["score", "--workspace", ws, "--backend", "synthetic", "--runs", "3"]) == 0
    scores = _manifest(ws, "scores", "manifest.json")
    assert scores["status"] == "complete" and scores["runs"] == 3
    aggregates = pd.read_csv(f"{ws}/scores/aggregates.csv")
    assert len(aggregates) == 90 and (aggregates["n_runs"] == 3).all()

    assert main(["fit", "--workspace", ws, "--model", "main"]) == 0
    table = pd.read_csv(f"{ws}/fits/main.csv").set_index("column")
    planted = load_synthetic_spec("synthetic-planted").planted_weights
    assert table.loc[INTERCEPT, "estimate"] == pytest.approx(8.0, abs=1e-8)
    slopes = table.drop(index=INTERCEPT)
    assert "experience_rel[below]" in slopes.index and "reputation_level[none]" in slopes.index
    for column, estimate in slopes["estimate"].items():
        assert estimate == pytest.approx(planted[column], abs=1e-8), column

    assert main(["report", "--workspace", ws, "--svg"]) == 0
    coefficients = pd.read_csv(f"{ws}/reports/coefficients.csv")
    assert (coefficients["campaign_id"] == scores["campaign_id"]).all()
    assert (Path(ws, "reports", "forest_main.svg")).exists()
    assert "# Audit report" in Path(ws, "reports", "summary.md").read_text(encoding="utf-8")


def test_fit_before_score_fails(pilot_workspace):
    assert main(["fit", "--workspace", pilot_workspace]) == 1
    assert not Path(pilot_workspace, "fits", "main.json").exists()


def test_render_needs_design(tmp_path):
    assert main(["render", "--workspace", str(tmp_path / "empty")]) == 1


def test_interrupted_campaign_needs_resume(pilot_workspace):
    ws = pilot_workspace
    assert main(["score", "--workspace", ws, "--max-calls", "100"]) == 0
    interrupted = _manifest(ws, "scores", "manifest.json")
    assert interrupted["status"] == "interrupted"
    assert interrupted["remaining_calls"] == 270 - 100
    assert not Path(ws, "scores", "aggregates.csv").exists()

    assert main(["score", "--workspace", ws]) == 1
    assert main(["score", "--workspace", ws, "--resume"]) == 0
    resumed = _manifest(ws, "scores", "manifest.json")
    assert resumed["status"] == "complete"
    assert resumed["campaign_id"] == interrupted["campaign_id"]
    assert len(pd.read_csv(f"{ws}/scores/aggregates.csv")) == 90


def test_rank_command_writes_rank_scores(pilot_workspace):
    ws = pilot_workspace
    assert main(["rank", "--workspace", ws, "--seed", "2"]) == 0
    manifest = _manifest(ws, "scores", "rank_manifest.json")
    assert manifest["status"] == "complete" and manifest["groups"] == 15
    scores = pd.read_csv(f"{ws}/scores/rank_scores.csv", dtype={"group_id": str})
    assert len(scores) == 45
    assert all(sorted(g) == [1.0, 2.0, 3.0] for g in scores.groupby("group_id")["rank_score"].apply(list))


def test_unknown_model_is_rejected(pilot_workspace):
    ws = pilot_workspace
    assert main(["score", "--workspace", ws, "--runs", "1"]) == 0
    assert main(["fit", "--workspace", ws, "--model", "interaction"]) == 1


def test_full_design_manifest(tmp_path):
    ws = str(tmp_path / "full")
    assert main(["design", "--workspace", ws, "--config", "paper-fullstack"]) == 0
    manifest = _manifest(ws, "design", "manifest.json")
    assert manifest["counts"]["briefs"] == 16
    assert manifest["counts"]["profiles"] == 21600
    assert manifest["balance"]["profiles"]["orthogonal"]
