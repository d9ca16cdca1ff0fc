# report.py
"""
由持久化的拟合结果与聚合分数生成报告：系数表（含显著性 / 透明标记）、最大效应排名、
归一化权重（评分 vs 排序）、交互面板、分数分布与直方图、Markdown 摘要和可选的 SVG 森林图。
报告是产物的纯函数；摘要里的每个数字都以同一格式出现在某个 CSV 中。
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

from errors import DegenerateError, StageError
from stats import INTERCEPT, FitResult, max_effect_table, normalized_weights

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6g"
SIGNIFICANCE = 0.05
HISTOGRAM_BIN = 0.5


def fmt(value: float) -> str:
    return FLOAT_FORMAT % value


def slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label.replace("=", "-"))


@dataclass
class ReportBundle:
    campaign_id: str
    coefficients: pd.DataFrame
    max_effects: pd.DataFrame
    normalized_weights: pd.DataFrame
    interaction_panels: Dict[str, pd.DataFrame]
    score_distribution: pd.DataFrame
    histogram: pd.DataFrame
    fits_overview: pd.DataFrame
    summary: str
    svg: Dict[str, str] = field(default_factory=dict)


# --- 1. 表格 ---
def coefficient_table(fit: FitResult, campaign_id: str) -> pd.DataFrame:
    table = fit.to_frame()
    slopes = table["column"] != INTERCEPT
    table["significant"] = slopes & (table["p_value"] < SIGNIFICANCE)
    # 不显著的系数在图中以透明显示；截距不参与
    table["transparent"] = slopes & ~table["significant"]
    table.insert(0, "label", fit.label)
    table["spec_hash"] = fit.spec_hash
    table["campaign_id"] = campaign_id
    return table


def interaction_panel(fit: FitResult, campaign_id: str) -> Optional[pd.DataFrame]:
    """交互项对应的主效应、交互系数以及调节组内的合计效应。"""
    table = fit.to_frame()
    inter = table[table["moderator"].notna()]
    if inter.empty:
        return None
    base = table[table["moderator"].isna()].set_index("column")["estimate"]
    mains = inter["column"].str.split(":", n=1).str[1]
    panel = pd.DataFrame({
        "moderator": inter["moderator"].to_numpy(),
        "moderator_level": inter["moderator_level"].to_numpy(),
        "term": inter["term"].to_numpy(),
        "level": inter["level"].to_numpy(),
        "column": inter["column"].to_numpy(),
        "main_estimate": base.reindex(mains).to_numpy(),
        "interaction_estimate": inter["estimate"].to_numpy(),
        "robust_se": inter["robust_se"].to_numpy(),
        "p_value": inter["p_value"].to_numpy(),
    })
    panel["group_effect"] = panel["main_estimate"] + panel["interaction_estimate"]
    panel["spec_hash"] = fit.spec_hash
    panel["campaign_id"] = campaign_id
    return panel


def weights_table(fits: Sequence[FitResult], campaign_id: str) -> pd.DataFrame:
    """评分（main）与排序（rank）两次拟合的归一化权重按列对齐。"""
    columns = {}
    hashes = []
    for fit in fits:
        if fit.label not in ("main", "rank"):
            continue
        try:
            columns["scoring" if fit.label == "main" else "ranking"] = normalized_weights(fit)
            hashes.append(fit.spec_hash)
        except DegenerateError:
            logger.warning("拟合 %s 的系数全为 0，跳过归一化权重。", fit.label)
    if not columns:
        return pd.DataFrame(columns=["column", "spec_hash", "campaign_id"])
    ordered = {k: columns[k] for k in ("scoring", "ranking") if k in columns}
    table = pd.concat(ordered, axis=1, sort=False)
    table.index.name = "column"
    table = table.reset_index()
    table["spec_hash"] = ",".join(hashes)
    table["campaign_id"] = campaign_id
    return table


def score_distribution(aggregates: Optional[pd.DataFrame], campaign_id: str):
    if aggregates is None or aggregates.empty:
        return (pd.DataFrame(columns=["n_pairs", "mean", "sd", "min", "max", "varying_share", "max_spread", "campaign_id"]),
                pd.DataFrame(columns=["bin_left", "bin_right", "count", "campaign_id"]))
    scores = aggregates["mean_score"].astype(float)
    spread = aggregates["spread"].astype(float) if "spread" in aggregates else pd.Series(0.0, index=scores.index)
    summary = pd.DataFrame([{
        "n_pairs": int(len(scores)),
        "mean": scores.mean(),
        "sd": scores.std(ddof=1) if len(scores) > 1 else 0.0,
        "min": scores.min(),
        "max": scores.max(),
        "varying_share": float((spread > 0).mean()),
        "max_spread": float(spread.max()),
        "campaign_id": campaign_id,
    }])
    edges = np.arange(0.0, 10.0 + HISTOGRAM_BIN, HISTOGRAM_BIN)
    counts, _ = np.histogram(scores.to_numpy(), bins=edges)
    histogram = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts, "campaign_id": campaign_id})
    return summary, histogram


def fits_overview(fits: Sequence[FitResult], coefficients: pd.DataFrame, campaign_id: str) -> pd.DataFrame:
    """每次拟合一行；non_significant 为该拟合中以透明显示的系数个数。"""
    transparent = coefficients.groupby("label", sort=False)["transparent"].sum()
    return pd.DataFrame([{
        "label": f.label, "response": f.response, "n_obs": f.n_obs,
        "n_clusters": f.n_clusters if f.n_clusters is not None else "",
        "r_squared": f.r_squared, "cluster_key": f.cluster_key or "none", "adjustment": f.adjustment,
        "non_significant": int(transparent.get(f.label, 0)),
        "spec_hash": f.spec_hash, "campaign_id": campaign_id,
    } for f in fits])


# --- 2. 摘要与图 ---
def _summary_markdown(bundle: ReportBundle) -> str:
    lines = ["# Audit report", "", f"Campaign: `{bundle.campaign_id}`", ""]
    if not bundle.score_distribution.empty:
        d = bundle.score_distribution.iloc[0]
        lines += [
            "## Score distribution", "",
            f"Mean scores over {int(d['n_pairs'])} pairs are centred at {fmt(d['mean'])} "
            f"with a standard deviation of {fmt(d['sd'])}, ranging from {fmt(d['min'])} to {fmt(d['max'])}.",
            f"Share of pairs whose runs vary: {fmt(d['varying_share'])}; largest spread: {fmt(d['max_spread'])} points.",
            "",
        ]
    lines += ["## Fits", "", "Non-significant coefficients are shown transparent in the forest plots.", "",
              "| label | N | G | R² | non-significant | spec hash |", "|---|---|---|---|---|---|"]
    for row in bundle.fits_overview.itertuples(index=False):
        lines.append(f"| {row.label} | {row.n_obs} | {row.n_clusters} | {fmt(row.r_squared)} | {row.non_significant} "
                     f"| `{row.spec_hash}` |")
    for label, table in bundle.max_effects.groupby("label", sort=False):
        lines += ["", f"## Largest effect per attribute ({label})", "", "| rank | attribute | level | max effect |", "|---|---|---|---|"]
        for row in table.itertuples(index=False):
            lines.append(f"| {row.rank} | {row.group} | `{row.column}` | {fmt(row.max_effect)} |")
    lines.append("")
    return "\n".join(lines)


def forest_svg(table: pd.DataFrame, title: str) -> str:
    """系数森林图：点为估计值，横线为 ±1.96 标准误，不显著的项半透明。"""
    rows = table[table["column"] != INTERCEPT].reset_index(drop=True)
    se = rows["robust_se"].fillna(0.0)
    low, high = rows["estimate"] - 1.96 * se, rows["estimate"] + 1.96 * se
    lo = min(float(low.min()) if len(rows) else 0.0, 0.0)
    hi = max(float(high.max()) if len(rows) else 0.0, 0.0)
    span = (hi - lo) or 1.0
    left, width, row_h = 260, 420, 18
    height = 40 + row_h * len(rows)

    def x(value: float) -> float:
        return left + (value - lo) / span * width

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 20}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="10" y="16" font-size="13">{escape(title)}</text>',
        f'<line x1="{x(0.0):.2f}" y1="24" x2="{x(0.0):.2f}" y2="{height - 8}" stroke="#888" stroke-dasharray="3,3"/>',
    ]
    for i, row in rows.iterrows():
        y = 34 + row_h * i
        opacity = "0.35" if row["transparent"] else "1"
        parts.append(f'<g opacity="{opacity}">')
        parts.append(f'<text x="10" y="{y + 4}">{escape(str(row["column"]))}</text>')
        parts.append(f'<line x1="{x(low[i]):.2f}" y1="{y}" x2="{x(high[i]):.2f}" y2="{y}" stroke="#1f4e79"/>')
        parts.append(f'<circle cx="{x(row["estimate"]):.2f}" cy="{y}" r="3.5" fill="#1f4e79"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- 3. 组装与写出 ---
def emit_report(fits: Sequence[FitResult], aggregates: Optional[pd.DataFrame] = None,
                campaign_id: str = "", with_svg: bool = False) -> ReportBundle:
    if not fits:
        raise StageError("A report needs at least one fit")
    coefficients = pd.concat([coefficient_table(f, campaign_id) for f in fits], ignore_index=True)
    max_effects = []
    for fit in fits:
        table = max_effect_table(fit)
        table.insert(0, "label", fit.label)
        table["spec_hash"] = fit.spec_hash
        table["campaign_id"] = campaign_id
        max_effects.append(table)
    panels = {}
    for fit in fits:
        panel = interaction_panel(fit, campaign_id)
        if panel is not None:
            panels[slug(fit.label)] = panel
    distribution, histogram = score_distribution(aggregates, campaign_id)

    bundle = ReportBundle(
        campaign_id=campaign_id,
        coefficients=coefficients,
        max_effects=pd.concat(max_effects, ignore_index=True),
        normalized_weights=weights_table(fits, campaign_id),
        interaction_panels=panels,
        score_distribution=distribution,
        histogram=histogram,
        fits_overview=fits_overview(fits, coefficients, campaign_id),
        summary="",
    )
    bundle.summary = _summary_markdown(bundle)
    if with_svg:
        for label, table in coefficients.groupby("label", sort=False):
            bundle.svg[f"forest_{slug(label)}.svg"] = forest_svg(table, f"Coefficients ({label})")
    return bundle


def write_report(bundle: ReportBundle, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = {
        "coefficients.csv": bundle.coefficients,
        "max_effect.csv": bundle.max_effects,
        "normalized_weights.csv": bundle.normalized_weights,
        "score_distribution.csv": bundle.score_distribution,
        "score_histogram.csv": bundle.histogram,
        "fits_overview.csv": bundle.fits_overview,
    }
    tables.update({f"interactions_{name}.csv": panel for name, panel in bundle.interaction_panels.items()})
    written = []
    for name, table in tables.items():
        path = directory / name
        table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
    summary = directory / "summary.md"
    summary.write_text(bundle.summary, encoding="utf-8")
    written.append(summary)
    for name, markup in bundle.svg.items():
        path = directory / name
        path.write_text(markup, encoding="utf-8")
        written.append(path)
    logger.info("报告已写入 %s (%d 个文件)", directory, len(written))
    return written
