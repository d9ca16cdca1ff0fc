# ranking.py
"""
排序变体：把档案无放回地抽成三人组，每组配一个 brief 让评估器排序，
再以反转名次 (3/2/1) 为因变量、按组聚类，估计与评分相同的主效应设计。
"""
import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sqlalchemy.orm import Session as SessionType

import storage
from design import BriefSpec, ProfileSpec, derive_features, pair_id
from errors import ConfigError, DegenerateError, InferenceError, ParseError
from evaluators.base_evaluator import BaseEvaluator, EvaluationRequest
from harness import CampaignStats, cache_key, execute_requests
from rendering import RANK_LABELS, PromptBuilder
from stats import FitResult, as_feature_frame, fit_model, main_effects_spec

logger = logging.getLogger(__name__)

GROUP_SIZE = 3
RANKING_PATTERN = re.compile(r"(?<![\w/])([1-3])\s*[.)\]:-]\s*\**\s*(?:(?i:profile?)\s*)?([A-C])\b")


@dataclass(frozen=True)
class RankGroup:
    group_id: str
    brief: BriefSpec
    profiles: Tuple[ProfileSpec, ...]       # 呈现顺序


@dataclass(frozen=True)
class RankRecord:
    group_id: str
    brief_id: str
    profile_ids: Tuple[str, ...]
    ranks: Optional[Tuple[int, ...]]        # 与 profile_ids 对齐，1 = 最可能被录用
    raw_text: str
    status: str

    @classmethod
    def from_row(cls, row: dict) -> "RankRecord":
        ranks = row.get("ranks")
        return cls(row["source_id"], row["brief_id"], tuple(row["profile_ids"]),
                   tuple(ranks) if ranks is not None else None, row["raw_text"], row["status"])


# --- 1. 抽样 ---
def sample_triples(profiles: Sequence[ProfileSpec], seed: int) -> List[Tuple[ProfileSpec, ...]]:
    """种子洗牌后按三个一组切分，得到 ⌊N/3⌋ 个互不相交的三人组；组内顺序即呈现顺序。"""
    if len(profiles) < GROUP_SIZE:
        raise ConfigError(f"Need at least {GROUP_SIZE} profiles to form a ranking group, got {len(profiles)}")
    order = np.random.default_rng(seed).permutation(len(profiles))
    n_groups = len(profiles) // GROUP_SIZE
    return [tuple(profiles[i] for i in order[g * GROUP_SIZE:(g + 1) * GROUP_SIZE]) for g in range(n_groups)]


def assign_groups(triples: Sequence[Tuple[ProfileSpec, ...]], briefs: Sequence[BriefSpec]) -> List[RankGroup]:
    """按抽样顺序轮流分配 brief，每个三人组只排序一次。"""
    if not briefs:
        raise ConfigError("Ranking needs at least one brief")
    return [RankGroup(f"t{i:05d}", briefs[i % len(briefs)], tuple(triple)) for i, triple in enumerate(triples)]


# --- 2. 解析 ---
def parse_ranking(raw_text: str, labels: Sequence[str] = RANK_LABELS) -> Tuple[int, ...]:
    """
    从 "1. Profil B / 2. Profil A / 3. Profil C" 之类的回复中取出全序，
    返回与呈现顺序对齐的名次。重复出现相同的 (名次, 标签) 可以接受；缺项或冲突视为解析失败。
    """
    assignment: Dict[int, str] = {}
    for rank_text, label in RANKING_PATTERN.findall(raw_text or ""):
        rank = int(rank_text)
        label = label.upper()
        if label not in labels:
            raise ParseError(f"unknown profile label '{label}'", raw_text)
        if assignment.get(rank, label) != label:
            raise ParseError(f"rank {rank} assigned to both {assignment[rank]} and {label}", raw_text)
        assignment[rank] = label
    if sorted(assignment) != list(range(1, len(labels) + 1)):
        raise ParseError(f"ranking is incomplete: {dict(sorted(assignment.items()))}", raw_text)
    if len(set(assignment.values())) != len(labels):
        raise ParseError(f"a profile holds several ranks: {dict(sorted(assignment.items()))}", raw_text)
    position = {label: rank for rank, label in assignment.items()}
    return tuple(position[label] for label in labels)


# --- 3. 排序活动 ---
def ranking_requests(groups: Sequence[RankGroup], builder: PromptBuilder, model_name: str) -> List[EvaluationRequest]:
    requests = []
    for group in groups:
        prompt = builder.ranking_prompt(group.profiles, group.brief)
        content = [builder.profile_doc(p).doc_id for p in group.profiles] + [builder.brief_doc(group.brief).doc_id]
        requests.append(EvaluationRequest(
            cache_key=cache_key(["rank"] + content, builder.template_hash, model_name, 0),
            task="rank",
            prompt=prompt,
            run_index=0,
            source_id=group.group_id,
            brief_id=group.brief.brief_id,
            template_hash=builder.template_hash,
            features=tuple(derive_features(p, group.brief) for p in group.profiles),
            profile_ids=tuple(p.profile_id for p in group.profiles),
            labels=RANK_LABELS,
        ))
    return requests


def run_ranking_campaign(groups: Sequence[RankGroup], evaluator: BaseEvaluator, session: SessionType,
                         builder: PromptBuilder, concurrency: int = 1, max_calls: Optional[int] = None,
                         retry_errors: bool = False) -> Tuple[List[RankRecord], CampaignStats]:
    requests = ranking_requests(groups, builder, evaluator.model_name)
    keys = [r.cache_key for r in requests]
    evaluator.login()
    try:
        stats = execute_requests(evaluator, requests, session, concurrency, max_calls,
                                 desc=f"Ranking ({evaluator.name})", retry_errors=retry_errors)
    finally:
        evaluator.logout()
    if not stats.complete:
        logger.warning("排序活动尚未完成：还剩 %d 次调用，使用 --resume 继续。", stats.remaining)
        return [], stats

    records = [RankRecord.from_row(r) for r in storage.fetch_records(session, "rank", keys)]
    failed = [r for r in records if r.status != "ok"]
    if failed:
        logger.warning("%d 个三人组排序失败，不参与回归。", len(failed))
    return records, stats


def rank_scores(records: Sequence[RankRecord]) -> pd.DataFrame:
    """每个 (组, 档案) 一行：rank_score = 4 - rank，组内恒为 {3, 2, 1}。"""
    rows = []
    for record in records:
        if record.status != "ok" or record.ranks is None:
            continue
        for profile_id, rank in zip(record.profile_ids, record.ranks):
            rows.append({
                "group_id": record.group_id,
                "brief_id": record.brief_id,
                "profile_id": profile_id,
                "pair_id": pair_id(profile_id, record.brief_id),
                "rank": int(rank),
                "rank_score": float(GROUP_SIZE + 1 - rank),
            })
    return pd.DataFrame(rows, columns=["group_id", "brief_id", "profile_id", "pair_id", "rank", "rank_score"])


def fit_rank_regression(rank_records, features, adjustment: str = "CR1") -> FitResult:
    """
    rank_records 可以是 RankRecord 列表或 rank_scores 表；features 为特征表。
    与评分回归相同的主效应设计，按 group_id 聚类。
    """
    scores = rank_records if isinstance(rank_records, pd.DataFrame) else rank_scores(rank_records)
    if scores.empty:
        raise InferenceError("No parsed rankings to fit")
    feature_cols = as_feature_frame(features).drop(columns=["brief_id"], errors="ignore")
    frame = scores[["group_id", "brief_id", "pair_id", "rank_score"]].merge(feature_cols, on="pair_id", how="inner")
    if len(frame) != len(scores):
        raise InferenceError(f"{len(scores) - len(frame)} ranked profiles have no feature row")
    if frame["rank_score"].nunique() < 2:
        raise DegenerateError("Rank scores are constant")
    spec = main_effects_spec(frame, cluster_key="group_id", adjustment=adjustment, response="rank_score", label="rank")
    return fit_model(frame, spec)
