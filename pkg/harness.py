# harness.py
"""
评分活动：把配对的评分提示按重复次数发给评估后端，解析回复，幂等地落库，并聚合成每个配对的平均分。
"""
import hashlib
import logging
import re
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime
from itertools import islice
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
from sqlalchemy.orm import Session as SessionType
from tqdm import tqdm

import storage
from design import BriefSpec, ProfileSpec, derive_features, pair_id
from errors import ParseError
from evaluators.base_evaluator import BaseEvaluator, EvaluationRequest
from rendering import RANK_LABELS, PromptBuilder

logger = logging.getLogger(__name__)

COMMIT_BATCH_SIZE = 200
IN_FLIGHT_PER_WORKER = 4
REQUEST_CHUNK_SIZE = 1000
DEAD_LETTER_COLUMNS = ["pair_id", "runs", "statuses"]

SCORE_PATTERN = re.compile(r"score\**\s*:\s*\**\s*(-?\d+(?:[.,]\d+)?)\s*/\s*10(?!\d)", re.IGNORECASE)
JUSTIFICATION_PATTERN = re.compile(r"justification\**\s*:\s*\**(.*)", re.IGNORECASE | re.DOTALL)


# --- 1. 回复解析 ---
def _justification(raw_text: str) -> str:
    match = JUSTIFICATION_PATTERN.search(raw_text)
    return match.group(1).strip() if match else ""


def parse_score(raw_text: str) -> Tuple[float, str]:
    """
    解析 "Score : X/10"：冒号两侧空格可有可无，小数点或逗号均可；
    取值必须在 [0, 10]，多个不一致的分数视为解析失败。
    """
    values = [float(v.replace(",", ".")) for v in SCORE_PATTERN.findall(raw_text or "")]
    if not values:
        raise ParseError("no 'Score : X/10' line found", raw_text)
    if len(set(values)) > 1:
        raise ParseError(f"conflicting scores {values}", raw_text)
    score = values[0]
    if not 0.0 <= score <= 10.0:
        raise ParseError(f"score {score} outside [0, 10]", raw_text)
    return score, _justification(raw_text)


# --- 2. 记录类型 ---
@dataclass(frozen=True)
class ScoreRecord:
    pair_id: str
    run_index: int
    raw_text: str
    score: Optional[float]
    justification: str
    status: str                  # ok | parse_error | backend_error
    model_name: str
    created_at: Optional[datetime] = None
    latency_ms: Optional[float] = None
    cache_key: str = ""
    brief_id: str = ""

    @classmethod
    def from_row(cls, row: dict) -> "ScoreRecord":
        return cls(
            pair_id=row["source_id"], run_index=row["run_index"], raw_text=row["raw_text"],
            score=row["score"], justification=row.get("justification") or "", status=row["status"],
            model_name=row["model_name"], created_at=row.get("created_at"), latency_ms=row.get("latency_ms"),
            cache_key=row["cache_key"], brief_id=row["brief_id"],
        )


@dataclass(frozen=True)
class ScoreAggregate:
    pair_id: str
    mean_score: float
    run_scores: Tuple[float, ...]
    run_spread: float


@dataclass
class CampaignStats:
    requested: int = 0
    cached: int = 0
    submitted: int = 0
    called: int = 0
    remaining: int = 0
    retried: int = 0
    failures: List[dict] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.remaining == 0


@dataclass(frozen=True)
class CampaignSummary:
    n_pairs: int
    varying_share: float
    max_spread: float

    def describe(self) -> str:
        return (f"{self.varying_share:.2%} of pairs show variation across runs, "
                f"with maximum changes of {self.max_spread:g} points")


# --- 3. 缓存键与请求 ---
def cache_key(content_ids: Sequence[str], template_hash: str, model_name: str, run_index: int) -> str:
    """(配对内容哈希, 模板哈希, 模型名, 重复序号) 的摘要；模板或模型变化都会令缓存失效。"""
    content = hashlib.sha256("|".join(content_ids).encode("utf-8")).hexdigest()
    payload = f"{content}|{template_hash}|{model_name}|{run_index}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


def scoring_requests(pairs: Iterable[Tuple[ProfileSpec, BriefSpec]], builder: PromptBuilder,
                     model_name: str, runs: int = 3) -> Iterator[EvaluationRequest]:
    """每个配对生成 runs 个请求；同一配对各次重复的提示完全相同。"""
    for profile, brief in pairs:
        prompt = builder.scoring_prompt(profile, brief)
        features = derive_features(profile, brief)
        content = [builder.profile_doc(profile).doc_id, builder.brief_doc(brief).doc_id]
        for run_index in range(runs):
            yield EvaluationRequest(
                cache_key=cache_key(content, builder.template_hash, model_name, run_index),
                task="score",
                prompt=prompt,
                run_index=run_index,
                source_id=features.pair_id,
                brief_id=brief.brief_id,
                template_hash=builder.template_hash,
                features=(features,),
                profile_ids=(profile.profile_id,),
            )


# --- 4. 单次调用 ---
def evaluate_request(evaluator: BaseEvaluator, request: EvaluationRequest) -> dict:
    """工作线程入口：调用后端并解析，返回待写入的行。任何失败都变成记录而不是异常。"""
    from ranking import parse_ranking  # 排序模块依赖本模块

    row = {
        "cache_key": request.cache_key,
        "kind": request.task,
        "source_id": request.source_id,
        "brief_id": request.brief_id,
        "profile_ids": list(request.profile_ids),
        "run_index": request.run_index,
        "raw_text": "",
        "score": None,
        "ranks": None,
        "justification": "",
        "status": "ok",
        "model_name": evaluator.model_name,
        "template_hash": request.template_hash,
        "created_at": datetime.utcnow(),
        "latency_ms": None,
    }
    start = time.perf_counter()
    try:
        raw = evaluator.complete(request)
    except Exception as e:
        logger.error("后端调用失败 (%s run %d)。", request.source_id, request.run_index, exc_info=True)
        row.update(status="backend_error", justification=str(e))
        return row
    finally:
        row["latency_ms"] = round((time.perf_counter() - start) * 1000.0, 3)

    row["raw_text"] = raw
    try:
        if request.task == "score":
            row["score"], row["justification"] = parse_score(raw)
        else:
            row["ranks"] = list(parse_ranking(raw, request.labels or RANK_LABELS))
            row["justification"] = _justification(raw)
    except ParseError as e:
        logger.warning("无法解析 %s run %d 的回复: %s", request.source_id, request.run_index, e.reason)
        row.update(status="parse_error", justification=e.reason)
    return row


def score_pair(evaluator: BaseEvaluator, request: EvaluationRequest, session: SessionType) -> ScoreRecord:
    """幂等：同一缓存键已有记录时直接返回，不再调用后端。"""
    cached = storage.get_record(session, request.cache_key)
    if cached is not None:
        return ScoreRecord.from_row(cached.to_dict())
    row = evaluate_request(evaluator, request)
    storage.insert_records([row], session)
    session.commit()
    return ScoreRecord.from_row(row)


# --- 5. 活动执行 ---
def chunked(items: Iterable, size: int) -> Iterator[list]:
    iterator = iter(items)
    while True:
        chunk = list(islice(iterator, size))
        if not chunk:
            return
        yield chunk


def _pending_requests(requests: Iterable[EvaluationRequest], session: SessionType, stats: CampaignStats,
                      max_calls: Optional[int], retry_errors: bool) -> Iterator[EvaluationRequest]:
    """逐块查缓存，只产出需要调用后端的请求；预算用完后只计数，不再产出。"""
    for chunk in chunked(requests, REQUEST_CHUNK_SIZE):
        keys = [r.cache_key for r in chunk]
        stats.requested += len(chunk)
        if retry_errors:
            stats.retried += storage.delete_records(session, keys, "backend_error")
            session.commit()
        done_keys = storage.existing_keys(session, keys)
        for request in chunk:
            if request.cache_key in done_keys:
                stats.cached += 1
            elif max_calls is not None and stats.submitted >= max_calls:
                stats.remaining += 1
            else:
                stats.submitted += 1
                yield request


def execute_requests(evaluator: BaseEvaluator, requests: Iterable[EvaluationRequest], session: SessionType,
                     concurrency: int = 1, max_calls: Optional[int] = None, desc: str = "Scoring",
                     total: Optional[int] = None, retry_errors: bool = False) -> CampaignStats:
    """
    有界并发地执行尚未落库的请求。requests 可以是生成器，按块读取，不会整体放进内存；
    只有主线程写库，每批提交一次；max_calls 限制本次调用后端的次数，剩余请求留给下一次 --resume。
    """
    stats = CampaignStats()
    if total is None and isinstance(requests, Sequence):
        total = len(requests)
    pending = _pending_requests(requests, session, stats, max_calls, retry_errors)

    buffer: List[dict] = []

    def flush():
        if buffer:
            storage.insert_records(buffer, session)
            session.commit()
            buffer.clear()

    queue = pending
    in_flight = set()
    executor = ThreadPoolExecutor(max_workers=max(1, concurrency))
    try:
        with tqdm(total=total, desc=desc) as bar:
            def fill():
                while len(in_flight) < max(1, concurrency) * IN_FLIGHT_PER_WORKER:
                    request = next(queue, None)
                    if request is None:
                        return
                    in_flight.add(executor.submit(evaluate_request, evaluator, request))

            fill()
            while in_flight:
                done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for future in done:
                    in_flight.discard(future)
                    row = future.result()
                    buffer.append(row)
                    stats.called += 1
                    if row["status"] != "ok":
                        stats.failures.append({"source_id": row["source_id"], "run_index": row["run_index"],
                                               "status": row["status"], "reason": row["justification"]})
                    bar.update(stats.cached + stats.remaining + stats.called - bar.n)
                    if len(buffer) >= COMMIT_BATCH_SIZE:
                        flush()
                        tqdm.write(f"进度：已完成 {stats.called} 次调用，缓存命中 {stats.cached} 个请求。")
                fill()
            bar.update(stats.cached + stats.remaining + stats.called - bar.n)
        flush()
    except BaseException:
        # 中断时已完成的结果仍整批落库，未完成的请求下次续跑
        session.rollback()
        flush()
        raise
    finally:
        executor.shutdown(wait=True, cancel_futures=True)

    if stats.retried:
        logger.info("已删除 %d 条 backend_error 记录并重新调用。", stats.retried)
    if stats.cached:
        logger.info("%d 个请求已有缓存记录，跳过。", stats.cached)
    if stats.failures:
        logger.warning("本次共有 %d 次调用失败。", len(stats.failures))
        summary_df = pd.DataFrame(stats.failures).set_index("source_id")
        logger.warning("失败汇总如下:\n" + summary_df.to_string())
    return stats


# --- 6. 聚合 ---
def aggregate_scores(records: Sequence[dict], pair_order: Sequence[str], runs: int) -> Tuple[List[ScoreAggregate], pd.DataFrame]:
    """
    用成功的重复计算每个配对的平均分；没有任何成功重复的配对进入死信表。
    平均值按 run_index 顺序求和后除以次数。
    """
    by_pair: Dict[str, List[dict]] = {}
    for record in records:
        by_pair.setdefault(record["source_id"], []).append(record)

    aggregates, dead = [], []
    for pid in pair_order:
        rows = sorted(by_pair.get(pid, []), key=lambda r: r["run_index"])
        scores = tuple(r["score"] for r in rows if r["status"] == "ok")
        if not scores:
            statuses = ",".join(r["status"] for r in rows) or "missing"
            dead.append({"pair_id": pid, "runs": len(rows), "statuses": statuses})
            continue
        aggregates.append(ScoreAggregate(pid, sum(scores) / len(scores), scores, max(scores) - min(scores)))
    dead_letter = pd.DataFrame(dead, columns=DEAD_LETTER_COLUMNS)
    return aggregates, dead_letter


def aggregates_frame(aggregates: Sequence[ScoreAggregate]) -> pd.DataFrame:
    return pd.DataFrame({
        "pair_id": [a.pair_id for a in aggregates],
        "mean_score": [a.mean_score for a in aggregates],
        "spread": [a.run_spread for a in aggregates],
        "n_runs": [len(a.run_scores) for a in aggregates],
    })


def write_aggregates_csv(aggregates: Sequence[ScoreAggregate], path: Union[str, Path]) -> pd.DataFrame:
    frame = aggregates_frame(aggregates)
    frame.to_csv(path, index=False, float_format="%.12g")
    return frame


def campaign_summary(aggregates: Sequence[ScoreAggregate]) -> CampaignSummary:
    if not aggregates:
        return CampaignSummary(0, 0.0, 0.0)
    spreads = [a.run_spread for a in aggregates]
    varying = sum(1 for s in spreads if s > 0)
    return CampaignSummary(len(aggregates), varying / len(aggregates), max(spreads))


def pair_cache_keys(pairs: Iterable[Tuple[ProfileSpec, BriefSpec]], builder: PromptBuilder, model_name: str,
                    runs: int) -> Iterator[Tuple[str, List[str]]]:
    """(pair_id, 各次重复的缓存键)，与 scoring_requests 的键一致，但不生成提示文本。"""
    for profile, brief in pairs:
        content = [builder.profile_doc(profile).doc_id, builder.brief_doc(brief).doc_id]
        yield (pair_id(profile.profile_id, brief.brief_id),
               [cache_key(content, builder.template_hash, model_name, r) for r in range(runs)])


def collect_aggregates(pairs: Iterable[Tuple[ProfileSpec, BriefSpec]], session: SessionType, builder: PromptBuilder,
                       model_name: str, runs: int) -> Tuple[List[ScoreAggregate], pd.DataFrame]:
    """按块从存储读取记录并聚合，每次只有一块配对的记录在内存中。"""
    aggregates: List[ScoreAggregate] = []
    dead_frames = []
    for chunk in chunked(pair_cache_keys(pairs, builder, model_name, runs), REQUEST_CHUNK_SIZE):
        records = storage.fetch_records(session, "score", [k for _, keys in chunk for k in keys])
        part, dead = aggregate_scores(records, [pid for pid, _ in chunk], runs)
        aggregates.extend(part)
        if not dead.empty:
            dead_frames.append(dead)
    if not dead_frames:
        return aggregates, pd.DataFrame(columns=DEAD_LETTER_COLUMNS)
    return aggregates, pd.concat(dead_frames, ignore_index=True)


def run_scoring_campaign(pairs: Iterable[Tuple[ProfileSpec, BriefSpec]], evaluator: BaseEvaluator, session: SessionType,
                         builder: PromptBuilder, runs: int = 3, concurrency: int = 1, max_calls: Optional[int] = None,
                         retry_errors: bool = False) -> Tuple[List[ScoreAggregate], pd.DataFrame, CampaignStats]:
    """
    返回 (聚合结果, 死信表, 本次执行统计)。活动未完成（被 max_calls 截断）时聚合结果为空。
    请求与提示按需生成；pairs 只保存 (档案, brief) 的引用，供执行与聚合两遍使用。
    """
    pairs = pairs if isinstance(pairs, Sequence) else list(pairs)
    evaluator.login()
    try:
        stats = execute_requests(evaluator, scoring_requests(pairs, builder, evaluator.model_name, runs), session,
                                 concurrency, max_calls, desc=f"Scoring ({evaluator.name})",
                                 total=len(pairs) * runs, retry_errors=retry_errors)
    finally:
        evaluator.logout()

    if not stats.complete:
        logger.warning("活动尚未完成：还剩 %d 次调用，使用 --resume 继续。", stats.remaining)
        return [], pd.DataFrame(columns=DEAD_LETTER_COLUMNS), stats

    aggregates, dead_letter = collect_aggregates(pairs, session, builder, evaluator.model_name, runs)
    summary = campaign_summary(aggregates)
    logger.info("评分完成：%d 个配对，%s。", summary.n_pairs, summary.describe())
    if not dead_letter.empty:
        logger.warning("%d 个配对没有任何成功的重复，已写入死信表:\n%s", len(dead_letter), dead_letter.to_string(index=False))
    return aggregates, dead_letter, stats
