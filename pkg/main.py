# main.py
import sys
import argparse
import json
import logging
from dataclasses import asdict
from typing import List, Optional, Tuple

import pandas as pd

# 必须在所有其他模块导入之前最先配置日志
from logger_config import setup_logger
setup_logger()

import storage
from config import BackendConfig, settings
from design import (BriefSpec, DesignConfig, ProfileSpec, check_balance, derive_all, enumerate_briefs,
                    enumerate_pairs, enumerate_profiles, features_frame, load_design_config)
from errors import AuditError, ConfigError, StageError, TemplateError
from evaluators.base_evaluator import BaseEvaluator
from evaluators.http_chat_evaluator import HttpChatEvaluator
from evaluators.synthetic_evaluator import SyntheticEvaluator, load_synthetic_spec
from harness import campaign_summary, run_scoring_campaign, write_aggregates_csv
from ranking import assign_groups, fit_rank_regression, rank_scores, run_ranking_campaign, sample_triples
from rendering import PromptBuilder, check_coverage, content_hash, export_documents, load_template_set
from report import emit_report, slug, write_report
from stats import FitResult, fit_brief_interactions, fit_group_interactions, fit_main_effects
from workspace import Workspace

logger = logging.getLogger(__name__)
FIT_FLOAT_FORMAT = "%.12g"


def get_evaluator(backend: str, args) -> BaseEvaluator:
    if backend.lower() == 'synthetic':
        return SyntheticEvaluator(load_synthetic_spec(args.synthetic_spec))
    if backend.lower() == 'http_chat':
        return HttpChatEvaluator(BackendConfig.from_settings("http_chat", concurrency_limit=args.concurrency))
    raise ConfigError(f"Unsupported backend: {backend}")


# --- 1. 读取上游阶段 ---
def load_design_stage(ws: Workspace) -> Tuple[DesignConfig, List[ProfileSpec], List[BriefSpec]]:
    manifest = ws.read_manifest("design")
    config = load_design_config(manifest["config_path"])
    if config.config_hash != manifest["config_hash"]:
        raise StageError(f"Design config {manifest['config_path']} changed since the design stage; rerun 'design'",
                         str(ws.root / "design" / "manifest.json"))
    return config, enumerate_profiles(config), enumerate_briefs(config)


def load_builder(ws: Workspace, config: DesignConfig) -> PromptBuilder:
    manifest = ws.read_manifest("rendered")
    templates = load_template_set(config, manifest["locale"])
    if templates.template_hash != manifest["template_hash"]:
        raise StageError("Templates changed since the render stage; rerun 'render'",
                         str(ws.root / "rendered" / "manifest.json"))
    return PromptBuilder(templates)


def load_features(ws: Workspace) -> pd.DataFrame:
    # 全部按字符串读取；回归只使用水平的字符串形式
    return pd.read_csv(ws.require("design", "features.csv"), dtype=str, keep_default_na=False)


def campaign_id_for(design_hash: str, template_hash: str, model_name: str, runs: int, task: str) -> str:
    return content_hash(json.dumps([task, design_hash, template_hash, model_name, runs]))


def check_resumable(ws: Workspace, manifest_name: str, resume: bool):
    if not ws.has("scores", manifest_name):
        return
    previous = ws.read_manifest("scores", manifest_name)
    if previous.get("status") != "complete" and not resume:
        raise StageError(f"Campaign {previous.get('campaign_id')} is {previous.get('status')}; "
                         f"pass --resume to continue it", str(ws.root / "scores" / manifest_name))


# --- 2. 各子命令 ---
def run_design(args):
    """枚举档案与 brief，检查正交性，写出设计清单与特征表。"""
    ws = Workspace(args.workspace)
    config = load_design_config(args.config or settings.DESIGN_CONFIG)
    profiles = enumerate_profiles(config)
    briefs = enumerate_briefs(config)
    profile_balance = check_balance(profiles, config.profile_domains)
    brief_balance = check_balance(briefs, config.brief_domains)
    for name, balance in (("profiles", profile_balance), ("briefs", brief_balance)):
        if not (balance["balanced"] and balance["orthogonal"]):
            logger.warning("%s 设计不平衡或不正交: %s", name, balance)

    pd.DataFrame([{"profile_id": p.profile_id, **{k: v.id for k, v in p.assignments.items()}} for p in profiles]) \
        .to_csv(ws.path("design", "profiles.csv"), index=False)
    pd.DataFrame([{"brief_id": b.brief_id, **{k: v.id for k, v in b.assignments.items()}} for b in briefs]) \
        .to_csv(ws.path("design", "briefs.csv"), index=False)
    features = features_frame(derive_all(profiles, briefs))
    features.to_csv(ws.path("design", "features.csv"), index=False)

    ws.write_manifest("design", {
        "config_path": config.source_path,
        "config_hash": config.config_hash,
        "occupation": config.occupation,
        "locale": config.locale,
        "counts": {"profiles": len(profiles), "briefs": len(briefs), "pairs": len(features)},
        "brief_ids": [b.brief_id for b in briefs],
        "balance": {"profiles": profile_balance, "briefs": brief_balance},
        "reported_totals": dict(config.reported_totals),
    })
    logger.info("设计完成：%d 个档案 × %d 个 brief = %d 个配对。", len(profiles), len(briefs), len(features))


def run_render(args):
    ws = Workspace(args.workspace)
    config, profiles, briefs = load_design_stage(ws)
    templates = load_template_set(config, args.locale)
    problems = check_coverage(config, templates)
    if problems:
        raise TemplateError(f"Template bundle {templates.locale} does not cover: {', '.join(problems)}")
    builder = PromptBuilder(templates)
    for profile in profiles:
        builder.profile_doc(profile)
    for brief in briefs:
        builder.brief_doc(brief)
    index = export_documents(builder.documents(), ws.stage("rendered"))
    ws.write_manifest("rendered", {
        "locale": templates.locale,
        "template_hash": templates.template_hash,
        "config_hash": config.config_hash,
        "documents": int(len(index)),
    })
    logger.info("渲染完成：%d 份文档 (locale=%s, template_hash=%s)。", len(index), templates.locale, templates.template_hash)


def run_score(args):
    """评分活动；被 --max-calls 截断或中断时清单状态为 interrupted，使用 --resume 继续。"""
    ws = Workspace(args.workspace)
    config, profiles, briefs = load_design_stage(ws)
    builder = load_builder(ws, config)
    evaluator = get_evaluator(args.backend, args)
    check_resumable(ws, "manifest.json", args.resume)

    manifest = {
        "campaign_id": campaign_id_for(config.config_hash, builder.template_hash, evaluator.model_name, args.runs, "score"),
        "model_name": evaluator.model_name,
        "backend": args.backend,
        "runs": args.runs,
        "template_hash": builder.template_hash,
        "config_hash": config.config_hash,
        "status": "running",
    }
    ws.write_manifest("scores", manifest)
    session = storage.get_session_factory(storage.database_url(ws.root))()
    try:
        aggregates, dead_letter, stats = run_scoring_campaign(
            enumerate_pairs(profiles, briefs), evaluator, session, builder, runs=args.runs,
            concurrency=args.concurrency, max_calls=args.max_calls, retry_errors=args.retry_errors,
        )
        if not stats.complete:
            manifest.update(status="interrupted", remaining_calls=stats.remaining)
            return
        write_aggregates_csv(aggregates, ws.path("scores", "aggregates.csv"))
        dead_letter.to_csv(ws.path("scores", "dead_letter.csv"), index=False)
        storage.export_jsonl(session, ws.path("scores", "records.jsonl"), kind="score")
        manifest.update(status="complete", summary=asdict(campaign_summary(aggregates)),
                        dead_letter=int(len(dead_letter)))
    except BaseException:
        manifest["status"] = "interrupted"
        raise
    finally:
        ws.write_manifest("scores", manifest)
        session.close()


def run_rank(args):
    ws = Workspace(args.workspace)
    config, profiles, briefs = load_design_stage(ws)
    builder = load_builder(ws, config)
    evaluator = get_evaluator(args.backend, args)
    check_resumable(ws, "rank_manifest.json", args.resume)

    groups = assign_groups(sample_triples(profiles, args.seed), briefs)
    manifest = {
        "campaign_id": campaign_id_for(config.config_hash, builder.template_hash, evaluator.model_name, args.seed, "rank"),
        "model_name": evaluator.model_name,
        "backend": args.backend,
        "seed": args.seed,
        "groups": len(groups),
        "template_hash": builder.template_hash,
        "status": "running",
    }
    ws.write_manifest("scores", manifest, name="rank_manifest.json")
    session = storage.get_session_factory(storage.database_url(ws.root))()
    try:
        records, stats = run_ranking_campaign(groups, evaluator, session, builder, concurrency=args.concurrency,
                                              max_calls=args.max_calls, retry_errors=args.retry_errors)
        if not stats.complete:
            manifest.update(status="interrupted", remaining_calls=stats.remaining)
            return
        scores = rank_scores(records)
        scores.to_csv(ws.path("scores", "rank_scores.csv"), index=False)
        storage.export_jsonl(session, ws.path("scores", "rank_records.jsonl"), kind="rank")
        failed = sum(1 for r in records if r.status != "ok")
        manifest.update(status="complete", ranked_groups=len(records) - failed, failed_groups=failed)
    except BaseException:
        manifest["status"] = "interrupted"
        raise
    finally:
        ws.write_manifest("scores", manifest, name="rank_manifest.json")
        session.close()


def fit_for_model(ws: Workspace, config: DesignConfig, model: str, cluster: Optional[str]) -> Tuple[FitResult, str]:
    """按 --model 选择回归方程，返回 (拟合结果, 数据来源活动 id)。"""
    features = load_features(ws)
    cluster_key = None if cluster == "none" else cluster
    if model == "rank":
        scores = pd.read_csv(ws.require("scores", "rank_scores.csv"), dtype={"group_id": str, "brief_id": str,
                                                                            "profile_id": str, "pair_id": str})
        if cluster not in (None, "group_id"):
            logger.warning("排序回归固定按 group_id 聚类，忽略 --cluster %s。", cluster)
        return fit_rank_regression(scores, features), ws.read_manifest("scores", "rank_manifest.json")["campaign_id"]

    aggregates = pd.read_csv(ws.require("scores", "aggregates.csv"), dtype={"pair_id": str})
    campaign_id = ws.read_manifest("scores")["campaign_id"]
    cluster_key = "brief_id" if cluster is None else cluster_key
    kind, _, term = model.partition(":")
    if kind == "main" and not term:
        return fit_main_effects(aggregates, features, cluster_key), campaign_id
    if kind == "group" and term:
        return fit_group_interactions(aggregates, features, term, cluster_key), campaign_id
    if kind == "brief" and term:
        domain = term.partition("=")[0].strip().removeprefix("brief.")
        reference = config.domain(domain).reference_level
        return fit_brief_interactions(aggregates, features, term, reference, cluster_key=cluster_key), campaign_id
    raise ConfigError(f"Unknown model '{model}'; expected main, group:<term>, brief:<term> or rank")


def run_fit(args):
    ws = Workspace(args.workspace)
    config, _, _ = load_design_stage(ws)
    fit, campaign_id = fit_for_model(ws, config, args.model, args.cluster)
    name = slug(fit.label)
    ws.path("fits", f"{name}.json").write_text(fit.to_json() + "\n", encoding="utf-8")
    fit.to_frame().to_csv(ws.path("fits", f"{name}.csv"), index=False, float_format=FIT_FLOAT_FORMAT)

    fits = ws.read_manifest("fits")["fits"] if ws.has("fits", "manifest.json") else {}
    fits[name] = {"label": fit.label, "spec_hash": fit.spec_hash, "campaign_id": campaign_id,
                  "n_obs": fit.n_obs, "n_clusters": fit.n_clusters}
    ws.write_manifest("fits", {"fits": fits})
    logger.info("拟合 %s 已保存 (spec_hash=%s, R²=%.6f)。", fit.label, fit.spec_hash, fit.r_squared)


def run_report(args):
    ws = Workspace(args.workspace)
    entries = ws.read_manifest("fits")["fits"]
    fits = [FitResult.from_json(ws.require("fits", f"{name}.json").read_text(encoding="utf-8"))
            for name in sorted(entries)]
    aggregates = None
    if ws.has("scores", "aggregates.csv"):
        aggregates = pd.read_csv(ws.path("scores", "aggregates.csv"), dtype={"pair_id": str})
    campaign_ids = sorted({entry["campaign_id"] for entry in entries.values()})
    bundle = emit_report(fits, aggregates, "+".join(campaign_ids), with_svg=args.svg)
    write_report(bundle, ws.stage("reports"))


# --- 3. 命令行 ---
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="自由职业者招聘评估的算法审计工具")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", type=str, default=settings.WORKSPACE_DIR)

    campaign = argparse.ArgumentParser(add_help=False)
    campaign.add_argument("--backend", type=str, default="synthetic", choices=['http_chat', 'synthetic'])
    campaign.add_argument("--synthetic-spec", type=str, default="synthetic-planted")
    campaign.add_argument("--concurrency", type=int, default=settings.CONCURRENCY_LIMIT)
    campaign.add_argument("--resume", action="store_true")
    campaign.add_argument("--max-calls", type=int)
    campaign.add_argument("--retry-errors", action="store_true")

    # Command: design
    p_design = subparsers.add_parser("design", parents=[common], help="枚举全因子设计并写出设计清单")
    p_design.add_argument("--config", type=str, help="configs/ 下的配置名或 JSON 路径")
    p_design.set_defaults(func=run_design)

    # Command: render
    p_render = subparsers.add_parser("render", parents=[common], help="渲染档案与 brief 文档")
    p_render.add_argument("--locale", type=str)
    p_render.set_defaults(func=run_render)

    # Command: score
    p_score = subparsers.add_parser("score", parents=[common, campaign], help="运行评分活动")
    p_score.add_argument("--runs", type=int, default=3)
    p_score.set_defaults(func=run_score)

    # Command: rank
    p_rank = subparsers.add_parser("rank", parents=[common, campaign], help="运行三人组排序活动")
    p_rank.add_argument("--seed", type=int, default=0)
    p_rank.set_defaults(func=run_rank)

    # Command: fit
    p_fit = subparsers.add_parser("fit", parents=[common], help="估计回归方程")
    p_fit.add_argument("--model", type=str, default="main", help="main | group:<term> | brief:<term> | rank")
    p_fit.add_argument("--cluster", type=str, help="聚类键 (brief_id / group_id / none)")
    p_fit.set_defaults(func=run_fit)

    # Command: report
    p_report = subparsers.add_parser("report", parents=[common], help="生成报告表格与摘要")
    p_report.add_argument("--svg", action="store_true")
    p_report.set_defaults(func=run_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except AuditError as e:
        logger.error("命令 %s 失败: %s", args.command, e)
        return 1
    except Exception:
        logger.critical("命令 %s 发生未预期的错误。", args.command, exc_info=True)
        return 1
    finally:
        storage.dispose_all()
    return 0


if __name__ == "__main__":
    sys.exit(main())
