# evaluators/synthetic_evaluator.py
"""
植入权重的合成评估器：分数 = 截距 + 权重·虚拟变量 (+ 交互项) + 种子噪声，再取整并截断到 [0, 10]。

权重键与设计矩阵的列名一致：
    experience_rel[below]                          主效应
    brief.work_location[remote_allowed]            brief 水平
    name_group[female_eu]:experience_rel[below]    交互项（两个原子同时成立时生效）
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Literal, Sequence, Set, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.special import ndtri

from design import CONFIG_DIR, FEATURE_FIELDS, PairFeatures
from errors import ConfigError
from rendering import RANK_LABELS

from .base_evaluator import BaseEvaluator, EvaluationRequest

logger = logging.getLogger(__name__)


class SyntheticEvaluatorSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    intercept: float = 0.0
    planted_weights: Dict[str, float] = Field(default_factory=dict)
    noise_sd: float = Field(default=0.0, ge=0.0)
    rounding: Literal["none", "nearest_half", "nearest_int"] = "none"
    group_interaction_weights: Dict[str, float] = Field(default_factory=dict)
    brief_interaction_weights: Dict[str, float] = Field(default_factory=dict)
    seed: int = 0

    @field_validator("group_interaction_weights", "brief_interaction_weights")
    @classmethod
    def _check_interactions(cls, value: Dict[str, float]) -> Dict[str, float]:
        for key in value:
            if key.count(":") != 1:
                raise ValueError(f"interaction key '{key}' must look like 'a[x]:b[y]'")
        return value

    @property
    def spec_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def interaction_items(self):
        for weights in (self.group_interaction_weights, self.brief_interaction_weights):
            for key in sorted(weights):
                left, right = key.split(":")
                yield left, right, weights[key]


def load_synthetic_spec(path_or_name: Union[str, Path]) -> SyntheticEvaluatorSpec:
    path = Path(path_or_name)
    if not path.exists():
        path = CONFIG_DIR / f"{path_or_name}.json"
    try:
        return SyntheticEvaluatorSpec.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise ConfigError(f"Synthetic evaluator spec not found: {path_or_name}") from None
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid synthetic evaluator spec {path}: {e}") from e


# --- 1. 线性指标 ---
def feature_atoms(features: PairFeatures) -> Set[str]:
    atoms = {f"{name}[{getattr(features, name)}]" for name in FEATURE_FIELDS}
    atoms.update(f"brief.{domain}[{level}]" for domain, level in features.brief_levels.items())
    return atoms


def linear_index(features: PairFeatures, spec: SyntheticEvaluatorSpec) -> float:
    """截距 + 按键名排序累加的植入权重；与 synthetic_scores 的累加顺序一致。"""
    atoms = feature_atoms(features)
    value = spec.intercept
    for key in sorted(spec.planted_weights):
        if key in atoms:
            value += spec.planted_weights[key]
    for left, right, weight in spec.interaction_items():
        if left in atoms and right in atoms:
            value += weight
    return value


def noise_draw(seed: int, pair_key: str, run_index: int) -> float:
    """(seed, pair_id, run_index) 的纯函数，断点续跑与一次跑完得到同样的噪声。"""
    digest = hashlib.blake2b(f"{seed}:{pair_key}:{run_index}".encode("utf-8"), digest_size=8).digest()
    u = (int.from_bytes(digest, "big") + 0.5) / 2.0 ** 64
    return float(ndtri(u))


def _round(value, rounding: str):
    if rounding == "nearest_half":
        return np.floor(value * 2.0 + 0.5) / 2.0
    if rounding == "nearest_int":
        return np.floor(value + 0.5)
    return value


def synthetic_evaluate(features: PairFeatures, spec: SyntheticEvaluatorSpec, run_index: int = 0) -> float:
    value = linear_index(features, spec)
    if spec.noise_sd > 0:
        value += spec.noise_sd * noise_draw(spec.seed, features.pair_id, run_index)
    return float(np.clip(_round(value, spec.rounding), 0.0, 10.0))


def synthetic_scores(frame: pd.DataFrame, spec: SyntheticEvaluatorSpec, runs: int = 3) -> pd.DataFrame:
    """
    synthetic_evaluate 的向量化版本，用于设计规模的回归恢复实验。
    frame 为 design.features_frame 的输出；返回 pair_id, mean_score, spread。
    """
    atoms = {column: frame[column].astype(str).to_numpy() for column in frame.columns
             if column in FEATURE_FIELDS or column.startswith("brief.")}

    def indicator(key: str) -> np.ndarray:
        column, _, level = key[:-1].partition("[")
        if column not in atoms:
            return np.zeros(len(frame), dtype=bool)
        return atoms[column] == level

    base = np.full(len(frame), spec.intercept, dtype=float)
    for key in sorted(spec.planted_weights):
        base = base + spec.planted_weights[key] * indicator(key)
    for left, right, weight in spec.interaction_items():
        base = base + weight * (indicator(left) & indicator(right))

    pair_ids = frame["pair_id"].tolist()
    total = None
    lowest = highest = None
    for run_index in range(runs):
        value = base
        if spec.noise_sd > 0:
            draws = np.array([noise_draw(spec.seed, p, run_index) for p in pair_ids])
            value = base + spec.noise_sd * draws
        score = np.clip(_round(value, spec.rounding), 0.0, 10.0)
        total = score if total is None else total + score
        lowest = score if lowest is None else np.minimum(lowest, score)
        highest = score if highest is None else np.maximum(highest, score)
    return pd.DataFrame({
        "pair_id": pair_ids,
        "mean_score": total / runs,
        "spread": highest - lowest,
    })


def format_score_reply(score: float) -> str:
    text = np.format_float_positional(score, unique=True, trim="-")
    return f"Score : {text}/10\nJustification : Réponse synthétique."


def format_ranking_reply(utilities: Sequence[float], labels: Sequence[str] = RANK_LABELS) -> str:
    order = sorted(range(len(utilities)), key=lambda i: (-utilities[i], i))
    lines = [f"{rank}. Profil {labels[i]}" for rank, i in enumerate(order, start=1)]
    return "\n".join(lines) + "\nJustification : Classement synthétique."


# --- 2. 评估器 ---
class SyntheticEvaluator(BaseEvaluator):
    """不联网的确定性后端，回复格式与真实评估器要求的输出格式相同。"""

    def __init__(self, spec: SyntheticEvaluatorSpec):
        self.spec = spec

    @property
    def name(self) -> str:
        return "synthetic"

    @property
    def model_name(self) -> str:
        return f"synthetic-{self.spec.spec_hash[:8]}"

    def login(self):
        logger.info("合成评估器无需登录 (model_name=%s)", self.model_name)

    def logout(self):
        pass

    def complete(self, request: EvaluationRequest) -> str:
        if request.task == "score":
            return format_score_reply(synthetic_evaluate(request.features[0], self.spec, request.run_index))
        # 排序效用为不含噪声的线性指标，平局按呈现顺序
        utilities = [linear_index(f, self.spec) for f in request.features]
        return format_ranking_reply(utilities, request.labels or RANK_LABELS)
