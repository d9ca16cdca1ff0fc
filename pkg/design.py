# design.py
"""
全因子实验设计：从声明式配置枚举自由职业者档案、项目需求（brief）以及两者的配对，
并推导配对层面的匹配特征。

所有函数都是纯函数，顺序确定，ID 为内容哈希，因此评分活动可以断点续跑、结果可以 diff。
"""
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError, FeatureError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"

# --- 1. 特征取值的固定水平 ---
SKILL_MATCH_LEVELS = ("exact", "close", "far")
REPUTATION_LEVELS = ("expert_badge", "none", "starter", "starter_badge", "expert")
EDUCATION_LEVELS = ("master", "bachelor")
NAME_GROUPS = ("male_eu", "female_eu", "male_arabic")


# --- 2. 配置模型 ---
class AttributeLevel(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    label: str
    value: Union[int, float, str, None] = None

    @property
    def semantic(self) -> Union[int, float, str]:
        return self.id if self.value is None else self.value


class AttributeDomain(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    levels: Tuple[AttributeLevel, ...] = Field(min_length=1)
    reference_level: str
    render_key: str

    @model_validator(mode="after")
    def _check_levels(self) -> "AttributeDomain":
        ids = [level.id for level in self.levels]
        if len(set(ids)) != len(ids):
            raise ValueError(f"domain '{self.name}' has duplicate levels")
        if self.reference_level not in ids:
            raise ValueError(f"domain '{self.name}': reference level '{self.reference_level}' is not one of {ids}")
        return self

    def level(self, level_id: str) -> AttributeLevel:
        for level in self.levels:
            if level.id == level_id:
                return level
        raise FeatureError(f"Unknown level '{level_id}' for domain '{self.name}'")

    @property
    def level_ids(self) -> Tuple[str, ...]:
        return tuple(level.id for level in self.levels)


class DesignConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    occupation: str
    locale: str = "fr"
    template_dir: Optional[str] = None
    profile_domains: Tuple[AttributeDomain, ...]
    brief_domains: Tuple[AttributeDomain, ...]
    brief_constants: Dict[str, Union[int, float, str]] = Field(default_factory=dict)
    # 外部报告的总数，仅作元数据记录，不做断言
    reported_totals: Dict[str, int] = Field(default_factory=dict)
    source_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_names(self) -> "DesignConfig":
        names = [d.name for d in self.profile_domains] + [d.name for d in self.brief_domains]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"domain names must be unique across profiles and briefs: {duplicates}")
        clash = sorted(set(self.brief_constants) & {d.name for d in self.brief_domains})
        if clash:
            raise ValueError(f"brief constants overlap brief domains: {clash}")
        return self

    def domain(self, name: str) -> AttributeDomain:
        for d in itertools.chain(self.profile_domains, self.brief_domains):
            if d.name == name:
                return d
        raise ConfigError(f"Unknown domain '{name}'")

    @property
    def config_hash(self) -> str:
        payload = self.model_dump(mode="json", exclude={"source_path"})
        return _digest(json.dumps(payload, sort_keys=True, ensure_ascii=False))

    def resolve_template_dir(self) -> Path:
        if not self.template_dir:
            raise ConfigError(f"Design config '{self.occupation}' declares no template_dir")
        base = Path(self.source_path).parent if self.source_path else CONFIG_DIR
        return (base / self.template_dir).resolve()


def load_design_config(path_or_name: Union[str, Path]) -> DesignConfig:
    """按路径或 configs/ 下的名称（如 paper-fullstack）加载设计配置。"""
    path = Path(path_or_name)
    if not path.exists():
        candidate = CONFIG_DIR / f"{path_or_name}.json"
        if not candidate.exists():
            raise ConfigError(f"Design config not found: {path_or_name}")
        path = candidate
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        raw["source_path"] = str(path.resolve())
        return DesignConfig.model_validate(raw)
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid design config {path}: {e}") from e


# --- 3. 因子单元 ---
def _digest(text: str, length: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def _assignment_id(prefix: str, assignments: Mapping[str, AttributeLevel]) -> str:
    canonical = json.dumps({k: v.id for k, v in assignments.items()}, sort_keys=True)
    return f"{prefix}{_digest(canonical, 12)}"


@dataclass(frozen=True)
class ProfileSpec:
    profile_id: str
    assignments: Mapping[str, AttributeLevel]

    def level_id(self, domain: str) -> str:
        return self.assignments[domain].id


@dataclass(frozen=True)
class BriefSpec:
    brief_id: str
    assignments: Mapping[str, AttributeLevel]
    constants: Mapping[str, Union[int, float, str]] = field(default_factory=dict)

    def level_id(self, domain: str) -> str:
        return self.assignments[domain].id


def pair_id(profile_id: str, brief_id: str) -> str:
    return f"{profile_id}-{brief_id}"


def _cartesian(domains: Sequence[AttributeDomain]) -> Iterator[Dict[str, AttributeLevel]]:
    if not domains:
        raise ConfigError("Design config declares no domains to enumerate")
    names = [d.name for d in domains]
    for combo in itertools.product(*(d.levels for d in domains)):
        yield dict(zip(names, combo))


def enumerate_profiles(config: DesignConfig) -> List[ProfileSpec]:
    """档案全因子枚举：按领域声明顺序做字典序笛卡尔积。"""
    return [ProfileSpec(_assignment_id("p", a), a) for a in _cartesian(config.profile_domains)]


def enumerate_briefs(config: DesignConfig) -> List[BriefSpec]:
    constants = dict(config.brief_constants)
    return [BriefSpec(_assignment_id("b", a), a, dict(constants)) for a in _cartesian(config.brief_domains)]


def enumerate_pairs(profiles: Sequence[ProfileSpec], briefs: Sequence[BriefSpec]) -> Iterator[Tuple[ProfileSpec, BriefSpec]]:
    """以 brief 为外层循环的流式全交叉，避免一次性物化所有配对。"""
    for brief in briefs:
        for profile in profiles:
            yield profile, brief


def check_balance(specs: Sequence[Union[ProfileSpec, BriefSpec]], domains: Sequence[AttributeDomain]) -> Dict[str, Any]:
    """检查平衡性与正交性：每个水平出现 total/|levels| 次，任意两领域的联合频数等于边际乘积/总数。"""
    total = len(specs)
    if total == 0:
        raise ConfigError("Cannot audit an empty design")
    frame = pd.DataFrame({d.name: [s.assignments[d.name].id for s in specs] for d in domains})
    unbalanced = []
    for d in domains:
        counts = frame[d.name].value_counts()
        expected = total / len(d.levels)
        if len(counts) != len(d.levels) or (counts != expected).any():
            unbalanced.append(d.name)
    non_orthogonal = []
    for a, b in itertools.combinations([d.name for d in domains], 2):
        joint = pd.crosstab(frame[a], frame[b])
        expected = pd.DataFrame(
            [[ra * cb / total for cb in joint.sum(axis=0)] for ra in joint.sum(axis=1)],
            index=joint.index, columns=joint.columns,
        )
        if not (joint == expected).all().all():
            non_orthogonal.append(f"{a}x{b}")
    return {
        "total": total,
        "balanced": not unbalanced,
        "orthogonal": not non_orthogonal,
        "unbalanced_domains": unbalanced,
        "non_orthogonal_pairs": non_orthogonal,
    }


# --- 4. 配对特征 ---
@dataclass(frozen=True)
class PairFeatures:
    pair_id: str
    profile_id: str
    brief_id: str
    skill_match: str
    experience_rel: str
    rate_delta_eur: int
    remote_mismatch: bool
    parttime_mismatch: bool
    industry_match: bool
    past_firm_large: bool
    reputation_level: str
    education: str
    name_group: str
    brief_levels: Mapping[str, str] = field(default_factory=dict, compare=False)


FEATURE_FIELDS = (
    "skill_match", "experience_rel", "rate_delta_eur", "remote_mismatch", "parttime_mismatch",
    "industry_match", "past_firm_large", "reputation_level", "education", "name_group",
)


def _role(spec: Union[ProfileSpec, BriefSpec], name: str) -> AttributeLevel:
    try:
        return spec.assignments[name]
    except KeyError:
        kind = "profile" if isinstance(spec, ProfileSpec) else "brief"
        raise FeatureError(f"{kind} {getattr(spec, kind + '_id')} lacks required domain '{name}'") from None


def _constant(brief: BriefSpec, name: str):
    if name not in brief.constants:
        raise FeatureError(f"brief {brief.brief_id} lacks required constant '{name}'")
    return brief.constants[name]


def _checked(value: str, allowed: Sequence[str], what: str) -> str:
    if value not in allowed:
        raise FeatureError(f"Unknown {what} level '{value}'; expected one of {list(allowed)}")
    return value


def derive_features(profile: ProfileSpec, brief: BriefSpec) -> PairFeatures:
    skill = _checked(str(_role(profile, "stack").semantic), SKILL_MATCH_LEVELS, "skill")

    years = _role(profile, "years").semantic
    required = _constant(brief, "min_experience_years")
    try:
        gap = float(years) - float(required)
    except (TypeError, ValueError):
        raise FeatureError(f"Experience level '{years}' is not numeric") from None
    experience = "match" if gap == 0 else ("below" if gap < 0 else "above")

    rate = _role(profile, "rate").semantic
    try:
        rate_delta = int(round(float(rate) - float(_constant(brief, "rate_eur"))))
    except (TypeError, ValueError):
        raise FeatureError(f"Rate level '{rate}' is not numeric") from None

    remote_pref = _checked(str(_role(profile, "location_pref").semantic), ("onsite", "remote"), "location preference")
    remote_req = _checked(str(_role(brief, "work_location").semantic), ("onsite", "remote"), "work location")
    time_pref = _checked(str(_role(profile, "work_time").semantic), ("full_time", "part_time"), "work time")
    time_req = _checked(str(_role(brief, "contract_time").semantic), ("full_time", "part_time"), "contract time")
    firm = _checked(str(_role(profile, "firm_size").semantic), ("large", "sme"), "firm size")

    return PairFeatures(
        pair_id=pair_id(profile.profile_id, brief.brief_id),
        profile_id=profile.profile_id,
        brief_id=brief.brief_id,
        skill_match=skill,
        experience_rel=experience,
        rate_delta_eur=rate_delta,
        remote_mismatch=remote_pref != remote_req,
        parttime_mismatch=time_pref != time_req,
        industry_match=_role(profile, "industry").id == str(_constant(brief, "industry")),
        past_firm_large=firm == "large",
        reputation_level=_checked(_role(profile, "reputation").id, REPUTATION_LEVELS, "reputation"),
        education=_checked(_role(profile, "education").id, EDUCATION_LEVELS, "education"),
        name_group=_checked(_role(profile, "name_group").id, NAME_GROUPS, "name group"),
        brief_levels={name: level.id for name, level in brief.assignments.items()},
    )


def derive_all(profiles: Sequence[ProfileSpec], briefs: Sequence[BriefSpec]) -> List[PairFeatures]:
    return [derive_features(p, b) for p, b in enumerate_pairs(profiles, briefs)]


def features_frame(features: Iterable[PairFeatures]) -> pd.DataFrame:
    """每个配对一行；brief 的水平以 brief.<domain> 列展开。"""
    features = list(features)
    columns = {name: [getattr(f, name) for f in features] for name in ("pair_id", "profile_id", "brief_id") + FEATURE_FIELDS}
    brief_domains = sorted({d for f in features for d in f.brief_levels})
    for d in brief_domains:
        columns[f"brief.{d}"] = [f.brief_levels.get(d) for f in features]
    return pd.DataFrame(columns)
