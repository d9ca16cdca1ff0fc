# stats.py
"""
设计矩阵、OLS 与聚类稳健推断。

列名约定：主效应 term[level]，交互项 moderator[level]:term[level]，截距为 intercept。
所有虚拟变量以参照水平为基准，参照档案那一行除截距外全为 0。
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, stats as sps

from design import EDUCATION_LEVELS, NAME_GROUPS, REPUTATION_LEVELS, PairFeatures, features_frame
from errors import ConfigError, DegenerateError, FeatureError, InferenceError, RankError

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"
ADJUSTMENTS = ("CR0", "CR1")


# --- 1. 模型规格 ---
@dataclass(frozen=True)
class FeatureTerm:
    name: str                       # 特征表中的列名
    label: str                      # 报告中的属性组名
    levels: Tuple[str, ...]
    reference: str
    kind: str = "profile"           # profile | matching | brief
    level_labels: Tuple[Tuple[str, str], ...] = ()   # 单独成组的水平，如 name_group 拆成 Female / Arabic

    @property
    def dummy_levels(self) -> Tuple[str, ...]:
        return tuple(level for level in self.levels if level != self.reference)

    def column(self, level: str) -> str:
        return f"{self.name}[{level}]"

    def group_of(self, level: str) -> str:
        return dict(self.level_labels).get(level, self.label)


@dataclass(frozen=True)
class InteractionBlock:
    moderator: FeatureTerm
    moderator_levels: Tuple[str, ...]
    terms: Tuple[str, ...]          # 被交互的主效应名

    def __post_init__(self):
        if self.moderator.name in self.terms:
            raise ConfigError(f"Moderator '{self.moderator.name}' cannot be interacted with itself")


@dataclass(frozen=True)
class ModelSpec:
    response: str                               # mean_score | rank_score
    terms: Tuple[FeatureTerm, ...]
    interaction_blocks: Tuple[InteractionBlock, ...] = ()
    cluster_key: Optional[str] = "brief_id"     # brief_id | group_id | None
    small_sample_adjustment: str = "CR1"
    label: str = "main"

    def __post_init__(self):
        if self.small_sample_adjustment not in ADJUSTMENTS:
            raise ConfigError(f"Unknown small-sample adjustment '{self.small_sample_adjustment}'")
        names = [t.name for t in self.terms]
        for block in self.interaction_blocks:
            unknown = sorted(set(block.terms) - set(names))
            if unknown:
                raise ConfigError(f"Interaction block references unknown terms {unknown}")

    @property
    def spec_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# 声明顺序同时是 max_effect_table 的平局顺序
def _declared_terms(rate_levels: Sequence[str]) -> List[FeatureTerm]:
    return [
        FeatureTerm("skill_match", "Skills", ("exact", "close", "far"), "exact", "matching"),
        FeatureTerm("experience_rel", "Exp.", ("match", "below", "above"), "match", "matching"),
        FeatureTerm("remote_mismatch", "Remote", ("False", "True"), "False", "matching"),
        FeatureTerm("parttime_mismatch", "P-time", ("False", "True"), "False", "matching"),
        FeatureTerm("reputation_level", "Rep.", REPUTATION_LEVELS, "expert_badge"),
        FeatureTerm("rate_delta_eur", "Rate", tuple(rate_levels), "0", "matching"),
        FeatureTerm("past_firm_large", "Firm", ("True", "False"), "True"),
        FeatureTerm("industry_match", "Industry", ("True", "False"), "True", "matching"),
        FeatureTerm("education", "Educ.", EDUCATION_LEVELS, "master"),
        FeatureTerm("name_group", "Name", NAME_GROUPS, "male_eu",
                    level_labels=(("female_eu", "Female"), ("male_arabic", "Arabic"))),
    ]


def _atoms(series: pd.Series) -> np.ndarray:
    return series.astype(str).to_numpy()


def main_terms(frame: pd.DataFrame) -> Tuple[FeatureTerm, ...]:
    """主效应项，只保留数据中出现的水平；没有任何非参照水平的项被略去。"""
    rates = sorted({int(v) for v in frame["rate_delta_eur"]}) if "rate_delta_eur" in frame else [0]
    terms = []
    for term in _declared_terms([str(r) for r in rates]):
        if term.name not in frame:
            continue
        observed = set(_atoms(frame[term.name]))
        levels = tuple(level for level in term.levels if level in observed)
        if not any(level != term.reference for level in levels):
            continue
        terms.append(FeatureTerm(term.name, term.label, levels, term.reference, term.kind, term.level_labels))
    return tuple(terms)


def main_effects_spec(frame: pd.DataFrame, cluster_key: Optional[str] = "brief_id", adjustment: str = "CR1",
                      response: str = "mean_score", label: str = "main") -> ModelSpec:
    return ModelSpec(response, main_terms(frame), (), cluster_key, adjustment, label)


# --- 2. 设计矩阵 ---
@dataclass(frozen=True)
class ColumnMeta:
    column: str
    term: str
    level: Optional[str]
    group: str
    moderator: Optional[str] = None
    moderator_level: Optional[str] = None


@dataclass
class DesignMatrix:
    columns: List[str]
    values: np.ndarray
    meta: List[ColumnMeta]
    row_ids: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def as_feature_frame(features: Union[pd.DataFrame, Sequence[PairFeatures]]) -> pd.DataFrame:
    return features if isinstance(features, pd.DataFrame) else features_frame(features)


def build_design_matrix(features: Union[pd.DataFrame, Sequence[PairFeatures]], spec: ModelSpec) -> DesignMatrix:
    """截距在前，然后是主效应，最后按交互块依次排列；列顺序只由 spec 决定。"""
    frame = as_feature_frame(features)
    if len(frame) == 0:
        raise FeatureError("Cannot build a design matrix from zero rows")

    def atoms_of(name: str) -> np.ndarray:
        if name not in frame:
            raise FeatureError(f"Feature column '{name}' is missing")
        return _atoms(frame[name])

    columns, values = [INTERCEPT], [np.ones(len(frame))]
    meta = [ColumnMeta(INTERCEPT, INTERCEPT, None, INTERCEPT)]
    by_term: Dict[str, List[Tuple[str, np.ndarray, ColumnMeta]]] = {}

    main_names = {t.name for t in spec.terms}
    for term in spec.terms:
        atoms = atoms_of(term.name)
        for level in term.dummy_levels:
            column = term.column(level)
            dummy = (atoms == level).astype(float)
            info = ColumnMeta(column, term.name, level, term.group_of(level))
            by_term.setdefault(term.name, []).append((column, dummy, info))
            columns.append(column)
            values.append(dummy)
            meta.append(info)

    for block in spec.interaction_blocks:
        moderator = block.moderator
        mod_atoms = atoms_of(moderator.name)
        for mod_level in block.moderator_levels:
            mod_column = moderator.column(mod_level)
            mod_dummy = (mod_atoms == mod_level).astype(float)
            if moderator.name not in main_names and mod_column not in columns:
                columns.append(mod_column)
                values.append(mod_dummy)
                meta.append(ColumnMeta(mod_column, moderator.name, mod_level, moderator.group_of(mod_level)))
            for name in (t.name for t in spec.terms if t.name in block.terms):
                for column, dummy, info in by_term.get(name, []):
                    columns.append(f"{mod_column}:{column}")
                    values.append(mod_dummy * dummy)
                    meta.append(ColumnMeta(f"{mod_column}:{column}", info.term, info.level, info.group,
                                           moderator.name, mod_level))

    return DesignMatrix(columns, np.column_stack(values), meta, frame["pair_id"].to_numpy() if "pair_id" in frame
                        else np.arange(len(frame)))


def _json_value(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return None if np.isnan(value) else float(value)
    return value


# --- 3. 估计 ---
@dataclass
class FitResult:
    columns: List[str]
    coefficients: pd.Series
    robust_se: pd.Series
    p_values: pd.Series
    r_squared: float
    n_obs: int
    n_clusters: Optional[int]
    df_resid: int
    residuals: Optional[np.ndarray] = None
    meta: List[ColumnMeta] = field(default_factory=list)
    cov: Optional[np.ndarray] = None
    xtx_inv: Optional[np.ndarray] = None
    response: str = "mean_score"
    cluster_key: Optional[str] = None
    adjustment: str = "CR1"
    spec_hash: str = ""
    label: str = "main"

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for info in self.meta:
            rows.append({
                "column": info.column,
                "term": info.term,
                "level": info.level,
                "group": info.group,
                "moderator": info.moderator,
                "moderator_level": info.moderator_level,
                "estimate": self.coefficients[info.column],
                "robust_se": self.robust_se[info.column],
                "p_value": self.p_values[info.column],
            })
        return pd.DataFrame(rows)

    def to_json(self) -> str:
        document = {
            "label": self.label,
            "spec_hash": self.spec_hash,
            "response": self.response,
            "cluster_key": self.cluster_key,
            "adjustment": self.adjustment,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "df_resid": self.df_resid,
            "r_squared": self.r_squared,
            "columns": [{k: _json_value(v) for k, v in row.items()} for row in self.to_frame().to_dict(orient="records")],
        }
        return json.dumps(document, indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        document = json.loads(text)
        rows = document["columns"]
        columns = [r["column"] for r in rows]
        meta = [ColumnMeta(r["column"], r["term"], r["level"], r["group"], r["moderator"], r["moderator_level"]) for r in rows]

        def series(key: str) -> pd.Series:
            return pd.Series([np.nan if r[key] is None else float(r[key]) for r in rows], index=columns, dtype=float)

        return cls(
            columns=columns, coefficients=series("estimate"), robust_se=series("robust_se"), p_values=series("p_value"),
            r_squared=document["r_squared"], n_obs=document["n_obs"], n_clusters=document["n_clusters"],
            df_resid=document["df_resid"], meta=meta, response=document["response"],
            cluster_key=document["cluster_key"], adjustment=document["adjustment"],
            spec_hash=document["spec_hash"], label=document["label"],
        )


def fit_ols(X: DesignMatrix, y: Union[np.ndarray, pd.Series]) -> FitResult:
    """
    列主元 QR 求解最小二乘；秩不足时抛出 RankError，列出主元排在秩之后的列。
    只给出点估计、残差与 R²，推断由 fit_model 补上。
    """
    A = np.asarray(X.values, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = A.shape
    if len(y) != n:
        raise FeatureError(f"Response has {len(y)} rows but the design matrix has {n}")

    Q, R, perm = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, k) * np.finfo(float).eps if k else 0.0
    rank = int(np.sum(diag > tol))
    if rank < k:
        raise RankError([X.columns[j] for j in perm[rank:]])

    beta = np.empty(k)
    beta[perm] = linalg.solve_triangular(R, Q.T @ y)
    residuals = y - A @ beta

    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise DegenerateError("Response is constant; R² and the fit are undefined")
    r_squared = 1.0 - float(residuals @ residuals) / sst

    r_inv = linalg.solve_triangular(R, np.eye(k))
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(perm, perm)] = r_inv @ r_inv.T

    nan = pd.Series(np.nan, index=X.columns)
    return FitResult(
        columns=list(X.columns), coefficients=pd.Series(beta, index=X.columns), robust_se=nan.copy(),
        p_values=nan.copy(), r_squared=r_squared, n_obs=n, n_clusters=None, df_resid=n - k,
        residuals=residuals, meta=list(X.meta), xtx_inv=xtx_inv,
    )


def cluster_robust_cov(X: Union[DesignMatrix, np.ndarray], residuals: np.ndarray, cluster_ids: Sequence,
                       adjustment: str = "CR1", xtx_inv: Optional[np.ndarray] = None) -> np.ndarray:
    """
    (X'X)^-1 (Σ_g X_g' e_g e_g' X_g) (X'X)^-1；CR1 再乘以 G/(G-1)·(N-1)/(N-k)。
    """
    A = np.asarray(X.values if isinstance(X, DesignMatrix) else X, dtype=float)
    e = np.asarray(residuals, dtype=float)
    n, k = A.shape
    if adjustment not in ADJUSTMENTS:
        raise ConfigError(f"Unknown small-sample adjustment '{adjustment}'")
    groups = pd.Series(np.asarray(cluster_ids)).reset_index(drop=True)
    if len(groups) != n:
        raise InferenceError(f"{len(groups)} cluster ids for {n} rows")
    n_clusters = groups.nunique()
    if n_clusters < 2:
        raise InferenceError(f"Cluster-robust covariance needs at least 2 clusters, got {n_clusters}")
    if adjustment == "CR1" and n <= k:
        raise InferenceError(f"CR1 needs more rows than columns, got N={n} and k={k}")

    bread = xtx_inv if xtx_inv is not None else linalg.inv(A.T @ A)
    score_sums = pd.DataFrame(A * e[:, None]).groupby(groups.to_numpy(), sort=True).sum().to_numpy()
    meat = score_sums.T @ score_sums
    cov = bread @ meat @ bread
    if adjustment == "CR1":
        cov = cov * (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    return (cov + cov.T) / 2.0


def _p_values(coef: np.ndarray, se: np.ndarray, df: int) -> np.ndarray:
    """标准误为 0 时：系数非零记 p=0，系数为零记 p=1。"""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.abs(coef) / se
    p = 2.0 * sps.t.sf(t, df)
    zero_se = se == 0
    p[zero_se] = np.where(coef[zero_se] != 0, 0.0, 1.0)
    return p


def fit_model(frame: pd.DataFrame, spec: ModelSpec) -> FitResult:
    """通用路径：建矩阵、QR 求解、聚类稳健（或经典）协方差与 t 检验。"""
    if spec.response not in frame:
        raise FeatureError(f"Response column '{spec.response}' is missing")
    X = build_design_matrix(frame, spec)
    fit = fit_ols(X, frame[spec.response].to_numpy(dtype=float))
    n, k = X.shape

    if spec.cluster_key:
        if spec.cluster_key not in frame:
            raise InferenceError(f"Cluster key '{spec.cluster_key}' is not a column of the data")
        clusters = frame[spec.cluster_key].to_numpy()
        cov = cluster_robust_cov(X, fit.residuals, clusters, spec.small_sample_adjustment, fit.xtx_inv)
        n_clusters = int(pd.Series(clusters).nunique())
        df = n_clusters - 1
    else:
        if n <= k:
            raise InferenceError(f"Classical covariance needs N > k (N={n}, k={k})")
        sigma2 = float(fit.residuals @ fit.residuals) / (n - k)
        cov = sigma2 * fit.xtx_inv
        n_clusters = None
        df = n - k

    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    coef = fit.coefficients.to_numpy()
    fit.robust_se = pd.Series(se, index=X.columns)
    fit.p_values = pd.Series(_p_values(coef, se, df), index=X.columns)
    fit.cov = cov
    fit.n_clusters = n_clusters
    fit.response = spec.response
    fit.cluster_key = spec.cluster_key
    fit.adjustment = spec.small_sample_adjustment
    fit.spec_hash = spec.spec_hash
    fit.label = spec.label
    logger.info("拟合 %s: N=%d, k=%d, G=%s, R²=%.6f", spec.label, n, k, n_clusters, fit.r_squared)
    return fit


# --- 4. 三个回归方程 ---
def join_scores(aggregates: Union[pd.DataFrame, Sequence[Any]], features: Union[pd.DataFrame, Sequence[PairFeatures]],
                response: str = "mean_score") -> pd.DataFrame:
    """按 pair_id 把聚合分数接到特征表上，保留特征表的行顺序。"""
    if not isinstance(aggregates, pd.DataFrame):
        aggregates = pd.DataFrame({"pair_id": [a.pair_id for a in aggregates],
                                   response: [getattr(a, response) for a in aggregates]})
    frame = as_feature_frame(features)
    if aggregates["pair_id"].duplicated().any():
        raise InferenceError("Expected one aggregate per pair; found duplicated pair_ids")
    joined = frame.merge(aggregates[["pair_id", response]], on="pair_id", how="inner")
    if joined.empty:
        raise InferenceError("No aggregate matches any pair in the feature table")
    return joined


def fit_main_effects(aggregates, features, cluster_key: Optional[str] = "brief_id", adjustment: str = "CR1") -> FitResult:
    frame = join_scores(aggregates, features)
    return fit_model(frame, main_effects_spec(frame, cluster_key, adjustment))


def _parse_term(expression: str) -> Tuple[str, Optional[str]]:
    name, _, level = expression.partition("=")
    return name.strip(), (level.strip() or None)


def fit_group_interactions(aggregates, features, group_term: str = "name_group",
                           cluster_key: Optional[str] = "brief_id", adjustment: str = "CR1") -> FitResult:
    """
    group_term 为主效应名（如 name_group，全部非参照水平都作为调节变量）或 name_group=female_eu。
    其余主效应项全部与组虚拟变量交互。
    """
    frame = join_scores(aggregates, features)
    terms = main_terms(frame)
    name, level = _parse_term(group_term)
    moderator = next((t for t in terms if t.name == name), None)
    if moderator is None:
        raise InferenceError(f"Group term '{name}' does not vary in the data")
    levels = moderator.dummy_levels if level is None else (level,)
    if level is not None and level not in moderator.dummy_levels:
        raise InferenceError(f"Level '{level}' of '{name}' is the reference or never observed")
    block = InteractionBlock(moderator, levels, tuple(t.name for t in terms if t.name != name))
    spec = ModelSpec("mean_score", terms, (block,), cluster_key, adjustment, f"group:{group_term}")
    return fit_model(frame, spec)


def fit_brief_interactions(aggregates, features, brief_term: str, reference: Optional[str] = None,
                           matching_only: bool = False, cluster_key: Optional[str] = "brief_id",
                           adjustment: str = "CR1") -> FitResult:
    """
    brief_term 形如 work_location=remote_allowed（或只写领域名，需给出 reference）；
    该领域观测到两个以上水平时，给出水平也必须同时给出 reference。
    不加 brief 固定效应，只加 brief 虚拟变量与交互项。
    """
    frame = join_scores(aggregates, features)
    domain, level = _parse_term(brief_term)
    column = domain if domain.startswith("brief.") else f"brief.{domain}"
    if column not in frame:
        raise InferenceError(f"Brief term '{domain}' is not in the feature table")
    observed = sorted(set(_atoms(frame[column])))
    if len(observed) < 2:
        raise InferenceError(f"Brief term '{domain}' does not vary across briefs")
    if level is not None:
        if level not in observed:
            raise InferenceError(f"Level '{level}' of brief term '{domain}' is never observed")
        if reference == level:
            raise InferenceError(f"Level '{level}' of brief term '{domain}' is its own reference")
        if reference is None and len(observed) > 2:
            raise InferenceError(f"Brief term '{domain}' has {len(observed)} observed levels; give a reference level")
        levels = (level,)
        ref = reference or next(l for l in observed if l != level)
    else:
        if reference is None or reference not in observed:
            raise InferenceError(f"Brief term '{domain}' needs an observed reference level")
        ref = reference
        levels = tuple(l for l in observed if l != ref)

    terms = main_terms(frame)
    moderator = FeatureTerm(column, column, (ref,) + levels, ref, "brief")
    interacted = tuple(t.name for t in terms if (t.kind == "matching" or not matching_only))
    spec = ModelSpec("mean_score", terms, (InteractionBlock(moderator, levels, interacted),),
                     cluster_key, adjustment, f"brief:{brief_term}")
    return fit_model(frame, spec)


# --- 5. 汇总 ---
def _main_meta(fit: FitResult) -> List[ColumnMeta]:
    return [m for m in fit.meta if m.column != INTERCEPT and m.moderator is None]


def normalized_weights(fit: FitResult) -> pd.Series:
    """|系数| / Σ|系数|，不含截距。"""
    columns = [c for c in fit.columns if c != INTERCEPT]
    magnitudes = fit.coefficients[columns].abs()
    total = float(magnitudes.sum())
    if total == 0.0:
        raise DegenerateError("All non-intercept coefficients are zero; weights are undefined")
    return magnitudes / total


def max_effect_table(fit: FitResult) -> pd.DataFrame:
    """
    每个属性组取 |系数| 最大的水平（保留符号），按 |值| 降序排名；
    平局按属性声明顺序（稳定排序）。
    """
    rows: Dict[str, dict] = {}
    for info in _main_meta(fit):
        value = float(fit.coefficients[info.column])
        current = rows.get(info.group)
        if current is None or abs(value) > abs(current["max_effect"]):
            rows[info.group] = {"group": info.group, "term": info.term, "column": info.column, "max_effect": value}
    table = pd.DataFrame(list(rows.values()), columns=["group", "term", "column", "max_effect"])
    order = table["max_effect"].abs().sort_values(ascending=False, kind="mergesort").index
    table = table.loc[order].reset_index(drop=True)
    table["rank"] = np.arange(1, len(table) + 1)
    return table
