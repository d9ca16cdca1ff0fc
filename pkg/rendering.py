# rendering.py
"""
把档案 / brief 规格渲染成自然语言文档，并组装评分与排序提示词。

模板是数据而不是代码：templates/<职业>/<语言>/ 下的四个 .txt 模板加一个 phrases.json。
占位符语法：
    {{key}}          领域 render_key 对应水平的短语
    {{key.field}}    短语中的子字段（如 experience.bracket）
    {{keyA*keyB}}    由两个领域水平共同决定的复合短语（如 雇主名 = 公司规模 x 行业）
    {{const.name}}   brief 常量
    {{profile}} / {{brief}} / {{profiles}}   提示词中嵌入的文档
"""
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from design import AttributeDomain, BriefSpec, DesignConfig, ProfileSpec, pair_id
from errors import ArityError, ConfigError, TemplateError

logger = logging.getLogger(__name__)

PLACEHOLDER = re.compile(r"\{\{\s*([\w.*]+)\s*\}\}")
RANK_LABELS = ("A", "B", "C")
TEMPLATE_FILES = {
    "profile_template": "profile.txt",
    "brief_template": "brief.txt",
    "scoring_prompt_template": "scoring_prompt.txt",
    "ranking_prompt_template": "ranking_prompt.txt",
}
PROMPT_SLOTS = ("profile", "brief", "profiles")


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RenderedDocument:
    doc_id: str
    kind: str           # profile | brief | prompt
    text: str
    source_id: str

    @classmethod
    def build(cls, kind: str, text: str, source_id: str) -> "RenderedDocument":
        if not text.strip():
            raise TemplateError(f"Rendered {kind} for {source_id} is empty")
        return cls(doc_id=content_hash(text), kind=kind, text=text, source_id=source_id)


@dataclass(frozen=True)
class TemplateSet:
    locale: str
    profile_template: str
    brief_template: str
    scoring_prompt_template: str
    ranking_prompt_template: str
    level_phrases: Mapping[str, Mapping[str, Any]]
    compound_phrases: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    constant_phrases: Mapping[str, Any] = field(default_factory=dict)
    profile_label: str = "Profile"
    # render_key -> 领域名
    profile_keys: Mapping[str, str] = field(default_factory=dict)
    brief_keys: Mapping[str, str] = field(default_factory=dict)

    @property
    def template_hash(self) -> str:
        payload = {
            "locale": self.locale,
            "templates": [self.profile_template, self.brief_template,
                          self.scoring_prompt_template, self.ranking_prompt_template],
            "domains": self.level_phrases,
            "compound": self.compound_phrases,
            "constants": self.constant_phrases,
            "label": self.profile_label,
        }
        return content_hash(json.dumps(payload, sort_keys=True, ensure_ascii=False))

    def phrase(self, domain: str, level: str) -> Any:
        try:
            return self.level_phrases[domain][level]
        except KeyError:
            raise TemplateError(f"No phrase for level '{level}' of domain '{domain}' (locale {self.locale})") from None


def load_template_set(config: DesignConfig, locale: Optional[str] = None, template_dir: Union[str, Path, None] = None) -> TemplateSet:
    """读取配置声明的模板包；locale 缺省时使用配置的语言。"""
    locale = locale or config.locale
    base = Path(template_dir) if template_dir else config.resolve_template_dir()
    bundle = base / locale
    if not bundle.is_dir():
        raise ConfigError(f"Template bundle not found: {bundle}")

    texts = {}
    for attr, filename in TEMPLATE_FILES.items():
        path = bundle / filename
        if not path.exists():
            raise ConfigError(f"Template bundle {bundle} is missing {filename}")
        texts[attr] = path.read_text(encoding="utf-8").rstrip("\n")

    try:
        phrases = json.loads((bundle / "phrases.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Template bundle {bundle} is missing phrases.json") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid phrases.json in {bundle}: {e}") from e

    templates = TemplateSet(
        locale=locale,
        level_phrases=phrases.get("domains", {}),
        compound_phrases=phrases.get("compound", {}),
        constant_phrases=phrases.get("constants", {}),
        profile_label=phrases.get("labels", {}).get("profile", "Profile"),
        profile_keys=_key_map(config.profile_domains),
        brief_keys=_key_map(config.brief_domains),
        **texts,
    )
    logger.info("已加载模板包 %s (template_hash=%s)", bundle, templates.template_hash)
    return templates


def _key_map(domains: Sequence[AttributeDomain]) -> Dict[str, str]:
    return {d.render_key: d.name for d in domains}


# --- 1. 占位符解析 ---
def _select(value: Any, fieldname: Optional[str], placeholder: str) -> str:
    if isinstance(value, str):
        if fieldname is not None:
            raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' asks for field '{fieldname}' of a plain phrase")
        return value
    if isinstance(value, Mapping):
        key = fieldname or "text"
        if key not in value:
            raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' has no '{key}' phrase")
        return str(value[key])
    return str(value)


def _resolve(placeholder: str, assignments: Mapping, keys: Mapping[str, str],
             constants: Mapping[str, Any], templates: TemplateSet) -> str:
    if placeholder.startswith("const."):
        name = placeholder[len("const."):]
        if name not in constants:
            raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' names an unknown brief constant")
        value = constants[name]
        if name in templates.constant_phrases:
            phrase = templates.constant_phrases[name]
            return _select(phrase.get(str(value), phrase) if isinstance(phrase, Mapping) else phrase, None, placeholder)
        if str(value) in templates.level_phrases.get(name, {}):
            return _select(templates.level_phrases[name][str(value)], None, placeholder)
        return str(value)

    if "*" in placeholder:
        left, right = placeholder.split("*", 1)
        if left not in keys or right not in keys:
            raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' has no binding rule")
        compound = f"{keys[left]}*{keys[right]}"
        levels = f"{assignments[keys[left]].id}*{assignments[keys[right]].id}"
        try:
            return templates.compound_phrases[compound][levels]
        except KeyError:
            raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' has no phrase for '{levels}'") from None

    key, _, fieldname = placeholder.partition(".")
    if key not in keys:
        raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}' has no binding rule")
    domain = keys[key]
    try:
        value = templates.phrase(domain, assignments[domain].id)
    except TemplateError as e:
        raise TemplateError(f"Placeholder '{{{{{placeholder}}}}}': {e}") from None
    return _select(value, fieldname or None, placeholder)


def _fill(template: str, resolver) -> str:
    return PLACEHOLDER.sub(lambda m: resolver(m.group(1)), template)


# --- 2. 文档渲染 ---
def render_profile(profile: ProfileSpec, templates: TemplateSet) -> RenderedDocument:
    text = _fill(templates.profile_template,
                 lambda p: _resolve(p, profile.assignments, templates.profile_keys, {}, templates))
    return RenderedDocument.build("profile", text, profile.profile_id)


def render_brief(brief: BriefSpec, templates: TemplateSet) -> RenderedDocument:
    text = _fill(templates.brief_template,
                 lambda p: _resolve(p, brief.assignments, templates.brief_keys, brief.constants, templates))
    return RenderedDocument.build("brief", text, brief.brief_id)


def _prompt_slots(template: str, values: Mapping[str, str]) -> str:
    def resolver(p: str) -> str:
        if p not in values:
            raise TemplateError(f"Prompt placeholder '{{{{{p}}}}}' has no binding rule")
        return values[p]
    return _fill(template, resolver)


def build_scoring_prompt(profile_doc: RenderedDocument, brief_doc: RenderedDocument, templates: TemplateSet) -> RenderedDocument:
    text = _prompt_slots(templates.scoring_prompt_template, {"profile": profile_doc.text, "brief": brief_doc.text})
    return RenderedDocument.build("prompt", text, pair_id(profile_doc.source_id, brief_doc.source_id))


def build_ranking_prompt(profile_docs: Sequence[RenderedDocument], brief_doc: RenderedDocument, templates: TemplateSet) -> RenderedDocument:
    """按调用方给定的顺序嵌入三个档案，依次标为 A/B/C。"""
    if len(profile_docs) != len(RANK_LABELS):
        raise ArityError(f"Ranking prompt needs exactly {len(RANK_LABELS)} profiles, got {len(profile_docs)}")
    blocks = [f"{templates.profile_label} {label}\n{doc.text}" for label, doc in zip(RANK_LABELS, profile_docs)]
    text = _prompt_slots(templates.ranking_prompt_template, {"profiles": "\n\n".join(blocks), "brief": brief_doc.text})
    source = "+".join(doc.source_id for doc in profile_docs) + "@" + brief_doc.source_id
    return RenderedDocument.build("prompt", text, source)


def check_coverage(config: DesignConfig, templates: TemplateSet) -> List[str]:
    """返回所有缺失的 (领域, 水平) 短语与无法绑定的占位符；空列表表示模板包完整。"""
    problems = []
    for domain in list(config.profile_domains) + list(config.brief_domains):
        for level in domain.level_ids:
            if level not in templates.level_phrases.get(domain.name, {}):
                problems.append(f"{domain.name}={level}")
    for name, template, keys in (
        ("profile", templates.profile_template, templates.profile_keys),
        ("brief", templates.brief_template, templates.brief_keys),
    ):
        for placeholder in PLACEHOLDER.findall(template):
            head = placeholder.split(".", 1)[0]
            if head == "const":
                if placeholder[len("const."):] not in config.brief_constants:
                    problems.append(f"{name}: {{{{{placeholder}}}}}")
            elif any(part.split(".", 1)[0] not in keys for part in placeholder.split("*")):
                problems.append(f"{name}: {{{{{placeholder}}}}}")
    for name, template in (("scoring", templates.scoring_prompt_template), ("ranking", templates.ranking_prompt_template)):
        for placeholder in PLACEHOLDER.findall(template):
            if placeholder not in PROMPT_SLOTS:
                problems.append(f"{name}: {{{{{placeholder}}}}}")
    return problems


# --- 3. 缓存与导出 ---
class PromptBuilder:
    """按 id 缓存已渲染的档案与 brief，提示词按需生成。"""

    def __init__(self, templates: TemplateSet):
        self.templates = templates
        self._profiles: Dict[str, RenderedDocument] = {}
        self._briefs: Dict[str, RenderedDocument] = {}

    @property
    def template_hash(self) -> str:
        return self.templates.template_hash

    def profile_doc(self, profile: ProfileSpec) -> RenderedDocument:
        doc = self._profiles.get(profile.profile_id)
        if doc is None:
            doc = self._profiles[profile.profile_id] = render_profile(profile, self.templates)
        return doc

    def brief_doc(self, brief: BriefSpec) -> RenderedDocument:
        doc = self._briefs.get(brief.brief_id)
        if doc is None:
            doc = self._briefs[brief.brief_id] = render_brief(brief, self.templates)
        return doc

    def scoring_prompt(self, profile: ProfileSpec, brief: BriefSpec) -> RenderedDocument:
        return build_scoring_prompt(self.profile_doc(profile), self.brief_doc(brief), self.templates)

    def ranking_prompt(self, profiles: Sequence[ProfileSpec], brief: BriefSpec) -> RenderedDocument:
        return build_ranking_prompt([self.profile_doc(p) for p in profiles], self.brief_doc(brief), self.templates)

    def documents(self) -> List[RenderedDocument]:
        return list(self._profiles.values()) + list(self._briefs.values())


def export_documents(documents: Iterable[RenderedDocument], directory: Union[str, Path]) -> pd.DataFrame:
    """写出 <directory>/<kind>/<doc_id>.txt 以及索引 index.csv，返回索引表。"""
    directory = Path(directory)
    rows = []
    for doc in documents:
        target = directory / doc.kind
        target.mkdir(parents=True, exist_ok=True)
        (target / f"{doc.doc_id}.txt").write_text(doc.text + "\n", encoding="utf-8")
        rows.append({"doc_id": doc.doc_id, "kind": doc.kind, "source_id": doc.source_id})
    index = pd.DataFrame(rows, columns=["doc_id", "kind", "source_id"])
    index = index.sort_values(["kind", "source_id"], kind="mergesort").reset_index(drop=True)
    directory.mkdir(parents=True, exist_ok=True)
    index.to_csv(directory / "index.csv", index=False)
    return index
