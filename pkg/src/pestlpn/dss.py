"""Rule-based pesticide decision support.

Rules live in a JSON-lines knowledge base (``#`` comments allowed). A query
matches a rule when crop and pest agree, the rule's growth stage is ``any``
or equal to the queried stage, and every condition tag of the rule is present
in the query. Among several matches the most eco-friendly class wins.
"""
from __future__ import annotations

import json
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import torch

from .episodic import ClassDistribution, PrototypeSet, classify_query, compute_prototypes

KB_ENV_VAR = "PESTLPN_KB"
DEFAULT_KB_PATH = Path(__file__).parent / "data" / "knowledge_base.jsonl"

CROPS = ("sugarcane", "wheat")
GROWTH_STAGES = ("early_growth", "vegetative", "any")
SEVERITIES = ("low", "medium", "high")
ECO_PRIORITY = ("biological", "trap_or_lure", "soil_treatment", "chemical")
CONDITION_TAGS = ("high_humidity", "warm_dry", "dry_soil", "cool_moist", "moderate_temp", "dry")
RULE_FIELDS = ("crop", "pest", "scientific_name", "growth_stage", "condition_tags",
               "recommendation", "eco_class")

# free-text phrases (as written in the source tables) -> tag sets
CONDITION_PHRASES = {
    "high humidity": {"high_humidity"},
    "warm and dry": {"warm_dry"},
    "warm dry": {"warm_dry"},
    "dry soil conditions": {"dry_soil"},
    "dry soil": {"dry_soil"},
    "moderate temperature": {"moderate_temp"},
    "moderate temperature, high humidity": {"moderate_temp", "high_humidity"},
    "moderate_temp_high_humidity": {"moderate_temp", "high_humidity"},
    "cool, moist": {"cool_moist"},
    "cool and moist": {"cool_moist"},
    "cool moist": {"cool_moist"},
    "dry": {"dry"},
}
TAG_IMPLICATIONS = {"warm_dry": {"dry"}}

CAVEAT = ("Dosage and timing are not covered by the knowledge base; "
          "set them from the infestation severity and local guidelines.")


class KnowledgeBaseError(ValueError):
    pass


class DuplicateRuleError(KnowledgeBaseError):
    pass


class UnknownConditionError(ValueError):
    pass


class NoRuleFound(LookupError):
    def __init__(self, crop: str, pest: str):
        super().__init__(f"no rule for pest {pest!r} on crop {crop!r}")
        self.crop = crop
        self.pest = pest


def normalize_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", name).strip().casefold()


def parse_conditions(conditions: str | Iterable[str] | None) -> frozenset[str]:
    """Map tags or table phrases to the closed tag vocabulary.

    ``"Moderate temperature, high humidity"`` -> ``{moderate_temp, high_humidity}``.
    """
    if conditions is None:
        return frozenset()
    if isinstance(conditions, str):
        conditions = [conditions]
    tags: set[str] = set()
    for raw in conditions:
        text = raw.strip()
        if not text:
            continue
        key = text.casefold()
        if key in CONDITION_TAGS:
            tags.add(key)
        elif key in CONDITION_PHRASES:
            tags |= CONDITION_PHRASES[key]
        elif "," in key:
            tags |= parse_conditions(key.split(","))
        else:
            raise UnknownConditionError(
                f"unknown environmental condition {raw!r}; known tags: {', '.join(CONDITION_TAGS)}")
    for tag in list(tags):
        tags |= TAG_IMPLICATIONS.get(tag, set())
    return frozenset(tags)


@dataclass(frozen=True)
class Rule:
    crop: str
    pest: str
    scientific_name: str
    growth_stage: str
    condition_tags: frozenset[str]
    recommendation: str
    eco_class: str
    aliases: tuple[str, ...] = ()

    @property
    def key(self) -> tuple:
        return (self.crop, normalize_name(self.pest), self.growth_stage,
                tuple(sorted(self.condition_tags)))

    def names(self) -> set[str]:
        return {normalize_name(n) for n in (self.pest, *self.aliases)}

    def stage_matches(self, stage: str) -> bool:
        return self.growth_stage == "any" or self.growth_stage == stage

    def conditions_match(self, tags: frozenset[str]) -> bool:
        return not self.condition_tags or self.condition_tags <= tags


def rule_from_dict(data: dict, where: str = "") -> Rule:
    prefix = f"{where}: " if where else ""
    missing = [f for f in RULE_FIELDS if f not in data]
    if missing:
        raise KnowledgeBaseError(f"{prefix}missing fields {missing}")
    unknown = set(data) - set(RULE_FIELDS) - {"aliases"}
    if unknown:
        raise KnowledgeBaseError(f"{prefix}unknown fields {sorted(unknown)}")
    if data["crop"] not in CROPS:
        raise KnowledgeBaseError(f"{prefix}crop must be one of {CROPS}")
    if data["growth_stage"] not in GROWTH_STAGES:
        raise KnowledgeBaseError(f"{prefix}growth_stage must be one of {GROWTH_STAGES}")
    if data["eco_class"] not in ECO_PRIORITY:
        raise KnowledgeBaseError(f"{prefix}eco_class must be one of {ECO_PRIORITY}")
    if not str(data["pest"]).strip():
        raise KnowledgeBaseError(f"{prefix}pest must be non-empty")
    if not str(data["recommendation"]).strip():
        raise KnowledgeBaseError(f"{prefix}recommendation must be non-empty")
    tags = data["condition_tags"]
    if isinstance(tags, str) or not all(t in CONDITION_TAGS for t in tags):
        raise KnowledgeBaseError(f"{prefix}condition_tags must be a list drawn from {CONDITION_TAGS}")
    return Rule(data["crop"], data["pest"], data["scientific_name"], data["growth_stage"],
                frozenset(tags), data["recommendation"], data["eco_class"],
                tuple(data.get("aliases", ())))


@dataclass
class KnowledgeBase:
    rules: list[Rule]
    source: str = "<memory>"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for rule in self.rules:
            if rule.key in seen:
                raise DuplicateRuleError(f"{self.source}: duplicate rule key {rule.key}")
            seen[rule.key] = rule

    def __len__(self):
        return len(self.rules)

    def for_pest(self, crop: str, pest: str) -> list[Rule]:
        name = normalize_name(pest)
        crop = crop.strip().casefold()
        return [r for r in self.rules if r.crop == crop and name in r.names()]


def default_kb_path() -> Path:
    return Path(os.environ.get(KB_ENV_VAR) or DEFAULT_KB_PATH)


def load_knowledge_base(path=None) -> KnowledgeBase:
    path = Path(path) if path is not None else default_kb_path()
    if not path.is_file():
        raise FileNotFoundError(f"knowledge base {path} not found")
    rules, keys = [], {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise KnowledgeBaseError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise KnowledgeBaseError(f"{path}:{lineno}: expected a JSON object")
        rule = rule_from_dict(data, f"{path}:{lineno}")
        if rule.key in keys:
            raise DuplicateRuleError(
                f"{path}:{lineno}: duplicate rule {rule.crop}/{rule.pest}/{rule.growth_stage}/"
                f"{','.join(sorted(rule.condition_tags))} (first defined on line {keys[rule.key]})")
        keys[rule.key] = lineno
        rules.append(rule)
    kb = KnowledgeBase(rules, str(path))
    if not rules:
        msg = f"knowledge base {path} contains no rules"
        kb.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    return kb


@dataclass(frozen=True)
class RecommendationQuery:
    crop: str
    pest: str
    growth_stage: str = "any"
    conditions: frozenset[str] = frozenset()
    severity: str | None = None

    def __post_init__(self):
        if not self.crop.strip() or not self.pest.strip():
            raise ValueError("crop and pest must be non-empty")
        if self.growth_stage not in GROWTH_STAGES:
            raise ValueError(f"growth_stage must be one of {GROWTH_STAGES}")
        if self.severity is not None and self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}")
        object.__setattr__(self, "conditions", parse_conditions(self.conditions))


@dataclass(frozen=True)
class Recommendation:
    rule: Rule
    recommendation: str
    eco_class: str
    caveat: str
    status: str = "match"  # match | stage_mismatch | condition_mismatch
    advisory: str | None = None
    uncertain: bool = False

    @property
    def is_match(self) -> bool:
        return self.status == "match"

    def lines(self) -> list[str]:
        out = [
            f"status: {self.status}",
            f"crop: {self.rule.crop}",
            f"pest: {self.rule.pest} ({self.rule.scientific_name})",
            f"growth_stage: {self.rule.growth_stage}",
            f"conditions: {','.join(sorted(self.rule.condition_tags)) or 'any'}",
            f"recommendation: {self.recommendation}",
            f"eco_class: {self.eco_class}",
        ]
        if self.advisory:
            out.append(f"advisory: {self.advisory}")
        out.append(f"caveat: {self.caveat}")
        return out


def _caveat(severity: str | None) -> str:
    if severity:
        return f"{CAVEAT} Reported severity: {severity}."
    return CAVEAT


def recommend(query: RecommendationQuery, kb: KnowledgeBase) -> Recommendation:
    candidates = kb.for_pest(query.crop, query.pest)
    if not candidates:
        raise NoRuleFound(query.crop, query.pest)
    caveat = _caveat(query.severity)
    full = [r for r in candidates
            if r.stage_matches(query.growth_stage) and r.conditions_match(query.conditions)]
    if full:
        best = min(full, key=lambda r: ECO_PRIORITY.index(r.eco_class))
        return Recommendation(best, best.recommendation, best.eco_class, caveat)

    def closeness(indexed):
        i, r = indexed
        return (r.stage_matches(query.growth_stage), len(r.condition_tags & query.conditions), -i)

    _, closest = max(enumerate(candidates), key=closeness)
    if not closest.stage_matches(query.growth_stage):
        status = "stage_mismatch"
        advisory = (f"no rule for {closest.pest} at stage {query.growth_stage}; "
                    f"closest rule applies at {closest.growth_stage}")
    else:
        status = "condition_mismatch"
        advisory = (f"conditions {sorted(query.conditions) or ['none']} do not satisfy the "
                    f"closest rule's {sorted(closest.condition_tags)}")
    return Recommendation(closest, closest.recommendation, closest.eco_class, caveat,
                          status, advisory)


@dataclass
class DetectionResult:
    distribution: ClassDistribution
    label: str
    recommendation: Recommendation | None
    error: Exception | None = None

    @property
    def uncertain(self) -> bool:
        return self.recommendation is not None and self.recommendation.uncertain


def pest_name(label) -> str:
    """Class label -> pest name (drops a ``crop/`` prefix)."""
    return str(label).rsplit("/", 1)[-1]


def recommend_from_detection(image: torch.Tensor, supports: PrototypeSet | Mapping[str, torch.Tensor],
                             crop: str, growth_stage: str, conditions, kb: KnowledgeBase,
                             embed, severity: str | None = None, threshold: float = 0.5,
                             metric: str = "sqeuclidean") -> DetectionResult:
    """Classify ``image`` against the supports and look up a recommendation.

    ``supports`` is either a ready :class:`PrototypeSet` or a mapping of
    label to a batch of preprocessed support images. A missing rule is
    reported in ``error`` next to the distribution instead of being raised.
    """
    with torch.no_grad():
        if isinstance(supports, PrototypeSet):
            protos = supports
        else:
            protos = compute_prototypes({label: embed(imgs) for label, imgs in supports.items()})
        query = embed(image.unsqueeze(0) if image.dim() == 3 else image)[0]
        dist = classify_query(query.to(protos.vectors.dtype), protos, metric)
    label = dist.top_label()
    q = RecommendationQuery(crop, pest_name(label), growth_stage, conditions, severity)
    try:
        rec = recommend(q, kb)
    except NoRuleFound as exc:
        return DetectionResult(dist, label, None, exc)
    if dist.max_probability() < threshold:
        rec = Recommendation(
            rec.rule, rec.recommendation, rec.eco_class,
            f"{rec.caveat} Detection confidence {dist.max_probability():.2f} is below "
            f"{threshold:.2f}; confirm the pest before treating.",
            rec.status, rec.advisory, uncertain=True)
    return DetectionResult(dist, label, rec)


def query_from_rule(rule: Rule) -> RecommendationQuery:
    return RecommendationQuery(rule.crop, rule.pest, rule.growth_stage, rule.condition_tags)

