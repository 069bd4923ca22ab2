"""Rule-based spatial language: qualifier and relation parsing, geometric resolution,
ground-truth-verified prompt augmentation, and object-aware mask selection."""
import json
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import SpatialConfig
from errors import DatasetVersionError, QueryParseError, ResolutionError
from geometry import DepthMap, PointMap, mask_weighted_centroid, unproject

VOCABULARY_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "spatial_vocabulary.json")
VOCABULARY_VERSION = 1

ARTICLES = ("the ", "a ", "an ")


@dataclass(frozen=True)
class QualifierEntry:
    phrase: str
    kind: str
    index: int


@dataclass(frozen=True)
class Qualifier:
    kind: str
    index: int
    phrase: str = ""


@dataclass(frozen=True)
class Relation:
    target: str
    kind: str
    reference: str


@dataclass(frozen=True)
class Query:
    raw_text: str
    base_noun: str
    qualifier: Optional[Qualifier] = None
    relation: Optional[Relation] = None

    @property
    def embedding_index(self) -> int:
        return self.qualifier.index if self.qualifier else 0


@dataclass
class Vocabulary:
    qualifiers: List[QualifierEntry]   # longest phrase first
    relations: List[Tuple[str, List[str]]]
    patterns: List[Tuple[str, "re.Pattern"]] = field(default_factory=list)
    by_file_order: List[QualifierEntry] = field(default_factory=list)

    def canonical_phrase(self, kind: str) -> str:
        for entry in self.by_file_order:
            if entry.kind == kind:
                return entry.phrase
        raise KeyError(f"Unknown qualifier kind '{kind}'")

    def phrases_for(self, kind: str) -> List[str]:
        return [e.phrase for e in self.by_file_order if e.kind == kind]

    def index_of(self, kind: str) -> int:
        for entry in self.qualifiers:
            if entry.kind == kind:
                return entry.index
        raise KeyError(f"Unknown qualifier kind '{kind}'")

    @property
    def kinds(self) -> List[str]:
        seen: List[str] = []
        for entry in self.by_file_order:
            if entry.kind not in seen:
                seen.append(entry.kind)
        return seen

    @property
    def relation_kinds(self) -> List[str]:
        return [kind for kind, _ in self.relations]

    def relation_phrase(self, kind: str) -> str:
        for name, phrases in self.relations:
            if name == kind:
                return phrases[0]
        raise KeyError(f"Unknown relation '{kind}'")


@lru_cache(maxsize=4)
def load_vocabulary(path: str = VOCABULARY_PATH) -> Vocabulary:
    with open(path, "r") as f:
        data = json.load(f)
    if data.get("version") != VOCABULARY_VERSION:
        raise DatasetVersionError(
            f"Spatial vocabulary {path} has version {data.get('version')!r}, expected {VOCABULARY_VERSION}"
        )
    entries = [QualifierEntry(e["phrase"], e["kind"], int(e["index"])) for e in data["qualifiers"]]
    relations = [(r["kind"], list(r["phrases"])) for r in data["relations"]]
    patterns = []
    for kind, phrases in relations:
        alternatives = "|".join(re.escape(p).replace(r"\ ", r"\s+") for p in sorted(phrases, key=len, reverse=True))
        patterns.append((kind, re.compile(rf"^(?P<target>.+?)\s+(?:{alternatives})\s+(?P<reference>.+)$")))
    return Vocabulary(
        qualifiers=sorted(entries, key=lambda e: len(e.phrase), reverse=True),
        relations=relations,
        patterns=patterns,
        by_file_order=entries,
    )


def _strip_article(text: str) -> str:
    for article in ARTICLES:
        if text.startswith(article):
            return text[len(article):].strip()
    return text


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def parse_query(text: str, vocabulary: Optional[Vocabulary] = None) -> Query:
    """Relations first, then the longest matching qualifier prefix, else a plain noun."""
    vocabulary = vocabulary or load_vocabulary()
    clean = normalize(text or "")
    if not clean:
        raise QueryParseError("Empty query")

    for kind, pattern in vocabulary.patterns:
        match = pattern.match(clean)
        if match:
            target = _strip_article(match.group("target"))
            reference = _strip_article(match.group("reference"))
            if target and reference:
                return Query(raw_text=text, base_noun=target, relation=Relation(target, kind, reference))

    body = _strip_article(clean)
    for entry in vocabulary.qualifiers:
        if body.startswith(entry.phrase + " "):
            noun = _strip_article(body[len(entry.phrase) + 1:].strip())
            if noun:
                return Query(raw_text=text, base_noun=noun,
                             qualifier=Qualifier(entry.kind, entry.index, entry.phrase))
    return Query(raw_text=text, base_noun=body)


# ---------------------------------------------------------------------------
# Candidates and resolution
# ---------------------------------------------------------------------------

@dataclass
class CandidateObject:
    mask: np.ndarray                 # (H, W) probabilities in the reference view
    centroid_2d: Tuple[float, float]  # normalized to [0, 1]
    depth_at_centroid: float
    centroid_3d: np.ndarray
    pixel_count: int
    confidence: float
    source: int = -1                 # instance id or query index it came from


def build_candidate(mask: np.ndarray, depth: np.ndarray, points: PointMap, confidence: float,
                    threshold: float = 0.5, source: int = -1) -> CandidateObject:
    """Spatial context of one mask: 2D centroid, depth there, 3D centroid, size."""
    mask = np.asarray(mask, dtype=np.float64)
    height, width = mask.shape
    inside = mask > threshold
    count = int(inside.sum())
    if count:
        ys, xs = np.nonzero(inside)
        cx, cy = xs.mean(), ys.mean()
    elif mask.sum() > 0:
        ys, xs = np.mgrid[0:height, 0:width]
        cx, cy = (mask * xs).sum() / mask.sum(), (mask * ys).sum() / mask.sum()
    else:
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    px, py = int(round(cx)), int(round(cy))
    if count and inside[py, px]:
        d = float(depth[py, px])
    elif count:
        d = float(depth[inside].mean())
    else:
        d = float(depth[py, px])
    return CandidateObject(
        mask=mask,
        centroid_2d=(float((cx + 0.5) / width), float((cy + 0.5) / height)),
        depth_at_centroid=d,
        centroid_3d=mask_weighted_centroid(mask, points),
        pixel_count=count,
        confidence=float(confidence),
        source=source,
    )


_BASE_RULES = {
    # kind: (key over a candidate, descending?)
    "nearest": (lambda c: c.depth_at_centroid, False),
    "farthest": (lambda c: c.depth_at_centroid, True),
    "leftmost": (lambda c: c.centroid_2d[0], False),
    "rightmost": (lambda c: c.centroid_2d[0], True),
    "topmost": (lambda c: c.centroid_2d[1], False),
    "bottommost": (lambda c: c.centroid_2d[1], True),
    "largest": (lambda c: c.pixel_count, True),
    "smallest": (lambda c: c.pixel_count, False),
}


def _ranked(candidates: Sequence[CandidateObject], key, descending: bool) -> List[int]:
    """Indices ordered by key, ties to higher confidence then lower index."""
    sign = -1.0 if descending else 1.0
    return sorted(range(len(candidates)),
                  key=lambda i: (sign * key(candidates[i]), -candidates[i].confidence, i))


def resolve_qualifier(candidates: Sequence[CandidateObject], qualifier: Union[Qualifier, str]) -> int:
    if not candidates:
        raise ResolutionError("No candidates to resolve a qualifier over")
    kind = qualifier.kind if isinstance(qualifier, Qualifier) else qualifier

    if kind == "center":
        mean = np.mean([c.centroid_2d for c in candidates], axis=0)
        return _ranked(candidates, lambda c: float(np.hypot(*(np.asarray(c.centroid_2d) - mean))), False)[0]
    if kind == "mid_depth":
        order = _ranked(candidates, _BASE_RULES["nearest"][0], False)
        return order[(len(order) - 1) // 2]
    ordinal = kind.startswith("second_")
    base = kind[len("second_"):] if ordinal else kind
    if base not in _BASE_RULES:
        raise ResolutionError(f"Unknown qualifier '{kind}'")
    order = _ranked(candidates, *_BASE_RULES[base])
    if ordinal and len(order) > 1:
        return order[1]
    return order[0]


def _best_confidence(candidates: Sequence[CandidateObject], indices: Sequence[int]) -> int:
    return min(indices, key=lambda i: (-candidates[i].confidence, i))


def relation_holds(target: CandidateObject, reference: CandidateObject, kind: str,
                   config: Optional[SpatialConfig] = None) -> bool:
    config = config or SpatialConfig()
    tx, ty = target.centroid_2d
    rx, ry = reference.centroid_2d
    if kind == "left_of":
        return tx < rx
    if kind == "right_of":
        return tx > rx
    if kind == "above":
        return ty < ry
    if kind == "below":
        return ty > ry
    if kind == "in_front_of":
        return target.depth_at_centroid < reference.depth_at_centroid
    if kind == "behind":
        return target.depth_at_centroid > reference.depth_at_centroid
    offset = np.asarray(target.centroid_3d) - np.asarray(reference.centroid_3d)
    if kind == "near":
        return float(np.linalg.norm(offset)) < config.near_threshold
    if kind == "on_top_of":
        horizontal = np.delete(offset, config.up_axis)
        return ty < ry and float(np.linalg.norm(horizontal)) < config.on_top_threshold
    raise ResolutionError(f"Unknown relation '{kind}'")


def resolve_relation(targets: Sequence[CandidateObject], references: Sequence[CandidateObject],
                     relation_kind: str, config: Optional[SpatialConfig] = None) -> Tuple[int, bool]:
    """(target index, satisfied). Unsatisfied falls back to the best-confidence target."""
    if not targets or not references:
        raise ResolutionError("Relation needs at least one target and one reference candidate")
    reference = references[_best_confidence(references, range(len(references)))]
    holding = [i for i, t in enumerate(targets) if relation_holds(t, reference, relation_kind, config)]
    if holding:
        return _best_confidence(targets, holding), True
    return _best_confidence(targets, range(len(targets))), False


# ---------------------------------------------------------------------------
# Ground-truth candidates and augmentation
# ---------------------------------------------------------------------------

def gt_candidates(sample, instance_ids: Sequence[int], view: int = 0) -> List[CandidateObject]:
    """Candidates from GT masks in one view; instances not visible there are skipped."""
    scene_view = sample.views[view]
    points = unproject(scene_view.camera, DepthMap(scene_view.depth.astype(np.float64)))
    out = []
    for instance_id in instance_ids:
        mask = (scene_view.instance_ids == instance_id).astype(np.float64)
        if mask.sum() == 0:
            continue
        out.append(build_candidate(mask, scene_view.depth, points, 1.0, source=instance_id))
    return out


@dataclass
class Augmentation:
    prompt: str
    qualifier_index: int
    kind: str          # qualifier kind or relation kind
    relational: bool = False


DEPTH_KINDS = ("nearest", "farthest", "second_nearest", "second_farthest", "mid_depth")


def _depth_separated(candidates: Sequence[CandidateObject], target_position: int, depth_tie: float) -> bool:
    depth = candidates[target_position].depth_at_centroid
    return all(abs(c.depth_at_centroid - depth) > depth_tie
               for i, c in enumerate(candidates) if i != target_position)


def valid_qualifiers(candidates: Sequence[CandidateObject], target_position: int,
                     vocabulary: Optional[Vocabulary] = None, depth_tie: Optional[float] = None) -> List[str]:
    """Qualifier kinds that the resolver maps back to the target.

    Depth kinds also need the target's depth to differ from every other
    candidate's by more than `depth_tie` meters; closer depths count as a tie.
    """
    vocabulary = vocabulary or load_vocabulary()
    depth_tie = SpatialConfig().depth_tie if depth_tie is None else depth_tie
    separated = _depth_separated(candidates, target_position, depth_tie)
    return [kind for kind in vocabulary.kinds
            if resolve_qualifier(candidates, kind) == target_position and (separated or kind not in DEPTH_KINDS)]


def gt_aware_augment(sample, target_instance: int, rng: np.random.Generator, p: float = 0.3,
                     multi_instance_only: bool = True, config: Optional[SpatialConfig] = None,
                     vocabulary: Optional[Vocabulary] = None) -> Optional[Augmentation]:
    """Maybe prepend a qualifier (or build a relational prompt) that is true for the target."""
    config = config or SpatialConfig()
    vocabulary = vocabulary or load_vocabulary()
    target = sample.object(target_instance)
    name = sample.class_name(target.class_id)
    view = config.reference_view

    same_class = [obj.instance_id for obj in sample.instances_of(target.class_id)]
    candidates = gt_candidates(sample, same_class, view)
    sources = [c.source for c in candidates]
    if target_instance not in sources:
        return None
    position = sources.index(target_instance)

    options: List[Augmentation] = []
    if not (multi_instance_only and len(same_class) == 1):
        for kind in valid_qualifiers(candidates, position, vocabulary, config.depth_tie):
            phrases = vocabulary.phrases_for(kind)
            phrase = phrases[int(rng.integers(len(phrases)))]
            options.append(Augmentation(f"{phrase} {name}", vocabulary.index_of(kind), kind))

    target_center = target.center
    for class_id in sorted({obj.class_id for obj in sample.objects if obj.class_id != target.class_id}):
        others = [obj for obj in sample.instances_of(class_id)]
        references = gt_candidates(sample, [o.instance_id for o in others], view)
        if not references:
            continue
        chosen = references[_best_confidence(references, range(len(references)))]
        if np.linalg.norm(sample.object(chosen.source).center - target_center) > config.relation_radius:
            continue
        for kind in vocabulary.relation_kinds:
            index, satisfied = resolve_relation(candidates, references, kind, config)
            if satisfied and index == position:
                ref_name = sample.class_name(class_id)
                prompt = f"{name} {vocabulary.relation_phrase(kind)} the {ref_name}"
                options.append(Augmentation(prompt, 0, kind, relational=True))

    if not options or rng.random() >= p:
        return None
    return options[int(rng.integers(len(options)))]


def describe_instance(sample, instance_id: int, config: Optional[SpatialConfig] = None,
                      vocabulary: Optional[Vocabulary] = None) -> Tuple[str, int]:
    """Evaluation prompt: the plain noun when the class is unique, else the first valid qualifier."""
    config = config or SpatialConfig()
    vocabulary = vocabulary or load_vocabulary()
    target = sample.object(instance_id)
    name = sample.class_name(target.class_id)
    same_class = [obj.instance_id for obj in sample.instances_of(target.class_id)]
    if len(same_class) == 1:
        return name, 0
    candidates = gt_candidates(sample, same_class, config.reference_view)
    sources = [c.source for c in candidates]
    if instance_id in sources:
        kinds = valid_qualifiers(candidates, sources.index(instance_id), vocabulary, config.depth_tie)
        if kinds:
            return f"{vocabulary.canonical_phrase(kinds[0])} {name}", vocabulary.index_of(kinds[0])
    return name, 0


def dedupe_candidates(candidates: Sequence[CandidateObject], iou_threshold: float = 0.7,
                      threshold: float = 0.5) -> List[CandidateObject]:
    """Drop candidates whose mask overlaps a higher-confidence one above iou_threshold."""
    kept: List[CandidateObject] = []
    for cand in sorted(candidates, key=lambda c: (-c.confidence, c.source)):
        mask = cand.mask > threshold
        duplicate = False
        for other in kept:
            other_mask = other.mask > threshold
            union = np.logical_or(mask, other_mask).sum()
            if union and np.logical_and(mask, other_mask).sum() / union > iou_threshold:
                duplicate = True
                break
        if not duplicate:
            kept.append(cand)
    return kept
