"""End-to-end text grounding: prompt -> mask, view and 3D centroid."""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

import numerics as nx
from config import SpatialConfig
from errors import ResolutionError
from gasa import GasaModel, Prediction, decode, select_mask
from geometry import DepthMap, mask_weighted_centroid, unproject
from scenegen import ClassTable, SceneSample
from spatial import (CandidateObject, Query, build_candidate, dedupe_candidates, gt_candidates,
                     parse_query, resolve_qualifier, resolve_relation)


@dataclass
class GroundingResult:
    query: Query
    class_id: int
    view: int
    mask: np.ndarray
    centroid: np.ndarray
    selected: int                 # query index, or instance id for ground-truth grounding
    satisfied: Optional[bool] = None
    prediction: Optional[Prediction] = None


def resolve_class(table: ClassTable, noun: str) -> int:
    """Class id for a noun, accepting a trailing plural 's'."""
    for candidate in (noun, noun[:-1] if noun.endswith("s") else None):
        if candidate and candidate in table.names[1:]:
            return table.names.index(candidate)
    raise ResolutionError(f"Unknown object class '{noun}' (known: {', '.join(table.names[1:])})")


def prediction_candidates(prediction: Prediction, sample: SceneSample, view: int,
                          config: SpatialConfig) -> List[CandidateObject]:
    """One candidate per predicted query mask in `view`, low-confidence and duplicate masks removed."""
    scene_view = sample.views[view]
    points = sample.tokens().point_maps[view]
    candidates = [
        build_candidate(prediction.masks[q, view], scene_view.depth, points, prediction.confidences[q], source=q)
        for q in range(prediction.masks.shape[0])
    ]
    confident = [c for c in candidates if c.confidence >= config.min_confidence and c.pixel_count > 0]
    if confident:
        candidates = confident
    return dedupe_candidates(candidates, config.duplicate_iou)


def _memory(model: GasaModel, sample: SceneSample):
    with nx.no_grad():
        return model.encode(sample.tokens(model.config.block_size))


def _finish(query: Query, class_id: int, prediction: Prediction, q: int, sample: SceneSample,
            satisfied: Optional[bool] = None) -> GroundingResult:
    v = int(np.argmax(prediction.view_scores[q]))
    mask = prediction.masks[q, v]
    centroid = mask_weighted_centroid(mask, sample.tokens().point_maps[v])
    return GroundingResult(query=query, class_id=class_id, view=v, mask=mask, centroid=centroid,
                           selected=q, satisfied=satisfied, prediction=prediction)


def ground_query(model: GasaModel, sample: SceneSample, text: str, config: Optional[SpatialConfig] = None,
                 object_aware: bool = False) -> GroundingResult:
    """Run a text prompt through the decoder and pick the answering mask.

    Relational prompts always resolve over candidates built from the predicted
    masks; qualifier prompts do so only when `object_aware` is set.
    """
    config = config or SpatialConfig()
    query = parse_query(text)
    table = sample.class_table
    memory = _memory(model, sample)
    ref_view = config.reference_view

    if query.relation is not None:
        target_id = resolve_class(table, query.relation.target)
        reference_id = resolve_class(table, query.relation.reference)
        target_pred = decode(model, memory, table.vectors[target_id], 0)
        reference_pred = decode(model, memory, table.vectors[reference_id], 0)
        targets = prediction_candidates(target_pred, sample, ref_view, config)
        references = prediction_candidates(reference_pred, sample, ref_view, config)
        index, satisfied = resolve_relation(targets, references, query.relation.kind, config)
        return _finish(query, target_id, target_pred, targets[index].source, sample, satisfied)

    class_id = resolve_class(table, query.base_noun)
    prediction = decode(model, memory, table.vectors[class_id], query.embedding_index)
    if object_aware and query.qualifier is not None:
        candidates = prediction_candidates(prediction, sample, ref_view, config)
        index = resolve_qualifier(candidates, query.qualifier)
        return _finish(query, class_id, prediction, candidates[index].source, sample)
    q, _ = select_mask(prediction)
    return _finish(query, class_id, prediction, q, sample)


def ground_query_oracle(sample: SceneSample, text: str, config: Optional[SpatialConfig] = None
                        ) -> GroundingResult:
    """Resolve a prompt over ground-truth instance masks instead of predictions."""
    config = config or SpatialConfig()
    query = parse_query(text)
    table = sample.class_table
    view = config.reference_view
    satisfied = None

    if query.relation is not None:
        class_id = resolve_class(table, query.relation.target)
        reference_id = resolve_class(table, query.relation.reference)
        targets = gt_candidates(sample, [o.instance_id for o in sample.instances_of(class_id)], view)
        references = gt_candidates(sample, [o.instance_id for o in sample.instances_of(reference_id)], view)
        index, satisfied = resolve_relation(targets, references, query.relation.kind, config)
        chosen = targets[index]
    else:
        class_id = resolve_class(table, query.base_noun)
        candidates = gt_candidates(sample, [o.instance_id for o in sample.instances_of(class_id)], view)
        if not candidates:
            raise ResolutionError(f"No '{query.base_noun}' is visible in view {view}")
        index = resolve_qualifier(candidates, query.qualifier) if query.qualifier else 0
        chosen = candidates[index]

    scene_view = sample.views[view]
    points = unproject(scene_view.camera, DepthMap(scene_view.depth.astype(np.float64)))
    return GroundingResult(
        query=query, class_id=class_id, view=view, mask=chosen.mask,
        centroid=mask_weighted_centroid(chosen.mask, points), selected=chosen.source, satisfied=satisfied,
    )
