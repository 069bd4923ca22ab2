"""Evaluation: mIoU, mAcc, centroid error and the oracle-selection gap."""
import json
import os
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

import numerics as nx
from config import EvalProtocol, SpatialConfig
from errors import ResolutionError
from gasa import GasaModel, Prediction, decode, mask_iou, query_ious, select_mask, view_scores
from geometry import mask_weighted_centroid
from grounding import ground_query_oracle, prediction_candidates
from scenegen import SceneSample
from spatial import describe_instance, parse_query, resolve_qualifier


class Predictor(Protocol):
    def predict(self, sample: SceneSample, prompt: str, class_id: int, qualifier_index: int) -> Prediction:
        ...


class ModelPredictor:
    """Wraps a GasaModel; the encoder memory is computed once per scene, also across worker threads."""

    def __init__(self, model: GasaModel):
        self.model = model
        self._memory: Dict[str, object] = {}
        self._lock = threading.Lock()

    def memory(self, sample: SceneSample):
        with self._lock:
            if sample.scene_id not in self._memory:
                with nx.no_grad():
                    self._memory[sample.scene_id] = self.model.encode(sample.tokens(self.model.config.block_size))
            return self._memory[sample.scene_id]

    def predict(self, sample: SceneSample, prompt: str, class_id: int, qualifier_index: int) -> Prediction:
        return decode(self.model, self.memory(sample), sample.text_embedding(class_id), qualifier_index)


def prediction_from_masks(sample: SceneSample, masks: np.ndarray, confidences: np.ndarray,
                          threshold: float = 0.5) -> Prediction:
    """Build a Prediction from explicit (Q, V, H, W) masks, e.g. for baselines."""
    masks = np.asarray(masks, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    scores = view_scores(masks, confidences, threshold)
    q = int(np.argmax(confidences))
    v = int(np.argmax(scores[q]))
    points = sample.tokens().point_maps[v]
    centroid, weight = mask_weighted_centroid(masks[q, v], points, return_weight=True)
    return Prediction(masks=masks, confidences=confidences, presence=float(confidences.max()),
                      view_scores=scores, best_query=q, best_view=v, centroid=centroid,
                      regressed_centroid=centroid.copy(), centroid_weight=weight)


class GroundTruthPredictor:
    """Baseline that answers every prompt with the ground-truth instance it resolves to."""

    def __init__(self, config: Optional[SpatialConfig] = None):
        self.config = config or SpatialConfig()

    def predict(self, sample: SceneSample, prompt: str, class_id: int, qualifier_index: int) -> Prediction:
        try:
            selected = ground_query_oracle(sample, prompt, self.config).selected
        except ResolutionError:
            # class not visible in the reference view
            selected = sample.instances_of(class_id)[0].instance_id
        masks = sample.gt_masks(selected).astype(np.float64)
        return prediction_from_masks(sample, masks[None], np.ones(1))


@dataclass
class ObjectResult:
    scene_id: str
    instance_id: int
    class_id: int
    prompt: str
    iou: float
    oracle_iou: float
    accuracy: float
    centroid_error: float


@dataclass
class EvalReport:
    """Aggregate metrics plus per-object and per-scene rows."""

    miou: float
    macc: float
    oracle_miou: float
    centroid_error_mean: float
    centroid_error_median: float
    objects: List[ObjectResult] = field(default_factory=list)
    rows: List[Dict] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.oracle_miou - self.miou

    def summary(self) -> Dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "oracle_miou": self.oracle_miou,
            "gap": self.gap,
            "centroid_error_mean": self.centroid_error_mean,
            "centroid_error_median": self.centroid_error_median,
        }

    def to_dict(self) -> Dict:
        data = self.summary()
        data["rows"] = self.rows
        data["objects"] = [vars(o) for o in self.objects]
        return data

    def format_table(self) -> str:
        lines = [f"{'scene':<16}{'objects':>8}{'mIoU':>8}{'oracle':>8}{'cent.err':>10}"]
        for row in self.rows:
            lines.append(f"{row['scene_id']:<16}{row['objects']:>8}{row['miou']:>8.3f}"
                         f"{row['oracle_miou']:>8.3f}{row['centroid_error']:>10.3f}")
        lines.append("-" * 50)
        lines.append(f"mIoU {self.miou:.4f}  mAcc {self.macc:.4f}  oracle {self.oracle_miou:.4f}  "
                     f"gap {self.gap:.4f}")
        lines.append(f"centroid error: mean {self.centroid_error_mean:.3f} m, "
                     f"median {self.centroid_error_median:.3f} m")
        return "\n".join(lines)

    def write_json(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def _select(prediction: Prediction, sample: SceneSample, prompt: str, spatial: SpatialConfig,
            object_aware: bool) -> Tuple[int, int]:
    if object_aware:
        query = parse_query(prompt)
        if query.qualifier is not None:
            candidates = prediction_candidates(prediction, sample, spatial.reference_view, spatial)
            q = candidates[resolve_qualifier(candidates, query.qualifier)].source
            return q, int(np.argmax(prediction.view_scores[q]))
    return select_mask(prediction)


def evaluate_object(predictor: Predictor, sample: SceneSample, instance_id: int, protocol: EvalProtocol,
                    spatial: SpatialConfig) -> ObjectResult:
    obj = sample.object(instance_id)
    prompt, index = describe_instance(sample, instance_id, spatial)
    prediction = predictor.predict(sample, prompt, obj.class_id, index)
    gt = sample.gt_masks(instance_id)

    q, v = _select(prediction, sample, prompt, spatial, protocol.object_aware)
    predicted = prediction.masks[q] > protocol.threshold
    ious = query_ious(prediction.masks, gt, protocol.threshold)
    gt_pixels = int(gt.sum())
    accuracy = float(np.logical_and(predicted, gt).sum() / gt_pixels) if gt_pixels else 1.0
    centroid = mask_weighted_centroid(prediction.masks[q, v], sample.tokens().point_maps[v])
    return ObjectResult(
        scene_id=sample.scene_id, instance_id=instance_id, class_id=obj.class_id, prompt=prompt,
        iou=mask_iou(predicted, gt), oracle_iou=float(ious.max()), accuracy=accuracy,
        centroid_error=float(np.linalg.norm(centroid - obj.center)),
    )


def _object_ids(sample: SceneSample, protocol: EvalProtocol, seed: int) -> List[int]:
    ids = [obj.instance_id for obj in sample.objects]
    if protocol.object_sampling == "all" or len(ids) <= protocol.objects_per_scene:
        return ids
    rng = np.random.default_rng([seed, zlib.crc32(sample.scene_id.encode("utf-8"))])
    chosen = rng.choice(len(ids), size=protocol.objects_per_scene, replace=False)
    return [ids[i] for i in sorted(chosen)]


def aggregate(objects: Sequence[ObjectResult]) -> EvalReport:
    if not objects:
        return EvalReport(miou=0.0, macc=0.0, oracle_miou=0.0, centroid_error_mean=0.0,
                          centroid_error_median=0.0)
    per_class: Dict[int, List[float]] = {}
    for o in objects:
        per_class.setdefault(o.class_id, []).append(o.accuracy)
    errors = np.array([o.centroid_error for o in objects])

    rows = []
    for scene_id in dict.fromkeys(o.scene_id for o in objects):
        scene = [o for o in objects if o.scene_id == scene_id]
        rows.append({
            "scene_id": scene_id,
            "objects": len(scene),
            "miou": float(np.mean([o.iou for o in scene])),
            "oracle_miou": float(np.mean([o.oracle_iou for o in scene])),
            "centroid_error": float(np.mean([o.centroid_error for o in scene])),
        })
    return EvalReport(
        miou=float(np.mean([o.iou for o in objects])),
        macc=float(np.mean([np.mean(v) for v in per_class.values()])),
        oracle_miou=float(np.mean([o.oracle_iou for o in objects])),
        centroid_error_mean=float(errors.mean()),
        centroid_error_median=float(np.median(errors)),
        objects=list(objects), rows=rows,
    )


def evaluate(model_or_predictor, samples: Sequence[SceneSample], protocol: Optional[EvalProtocol] = None,
             spatial: Optional[SpatialConfig] = None, workers: int = 1) -> EvalReport:
    """Evaluate a model (or any object with a `predict` method) on a set of scenes.

    Every object gets the prompt `describe_instance` produces. With random object
    sampling, results are pooled over all `sampling_seeds`.
    """
    protocol = protocol or EvalProtocol()
    spatial = spatial or SpatialConfig()
    predictor = ModelPredictor(model_or_predictor) if isinstance(model_or_predictor, GasaModel) \
        else model_or_predictor
    seeds = protocol.sampling_seeds if protocol.object_sampling == "random" else [0]

    def run_scene(sample: SceneSample) -> List[ObjectResult]:
        results = []
        for seed in seeds:
            for instance_id in _object_ids(sample, protocol, seed):
                results.append(evaluate_object(predictor, sample, instance_id, protocol, spatial))
        return results

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(run_scene, samples))
    else:
        per_scene = [run_scene(sample) for sample in samples]
    return aggregate([o for scene in per_scene for o in scene])
