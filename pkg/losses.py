"""Training objective: segmentation, ranking and localization terms."""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

import numerics as nx
from config import LossWeights
from gasa import query_ious

PROB_CLAMP = 1e-7

TERMS = ("focal", "dice", "align", "contrastive", "centroid", "presence")

_WEIGHT_FIELDS = {
    "focal": "lambda_focal",
    "dice": "lambda_dice",
    "align": "lambda_align",
    "contrastive": "lambda_contrastive",
    "centroid": "lambda_centroid",
    "presence": "lambda_presence",
}


def _clamp(p) -> nx.DualTensor:
    return nx.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _zero() -> nx.DualTensor:
    return nx.DualTensor(0.0)


def focal_loss(pred_prob, target_mask: np.ndarray, alpha: float = 0.75, gamma: float = 2.0) -> nx.DualTensor:
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t."""
    p = _clamp(pred_prob)
    t = np.asarray(target_mask, dtype=np.float64)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    per_pixel = (1.0 - p_t) ** gamma * nx.log(p_t) * (-alpha_t)
    return nx.mean(per_pixel)


def dice_loss(pred_prob, target_mask: np.ndarray, epsilon: float = 1.0) -> nx.DualTensor:
    """1 - (2 sum(P M) + eps) / (sum(P) + sum(M) + eps)."""
    p = nx.as_dual(pred_prob)
    t = np.asarray(target_mask, dtype=np.float64)
    overlap = nx.sum(p * t)
    ratio = (overlap * 2.0 + epsilon) / (nx.sum(p) + (float(t.sum()) + epsilon))
    return 1.0 - ratio


def query_ranks(ious: np.ndarray) -> np.ndarray:
    """Rank of each query by IoU descending (best = 0), ties to the lower query index."""
    ious = np.asarray(ious, dtype=np.float64)
    order = np.lexsort((np.arange(len(ious)), -ious))
    ranks = np.empty(len(ious), dtype=np.int64)
    ranks[order] = np.arange(len(ious))
    return ranks


def align_target(confidence: np.ndarray, ious: np.ndarray, ranks: np.ndarray,
                 alpha: float = 0.5, tau: float = 2.0) -> np.ndarray:
    """t_c = exp(-r / tau) * p^alpha * u^(1 - alpha), a constant target."""
    p = np.clip(np.asarray(confidence, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    u = np.asarray(ious, dtype=np.float64)
    return np.exp(-np.asarray(ranks, dtype=np.float64) / tau) * p ** alpha * u ** (1.0 - alpha)


def align_loss(confidences, ious: np.ndarray, ranks: np.ndarray, alpha: float = 0.5,
               tau: float = 2.0, gamma: float = 2.0) -> nx.DualTensor:
    p = _clamp(confidences)
    t_c = align_target(p.value, ious, ranks, alpha, tau)
    positive = (1.0 - p) ** gamma * nx.log(p) * (-t_c)
    negative = p ** gamma * nx.log(1.0 - p) * (-(1.0 - t_c))
    return nx.mean(positive + negative)


def contrastive_rank_loss(scores, ious: np.ndarray, margin: float = 0.5) -> nx.DualTensor:
    """Mean hinge max(0, m - (s_i - s_j)) over ordered pairs with u_i > u_j."""
    u = np.asarray(ious, dtype=np.float64)
    better, worse = np.nonzero(u[:, None] > u[None, :])
    if better.size == 0:
        return _zero()
    s = nx.as_dual(scores)
    gaps = nx.take(s, better) - nx.take(s, worse)
    return nx.mean(nx.relu(margin - gaps))


def presence_loss(presence_prob, presence_label: int) -> nx.DualTensor:
    p = _clamp(presence_prob)
    if presence_label:
        return -nx.log(p)
    return -nx.log(1.0 - p)


def localization_loss(pred_centroid, gt_centroid: Optional[np.ndarray], presence_prob,
                      presence_label: int):
    """(summed smooth-L1 centroid term, presence BCE). The centroid term is zero when absent."""
    presence = presence_loss(presence_prob, presence_label)
    if not presence_label or gt_centroid is None:
        return _zero(), presence
    residual = nx.as_dual(pred_centroid) - np.asarray(gt_centroid, dtype=np.float64)
    return nx.sum(nx.smooth_l1(residual, 1.0)), presence


@dataclass
class LossInputs:
    """Everything total_loss needs for one (scene, prompt) pair.

    gt_masks is None for an absent-object prompt.
    """

    masks: nx.DualTensor        # (Q, V, H, W)
    confidences: nx.DualTensor  # (Q,)
    centroid: nx.DualTensor     # (3,)
    gt_masks: Optional[np.ndarray] = None
    gt_centroid: Optional[np.ndarray] = None
    threshold: float = 0.5

    @property
    def present(self) -> bool:
        return self.gt_masks is not None


@dataclass
class LossReport:
    total: float
    terms: Dict[str, float]
    graph: Optional[nx.DualTensor] = None

    def to_record(self, step: int) -> Dict:
        record = {"kind": "step", "step": step, "total": self.total}
        record.update(self.terms)
        return record


def combine(terms: Dict[str, nx.DualTensor], weights: LossWeights) -> LossReport:
    """Weighted sum of the six terms. `total` is summed in float64 from the reported terms."""
    values = {name: float(np.asarray(terms[name].value)) for name in TERMS}
    total = 0.0
    for name in TERMS:
        total += getattr(weights, _WEIGHT_FIELDS[name]) * values[name]
    graph = None
    for name in TERMS:
        weighted = terms[name] * getattr(weights, _WEIGHT_FIELDS[name])
        graph = weighted if graph is None else graph + weighted
    return LossReport(total=total, terms=values, graph=graph)


def total_loss(inputs: LossInputs, weights: LossWeights) -> LossReport:
    conf = inputs.confidences
    num_queries = conf.shape[0]
    presence_prob = conf[int(np.argmax(conf.value))]

    if inputs.present:
        gt = np.asarray(inputs.gt_masks, dtype=bool)
        ious = query_ious(inputs.masks.value, gt, inputs.threshold)
        ranks = query_ranks(ious)
        best = int(np.argmax(ious))
        focal = focal_loss(inputs.masks[best], gt, weights.focal_alpha, weights.focal_gamma)
        dice = dice_loss(inputs.masks[best], gt, weights.dice_epsilon)
        label = 1
    else:
        ious = np.zeros(num_queries)
        ranks = np.arange(num_queries)
        focal, dice = _zero(), _zero()
        label = 0

    align = align_loss(conf, ious, ranks, weights.align_alpha, weights.align_tau, weights.align_gamma)
    contrastive = contrastive_rank_loss(conf, ious, weights.contrastive_margin)
    centroid, presence = localization_loss(inputs.centroid, inputs.gt_centroid, presence_prob, label)
    return combine(
        {"focal": focal, "dice": dice, "align": align, "contrastive": contrastive,
         "centroid": centroid, "presence": presence},
        weights,
    )
