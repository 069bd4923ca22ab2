"""Training loop: AdamW with cosine-annealed learning rate and linear warmup."""
import fnmatch
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
import numerics as nx
from checkpoint import save_checkpoint
from config import ExperimentConfig, SpatialConfig, TrainConfig
from errors import PreconditionError, TrainingDivergedError
from gasa import GasaModel
from losses import TERMS, LossInputs, LossReport, total_loss
from run_log import RunRecord
from scenegen import SceneSample
from spatial import gt_aware_augment


def cosine_schedule(step: int, max_steps: int, start_value: float, end_value: float) -> float:
    if max_steps <= 0:
        return end_value
    progress = min(step, max_steps) / max_steps
    return end_value + (start_value - end_value) * 0.5 * (1.0 + math.cos(math.pi * progress))


class CosineWarmupScheduler:
    """Learning-rate scale: linear warmup, then cosine decay to end_value.

    Args:
        warmup_steps: Number of warmup steps
        max_steps: Total number of steps
        start_value: Scale reached at the end of warmup
        end_value: Scale at the final step
    """

    def __init__(self, warmup_steps: int, max_steps: int, start_value: float = 1.0,
                 end_value: float = 0.001):
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.start_value = start_value
        self.end_value = end_value

    def scale_lr(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.start_value * (step + 1) / self.warmup_steps
        return cosine_schedule(
            step=step - self.warmup_steps,
            max_steps=self.max_steps - self.warmup_steps,
            start_value=self.start_value,
            end_value=self.end_value,
        )


class AdamW:
    """Adam with decoupled weight decay over a name -> DualTensor mapping."""

    def __init__(self, params: Dict[str, nx.DualTensor], lr: float, betas: Sequence[float] = (0.9, 0.999),
                 weight_decay: float = 0.01, eps: float = 1e-8, frozen: Sequence[str] = ()):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.frozen = {name for name in params if any(fnmatch.fnmatchcase(name, pat) for pat in frozen)}
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.t = 0

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.value = (p.value - lr * (update + self.weight_decay * p.value)).astype(p.value.dtype)


def clip_gradients(params: Dict[str, nx.DualTensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm. Returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# Training items
# ---------------------------------------------------------------------------

@dataclass
class TrainingItem:
    """One (scene, prompt) pair with its supervision. gt_masks is None for an absent class."""

    sample: SceneSample
    class_id: int
    prompt: str
    qualifier_index: int = 0
    gt_masks: Optional[np.ndarray] = None
    gt_centroid: Optional[np.ndarray] = None
    instance_id: Optional[int] = None


def make_items(sample: SceneSample, rng: np.random.Generator, train: TrainConfig,
               spatial: SpatialConfig) -> List[TrainingItem]:
    """One item per object (prompt possibly augmented), plus an occasional absent-class item."""
    items = []
    for obj in sample.objects:
        name = sample.class_name(obj.class_id)
        augmentation = gt_aware_augment(sample, obj.instance_id, rng, spatial.augment_prob,
                                        spatial.multi_instance_only, spatial)
        if augmentation is None and train.target_strategy == "semantic_union":
            same = sample.instances_of(obj.class_id)
            items.append(TrainingItem(
                sample=sample, class_id=obj.class_id, prompt=name,
                gt_masks=sample.class_masks(obj.class_id),
                gt_centroid=np.mean([o.center for o in same], axis=0),
                instance_id=obj.instance_id,
            ))
            continue
        items.append(TrainingItem(
            sample=sample, class_id=obj.class_id,
            prompt=augmentation.prompt if augmentation else name,
            qualifier_index=augmentation.qualifier_index if augmentation else 0,
            gt_masks=sample.gt_masks(obj.instance_id), gt_centroid=obj.center.copy(),
            instance_id=obj.instance_id,
        ))
    present = {obj.class_id for obj in sample.objects}
    absent = [c for c in range(1, len(sample.class_table.names)) if c not in present]
    if absent and rng.random() < train.absent_query_prob:
        class_id = int(absent[int(rng.integers(len(absent)))])
        items.append(TrainingItem(sample=sample, class_id=class_id, prompt=sample.class_name(class_id)))
    return items


def item_loss(model: GasaModel, item: TrainingItem, experiment: ExperimentConfig) -> LossReport:
    memory = model.encode(item.sample.tokens(model.config.block_size))
    output = model.forward(memory, item.sample.text_embedding(item.class_id), item.qualifier_index)
    inputs = LossInputs(
        masks=output.masks, confidences=output.confidences, centroid=output.centroid,
        gt_masks=item.gt_masks, gt_centroid=item.gt_centroid, threshold=experiment.eval.threshold,
    )
    return total_loss(inputs, experiment.loss)


def batch_loss(model: GasaModel, items: Sequence[TrainingItem], experiment: ExperimentConfig) -> LossReport:
    """Mean of the per-item reports; the graph is the mean of the per-item graphs."""
    reports = [item_loss(model, item, experiment) for item in items]
    scale = 1.0 / len(reports)
    graph = None
    for report in reports:
        graph = report.graph if graph is None else graph + report.graph
    terms = {name: float(np.mean([r.terms[name] for r in reports])) for name in TERMS}
    total = float(np.mean([r.total for r in reports]))
    return LossReport(total=total, terms=terms, graph=graph * scale)


def split_dataset(samples: Sequence[SceneSample], eval_fraction: float) -> Tuple[List[SceneSample], List[SceneSample]]:
    """Hold out the last eval_fraction of scenes; a single scene is never held out."""
    samples = list(samples)
    held = int(round(len(samples) * eval_fraction))
    if held == 0 or held >= len(samples):
        return samples, []
    return samples[:-held], samples[-held:]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GasaModel
    steps: int
    history: List[Dict] = field(default_factory=list)
    epoch_reports: List[Dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


class Trainer:
    def __init__(self, model: GasaModel, experiment: ExperimentConfig, run: Optional[RunRecord] = None,
                 checkpoint_path: Optional[str] = None):
        self.model = model
        self.experiment = experiment
        self.train_cfg = experiment.train
        self.run = run
        self.checkpoint_path = checkpoint_path
        self.params = model.parameters()
        self.optimizer = AdamW(self.params, self.train_cfg.learning_rate, self.train_cfg.betas,
                               self.train_cfg.weight_decay, frozen=self.train_cfg.frozen)
        # frozen tensors take no part in gradient clipping
        self.trainable = {n: p for n, p in self.params.items() if n not in self.optimizer.frozen}
        self.scheduler: Optional[CosineWarmupScheduler] = None
        self.global_step = 0
        self.history: List[Dict] = []
        # (step, parameters) of the most recent step whose loss was finite
        self.last_good: Tuple[int, Dict[str, np.ndarray]] = (0, model.state_dict())

    def _last_good_path(self) -> str:
        if self.checkpoint_path:
            root, ext = os.path.splitext(self.checkpoint_path)
            return f"{root}.last_good{ext or '.ckpt'}"
        return os.path.join(config.OUTPUT_DIR, "last_good.ckpt")

    def step(self, items: Sequence[TrainingItem]) -> LossReport:
        """One optimizer step on a batch.

        A non-finite loss term aborts the run; the parameters of the last step
        with a finite loss are written next to the checkpoint path first.
        """
        report = batch_loss(self.model, items, self.experiment)
        for name in TERMS:
            if not math.isfinite(report.terms[name]):
                good_step, good_state = self.last_good
                path = save_checkpoint(self._last_good_path(), self.model,
                                       {"step": good_step, "diverged_at": self.global_step}, state=good_state)
                if self.run:
                    self.run.finish("diverged", {"diverged_term": name, "step": self.global_step})
                raise TrainingDivergedError(name, self.global_step, path)
        self.last_good = (self.global_step, self.model.state_dict())

        for p in self.params.values():
            p.zero_grad()
        report.graph.backward()
        clip_gradients(self.trainable, self.train_cfg.grad_clip)
        scale = self.scheduler.scale_lr(self.global_step) if self.scheduler else 1.0
        self.optimizer.step(self.train_cfg.learning_rate * scale)

        record = report.to_record(self.global_step)
        record["lr"] = self.train_cfg.learning_rate * scale
        self.history.append(record)
        if self.run:
            self.run.add_step(record)
        self.global_step += 1
        return report

    def fit(self, samples: Sequence[SceneSample], held_out: Sequence[SceneSample] = (),
            evaluate_fn: Optional[Callable[[GasaModel, Sequence[SceneSample]], Dict]] = None) -> TrainResult:
        cfg = self.train_cfg
        if not samples:
            raise PreconditionError("Cannot train on an empty dataset")
        spatial = self.experiment.spatial
        rng = np.random.default_rng([cfg.seed, 1])
        # item count varies per epoch with augmentation draws; estimate from objects
        per_epoch = max(1, math.ceil(sum(len(s.objects) for s in samples) / cfg.batch_size))
        self.scheduler = CosineWarmupScheduler(cfg.warmup_epochs * per_epoch, cfg.epochs * per_epoch)

        epoch_reports = []
        for epoch in range(cfg.epochs):
            items = [item for sample in samples for item in make_items(sample, rng, cfg, spatial)]
            order = rng.permutation(len(items))
            for start in range(0, len(items), cfg.batch_size):
                batch = [items[i] for i in order[start:start + cfg.batch_size]]
                report = self.step(batch)
            print(f"Epoch {epoch + 1}/{cfg.epochs}: last loss {report.total:.4f}")
            if held_out and evaluate_fn is not None:
                metrics = evaluate_fn(self.model, held_out)
                epoch_reports.append({"epoch": epoch, **metrics})
                if self.run:
                    self.run.add_epoch(epoch, metrics)

        if self.checkpoint_path:
            save_checkpoint(self.checkpoint_path, self.model, {"step": self.global_step, "epochs": cfg.epochs})
        return TrainResult(model=self.model, steps=self.global_step, history=self.history,
                           epoch_reports=epoch_reports, checkpoint_path=self.checkpoint_path)


def build_model(experiment: ExperimentConfig, seed: Optional[int] = None) -> GasaModel:
    """Model for an experiment with its ablation switches applied."""
    model_cfg = experiment.train.ablation.apply(experiment.model)
    return GasaModel(model_cfg, seed=experiment.train.seed if seed is None else seed)


def train(model: GasaModel, samples: Sequence[SceneSample], experiment: ExperimentConfig,
          run: Optional[RunRecord] = None, checkpoint_path: Optional[str] = None,
          with_held_out_eval: bool = True) -> TrainResult:
    """Train on `samples`, holding out a split for per-epoch evaluation."""
    from evaluation import evaluate

    train_set, held_out = split_dataset(samples, experiment.train.eval_fraction)
    if not with_held_out_eval:
        train_set, held_out = list(samples), []

    def evaluate_fn(m: GasaModel, scenes: Sequence[SceneSample]) -> Dict:
        return evaluate(m, scenes, experiment.eval, experiment.spatial).summary()

    trainer = Trainer(model, experiment, run, checkpoint_path)
    result = trainer.fit(train_set, held_out, evaluate_fn)
    if run:
        run.finish("completed", {"steps": result.steps})
    return result


def fit_fixed_batch(model: GasaModel, items: Sequence[TrainingItem], experiment: ExperimentConfig,
                    steps: int) -> List[float]:
    """Repeated optimizer steps on one batch at constant learning rate; returns the loss per step."""
    trainer = Trainer(model, experiment)
    return [trainer.step(items).total for _ in range(steps)]
