"""Certification metrics: clean/backdoor accuracy and membership inference."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import recall_score

from vflunlearn.data import ClientDataset, VerticalBatch
from vflunlearn.exceptions import ArgumentError
from vflunlearn.logger import Logger
from vflunlearn.numcore import softmax
from vflunlearn.protocol import SplitArchitecture, SplitModel, local_epoch, split_forward
from vflunlearn.utils import derive_seed


@dataclass(frozen=True)
class EvalResult:
    """Accuracy over ``n`` samples; ``per_class_counts[c]`` counts samples of true class c."""

    accuracy: float
    n: int
    correct: int
    per_class_counts: np.ndarray


@dataclass(frozen=True)
class EvalSets:
    """Clean test split plus the optional triggered test split."""

    clean: VerticalBatch
    backdoor: Optional[VerticalBatch] = None

    def __call__(self, model: SplitModel) -> Tuple[float, Optional[float]]:
        clean = evaluate(model, self.clean).accuracy
        if self.backdoor is None or not len(self.backdoor):
            return clean, None
        return clean, backdoor_accuracy(model, self.backdoor).accuracy


def predict_logits(model: SplitModel, samples: VerticalBatch, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits (dropout off), computed in chunks."""
    chunks = [
        split_forward(model, samples[start : start + batch_size], training=False)[0]
        for start in range(0, len(samples), batch_size)
    ]
    return np.concatenate(chunks)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalResult:
    predictions = logits.argmax(axis=1)
    correct = int((predictions == labels).sum())
    n = len(labels)
    return EvalResult(
        accuracy=correct / n,
        n=n,
        correct=correct,
        per_class_counts=np.bincount(labels, minlength=num_classes),
    )


def evaluate(model: SplitModel, samples: VerticalBatch) -> EvalResult:
    """Top-1 accuracy of the split model on ``samples``."""
    if not len(samples):
        raise ArgumentError("no samples to evaluate")
    num_classes = model.arch.coordinator.output_shape[0]
    return accuracy_from_logits(predict_logits(model, samples), samples.labels, num_classes)


def backdoor_accuracy(model: SplitModel, tampered: VerticalBatch) -> EvalResult:
    """Fraction of triggered samples classified as the attacker's target label."""
    if not len(tampered):
        raise ArgumentError("no tampered samples")
    if not tampered.poisoned.all():
        raise ArgumentError("backdoor accuracy needs samples that all carry the trigger")
    return evaluate(model, tampered)


class MIAConfig(BaseModel):
    """Shadow-model and attack-model settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_shadows: int = Field(4, ge=1)
    shadow_epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.01, gt=0)
    pool_size: int = Field(2000, ge=2)
    threshold: float = Field(0.5, gt=0, lt=1)
    max_iter: int = Field(500, ge=1)
    tol: float = Field(1e-6, gt=0)
    seed: int = 0
    workers: int = Field(1, ge=1)


@dataclass(frozen=True)
class ShadowModel:
    model: SplitModel
    members: VerticalBatch
    nonmembers: VerticalBatch


@dataclass(frozen=True)
class AttackDataset:
    """Softmax vectors of one true class with their membership bits."""

    class_label: int
    features: np.ndarray
    membership: np.ndarray

    def __len__(self) -> int:
        return len(self.membership)


@dataclass
class AttackModel:
    """Per-class membership classifier over softmax vectors.

    Falls back to a constant probability when its training data held only
    one membership value.
    """

    class_label: int
    classifier: Optional[LogisticRegression] = None
    constant: Optional[float] = None

    @classmethod
    def always(cls, class_label: int, member: bool) -> "AttackModel":
        return cls(class_label=class_label, constant=1.0 if member else 0.0)

    def membership_probability(self, features: np.ndarray) -> np.ndarray:
        if self.classifier is None:
            return np.full(len(features), self.constant, dtype=np.float64)
        member_column = list(self.classifier.classes_).index(1)
        return self.classifier.predict_proba(features)[:, member_column]


def _train_shadow(
    index: int,
    chunk: np.ndarray,
    pool: VerticalBatch,
    architecture: SplitArchitecture,
    cfg: MIAConfig,
) -> ShadowModel:
    half = len(chunk) // 2
    members = pool[np.sort(chunk[:half])]
    nonmembers = pool[np.sort(chunk[half:])]
    model = architecture.initialize(
        np.random.default_rng(derive_seed(cfg.seed, "shadow-init", index))
    )
    dataset = ClientDataset(client_id=0, samples=members)
    for epoch in range(cfg.shadow_epochs):
        seed = derive_seed(cfg.seed, "shadow", index, epoch)
        model = local_epoch(model, dataset, cfg.batch_size, cfg.lr, seed)
    Logger.harness.info(
        f"Shadow {index}: {len(members)} members, {len(nonmembers)} nonmembers"
    )
    return ShadowModel(model=model, members=members, nonmembers=nonmembers)


def train_shadow_models(
    pool: VerticalBatch, k: int, architecture: SplitArchitecture, cfg: MIAConfig
) -> List[ShadowModel]:
    """Train ``k`` centralized shadow models on disjoint member halves of the pool.

    The pool is shuffled and dealt into ``k`` disjoint chunks; the first half
    of each chunk trains the shadow, the second half is its nonmember set.
    """
    if k < 1 or len(pool) < 2 * k:
        raise ArgumentError(f"a pool of {len(pool)} samples cannot feed {k} shadow models")
    order = np.random.default_rng(derive_seed(cfg.seed, "shadow-split")).permutation(len(pool))
    chunks = np.array_split(order, k)
    jobs = [(i, chunk, pool, architecture, cfg) for i, chunk in enumerate(chunks)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            return list(executor.map(lambda job: _train_shadow(*job), jobs))
    return [_train_shadow(*job) for job in jobs]


def build_attack_dataset(shadows: List[ShadowModel]) -> Dict[int, AttackDataset]:
    """Group shadow softmax vectors by true class, tagged 1 for members, 0 otherwise."""
    features: Dict[int, List[np.ndarray]] = {}
    bits: Dict[int, List[np.ndarray]] = {}
    for shadow in shadows:
        for subset, bit in ((shadow.members, 1), (shadow.nonmembers, 0)):
            if not len(subset):
                continue
            probs = softmax(predict_logits(shadow.model, subset))
            for cls in np.unique(subset.labels):
                mask = subset.labels == cls
                features.setdefault(int(cls), []).append(probs[mask])
                bits.setdefault(int(cls), []).append(np.full(int(mask.sum()), bit))
    return {
        cls: AttackDataset(
            class_label=cls,
            features=np.vstack(features[cls]),
            membership=np.concatenate(bits[cls]).astype(np.int64),
        )
        for cls in sorted(features)
    }


def train_attack_models(
    attack_data: Dict[int, AttackDataset], cfg: Optional[MIAConfig] = None
) -> Dict[int, AttackModel]:
    """Fit one logistic regression per class."""
    cfg = cfg or MIAConfig()
    models: Dict[int, AttackModel] = {}
    for cls, dataset in attack_data.items():
        labels = np.unique(dataset.membership)
        if len(labels) < 2:
            models[cls] = AttackModel.always(cls, member=bool(labels[0]))
            continue
        classifier = LogisticRegression(max_iter=cfg.max_iter, tol=cfg.tol)
        classifier.fit(dataset.features, dataset.membership)
        models[cls] = AttackModel(class_label=cls, classifier=classifier)
    return models


def mia_recall(
    attack_models: Dict[int, AttackModel],
    target_model: SplitModel,
    members: VerticalBatch,
    nonmembers: VerticalBatch,
    threshold: float = 0.5,
) -> float:
    """Recall of the membership attack on the target model's true members.

    Each sample is judged by the attack model of its class; classes without
    an attack model are skipped.
    """
    y_true: List[int] = []
    y_pred: List[int] = []
    for subset, bit in ((members, 1), (nonmembers, 0)):
        if not len(subset):
            continue
        probs = softmax(predict_logits(target_model, subset))
        for cls in np.unique(subset.labels):
            attack = attack_models.get(int(cls))
            if attack is None:
                Logger.harness.warning(f"No attack model for class {cls}, skipping")
                continue
            mask = subset.labels == cls
            predicted = attack.membership_probability(probs[mask]) >= threshold
            y_true.extend([bit] * int(mask.sum()))
            y_pred.extend(predicted.astype(int).tolist())
    if 1 not in y_true:
        return 0.0
    return float(recall_score(y_true, y_pred, pos_label=1, zero_division=0))
