"""Distillation protocol: splits, random search, retraining, evaluation.

The student model selection follows a two-stage design: hyperparameters are
searched on a reduced slice of the training data and scored on a held-out
slice, then the winning configuration is retrained on the complete training
set with a fresh validation split.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingProvider
from .errors import (
    EmptyEvalSetError,
    MissingDataError,
    MissingPretrainLabelsError,
    TooFewSamplesError,
)
from .metrics import f1_score
from .neural import (
    SEARCH_SPACE,
    MlpConfig,
    MlpModel,
    TrainReport,
    build_mlp,
    predict,
    train,
)
from .teacher import LabeledSentence

logger = logging.getLogger(__name__)

ROLE_REDUCED_TRAIN = "reduced_train"
ROLE_REDUCED_VAL = "reduced_val"
ROLE_SEARCH_HOLDOUT = "search_holdout"
ROLE_FINAL_TRAIN = "final_train"
ROLE_FINAL_VAL = "final_val"

DEFAULT_TRIALS = 50
DEFAULT_MAX_EPOCHS = 100
DEFAULT_PATIENCE = 5
MIN_SAMPLES_PER_CLASS_FACTOR = 10


@dataclass
class Dataset:
    """Sentence ids with their embedding matrix and integer class labels."""

    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    classes: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
        wanted = set(ids)
        mask = np.fromiter((i in wanted for i in self.ids), dtype=bool, count=len(self.ids))
        return self.x[mask], self.y[mask]


def build_dataset(
    labels: Sequence[LabeledSentence],
    texts_by_id: Mapping[str, str],
    provider: EmbeddingProvider,
    classes: Sequence[str],
    label_field: str = "topic",
) -> tuple[Dataset, int]:
    """Assemble a dataset from labels and an embedding provider.

    The class list is frozen by the caller; labels outside it are dropped and
    counted (second return value). Embeddings are keyed by sentence text.
    """
    class_index = {c: i for i, c in enumerate(classes)}
    kept: list[tuple[str, int]] = []
    dropped = 0
    for lab in labels:
        value = getattr(lab, label_field)
        if value is None or value not in class_index:
            dropped += 1
            continue
        kept.append((lab.sentence_id, class_index[value]))
    kept.sort(key=lambda pair: pair[0])
    ids = [sid for sid, _ in kept]
    y = np.asarray([ci for _, ci in kept], dtype=np.int64)
    x = provider.get_many([texts_by_id[sid] for sid in ids]) if ids else np.empty((0, provider.dim))
    if dropped:
        logger.info("dropped %d labels outside the %d-class list", dropped, len(classes))
    return Dataset(ids=ids, x=np.asarray(x, dtype=np.float64), y=y, classes=list(classes)), dropped


def _stratified_split(
    ids_by_class: Mapping[int, list[str]],
    fraction: float,
    rng: np.random.Generator,
) -> tuple[set[str], set[str]]:
    """Split each class's ids into (fraction, rest) after a seeded shuffle."""
    first: set[str] = set()
    second: set[str] = set()
    for cls in sorted(ids_by_class):
        ids = sorted(ids_by_class[cls])
        perm = rng.permutation(len(ids))
        cut = int(round(fraction * len(ids)))
        first.update(ids[i] for i in perm[:cut])
        second.update(ids[i] for i in perm[cut:])
    return first, second


@dataclass
class SplitPlan:
    """Role assignment for the two training stages.

    The search stage partitions all ids into reduced-train, reduced-val and
    search-holdout. The final stage is a second partition of the same ids
    into final-train and final-val, because the winning configuration is
    retrained on everything.
    """

    seed: int
    reduced_fraction: float
    sub_train_fraction: float
    final_train_fraction: float
    search_role: dict[str, str]
    final_role: dict[str, str]

    def ids(self, role: str) -> list[str]:
        if role in (ROLE_FINAL_TRAIN, ROLE_FINAL_VAL):
            return sorted(i for i, r in self.final_role.items() if r == role)
        return sorted(i for i, r in self.search_role.items() if r == role)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "reduced_fraction": self.reduced_fraction,
            "sub_train_fraction": self.sub_train_fraction,
            "final_train_fraction": self.final_train_fraction,
            "search_role": self.search_role,
            "final_role": self.final_role,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitPlan":
        return cls(
            seed=int(obj["seed"]),
            reduced_fraction=float(obj["reduced_fraction"]),
            sub_train_fraction=float(obj["sub_train_fraction"]),
            final_train_fraction=float(obj["final_train_fraction"]),
            search_role=dict(obj["search_role"]),
            final_role=dict(obj["final_role"]),
        )


def make_split_plan(
    labels_by_id: Mapping[str, int | str],
    seed: int,
    reduced_fraction: float = 0.6,
    sub_train_fraction: float = 0.8,
    final_train_fraction: float = 0.8,
) -> SplitPlan:
    """Build the stratified two-stage split.

    Within every class: ``reduced_fraction`` of ids go to the search stage
    (itself split ``sub_train_fraction`` / rest into train and validation)
    and the remainder becomes the search holdout. Independently, the final
    stage splits all ids ``final_train_fraction`` / rest.
    """
    classes = sorted({str(v) for v in labels_by_id.values()})
    if len(labels_by_id) < MIN_SAMPLES_PER_CLASS_FACTOR * len(classes):
        raise TooFewSamplesError(
            f"{len(labels_by_id)} samples are too few for {len(classes)} classes"
        )
    by_class: dict[int, list[str]] = {}
    class_of = {c: i for i, c in enumerate(classes)}
    for sid, value in labels_by_id.items():
        by_class.setdefault(class_of[str(value)], []).append(sid)

    rng = np.random.default_rng(seed)
    reduced, holdout = _stratified_split(by_class, reduced_fraction, rng)
    reduced_by_class = {
        c: [i for i in ids if i in reduced] for c, ids in by_class.items()
    }
    sub_train, sub_val = _stratified_split(reduced_by_class, sub_train_fraction, rng)
    final_train, final_val = _stratified_split(by_class, final_train_fraction, rng)

    search_role = {}
    for sid in labels_by_id:
        if sid in sub_train:
            search_role[sid] = ROLE_REDUCED_TRAIN
        elif sid in sub_val:
            search_role[sid] = ROLE_REDUCED_VAL
        else:
            search_role[sid] = ROLE_SEARCH_HOLDOUT
    final_role = {
        sid: ROLE_FINAL_TRAIN if sid in final_train else ROLE_FINAL_VAL
        for sid in labels_by_id
    }
    return SplitPlan(
        seed=seed,
        reduced_fraction=reduced_fraction,
        sub_train_fraction=sub_train_fraction,
        final_train_fraction=final_train_fraction,
        search_role=search_role,
        final_role=final_role,
    )


@dataclass
class TrialResult:
    index: int
    config: MlpConfig
    f1: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "config": self.config.to_dict(),
            "f1": self.f1,
            "error": self.error,
        }


@dataclass
class SearchResult:
    trials: list[TrialResult]
    best_config: MlpConfig
    seed: int

    def to_dict(self) -> dict:
        return {
            "trials": [t.to_dict() for t in self.trials],
            "best_config": self.best_config.to_dict(),
            "seed": self.seed,
        }


def sample_config(rng: np.random.Generator) -> MlpConfig:
    """Draw one configuration uniformly from the allowed value sets."""
    drawn = {
        name: choices[int(rng.integers(len(choices)))]
        for name, choices in SEARCH_SPACE.items()
    }
    return MlpConfig(**drawn)


def evaluate_f1(
    model: MlpModel,
    eval_data: tuple[np.ndarray, np.ndarray],
    averaging: str = "macro",
) -> float:
    """F1 of model predictions over an evaluation set."""
    x, y = eval_data
    if len(x) == 0:
        raise EmptyEvalSetError("evaluation set is empty")
    pred = predict(model, np.asarray(x, dtype=np.float64))
    return f1_score(np.asarray(y, dtype=np.int64), pred, model.num_classes, averaging)


def random_search(
    dataset: Dataset,
    split: SplitPlan,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    patience: int = DEFAULT_PATIENCE,
    averaging: str = "macro",
) -> SearchResult:
    """Random hyperparameter search over the fixed split.

    Every trial draws an independent configuration and seed from the master
    seed (drawn up front, so trial order cannot change them), trains on the
    reduced train slice with early stopping on the reduced validation slice,
    and is scored by F1 on the search holdout. A failed trial records an F1
    of -1 with its error and the search continues. Ties on the best score go
    to the earliest trial.
    """
    rng = np.random.default_rng(seed)
    planned = [
        (sample_config(rng), int(rng.integers(2**63 - 1))) for _ in range(trials)
    ]
    train_xy = dataset.subset(split.ids(ROLE_REDUCED_TRAIN))
    val_xy = dataset.subset(split.ids(ROLE_REDUCED_VAL))
    holdout_xy = dataset.subset(split.ids(ROLE_SEARCH_HOLDOUT))

    results: list[TrialResult] = []
    best: TrialResult | None = None
    for index, (config, trial_seed) in enumerate(planned):
        try:
            model = build_mlp(
                config, dataset.x.shape[1], len(dataset.classes), trial_seed,
                classes=dataset.classes,
            )
            model, _ = train(
                model, train_xy, val_xy,
                patience=patience, max_epochs=max_epochs, seed=trial_seed,
                averaging=averaging,
            )
            f1 = evaluate_f1(model, holdout_xy, averaging=averaging)
            result = TrialResult(index=index, config=config, f1=f1)
        except Exception as exc:  # noqa: BLE001 - a bad trial must not kill the search
            logger.warning("trial %d failed: %s", index, exc)
            result = TrialResult(index=index, config=config, f1=-1.0, error=str(exc))
        results.append(result)
        if best is None or result.f1 > best.f1:
            best = result
        logger.info("trial %d/%d f1=%.4f", index + 1, trials, result.f1)
    return SearchResult(trials=results, best_config=best.config, seed=seed)


def final_retrain(
    config: MlpConfig,
    dataset: Dataset,
    seed: int,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    patience: int = DEFAULT_PATIENCE,
    split: SplitPlan | None = None,
    averaging: str = "macro",
) -> tuple[MlpModel, TrainReport]:
    """Retrain the chosen configuration on the complete training set.

    Uses the plan's final-stage roles when a plan is given, otherwise makes
    a fresh stratified split from ``seed``.
    """
    if split is not None:
        train_ids = split.ids(ROLE_FINAL_TRAIN)
        val_ids = split.ids(ROLE_FINAL_VAL)
        train_xy = dataset.subset(train_ids)
        val_xy = dataset.subset(val_ids)
    else:
        by_class: dict[int, list[str]] = {}
        for sid, cls in zip(dataset.ids, dataset.y):
            by_class.setdefault(int(cls), []).append(sid)
        rng = np.random.default_rng(seed)
        train_ids, val_ids = _stratified_split(by_class, 0.8, rng)
        train_xy = dataset.subset(train_ids)
        val_xy = dataset.subset(val_ids)
    model = build_mlp(
        config, dataset.x.shape[1], len(dataset.classes), seed, classes=dataset.classes
    )
    return train(
        model, train_xy, val_xy,
        patience=patience, max_epochs=max_epochs, seed=seed, averaging=averaging,
    )


@dataclass
class SentimentTrainPlan:
    """What to train the sentiment head on."""

    approach: str  # "direct" | "transfer"
    config: MlpConfig = field(default_factory=MlpConfig)
    lr_shrink: float = 0.1


def train_sentiment(
    plan: SentimentTrainPlan,
    finetune: Dataset | None,
    pretrain: Dataset | None,
    seed: int,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    patience: int = DEFAULT_PATIENCE,
) -> tuple[MlpModel, dict[str, TrainReport]]:
    """Train the three-class sentiment head.

    Direct trains on the primary labels alone. Transfer first trains to
    convergence on the preliminary-teacher labels, then continues from those
    weights on the primary labels with the learning rate scaled by
    ``lr_shrink`` and a fresh optimizer state.
    """
    if plan.approach not in ("direct", "transfer"):
        raise ValueError(f"unknown sentiment approach {plan.approach!r}")
    if finetune is None or len(finetune) == 0:
        raise MissingDataError("no sentiment labels to train on")
    reports: dict[str, TrainReport] = {}

    def split_of(ds: Dataset, split_seed: int) -> tuple:
        by_class: dict[int, list[str]] = {}
        for sid, cls in zip(ds.ids, ds.y):
            by_class.setdefault(int(cls), []).append(sid)
        rng = np.random.default_rng(split_seed)
        train_ids, val_ids = _stratified_split(by_class, 0.8, rng)
        return ds.subset(train_ids), ds.subset(val_ids)

    if plan.approach == "direct":
        train_xy, val_xy = split_of(finetune, seed)
        model = build_mlp(
            plan.config, finetune.x.shape[1], len(finetune.classes), seed,
            classes=finetune.classes,
        )
        model, report = train(
            model, train_xy, val_xy, patience=patience, max_epochs=max_epochs, seed=seed
        )
        reports["direct"] = report
        return model, reports

    if pretrain is None or len(pretrain) == 0:
        raise MissingPretrainLabelsError(
            "transfer training needs preliminary-teacher labels"
        )
    pre_train_xy, pre_val_xy = split_of(pretrain, seed)
    model = build_mlp(
        plan.config, pretrain.x.shape[1], len(pretrain.classes), seed,
        classes=pretrain.classes,
    )
    model, pre_report = train(
        model, pre_train_xy, pre_val_xy,
        patience=patience, max_epochs=max_epochs, seed=seed,
    )
    reports["pretrain"] = pre_report

    fine_config = replace(
        plan.config, learning_rate=plan.config.learning_rate * plan.lr_shrink
    )
    model.config = fine_config
    fine_train_xy, fine_val_xy = split_of(finetune, seed + 1)
    model, fine_report = train(
        model, fine_train_xy, fine_val_xy,
        patience=patience, max_epochs=max_epochs, seed=seed + 1,
    )
    reports["finetune"] = fine_report
    return model, reports


def save_search_result(result: SearchResult, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def save_split_plan(plan: SplitPlan, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_split_plan(path: str | Path) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
