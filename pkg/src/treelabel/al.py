"""Active-learning engine over the taxonomy's per-node classifiers.

Each cycle scores the records routed to a node, splits them into
high-confidence pseudo-labels (entropy strictly below the threshold) and a
margin-ranked uncertain list for the human, promotes the confident ones into
the node's training pool, and retrains once the pool has drifted far enough
from the pool used for the last fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import classifier as clf
from .store import PSEUDO, PseudoLabel, Store
from .taxonomy import LabelPath, Taxonomy

log = logging.getLogger(__name__)


class ALError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    node: str
    model_version: int
    probs: tuple[float, ...]
    predicted_class: str
    entropy: float
    margin: float
    confident: bool

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "node": self.node,
            "model_version": self.model_version,
            "probs": list(self.probs),
            "predicted_class": self.predicted_class,
            "entropy": self.entropy,
            "margin": self.margin,
            "confident": self.confident,
        }


@dataclass
class ALConfig:
    delta: float = 0.05  # entropy threshold, nats
    retrain_increment: int = 50
    max_uncertain_page: int = 100

    def __post_init__(self):
        if self.delta <= 0:
            raise ALError("delta must be > 0")
        if self.retrain_increment < 1:
            raise ALError("retrain_increment must be >= 1")


@dataclass
class ALReport:
    node: str
    promoted: int
    confident_count: int
    uncertain_count: int
    retrained: bool
    model_version: int
    new_metrics: dict | None = None

    def to_json(self) -> dict:
        return {
            "node": self.node,
            "promoted": self.promoted,
            "confident_count": self.confident_count,
            "uncertain_count": self.uncertain_count,
            "retrained": self.retrained,
            "model_version": self.model_version,
            "new_metrics": self.new_metrics,
        }


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ALError("probability input must be a vector")
    if np.any(probs < 0):
        raise ALError("negative probability entry")
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ALError(f"probabilities sum to {probs.sum()}, not 1")
    return probs


def entropy(probs) -> float:
    """Shannon entropy in nats; 0*ln 0 contributes 0."""
    probs = _check_probs(probs)
    nonzero = probs[probs > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def margin(probs) -> float:
    """Top-1 minus top-2 probability; smaller means more uncertain."""
    probs = _check_probs(probs)
    if probs.shape[0] < 2:
        raise ALError("margin needs at least 2 classes")
    top2 = np.sort(probs)[-2:]
    return float(top2[1] - top2[0])


def make_prediction(
    image_id: str,
    node: str,
    model_version: int,
    classes: list[str],
    probs,
    delta: float,
) -> PredictionRecord:
    probs = _check_probs(probs)
    ent = entropy(probs)
    return PredictionRecord(
        image_id=image_id,
        node=node,
        model_version=model_version,
        probs=tuple(float(p) for p in probs),
        predicted_class=classes[int(np.argmax(probs))],
        entropy=ent,
        margin=margin(probs),
        confident=ent < delta,
    )


# -- traversal-aware scoring --------------------------------------------------


def eligible_for_scoring(store: Store, taxonomy: Taxonomy, image_id: str, node: str) -> bool:
    """Scored at `node` when unlabeled at this level or descending through it.

    "Unlabeled at this level" means the effective label stops exactly at the
    node (for the root: no label at all); records whose label descends
    through the node are scored too, for display, but never re-promoted.
    """
    record = store.get(image_id)
    if record.deleted:
        return False
    return store.routed_to(image_id, node) or (
        store.effective_class_at(image_id, node) is not None
    )


def infer_node(
    store: Store,
    taxonomy: Taxonomy,
    model: clf.Model | None,
    node: str,
    config: ALConfig,
    records=None,
) -> list[PredictionRecord]:
    """Score every eligible record with the node's model; install the results.

    A node without a trained model is skipped with a notice (empty result).
    Records without features are skipped.
    """
    if model is None:
        log.info("node %s has no trained model; skipping inference", node)
        return []
    if records is None:
        records = store.records()
    classes = taxonomy.classes_of(node)
    ids, rows = [], []
    for record in records:
        if not eligible_for_scoring(store, taxonomy, record.id, node):
            continue
        vec = store.features.get(record.id)
        if vec is None:
            continue
        ids.append(record.id)
        rows.append(vec)
    if not ids:
        store.predictions[node] = {}
        return []
    probs = clf.predict(model, np.asarray(rows, dtype=np.float64))
    out = [
        make_prediction(image_id, node, model.version, classes, p, config.delta)
        for image_id, p in zip(ids, probs)
    ]
    store.predictions[node] = {p.image_id: p for p in out}
    return out


def partition(
    predictions: list[PredictionRecord], config: ALConfig
) -> tuple[list[PredictionRecord], list[PredictionRecord]]:
    """(confident, uncertain): strict entropy < delta vs margin-ascending rest."""
    confident = sorted(
        (p for p in predictions if p.entropy < config.delta), key=lambda p: p.image_id
    )
    uncertain = sorted(
        (p for p in predictions if not (p.entropy < config.delta)),
        key=lambda p: (p.margin, p.image_id),
    )
    return confident, uncertain


def promote_pseudo_labels(
    store: Store,
    taxonomy: Taxonomy,
    node: str,
    confident: list[PredictionRecord],
) -> int:
    """Attach pseudo-labels (node path + predicted class) to promotable records.

    Only records unlabeled at the node's level are touched; ground-truth
    labels are never overwritten, and val/test records are never extended.
    """
    node_path = taxonomy.node_path(node)
    promoted = 0
    for pred in confident:
        if pred.image_id not in store:
            continue
        record = store.get(pred.image_id)
        if record.deleted or not store.routed_to(pred.image_id, node):
            continue
        if record.split in ("val", "test"):
            continue
        store.set_pseudo(
            PseudoLabel(
                image_id=pred.image_id,
                path=LabelPath(node_path + (pred.predicted_class,)),
                node=node,
                model_version=pred.model_version,
            )
        )
        promoted += 1
    return promoted


# -- training pools -----------------------------------------------------------


def training_pool(store: Store, taxonomy: Taxonomy, node: str) -> dict[str, str]:
    """image id -> class id for the node's current training pool.

    Ground-truth members must sit in the train split; pseudo-labeled members
    join regardless of their (unlabeled or train) split.
    """
    pool: dict[str, str] = {}
    for record in store.records():
        gt = store.gt_class_at(record.id, node)
        if gt is not None:
            if record.split == "train":
                pool[record.id] = gt
            continue
        eff = store.effective_class_at(record.id, node)
        if eff is not None and record.label_kind == PSEUDO:
            pool[record.id] = eff
    return pool


def holdout_pool(store: Store, taxonomy: Taxonomy, node: str, split: str) -> dict[str, str]:
    """Ground-truth-only id -> class map for the val or test split."""
    pool = {}
    for record in store.records():
        if record.split != split:
            continue
        gt = store.gt_class_at(record.id, node)
        if gt is not None:
            pool[record.id] = gt
    return pool


def pool_matrix(store: Store, taxonomy: Taxonomy, node: str, pool: dict[str, str]):
    """(X, y, ids) arrays for a pool; raises when features are missing."""
    classes = taxonomy.classes_of(node)
    index = {c: k for k, c in enumerate(classes)}
    ids = sorted(pool)
    missing = [i for i in ids if i not in store.features]
    if missing:
        raise ALError(f"records missing features: {', '.join(missing[:10])}")
    X = np.asarray([store.features[i] for i in ids], dtype=np.float64)
    y = np.asarray([index[pool[i]] for i in ids], dtype=np.int64)
    return X, y, ids


def pool_delta(current: dict[str, str], at_last_train: dict[str, str]) -> int:
    """Additions + removals + label changes between two pool snapshots."""
    added = sum(1 for image_id in current if image_id not in at_last_train)
    removed = sum(1 for image_id in at_last_train if image_id not in current)
    changed = sum(
        1
        for image_id, cls in current.items()
        if image_id in at_last_train and at_last_train[image_id] != cls
    )
    return added + removed + changed


def retrain_due(
    store: Store,
    taxonomy: Taxonomy,
    node: str,
    config: ALConfig,
    model: clf.Model | None,
    pool_at_last_train: dict[str, str] | None,
) -> bool:
    """True once the pool has drifted by at least retrain_increment entries."""
    current = training_pool(store, taxonomy, node)
    if model is None or pool_at_last_train is None:
        return bool(current)
    return pool_delta(current, pool_at_last_train) >= config.retrain_increment


def _descendant_classifiers(taxonomy: Taxonomy, node: str) -> set[str]:
    node_path = taxonomy.node_path(node)
    return {
        other
        for other in taxonomy.classifier_nodes()
        if other == node or taxonomy.node_path(other)[: len(node_path)] == node_path
    }


def al_step(engine, node: str, config: ALConfig, train_config=None) -> ALReport:
    """One cycle: revoke stale pseudo-labels, infer, partition, promote,
    retrain when due. `engine` supplies store/taxonomy/model management."""
    taxonomy: Taxonomy = engine.taxonomy
    store: Store = engine.store
    if not taxonomy.nodes[node].trainable:
        raise ALError(f"node {node!r} is not a classifier node")

    # Pseudo-labels are machine state: re-derive this node's (and its
    # descendants', whose prefixes may no longer hold) on every step.
    store.revoke_pseudo(_descendant_classifiers(taxonomy, node))

    model = engine.models.get(node)
    predictions = infer_node(store, taxonomy, model, node, config)
    confident, uncertain = partition(predictions, config)
    promoted = promote_pseudo_labels(store, taxonomy, node, confident)

    retrained = False
    new_metrics = None
    if retrain_due(
        store, taxonomy, node, config, model, engine.pool_at_last_train(node)
    ):
        model = engine.train_node(node, train_config)
        retrained = True
        new_metrics = model.metrics.to_json() if model.metrics else None

    return ALReport(
        node=node,
        promoted=promoted,
        confident_count=len(confident),
        uncertain_count=len(uncertain),
        retrained=retrained,
        model_version=model.version if model is not None else 0,
        new_metrics=new_metrics,
    )
