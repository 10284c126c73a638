"""Stratified train/val/test assignment with parent/child containment.

Every ground-truth-labeled image gets exactly one split, stratified by its
full label path with seeded shuffling and largest-remainder rounding; the
per-image split is inherited by every ancestor classifier, which makes
child-train a subset of parent-train (likewise val and test) by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .store import ImageRecord, Store
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.70, 0.10, 0.20)
SPLIT_ORDER = ("train", "val", "test")

# Strata smaller than this go entirely to train: there is nothing meaningful
# to hold out from 1-2 samples.
MIN_STRATUM = 3


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitAssignment:
    image_id: str
    split: str
    assigned_at_depth: int


def largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Integer counts summing to n, proportional to ratios, largest-remainder."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    leftover = n - sum(counts)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i)
    )
    for i in remainders[:leftover]:
        counts[i] += 1
    return counts


def _stratum_rng(seed: int, stratum: str) -> np.random.Generator:
    # Stream independent of dict iteration order: keyed by the stratum itself.
    return np.random.default_rng([seed, *stratum.encode("utf-8")])


def assign_splits(
    records: list[ImageRecord],
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> dict[str, SplitAssignment]:
    """One split per ground-truth-labeled, non-deleted record.

    Deterministic in the seed and invariant to input order (ids are sorted
    before the shuffle). Strata with < 3 samples are forced to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios {ratios} do not sum to 1")
    strata: dict[str, list[str]] = {}
    depths: dict[str, int] = {}
    for record in records:
        if record.deleted or record.label is None or record.label_kind != "ground_truth":
            continue
        key = str(record.label)
        strata.setdefault(key, []).append(record.id)
        depths[key] = record.label.depth

    assignments: dict[str, SplitAssignment] = {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        depth = depths[key]
        if len(ids) < MIN_STRATUM:
            log.warning(
                "stratum %r has %d sample(s); forcing all to train", key, len(ids)
            )
            for image_id in ids:
                assignments[image_id] = SplitAssignment(image_id, "train", depth)
            continue
        rng = _stratum_rng(seed, key)
        order = rng.permutation(len(ids))
        counts = largest_remainder(len(ids), ratios)
        cursor = 0
        for split, count in zip(SPLIT_ORDER, counts):
            for k in order[cursor : cursor + count]:
                assignments[ids[k]] = SplitAssignment(ids[k], split, depth)
            cursor += count
    return assignments


def node_pools(
    taxonomy: Taxonomy,
    records: list[ImageRecord],
    assignments: dict[str, SplitAssignment],
) -> dict[str, dict[str, set[str]]]:
    """Materialize per-classifier split pools implied by the assignments."""
    pools: dict[str, dict[str, set[str]]] = {
        node: {s: set() for s in SPLIT_ORDER} for node in taxonomy.classifier_nodes()
    }
    by_id = {r.id: r for r in records}
    for image_id, assignment in assignments.items():
        record = by_id.get(image_id)
        if record is None or record.label is None:
            continue
        for node in pools:
            if taxonomy.class_of(record.label, node) is not None:
                pools[node][assignment.split].add(image_id)
    return pools


def verify_consistency(
    taxonomy: Taxonomy,
    records: list[ImageRecord],
    assignments: dict[str, SplitAssignment],
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    pools: dict[str, dict[str, set[str]]] | None = None,
) -> list[str]:
    """Empty list iff stratum counts obey the rounding contract and every
    parent/child classifier pair satisfies subset containment."""
    violations: list[str] = []

    strata: dict[str, list[str]] = {}
    eligible = set()
    for record in records:
        if record.deleted or record.label is None or record.label_kind != "ground_truth":
            continue
        eligible.add(record.id)
        strata.setdefault(str(record.label), []).append(record.id)

    missing = eligible - set(assignments)
    for image_id in sorted(missing):
        violations.append(f"record {image_id} has no split assignment")
    for image_id in sorted(set(assignments) - eligible):
        violations.append(f"assignment for non-eligible record {image_id}")

    for key in sorted(strata):
        ids = [i for i in strata[key] if i in assignments]
        got = {s: 0 for s in SPLIT_ORDER}
        for image_id in ids:
            got[assignments[image_id].split] += 1
        if len(ids) < MIN_STRATUM:
            if got["train"] != len(ids):
                violations.append(
                    f"stratum {key}: {len(ids)} sample(s) must all be train, got {got}"
                )
            continue
        expected = dict(zip(SPLIT_ORDER, largest_remainder(len(ids), ratios)))
        if got != expected:
            violations.append(f"stratum {key}: counts {got} != expected {expected}")

    if pools is None:
        pools = node_pools(taxonomy, records, assignments)
    for child_id in pools:
        # nearest classifier ancestor; intermediate 1-child nodes have no pools
        parent = taxonomy.parent_of(child_id)
        while parent is not None and parent not in pools:
            parent = taxonomy.parent_of(parent)
        if parent is None:
            continue
        for split in SPLIT_ORDER:
            stray = pools[child_id][split] - pools[parent][split]
            for image_id in sorted(stray):
                violations.append(
                    f"{split} containment broken at {parent}->{child_id}: {image_id}"
                )
    return violations
