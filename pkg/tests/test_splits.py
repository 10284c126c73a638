import itertools

import numpy as np
import pytest

from treelabel import splits
from treelabel.store import PseudoLabel, Store
from treelabel.taxonomy import LabelPath, load_taxonomy

from test_store import record


def oracle_largest_remainder(n, ratios):
    """Enumerate every rounding within +1 of the floors and pick the one the
    largest-remainder rule selects; independent of the implementation."""
    exact = [n * r for r in ratios]
    floors = [int(np.floor(e)) for e in exact]
    leftover = n - sum(floors)
    best = None
    for bumps in itertools.combinations(range(len(ratios)), leftover):
        candidate = list(floors)
        for i in bumps:
            candidate[i] += 1
        score = sorted(
            ((exact[i] - floors[i], -i) for i in bumps), reverse=True
        )
        key = tuple(score)
        if best is None or key > best[0]:
            best = (key, candidate)
    return best[1] if best else floors


class TestAssign:
    def test_100_images_70_10_20(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(100)]
        assignments = splits.assign_splits(records, seed=5)
        counts = {"train": 0, "val": 0, "test": 0}
        for a in assignments.values():
            counts[a.split] += 1
        assert counts == {"train": 70, "val": 10, "test": 20}

    def test_10_images_7_1_2(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(10)]
        assignments = splits.assign_splits(records, seed=1)
        counts = {"train": 0, "val": 0, "test": 0}
        for a in assignments.values():
            counts[a.split] += 1
        oracle = oracle_largest_remainder(10, splits.DEFAULT_RATIOS)
        assert [counts[s] for s in splits.SPLIT_ORDER] == oracle == [7, 1, 2]

    def test_child_train_contained_in_parent_train(self, taxonomy):
        records = [record(i, "microscopy.electron.scanning") for i in range(40)]
        records += [record(100 + i, "microscopy.electron.transmission") for i in range(40)]
        records += [record(200 + i, "microscopy.light") for i in range(30)]
        assignments = splits.assign_splits(records, seed=3)
        pools = splits.node_pools(taxonomy, records, assignments)
        for split in splits.SPLIT_ORDER:
            assert pools["electron"][split] <= pools["microscopy"][split]
            assert pools["microscopy"][split] <= pools["root"][split]

    def test_small_stratum_all_train(self, taxonomy):
        records = [record(i, "exp.plate") for i in range(2)]
        assignments = splits.assign_splits(records, seed=0)
        assert all(a.split == "train" for a in assignments.values())

    def test_deterministic_and_order_invariant(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(50)]
        a1 = splits.assign_splits(records, seed=9)
        a2 = splits.assign_splits(list(reversed(records)), seed=9)
        assert a1 == a2
        a3 = splits.assign_splits(records, seed=10)
        assert a1 != a3

    def test_pseudo_and_unlabeled_excluded(self, taxonomy):
        store = Store(taxonomy)
        store.add_records([record(1, "exp.gel"), record(2), record(3)])
        store.set_pseudo(PseudoLabel("img0002", LabelPath.parse("exp.gel"), "root", 1))
        assignments = splits.assign_splits(store.records())
        assert set(assignments) == {"img0001"}

    def test_assigned_at_depth_tracks_label(self, taxonomy):
        records = [record(i, "microscopy.electron.scanning") for i in range(5)]
        assignments = splits.assign_splits(records)
        assert all(a.assigned_at_depth == 3 for a in assignments.values())

    def test_bad_ratios(self, taxonomy):
        with pytest.raises(splits.SplitError):
            splits.assign_splits([], ratios=(0.5, 0.2, 0.2))


class TestVerify:
    def test_own_output_clean(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(30)]
        records += [record(100 + i, "exp.plate") for i in range(10)]
        records += [record(200 + i, "microscopy.fluorescence") for i in range(12)]
        assignments = splits.assign_splits(records, seed=2)
        assert splits.verify_consistency(taxonomy, records, assignments) == []

    def test_flipped_pool_breaks_containment(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(20)]
        records += [record(50 + i, "exp.plate") for i in range(20)]
        assignments = splits.assign_splits(records, seed=2)
        pools = splits.node_pools(taxonomy, records, assignments)
        # move one exp-train image into root's test pool
        moved = sorted(pools["exp"]["train"])[0]
        pools["root"]["train"].discard(moved)
        pools["root"]["test"].add(moved)
        violations = splits.verify_consistency(
            taxonomy, records, assignments, pools=pools
        )
        containment = [v for v in violations if "containment" in v]
        assert len(containment) == 1 and moved in containment[0]
        assert "train containment broken at root->exp" in containment[0]

    def test_small_stratum_rule_not_a_violation(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(2)]
        records += [record(10 + i, "exp.plate") for i in range(10)]
        assignments = splits.assign_splits(records, seed=4)
        assert splits.verify_consistency(taxonomy, records, assignments) == []

    def test_missing_assignment_reported(self, taxonomy):
        records = [record(i, "exp.gel") for i in range(5)]
        assignments = splits.assign_splits(records, seed=0)
        del assignments["img0000"]
        violations = splits.verify_consistency(taxonomy, records, assignments)
        assert any("img0000" in v and "no split" in v for v in violations)


class TestInstall:
    def test_install_sets_record_splits(self, taxonomy):
        store = Store(taxonomy)
        store.add_records([record(i, "exp.gel") for i in range(10)])
        assignments = splits.assign_splits(store.records(), seed=6)
        changed = store.install_splits(assignments)
        assert changed > 0
        got = {s: 0 for s in splits.SPLIT_ORDER}
        for rec in store.records():
            got[rec.split] += 1
        assert [got[s] for s in splits.SPLIT_ORDER] == [7, 1, 2]


def random_taxonomy(rng):
    """Random 2-3 level tree document for fuzz checks."""
    lines = ["root\t-\tRoot"]
    leaf_paths = []
    n_top = rng.integers(2, 5)
    for t in range(n_top):
        top = f"n{t}"
        lines.append(f"{top}\troot\tTop {t}")
        n_kids = int(rng.integers(0, 4))
        if n_kids == 0:
            leaf_paths.append(top)
        for k in range(n_kids):
            kid = f"n{t}_{k}"
            lines.append(f"{kid}\t{top}\tKid {t}.{k}")
            leaf_paths.append(f"{top}.{kid}")
        if n_kids == 1:
            leaf_paths.append(top)  # 1-child parents are not classifiers
    return load_taxonomy("\n".join(lines) + "\n"), leaf_paths


def test_fuzz_random_taxonomies_and_datasets():
    rng = np.random.default_rng(2024)
    for trial in range(15):
        tax, leaf_paths = random_taxonomy(rng)
        n = int(rng.integers(20, 400))
        records = []
        for i in range(n):
            path = leaf_paths[int(rng.integers(0, len(leaf_paths)))]
            records.append(
                record(trial * 10000 + i, path)
            )
        assignments = splits.assign_splits(records, seed=int(rng.integers(0, 1 << 30)))
        assert splits.verify_consistency(tax, records, assignments) == []
