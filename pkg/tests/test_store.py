import numpy as np
import pytest

from treelabel.al import make_prediction
from treelabel.store import (
    ImageRecord,
    PseudoLabel,
    QueryFilter,
    Store,
    StoreError,
    UnknownImageError,
    load_event_log,
)
from treelabel.taxonomy import LabelPath

from conftest import solid_image


def make_store(taxonomy, tmp_path=None, log=False):
    log_path = tmp_path / "events.jsonl" if (tmp_path and log) else None
    return Store(taxonomy, event_log_path=log_path)


def write_manifest_file(tmp_path, rows):
    img = tmp_path / "img.png"
    img.write_bytes(solid_image(4, 4, (128, 128, 128)))
    lines = ["id,uri,source,label,split,caption"]
    for r in rows:
        lines.append(",".join(r))
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def record(i, label=None, split=None, source="src", deleted=False):
    lp = LabelPath.parse(label) if label else None
    return ImageRecord(
        id=f"img{i:04d}",
        uri=f"/nowhere/{i}.png",
        source=source,
        label=lp,
        label_kind="ground_truth" if lp else "none",
        split=split or ("train" if lp else "unlabeled"),
        deleted=deleted,
    )


class TestIngest:
    def test_mixed_manifest(self, taxonomy, tmp_path):
        rows = [(f"a{i}", "img.png", "s1", "exp.gel", "", "") for i in range(4)]
        rows += [(f"b{i}", "img.png", "s1", "", "", "some caption") for i in range(6)]
        store = make_store(taxonomy)
        report = store.ingest(write_manifest_file(tmp_path, rows))
        assert report.count == 10 and not report.rejected
        gts = [r for r in store.records() if r.label_kind == "ground_truth"]
        assert len(gts) == 4
        assert all(r.split == "train" for r in gts)
        assert all(r.split == "unlabeled" for r in store.records() if r.label is None)

    def test_empty_manifest(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        report = store.ingest(write_manifest_file(tmp_path, []))
        assert report.count == 0

    def test_bad_label_row_rejected_others_kept(self, taxonomy, tmp_path):
        rows = [
            ("a1", "img.png", "s1", "exp.gel", "", ""),
            ("a2", "img.png", "s1", "exp.bogus", "", ""),
            ("a3", "img.png", "s1", "", "", ""),
        ]
        store = make_store(taxonomy)
        report = store.ingest(write_manifest_file(tmp_path, rows))
        assert report.count == 2
        assert [rid for rid, _ in report.rejected] == ["a2"]
        assert "bogus" in report.rejected[0][1]

    def test_idempotent_on_identical_ids(self, taxonomy, tmp_path):
        rows = [("a1", "img.png", "s1", "exp.gel", "", "")]
        path = write_manifest_file(tmp_path, rows)
        store = make_store(taxonomy)
        store.ingest(path)
        report = store.ingest(path)
        assert report.count == 1 and len(store) == 1

    def test_conflicting_duplicate_rejected(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        store.ingest(write_manifest_file(tmp_path, [("a1", "img.png", "s1", "exp.gel", "", "")]))
        report = store.ingest(
            write_manifest_file(tmp_path, [("a1", "img.png", "s1", "exp.plate", "", "")])
        )
        assert report.count == 0
        assert report.rejected[0] == ("a1", "duplicate id with conflicting fields")

    def test_reads_image_dimensions(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        store.ingest(write_manifest_file(tmp_path, [("a1", "img.png", "s1", "", "", "")]))
        rec = store.get("a1")
        assert (rec.width, rec.height) == (4, 4)

    def test_pinned_split_kept(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        store.ingest(
            write_manifest_file(tmp_path, [("a1", "img.png", "s1", "exp.gel", "test", "")])
        )
        assert store.get("a1").split == "test"

    def test_split_without_label_rejected(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        report = store.ingest(
            write_manifest_file(tmp_path, [("a1", "img.png", "s1", "", "val", "")])
        )
        assert report.count == 0 and report.rejected


class TestApplyUpdate:
    def test_relabel_within_parent(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel")])
        result = store.apply_update("img0001", "relabel", LabelPath.parse("exp.plate"), "s1")
        assert str(result.record.label) == "exp.plate"
        assert result.event.action == "relabel"
        assert str(result.event.old_label) == "exp.gel"
        assert str(result.event.new_label) == "exp.plate"

    def test_relabel_to_different_parent(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel")])
        result = store.apply_update("img0001", "relabel", LabelPath.parse("microscopy"), "s1")
        assert str(result.record.label) == "microscopy"
        assert taxonomy.class_of(result.record.label, "root") == "microscopy"

    def test_confirm_pseudo_label(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1)])
        store.set_pseudo(
            PseudoLabel("img0001", LabelPath.parse("exp.gel"), node="root", model_version=1)
        )
        assert store.get("img0001").label_kind == "pseudo"
        result = store.apply_update("img0001", "relabel", LabelPath.parse("exp.gel"), "s1")
        assert result.record.label_kind == "ground_truth"
        assert result.record.split == "train"
        # confirmation is a relabel whose old label is the pseudo value
        assert str(result.event.old_label) == "exp.gel"
        assert store.pseudo_label("img0001") is None

    def test_relabel_keeps_val_membership(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel", split="val")])
        result = store.apply_update("img0001", "relabel", LabelPath.parse("exp.plate"))
        assert result.record.split == "val"

    def test_delete_then_double_delete(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel")])
        first = store.apply_update("img0001", "delete")
        assert first.applied and first.record.deleted
        second = store.apply_update("img0001", "delete")
        assert not second.applied and second.note == "already deleted"
        assert len(store.events) == 1

    def test_restore(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel")])
        store.apply_update("img0001", "delete")
        result = store.apply_update("img0001", "restore")
        assert result.applied and not result.record.deleted

    def test_unknown_image(self, taxonomy):
        store = make_store(taxonomy)
        with pytest.raises(UnknownImageError):
            store.apply_update("nope", "delete")

    def test_invalid_label(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1)])
        with pytest.raises(Exception, match="bogus"):
            store.apply_update("img0001", "relabel", LabelPath.parse("exp.bogus"))


class TestQuery:
    def setup_store(self, taxonomy):
        store = make_store(taxonomy)
        records = [record(i, "exp.gel", source="s1") for i in range(5)]
        records += [record(i + 5, "exp.plate", source="s2") for i in range(3)]
        records += [record(i + 8) for i in range(4)]
        store.add_records(records)
        classes = taxonomy.classes_of("exp")
        # gel-labeled img0000/img0001 predicted plate; everything else gel
        preds = {}
        for rec in store.records():
            if store.gt_class_at(rec.id, "exp") is None:
                continue
            wrong = rec.id in ("img0000", "img0001")
            p = (0.2, 0.8) if wrong else (0.9, 0.1)
            preds[rec.id] = make_prediction(rec.id, "exp", 1, classes, p, 0.05)
        store.predictions["exp"] = preds
        root_classes = taxonomy.classes_of("root")
        root_preds = {}
        for k, rec in enumerate(store.records()):
            p = (0.55, 0.45) if k % 2 == 0 else (0.97, 0.03)
            root_preds[rec.id] = make_prediction(rec.id, "root", 1, root_classes, p, 0.05)
        store.predictions["root"] = root_preds
        return store

    def test_label_and_prediction_filter(self, taxonomy):
        store = self.setup_store(taxonomy)
        hits = store.query(
            QueryFilter(node="exp", label_classes={"gel"}, predicted_classes={"plate"})
        )
        assert [r.id for r in hits] == ["img0000", "img0001"]

    def test_empty_filter_returns_all_nondeleted(self, taxonomy):
        store = self.setup_store(taxonomy)
        store.apply_update("img0003", "delete")
        hits = store.query(QueryFilter())
        assert len(hits) == 11
        assert all(not r.deleted for r in hits)

    def test_probability_range_defaults_to_root(self, taxonomy):
        store = self.setup_store(taxonomy)
        hits = store.query(QueryFilter(prob_range=(0.0, 0.6)))
        expected = [r.id for k, r in enumerate(store.records()) if k % 2 == 0]
        assert [r.id for r in hits] == expected

    def test_insertion_order_invariance(self, taxonomy):
        store_a = make_store(taxonomy)
        store_b = make_store(taxonomy)
        recs = [record(i, "exp.gel") for i in range(10)]
        store_a.add_records(recs)
        store_b.add_records(list(reversed([record(i, "exp.gel") for i in range(10)])))
        assert [r.id for r in store_a.query()] == [r.id for r in store_b.query()]

    def test_source_filter(self, taxonomy):
        store = self.setup_store(taxonomy)
        hits = store.query(QueryFilter(sources={"s2"}))
        assert len(hits) == 3


class TestSubsets:
    def test_train_subset_is_training_pool(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records(
            [record(1, "exp.gel"), record(2, "exp.gel", split="val"), record(3), record(4)]
        )
        store.set_pseudo(
            PseudoLabel("img0003", LabelPath.parse("exp.plate"), node="root", model_version=1)
        )
        train = {r.id for r in store.subset_members("root", "train")}
        assert train == {"img0001", "img0003"}
        unlabeled = {r.id for r in store.subset_members("root", "unlabeled")}
        assert unlabeled == {"img0004"}
        both = store.subset_members("root", "unlabeled+train")
        assert len(both) == len(train) + len(unlabeled)

    def test_val_subset_ground_truth_only(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel", split="val"), record(2)])
        assert [r.id for r in store.subset_members("root", "val")] == ["img0001"]
        assert store.subset_members("exp", "val")[0].id == "img0001"


class TestEventSourcing:
    def test_replay_reproduces_state(self, taxonomy, tmp_path):
        log_path = tmp_path / "events.jsonl"
        live = Store(taxonomy, event_log_path=log_path)
        base = [record(i, "exp.gel") for i in range(6)] + [record(i + 6) for i in range(6)]
        live.add_records(base)
        live.apply_update("img0000", "relabel", LabelPath.parse("exp.plate"), "s1")
        live.apply_update("img0006", "relabel", LabelPath.parse("microscopy"), "s1")
        live.apply_update("img0002", "delete", session_id="s1")
        live.apply_update("img0002", "restore", session_id="s2")
        live.apply_update("img0007", "relabel", LabelPath.parse("exp.gel"), "s2")

        fresh = Store(taxonomy)
        fresh.add_records(
            [record(i, "exp.gel") for i in range(6)] + [record(i + 6) for i in range(6)]
        )
        fresh.replay(load_event_log(log_path))
        assert fresh.raw_records() == live.raw_records()
        assert [e.to_json() for e in fresh.events] == [e.to_json() for e in live.events]

    def test_session_events_order_and_filtering(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel"), record(2, "exp.gel")])
        store.apply_update("img0001", "relabel", LabelPath.parse("exp.plate"), "sess")
        store.apply_update("img0002", "relabel", LabelPath.parse("exp.plate"), "other")
        store.apply_update("img0001", "delete", session_id="sess")
        events = store.session_events("sess")
        assert [e.action for e in events] == ["relabel", "delete"]
        assert events[0].seq < events[1].seq
        assert store.session_events("ghost") == []

    def test_snapshot_round_trip(self, taxonomy, tmp_path):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel"), record(2)])
        store.set_pseudo(
            PseudoLabel("img0002", LabelPath.parse("microscopy"), node="root", model_version=3)
        )
        snap = tmp_path / "snapshot.jsonl"
        store.save_snapshot(snap)
        again = Store.load_snapshot(taxonomy, snap)
        assert again.raw_records() == store.raw_records()
        assert again.pseudo_label("img0002").path == LabelPath.parse("microscopy")


class TestPseudoLayer:
    def test_pseudo_never_on_val_test(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "exp.gel", split="test")])
        with pytest.raises(StoreError):
            store.set_pseudo(
                PseudoLabel("img0001", LabelPath.parse("exp.gel.x"), "exp", 1)
            )

    def test_pseudo_must_extend_ground_truth(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1, "microscopy")])
        with pytest.raises(StoreError):
            store.set_pseudo(
                PseudoLabel("img0001", LabelPath.parse("exp.gel"), "root", 1)
            )
        store.set_pseudo(
            PseudoLabel("img0001", LabelPath.parse("microscopy.light"), "microscopy", 1)
        )
        assert str(store.effective_label("img0001")) == "microscopy.light"

    def test_revoke_by_node(self, taxonomy):
        store = make_store(taxonomy)
        store.add_records([record(1), record(2)])
        store.set_pseudo(PseudoLabel("img0001", LabelPath.parse("exp"), "root", 1))
        store.set_pseudo(PseudoLabel("img0002", LabelPath.parse("microscopy"), "root", 1))
        assert store.revoke_pseudo({"root"}) == 2
        assert store.get("img0001").label_kind == "none"

    def test_labeled_record_cannot_be_unlabeled_split(self, taxonomy):
        store = make_store(taxonomy)
        with pytest.raises(StoreError):
            store.add_records([record(1, "exp.gel", split="unlabeled")])
