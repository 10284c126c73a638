"""Catalog of image records plus the append-only label-update event log.

The record layer holds only ingested and human-confirmed state and is fully
reproducible by replaying the event log over the ingested baseline. Machine
pseudo-labels live in a separate layer owned by the active-learning loop;
query results and serialized views merge the two into the record's public
label / label_kind fields.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from PIL import Image

from .taxonomy import InvalidLabelError, LabelPath, Taxonomy

SPLITS = ("train", "val", "test", "unlabeled")
ACTIONS = ("relabel", "delete", "restore")

GROUND_TRUTH = "ground_truth"
PSEUDO = "pseudo"
NO_LABEL = "none"


class StoreError(ValueError):
    pass


class UnknownImageError(StoreError):
    pass


@dataclass
class ImageRecord:
    id: str
    uri: str
    source: str
    width: int = 0
    height: int = 0
    caption: str | None = None
    label: LabelPath | None = None
    label_kind: str = NO_LABEL
    split: str = "unlabeled"
    deleted: bool = False

    def to_json(self) -> dict:
        return {
            "type": "record",
            "id": self.id,
            "uri": self.uri,
            "source": self.source,
            "width": self.width,
            "height": self.height,
            "caption": self.caption,
            "label": str(self.label) if self.label else None,
            "label_kind": self.label_kind,
            "split": self.split,
            "deleted": self.deleted,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        return cls(
            id=obj["id"],
            uri=obj["uri"],
            source=obj["source"],
            width=obj["width"],
            height=obj["height"],
            caption=obj.get("caption"),
            label=LabelPath.parse(obj["label"]) if obj.get("label") else None,
            label_kind=obj.get("label_kind", NO_LABEL),
            split=obj["split"],
            deleted=obj.get("deleted", False),
        )


@dataclass(frozen=True)
class UpdateEvent:
    seq: int
    session_id: str
    image_id: str
    action: str
    old_label: LabelPath | None
    new_label: LabelPath | None
    timestamp: datetime

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "session": self.session_id,
            "image": self.image_id,
            "action": self.action,
            "old": str(self.old_label) if self.old_label else None,
            "new": str(self.new_label) if self.new_label else None,
            "ts": self.timestamp.isoformat(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "UpdateEvent":
        return cls(
            seq=obj["seq"],
            session_id=obj["session"],
            image_id=obj["image"],
            action=obj["action"],
            old_label=LabelPath.parse(obj["old"]) if obj.get("old") else None,
            new_label=LabelPath.parse(obj["new"]) if obj.get("new") else None,
            timestamp=datetime.fromisoformat(obj["ts"]),
        )


@dataclass(frozen=True)
class PseudoLabel:
    """Machine-assigned label extension; revocable, never in val/test."""

    image_id: str
    path: LabelPath
    node: str  # classifier node that assigned it
    model_version: int


@dataclass
class IngestReport:
    count: int = 0
    rejected: list[tuple[str, str]] = field(default_factory=list)  # (row id, reason)


@dataclass
class UpdateResult:
    record: ImageRecord
    event: UpdateEvent | None
    applied: bool
    note: str = ""


@dataclass
class QueryFilter:
    """Conjunctive record filter; class-level criteria are node-relative."""

    node: str | None = None
    subset: str | None = None  # train|val|test|unlabeled|unlabeled+train|all
    label_classes: set[str] | None = None
    predicted_classes: set[str] | None = None
    sources: set[str] | None = None
    prob_range: tuple[float, float] | None = None
    include_deleted: bool = False


class Store:
    """Single source of truth; mutations serialize through one writer lock."""

    def __init__(self, taxonomy: Taxonomy, event_log_path: str | Path | None = None):
        self.taxonomy = taxonomy
        self._records: dict[str, ImageRecord] = {}
        self._pseudo: dict[str, PseudoLabel] = {}
        self._events: list[UpdateEvent] = []
        self._seq = 0
        # Bumped on every label/split/feature mutation; projection cache key.
        self.version = 0
        self.features: dict[str, "object"] = {}
        self.feature_dim: int | None = None
        self.feature_source: str | None = None  # builtin | external
        # node id -> image id -> PredictionRecord (derived, not persisted)
        self.predictions: dict[str, dict[str, object]] = {}
        self._lock = threading.RLock()
        self._log_path = Path(event_log_path) if event_log_path else None

    # -- internals ----------------------------------------------------------

    def _bump(self) -> None:
        self.version += 1

    def _append_event(self, event: UpdateEvent) -> None:
        self._events.append(event)
        if self._log_path is not None:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.to_json()) + "\n")

    # -- ingestion ----------------------------------------------------------

    def ingest(self, manifest_path: str | Path, read_images: bool = True) -> IngestReport:
        """Load a manifest CSV: id,uri,source,label,split,caption with header.

        Rows with an invalid label or a split inconsistent with their label
        are rejected individually; ingestion is idempotent on identical ids.
        """
        report = IngestReport()
        manifest_path = Path(manifest_path)
        with open(manifest_path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        with self._lock:
            for row in rows:
                rid = (row.get("id") or "").strip()
                try:
                    record = self._row_to_record(row, manifest_path, read_images)
                except (StoreError, InvalidLabelError) as exc:
                    report.rejected.append((rid or "<missing id>", str(exc)))
                    continue
                existing = self._records.get(record.id)
                if existing is not None:
                    if existing == record:
                        report.count += 1  # idempotent re-ingest
                    else:
                        report.rejected.append(
                            (record.id, "duplicate id with conflicting fields")
                        )
                    continue
                self._records[record.id] = record
                report.count += 1
            if report.count:
                self._bump()
        return report

    def _row_to_record(self, row: dict, manifest_path: Path, read_images: bool) -> ImageRecord:
        rid = (row.get("id") or "").strip()
        uri = (row.get("uri") or "").strip()
        source = (row.get("source") or "").strip()
        if not rid or not uri or not source:
            raise StoreError("id, uri and source are required")
        label_text = (row.get("label") or "").strip()
        split = (row.get("split") or "").strip()
        caption = (row.get("caption") or "").strip() or None

        label = None
        if label_text:
            label = LabelPath.parse(label_text)
            self.taxonomy.resolve(label)

        if split and split not in SPLITS:
            raise StoreError(f"unknown split {split!r}")
        if label is None:
            if split and split != "unlabeled":
                raise StoreError(f"split {split!r} requires a label")
            split = "unlabeled"
        elif not split or split == "unlabeled":
            # a ground-truth label cannot sit in the unlabeled split
            split = "train"

        width = height = 0
        if read_images:
            path = Path(uri)
            if not path.is_absolute():
                path = manifest_path.parent / path
            try:
                with Image.open(path) as img:
                    width, height = img.size
            except OSError as exc:
                raise StoreError(f"unreadable image file {uri!r}: {exc}") from exc

        return ImageRecord(
            id=rid,
            uri=uri,
            source=source,
            width=width,
            height=height,
            caption=caption,
            label=label,
            label_kind=GROUND_TRUTH if label else NO_LABEL,
            split=split,
        )

    def add_records(self, records: list[ImageRecord]) -> None:
        """Programmatic ingestion path (fixtures, tests); same invariants."""
        with self._lock:
            for record in records:
                if record.label is not None:
                    self.taxonomy.resolve(record.label)
                    if record.split == "unlabeled":
                        raise StoreError(
                            f"record {record.id!r}: labeled records cannot be in "
                            "the unlabeled split"
                        )
                    record.label_kind = GROUND_TRUTH
                else:
                    if record.split != "unlabeled":
                        raise StoreError(
                            f"record {record.id!r}: split {record.split!r} requires a label"
                        )
                    record.label_kind = NO_LABEL
                if record.id in self._records:
                    raise StoreError(f"duplicate record id {record.id!r}")
                self._records[record.id] = record
            self._bump()

    # -- label updates ------------------------------------------------------

    def apply_update(
        self,
        image_id: str,
        action: str,
        new_label: LabelPath | None = None,
        session_id: str = "",
        _replay: UpdateEvent | None = None,
    ) -> UpdateResult:
        """Apply one human update; append it to the event log.

        Relabeled records become ground truth, and a previously unlabeled
        record moves to the train split. Deletes/restores of records already
        in the target state are flagged no-ops and not logged.
        """
        if action not in ACTIONS:
            raise StoreError(f"unknown action {action!r}")
        with self._lock:
            record = self._records.get(image_id)
            if record is None:
                raise UnknownImageError(f"unknown image id {image_id!r}")

            if action == "relabel":
                if new_label is None:
                    raise StoreError("relabel requires a new label")
                self.taxonomy.resolve(new_label)
                old_effective = self.effective_label(image_id)
                record.label = new_label
                record.label_kind = GROUND_TRUTH
                if record.split == "unlabeled":
                    record.split = "train"
                self._pseudo.pop(image_id, None)
                event = _replay or self._make_event(
                    session_id, image_id, action, old_effective, new_label
                )
                self._finish_event(event)
                return UpdateResult(self.get(image_id), event, applied=True)

            if action == "delete":
                if record.deleted:
                    return UpdateResult(
                        self.get(image_id), None, applied=False, note="already deleted"
                    )
                record.deleted = True
            else:  # restore
                if not record.deleted:
                    return UpdateResult(
                        self.get(image_id), None, applied=False, note="not deleted"
                    )
                record.deleted = False
            event = _replay or self._make_event(
                session_id, image_id, action, self.effective_label(image_id), None
            )
            self._finish_event(event)
            return UpdateResult(self.get(image_id), event, applied=True)

    def _make_event(self, session_id, image_id, action, old_label, new_label) -> UpdateEvent:
        return UpdateEvent(
            seq=self._seq + 1,
            session_id=session_id,
            image_id=image_id,
            action=action,
            old_label=old_label,
            new_label=new_label,
            timestamp=datetime.now(timezone.utc),
        )

    def _finish_event(self, event: UpdateEvent) -> None:
        self._seq = max(self._seq, event.seq)
        self._append_event(event)
        self._bump()

    def replay(self, events: list[UpdateEvent]) -> None:
        """Re-apply a logged event sequence over the ingested baseline."""
        for event in events:
            self.apply_update(
                event.image_id,
                event.action,
                new_label=event.new_label,
                session_id=event.session_id,
                _replay=event,
            )

    # -- pseudo-label layer ---------------------------------------------

    def set_pseudo(self, pseudo: PseudoLabel) -> None:
        record = self._records.get(pseudo.image_id)
        if record is None:
            raise UnknownImageError(f"unknown image id {pseudo.image_id!r}")
        if record.split in ("val", "test"):
            raise StoreError("pseudo labels never enter val/test records")
        if record.label is not None and not pseudo.path.extends(record.label.segments):
            raise StoreError(
                f"pseudo label {pseudo.path} does not extend ground truth {record.label}"
            )
        with self._lock:
            self._pseudo[pseudo.image_id] = pseudo
            self._bump()

    def revoke_pseudo(self, node_ids: set[str]) -> int:
        """Drop pseudo labels assigned by any of `node_ids`; returns count."""
        with self._lock:
            doomed = [i for i, p in self._pseudo.items() if p.node in node_ids]
            for image_id in doomed:
                del self._pseudo[image_id]
            if doomed:
                self._bump()
            return len(doomed)

    def pseudo_label(self, image_id: str) -> PseudoLabel | None:
        return self._pseudo.get(image_id)

    def pseudo_labels(self) -> dict[str, PseudoLabel]:
        return dict(self._pseudo)

    def effective_label(self, image_id: str) -> LabelPath | None:
        """Pseudo extension when present, else the ground-truth label."""
        pseudo = self._pseudo.get(image_id)
        if pseudo is not None:
            return pseudo.path
        return self._records[image_id].label

    def install_splits(self, assignments: dict) -> int:
        """Apply a split-assignment map to ground-truth records; returns changes."""
        changed = 0
        with self._lock:
            for assignment in assignments.values():
                record = self._records.get(assignment.image_id)
                if record is None or record.label is None or record.deleted:
                    continue
                if record.split != assignment.split:
                    record.split = assignment.split
                    changed += 1
            if changed:
                self._bump()
        return changed

    # -- features ---------------------------------------------------------

    def set_feature(self, image_id: str, vector, source: str) -> None:
        import numpy as np

        if image_id not in self._records:
            raise UnknownImageError(f"unknown image id {image_id!r}")
        vector = np.asarray(vector, dtype=np.float32)
        if vector.ndim != 1:
            raise StoreError("feature vectors are 1-D")
        if not np.all(np.isfinite(vector)):
            raise StoreError(f"non-finite feature entries for image {image_id!r}")
        with self._lock:
            if self.feature_dim is not None and vector.shape[0] != self.feature_dim:
                raise StoreError(
                    f"feature dimension {vector.shape[0]} conflicts with the "
                    f"collection dimension {self.feature_dim}"
                )
            self.feature_dim = vector.shape[0]
            self.feature_source = source
            self.features[image_id] = vector
            self._bump()

    # -- views --------------------------------------------------------------

    def get(self, image_id: str) -> ImageRecord:
        """Merged view: pseudo layer folded into label/label_kind."""
        record = self._records.get(image_id)
        if record is None:
            raise UnknownImageError(f"unknown image id {image_id!r}")
        pseudo = self._pseudo.get(image_id)
        if pseudo is None:
            return replace(record)
        return replace(record, label=pseudo.path, label_kind=PSEUDO)

    def records(self, include_deleted: bool = False) -> list[ImageRecord]:
        with self._lock:
            out = [
                self.get(i)
                for i, r in self._records.items()
                if include_deleted or not r.deleted
            ]
        out.sort(key=lambda r: r.id)
        return out

    def raw_records(self) -> list[ImageRecord]:
        """Ground-truth layer only (event-sourced state), sorted by id."""
        with self._lock:
            return sorted((replace(r) for r in self._records.values()), key=lambda r: r.id)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    # node-relative membership -------------------------------------------

    def gt_class_at(self, image_id: str, node: str) -> str | None:
        label = self._records[image_id].label
        if label is None:
            return None
        return self.taxonomy.class_of(label, node)

    def effective_class_at(self, image_id: str, node: str) -> str | None:
        label = self.effective_label(image_id)
        if label is None:
            return None
        return self.taxonomy.class_of(label, node)

    def routed_to(self, image_id: str, node: str) -> bool:
        """True when the record's effective label stops exactly at `node`."""
        label = self.effective_label(image_id)
        node_path = self.taxonomy.node_path(node)
        if label is None:
            return node == self.taxonomy.root
        return label.segments == node_path

    def subset_members(self, node: str, subset: str) -> list[ImageRecord]:
        """Records of a node's projection subset, sorted by id.

        train is the actual training pool (ground-truth train + pseudo at
        the node); unlabeled is everything routed to the node but not yet
        pseudo-labeled there, so train and unlabeled are disjoint.
        """
        if subset == "unlabeled+train":
            members = self.subset_members(node, "unlabeled") + self.subset_members(node, "train")
            return sorted(members, key=lambda r: r.id)
        if subset == "all":
            seen: dict[str, ImageRecord] = {}
            for sub in ("train", "val", "test", "unlabeled"):
                for rec in self.subset_members(node, sub):
                    seen[rec.id] = rec
            return sorted(seen.values(), key=lambda r: r.id)

        out = []
        with self._lock:
            for image_id, record in self._records.items():
                if record.deleted:
                    continue
                if subset in ("val", "test"):
                    if record.split == subset and self.gt_class_at(image_id, node):
                        out.append(self.get(image_id))
                elif subset == "train":
                    gt = self.gt_class_at(image_id, node)
                    if gt is not None and record.split == "train":
                        out.append(self.get(image_id))
                    elif gt is None and self.effective_class_at(image_id, node):
                        out.append(self.get(image_id))  # pseudo at node
                elif subset == "unlabeled":
                    if self.routed_to(image_id, node):
                        out.append(self.get(image_id))
                else:
                    raise StoreError(f"unknown subset {subset!r}")
        out.sort(key=lambda r: r.id)
        return out

    # -- query ----------------------------------------------------------

    def query(self, filt: QueryFilter | None = None) -> list[ImageRecord]:
        """Conjunctive filtering; result order is stable by id."""
        filt = filt or QueryFilter()
        node = filt.node
        needs_node = (
            filt.label_classes is not None
            or filt.predicted_classes is not None
            or filt.prob_range is not None
        )
        if node is None and needs_node:
            node = self.taxonomy.root

        if node is not None and filt.subset not in (None, "all"):
            base = self.subset_members(node, filt.subset)
            if filt.include_deleted:
                pass  # subset members are never deleted; nothing to add back
        else:
            base = self.records(include_deleted=filt.include_deleted)
            if node is not None:
                base = [
                    r
                    for r in base
                    if self.effective_class_at(r.id, node) or self.routed_to(r.id, node)
                ]
            elif filt.subset is not None and filt.subset != "all":
                wanted = set(filt.subset.split("+"))
                base = [r for r in base if r.split in wanted]

        preds = self.predictions.get(node, {}) if node is not None else {}
        out = []
        for record in base:
            if not filt.include_deleted and record.deleted:
                continue
            if filt.sources is not None and record.source not in filt.sources:
                continue
            if filt.label_classes is not None:
                cls = self.gt_class_at(record.id, node)
                if cls is None or cls not in filt.label_classes:
                    continue
            pred = preds.get(record.id)
            if filt.predicted_classes is not None:
                if pred is None or pred.predicted_class not in filt.predicted_classes:
                    continue
            if filt.prob_range is not None:
                lo, hi = filt.prob_range
                if pred is None:
                    continue
                top = float(max(pred.probs))
                if not (lo <= top <= hi):
                    continue
            out.append(record)
        return out

    # -- sessions ---------------------------------------------------------

    def session_events(self, session_id: str) -> list[UpdateEvent]:
        events = [e for e in self._events if e.session_id == session_id]
        events.sort(key=lambda e: e.seq)
        return events

    @property
    def events(self) -> list[UpdateEvent]:
        return list(self._events)

    # -- persistence --------------------------------------------------------

    def save_snapshot(self, path: str | Path) -> None:
        with self._lock, open(path, "w", encoding="utf-8") as fh:
            meta = {
                "type": "meta",
                "seq": self._seq,
                "version": self.version,
                "feature_source": self.feature_source,
            }
            fh.write(json.dumps(meta) + "\n")
            for record in sorted(self._records.values(), key=lambda r: r.id):
                fh.write(json.dumps(record.to_json()) + "\n")
            for pseudo in sorted(self._pseudo.values(), key=lambda p: p.image_id):
                fh.write(
                    json.dumps(
                        {
                            "type": "pseudo",
                            "image": pseudo.image_id,
                            "path": str(pseudo.path),
                            "node": pseudo.node,
                            "model_version": pseudo.model_version,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load_snapshot(
        cls,
        taxonomy: Taxonomy,
        snapshot_path: str | Path,
        event_log_path: str | Path | None = None,
    ) -> "Store":
        """Snapshot plus any events logged after its seq watermark."""
        store = cls(taxonomy)
        watermark = 0
        with open(snapshot_path, "r", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                kind = obj.get("type")
                if kind == "meta":
                    watermark = obj["seq"]
                    store._seq = obj["seq"]
                    store.version = obj.get("version", 0)
                    store.feature_source = obj.get("feature_source")
                elif kind == "record":
                    record = ImageRecord.from_json(obj)
                    store._records[record.id] = record
                elif kind == "pseudo":
                    store._pseudo[obj["image"]] = PseudoLabel(
                        image_id=obj["image"],
                        path=LabelPath.parse(obj["path"]),
                        node=obj["node"],
                        model_version=obj["model_version"],
                    )
        if event_log_path is not None and Path(event_log_path).exists():
            events = load_event_log(event_log_path)
            store._events = [e for e in events if e.seq <= watermark]
            store.replay([e for e in events if e.seq > watermark])
        store._log_path = Path(event_log_path) if event_log_path else None
        return store


def load_event_log(path: str | Path) -> list[UpdateEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(UpdateEvent.from_json(json.loads(line)))
    events.sort(key=lambda e: e.seq)
    return events


def write_manifest(path: str | Path, records: list[ImageRecord]) -> int:
    """Emit records in the ingestion manifest format (labels = ground truth)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "uri", "source", "label", "split", "caption"])
        for record in records:
            writer.writerow(
                [
                    record.id,
                    record.uri,
                    record.source,
                    str(record.label) if record.label else "",
                    record.split,
                    record.caption or "",
                ]
            )
    return len(records)
