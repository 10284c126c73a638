"""Tree of image classes; every node with >= 2 children is a classifier.

Labels are dot-separated paths of node ids descending from the root
("microscopy.fluorescence"). A label may stop above the leaves: such an
incomplete label still supplies a class to every classifier above the point
where it stops.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_TOKEN = re.compile(r"[a-z0-9_]+\Z")

# A node needs at least this many children to train a classifier; a 1-class
# softmax is vacuous.
MIN_CLASSIFIER_CHILDREN = 2


class TaxonomyError(ValueError):
    """Structural problem in a taxonomy definition."""


class InvalidLabelError(ValueError):
    """A label path does not resolve inside the taxonomy."""

    def __init__(self, message: str, segment: str, index: int):
        super().__init__(message)
        self.segment = segment
        self.index = index  # 1-based position of the first bad segment


@dataclass(frozen=True)
class LabelPath:
    """Dot-separated, possibly incomplete path into the taxonomy."""

    segments: tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise InvalidLabelError("empty label path", segment="", index=1)
        for i, seg in enumerate(self.segments, start=1):
            if not _TOKEN.match(seg):
                raise InvalidLabelError(
                    f"malformed label segment {seg!r}", segment=seg, index=i
                )

    @classmethod
    def parse(cls, text: str) -> "LabelPath":
        return cls(tuple(text.strip().split(".")))

    @property
    def depth(self) -> int:
        return len(self.segments)

    @property
    def leaf(self) -> str:
        return self.segments[-1]

    def prefix(self, depth: int) -> "LabelPath":
        return LabelPath(self.segments[:depth])

    def extends(self, other: tuple[str, ...]) -> bool:
        """True when this path strictly descends through `other`."""
        return len(self.segments) > len(other) and self.segments[: len(other)] == tuple(other)

    def __str__(self) -> str:
        return ".".join(self.segments)


@dataclass
class TaxonomyNode:
    id: str
    display_name: str
    parent: str | None
    children: list[str] = field(default_factory=list)
    # Present iff the node is trainable (>= 2 children).
    classifier_state: dict | None = None

    @property
    def trainable(self) -> bool:
        return len(self.children) >= MIN_CLASSIFIER_CHILDREN


def _fresh_classifier_state() -> dict:
    return {
        "model_version": 0,
        "per_class_f1": {},
        "macro_f1": 0.0,
        "training_pool_size_at_last_train": 0,
    }


class Taxonomy:
    """Validated tree, immutable for the lifetime of a session."""

    def __init__(self, nodes: list[TaxonomyNode]):
        self.nodes: dict[str, TaxonomyNode] = {}
        root = None
        for node in nodes:
            if node.id in self.nodes:
                raise TaxonomyError(f"duplicate node id {node.id!r}")
            if not _TOKEN.match(node.id):
                raise TaxonomyError(f"malformed node id {node.id!r}")
            self.nodes[node.id] = node
            if node.parent is None:
                if root is not None:
                    raise TaxonomyError(
                        f"multiple roots: {root!r} and {node.id!r}"
                    )
                root = node.id
        if root is None:
            raise TaxonomyError("no root node (parent '-') defined")
        self.root = root

        for node in nodes:
            if node.parent is not None:
                if node.parent not in self.nodes:
                    raise TaxonomyError(
                        f"node {node.id!r} references missing parent {node.parent!r}"
                    )
                self.nodes[node.parent].children.append(node.id)

        # Path from root to each node (root itself has the empty path); the
        # walk doubles as the cycle check: unreachable nodes sit on a cycle.
        self._paths: dict[str, tuple[str, ...]] = {}
        stack = [(self.root, ())]
        while stack:
            node_id, path = stack.pop()
            self._paths[node_id] = path
            for child in self.nodes[node_id].children:
                stack.append((child, path + (child,)))
        if len(self._paths) != len(self.nodes):
            stranded = sorted(set(self.nodes) - set(self._paths))
            raise TaxonomyError(
                f"cycle or unreachable nodes: {', '.join(stranded)}"
            )

        for node in self.nodes.values():
            if node.trainable:
                node.classifier_state = _fresh_classifier_state()

    # -- structure ---------------------------------------------------------

    def node_path(self, node_id: str) -> tuple[str, ...]:
        """Segments of the label path leading to `node_id` (root -> ())."""
        return self._paths[node_id]

    def classifier_nodes(self) -> list[str]:
        """Trainable node ids in top-down (breadth-first) order."""
        out, queue = [], [self.root]
        while queue:
            node_id = queue.pop(0)
            if self.nodes[node_id].trainable:
                out.append(node_id)
            queue.extend(self.nodes[node_id].children)
        return out

    def classes_of(self, node_id: str) -> list[str]:
        """Class ids of a classifier node = its children, in taxonomy order."""
        return list(self.nodes[node_id].children)

    def parent_of(self, node_id: str) -> str | None:
        return self.nodes[node_id].parent

    # -- labels ------------------------------------------------------------

    def resolve(self, path: LabelPath) -> None:
        """Raise InvalidLabelError unless every prefix of `path` is a node."""
        parent = self.root
        for i, seg in enumerate(path.segments, start=1):
            if seg not in self.nodes[parent].children:
                raise InvalidLabelError(
                    f"label segment {seg!r} (position {i}) is not a child of "
                    f"{parent!r}",
                    segment=seg,
                    index=i,
                )
            parent = seg

    def validate_label(self, path: LabelPath) -> dict:
        """Depth of the label and the deepest classifier it supplies a class to."""
        self.resolve(path)
        deepest = None
        for node_id, node_path in self._paths.items():
            if not self.nodes[node_id].trainable:
                continue
            if len(node_path) < path.depth and path.segments[: len(node_path)] == node_path:
                if deepest is None or len(node_path) > len(self._paths[deepest]):
                    deepest = node_id
        return {"depth": path.depth, "deepest_classifier": deepest}

    def class_of(self, path: LabelPath, classifier_node: str) -> str | None:
        """Child of `classifier_node` the path descends through, or None.

        None when the path stops at or above the node, or descends elsewhere.
        """
        node_path = self._paths[classifier_node]
        if path.extends(node_path):
            return path.segments[len(node_path)]
        return None

    # -- serialization -----------------------------------------------------

    def serialize(self) -> str:
        """Tab-separated definition document; round-trips through load_taxonomy."""
        lines = []
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(self.nodes[order[i]].children)
            i += 1
        for node_id in order:
            node = self.nodes[node_id]
            parent = node.parent if node.parent is not None else "-"
            lines.append(f"{node.id}\t{parent}\t{node.display_name}")
        return "\n".join(lines) + "\n"


def load_taxonomy(document: str) -> Taxonomy:
    """Parse a taxonomy definition: one `id<TAB>parent_or_dash<TAB>name` per line."""
    nodes = []
    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaxonomyError(
                f"line {lineno}: expected 'id<TAB>parent<TAB>display name', got {raw!r}"
            )
        node_id, parent, display = (p.strip() for p in parts)
        nodes.append(
            TaxonomyNode(
                id=node_id,
                display_name=display,
                parent=None if parent == "-" else parent,
            )
        )
    return Taxonomy(nodes)


def load_taxonomy_file(path) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as fh:
        return load_taxonomy(fh.read())
