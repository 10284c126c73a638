import itertools

import pytest

from treelabel.taxonomy import (
    InvalidLabelError,
    LabelPath,
    TaxonomyError,
    load_taxonomy,
)

from conftest import FIXTURE_TAXONOMY


def test_fixture_tree_classifier_nodes(taxonomy):
    assert set(taxonomy.classifier_nodes()) == {"root", "exp", "microscopy", "electron"}
    # top-down order: a node never precedes its parent
    order = taxonomy.classifier_nodes()
    assert order.index("root") < order.index("microscopy") < order.index("electron")


def test_single_root_no_children_is_valid():
    tax = load_taxonomy("root\t-\tRoot\n")
    assert tax.root == "root"
    assert tax.classifier_nodes() == []


def test_one_child_node_not_trainable():
    tax = load_taxonomy("root\t-\tRoot\na\troot\tA\nb\ta\tB\n")
    # 'a' has one child: vacuous classifier
    assert tax.classifier_nodes() == []
    assert tax.nodes["a"].classifier_state is None


def test_dangling_parent_named():
    with pytest.raises(TaxonomyError, match="gel.*exp"):
        load_taxonomy("root\t-\tRoot\ngel\texp\tGel\n")


def test_duplicate_id_rejected():
    with pytest.raises(TaxonomyError, match="duplicate.*gel"):
        load_taxonomy("root\t-\tRoot\ngel\troot\tGel\ngel\troot\tGel again\n")


def test_cycle_rejected():
    with pytest.raises(TaxonomyError, match="cycle"):
        load_taxonomy("root\t-\tRoot\na\tb\tA\nb\ta\tB\n")


def test_multiple_roots_rejected():
    with pytest.raises(TaxonomyError, match="multiple roots"):
        load_taxonomy("root\t-\tRoot\nother\t-\tOther\n")


def test_validate_label_full_depth(taxonomy):
    out = taxonomy.validate_label(LabelPath.parse("microscopy.fluorescence"))
    assert out == {"depth": 2, "deepest_classifier": "microscopy"}


def test_validate_label_incomplete(taxonomy):
    out = taxonomy.validate_label(LabelPath.parse("microscopy"))
    assert out == {"depth": 1, "deepest_classifier": "root"}


def test_validate_label_bad_segment(taxonomy):
    with pytest.raises(InvalidLabelError) as exc:
        taxonomy.validate_label(LabelPath.parse("microscopy.bogus"))
    assert exc.value.segment == "bogus"
    assert exc.value.index == 2


def test_class_of_direct_child(taxonomy):
    assert taxonomy.class_of(LabelPath.parse("exp.gel"), "exp") == "gel"


def test_class_of_prefix_projection(taxonomy):
    assert taxonomy.class_of(LabelPath.parse("exp.gel"), "root") == "exp"


def test_class_of_too_shallow(taxonomy):
    # hand enumeration of the prefix relation: "exp" does not descend
    # through exp, so exp's classifier gets no class from it
    assert taxonomy.class_of(LabelPath.parse("exp"), "exp") is None


def test_class_of_matches_prefix_relation_exhaustively(taxonomy):
    # class_of(p, c) is not None iff c's path is a strict prefix of p,
    # checked over every (node path, classifier) pair in the fixture tree
    all_paths = [
        LabelPath(taxonomy.node_path(n)) for n in taxonomy.nodes if n != taxonomy.root
    ]
    for path, node_id in itertools.product(all_paths, taxonomy.nodes):
        node_path = taxonomy.node_path(node_id)
        is_strict_prefix = (
            len(node_path) < path.depth
            and path.segments[: len(node_path)] == node_path
        )
        got = taxonomy.class_of(path, node_id)
        assert (got is not None) == is_strict_prefix
        if got is not None:
            assert got == path.segments[len(node_path)]


def test_trainable_iff_two_children(taxonomy):
    for node in taxonomy.nodes.values():
        assert node.trainable == (len(node.children) >= 2)
        assert (node.classifier_state is not None) == node.trainable


def test_serialize_round_trip(taxonomy):
    doc = taxonomy.serialize()
    again = load_taxonomy(doc)
    assert set(again.nodes) == set(taxonomy.nodes)
    for node_id, node in taxonomy.nodes.items():
        other = again.nodes[node_id]
        assert other.parent == node.parent
        assert other.children == node.children
        assert other.display_name == node.display_name
    assert again.serialize() == doc


def test_fixture_document_parses_to_expected_shape():
    tax = load_taxonomy(FIXTURE_TAXONOMY)
    assert tax.classes_of("exp") == ["gel", "plate"]
    assert tax.classes_of("electron") == ["scanning", "transmission"]
    assert tax.node_path("fluorescence") == ("microscopy", "fluorescence")


def test_label_path_parse_and_str():
    p = LabelPath.parse("exp.gel")
    assert p.segments == ("exp", "gel")
    assert str(p) == "exp.gel"
    assert p.depth == 2 and p.leaf == "gel"
    with pytest.raises(InvalidLabelError):
        LabelPath.parse("Exp.Gel")
