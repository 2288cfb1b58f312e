import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptvid.taxonomy import (CATEGORIES, AugmentedQuery, TaxonomyError, ancestors,
                                 expand_query, extend_taxonomy, label_query,
                                 load_shipped_taxonomy, load_taxonomy, serialize_taxonomy,
                                 shipped_taxonomy_text, slugify)


@pytest.fixture(scope="module")
def tree():
    return load_shipped_taxonomy()


def test_shipped_shape(tree):
    assert len(tree.level(1)) == 20
    assert set(tree.by_category) == set(CATEGORIES) and len(CATEGORIES) == 5
    assert sum(len(v) for v in tree.by_category.values()) == 20
    assert all(tree.by_category[c] for c in CATEGORIES)


def test_working_conditions_under_labour_market(tree):
    c = tree["working-conditions"]
    assert (c.parent_id, c.category, c.level) == ("labour-market", "Economic", 2)
    row = "working-conditions\tWorking conditions\tEconomic\t2\tlabour-market\t-\t-\n"
    small = load_taxonomy("labour-market\tLabour market\tEconomic\t1\t-\t-\t-\n" + row)
    assert "working-conditions" in small


def test_education_query(tree):
    q = expand_query(tree, "education")
    assert q.sentences == ("Education", "students in a classroom attend a lecture")


def test_telephone_style_augmentations():
    text = ("objects\tObjects\tSocial\t1\t-\t-\t-\n"
            "telephones\tTelephones\tSocial\t2\tobjects\t-\t"
            "speaking on a telephone|talking on a telephone\n")
    q = expand_query(load_taxonomy(text), "telephones")
    assert q.sentences == ("Telephones", "speaking on a telephone", "talking on a telephone")


def test_label_only_query(tree):
    assert expand_query(tree, "war").sentences == ("War",)
    assert label_query(tree, "education").sentences == ("Education",)


def test_ancestors(tree):
    assert [c.label for c in ancestors(tree, "war")] == ["Refugees"]
    assert ancestors(tree, "urbanization") == []
    with pytest.raises(TaxonomyError) as info:
        ancestors(tree, "no-such-concept")
    assert info.value.kind == "unknown concept"


def test_every_level_two_has_one_level_one_ancestor(tree):
    for c in tree.level(2):
        (parent,) = ancestors(tree, c.id)
        assert parent.level == 1 and parent.category == c.category


def test_round_trip(tree):
    assert load_taxonomy(serialize_taxonomy(tree)) == tree
    assert load_taxonomy(shipped_taxonomy_text()) == tree


def _mutate(old, new):
    text = shipped_taxonomy_text()
    assert old in text
    return text.replace(old, new, 1)


@pytest.mark.parametrize("old,new,kind", [
    ("war\tWar\tDemographic\t2\trefugees", "war\tWar\tDemographic\t2\tnowhere", "dangling parent"),
    ("war\tWar\tDemographic\t2", "war\tWar\tEconomic\t2", "category mismatch"),
    ("persecution\tPersecution", "war\tPersecution", "duplicate id"),
    ("war\tWar\tDemographic\t2", "war\tWar\tCosmic\t2", "unknown category"),
    ("war\tWar\tDemographic\t2\trefugees", "war\tWar\tDemographic\t2\tpersecution",
     "wrong-level parent"),
    ("urbanization\tUrbanization\tEnvironmental\t1\t-",
     "urbanization\tUrbanization\tEnvironmental\t1\trefugees", "unexpected parent"),
    ("war\tWar\tDemographic\t2", "war\tWar\tDemographic\t3", "bad level"),
])
def test_mutations_fail_with_designated_error(old, new, kind):
    with pytest.raises(TaxonomyError) as info:
        load_taxonomy(_mutate(old, new))
    assert info.value.kind == kind
    assert info.value.line is not None


def test_malformed_record():
    with pytest.raises(TaxonomyError) as info:
        load_taxonomy("a\tb\n")
    assert info.value.kind == "malformed record"


def test_extension(tree):
    ext = "farming\tFarming\tEconomic\t2\tlabour-market\t-\tpeople harvesting crops\n"
    bigger = extend_taxonomy(tree, ext)
    assert len(bigger) == len(tree) + 1
    assert expand_query(bigger, "farming").sentences == ("Farming", "people harvesting crops")
    with pytest.raises(TaxonomyError):
        extend_taxonomy(tree, ext.replace("farming\t", "war\t", 1))


def test_slugs():
    assert slugify("Labour market") == "labour-market"
    assert slugify("Migrant groups & infrastructure") == "migrant-groups-infrastructure"


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        AugmentedQuery("x", ())
    with pytest.raises(ValueError):
        AugmentedQuery("x", ("ok", "  "))


label_text = st.text(alphabet=st.characters(whitelist_categories=("L", "N", "Zs")),
                     min_size=1, max_size=12).filter(lambda s: s.strip())


@given(st.lists(st.tuples(label_text, st.sampled_from(CATEGORIES),
                          st.lists(label_text, max_size=3)), min_size=1, max_size=6))
def test_random_trees_round_trip(rows):
    lines, seen = [], set()
    for i, (label, cat, augs) in enumerate(rows):
        cid = f"c{i}"
        seen.add(cid)
        lines.append("\t".join([cid, label.strip(), cat, "1", "-", "-",
                                "|".join(a.strip() for a in augs) or "-"]))
        lines.append("\t".join([cid + "x", label.strip(), cat, "2", cid, "def", "-"]))
    tree = load_taxonomy("\n".join(lines))
    assert load_taxonomy(serialize_taxonomy(tree)) == tree
    for cid in tree.concepts:
        assert expand_query(tree, cid).sentences
