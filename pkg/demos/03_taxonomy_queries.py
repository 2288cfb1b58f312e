"""Browse the shipped concept taxonomy and build queries from it.

Run:  python demos/03_taxonomy_queries.py
"""
from conceptvid.taxonomy import (TaxonomyError, ancestors, expand_query, extend_taxonomy,
                                 label_query, load_shipped_taxonomy)

tree = load_shipped_taxonomy()
for category, ids in tree.by_category.items():
    print(f"{category} ({len(ids)})")
    for cid in ids:
        kids = [c.label for c in tree.children(cid)]
        print(f"  {tree[cid].label}" + (f"  ->  {', '.join(kids)}" if kids else ""))

level2 = tree.level(2)[0]
print(f"\n{level2.label!r} sits under {[c.label for c in ancestors(tree, level2.id)]}")

for c in tree.concepts.values():
    if c.augmentations:
        print(f"\naugmented query for {c.label!r}:")
        for s in expand_query(tree, c.id).sentences:
            print("  ", s)
        print("label-only query:", label_query(tree, c.id).sentences)
        break

# User records extend the tree; a child must share its parent's category.
parent = tree.level(1)[0]
record = "\t".join(["seasonal-work", "Seasonal work", parent.category, "2", parent.id,
                    "-", "farm workers picking fruit|workers arriving for the harvest"])
bigger = extend_taxonomy(tree, record + "\n")
print(f"\nextended taxonomy: {len(tree)} -> {len(bigger)} concepts")
print(expand_query(bigger, "seasonal-work").sentences)

wrong = "Social" if parent.category != "Social" else "Economic"
try:
    extend_taxonomy(tree, record.replace(parent.category, wrong, 1) + "\n")
except TaxonomyError as exc:
    print("rejected:", exc)
