"""Train the dual encoders on a synthetic corpus and search it with concept queries.

Run:  python demos/01_train_and_search.py [epochs]
"""
import sys

from conceptvid.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from conceptvid.encoders import EncoderConfig, init_params
from conceptvid.evaluation import JudgmentPool, format_comparison, xinfap
from conceptvid.retrieval import build_index, rank_shots
from conceptvid.taxonomy import expand_query, label_query
from conceptvid.training import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15

# Five visual prototypes, forty shots each. Every shot also carries one of
# eight attributes that its captions mention.
corpus = generate_synthetic_corpus(SyntheticCorpusSpec(seed=0))
print(f"{len(corpus.shots)} shots, {len(corpus.train_pairs)} training captions, "
      f"{len(corpus.val_pairs)} validation captions, vocabulary {len(corpus.embeddings)}")
print("example caption:", corpus.train_pairs[0].caption)

config = EncoderConfig(feature_dim=corpus.spec.feature_dim, embed_dim=corpus.embeddings.dim,
                       vocab_size=len(corpus.embeddings))
start = init_params(config, seed=0)

print("\nepoch  loss      R@1     R@5     medr")
result = train(corpus.train_pairs, corpus.features, corpus.embeddings, start,
               TrainConfig(epochs=epochs, seed=0), val_pairs=corpus.val_pairs,
               on_epoch=lambda r: print(f"{r.epoch:>5}  {r.mean_loss:8.4f}  {r.recall1:.4f}  "
                                        f"{r.recall5:.4f}  {r.median_rank:g}"))
print(f"best epoch {result.best_epoch}")

# Concept queries: the label alone, or the label plus its description sentences.
index = build_index(corpus.shots, result.best_params)
pool = JudgmentPool.from_records(corpus.qrels)


def scores(params, make_query):
    idx = index if params is result.best_params else build_index(corpus.shots, params)
    return {c: xinfap(rank_shots(make_query(corpus.taxonomy, c), idx, corpus.embeddings,
                                 params, len(corpus.shots)), pool)
            for c in corpus.concept_ids}


print("\nuntrained model")
print(format_comparison(scores(start, label_query), scores(start, expand_query),
                        ("label", "label+desc")))
print("trained model")
print(format_comparison(scores(result.best_params, label_query),
                        scores(result.best_params, expand_query), ("label", "label+desc")))

top = rank_shots(expand_query(corpus.taxonomy, corpus.concept_ids[0]), index,
                 corpus.embeddings, result.best_params, 5)
print(f"top shots for {corpus.concept_ids[0]!r}:")
for shot, score in top.entries:
    print(f"  {shot}  {score:.4f}  prototype {corpus.prototype_of[shot]}")
