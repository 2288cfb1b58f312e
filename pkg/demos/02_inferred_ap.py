"""How extended inferred AP behaves when only part of the pool is judged.

Run:  python demos/02_inferred_ap.py
"""
import numpy as np

from conceptvid.evaluation import JudgmentPool, average_precision, xinfap
from conceptvid.retrieval import RankedList

rng = np.random.default_rng(7)
shots = [f"shot{i:03d}" for i in range(200)]
relevant = set(shots[:40])

# A run that is better than random: relevant shots get a score boost.
scores = rng.normal(size=200) + np.array([1.5 if s in relevant else 0.0 for s in shots])
order = np.argsort(-scores, kind="stable")
run = RankedList("t", tuple((shots[i], float(scores[i])) for i in order))
exact = average_precision(run.shot_ids, relevant)
print(f"exact AP with every shot judged: {exact:.4f}")

# Two strata: the run's top 60 and the remaining 140, judged at different rates.
strata = [run.shot_ids[:60], run.shot_ids[60:]]


def sample(rates):
    records = []
    for k, (members, rate) in enumerate(zip(strata, rates)):
        judged = set(rng.choice(members, int(round(rate * len(members))), replace=False))
        for d in members:
            records.append(("t", f"s{k}", d, (int(d in relevant) if d in judged else -1)))
    return JudgmentPool.from_records(records)


print("\nrates (top, rest)   mean xinfAP   std     bias")
for rates in [(1.0, 1.0), (1.0, 0.5), (0.5, 0.5), (1.0, 0.2), (0.5, 0.1)]:
    est = np.array([xinfap(run, sample(rates)) for _ in range(2000)])
    print(f"  {rates[0]:.1f}, {rates[1]:.1f}           {est.mean():.4f}      "
          f"{est.std():.4f}  {est.mean() - exact:+.4f}")

# Sparser judging keeps the estimate centred near the exact value while the
# spread across judgment samples grows.
