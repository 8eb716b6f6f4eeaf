"""Show how a labeled neighbour's status moves a transaction's score.

A model is trained once. Then one test transaction is scored twice, with a
labeled predecessor marked legitimate and then fraudulent. The test row's
own label never enters the computation.

    python demos/risk_propagation.py
"""

from gtan import Dataset, GtanConfig, SynthConfig, TrainConfig, generate, temporal_split
from gtan.experiments import run_gtan, prepare_features
from gtan.train import infer

dataset = Dataset.from_synthetic(generate(SynthConfig(seed=1)))
split = temporal_split(dataset)
run = run_gtan(dataset, split, GtanConfig(hidden_dim=64), TrainConfig(lr=1e-3, epochs=30, patience=8), seed=0)
model = run.train.model
_, features = prepare_features(dataset, split)
graph = dataset.graph(model.config.max_edges)
visible = split.inference_labels(len(dataset.table))



def score_with(q, nb, status):
    labels = visible.copy()
    labels[nb] = status
    return infer(model, graph, features, labels, [q])[0]


# among test rows with a labeled predecessor, show the one the label moves most
candidates = [(int(q), int(u)) for q in split.test[:2000] for u in graph.neighbors(q)[:-1] if visible[u] >= 0]
q, nb = max(candidates, key=lambda c: abs(score_with(*c, 1) - score_with(*c, 0)))
for status in (0, 1):
    print(f"neighbour {nb} marked {'fraud' if status else 'legitimate':10s} -> score of {q}: "
          f"{score_with(q, nb, status):.4f}")
print(f"ground truth of {q}: {'fraud' if dataset.truth[q] else 'legitimate'}")
