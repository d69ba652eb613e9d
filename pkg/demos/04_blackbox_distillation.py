"""Black-box attack: distill a surrogate from victim labels, attack through it.

The attacker can only query predicted labels. A substitute model is trained on
those labels, its gradients drive the same edge-insertion search, and success
is still judged by querying the real victim - at most max_iterations + 1
queries per attacked graph.
"""
import time

from graphsentry.graphdata import (FeatureSchema, SyntheticConfig,
                                   generate_synthetic_dataset, split_dataset)
import graphsentry.attacks as AT
import graphsentry.model as M
import graphsentry.training as T

config = SyntheticConfig(
    n_graphs=400, benign_node_range=(8, 14), motif_node_count=5,
    motif_feature_signature="110010101010", malicious_fraction=0.1,
    background_edge_prob=0.15, rng_seed=42, schema=FeatureSchema(8, 4))
graphs = generate_synthetic_dataset(config)
split = split_dataset(graphs, (0.7, 0.2, 0.1), class_ratio=(9, 1), rng_seed=0)
by_id = {g.graph_id: g for g in graphs}
parts = {name: [by_id[i] for i in getattr(split, name)]
         for name in ("train", "validation", "test")}

tcfg = T.TrainConfig(gamma=0.5, learning_rate=0.01, layers=2, hidden=32,
                     max_epochs=100, early_stop_patience=10, batch_size=32,
                     rng_seed=0, variant="full")
params, _ = T.train(parts["train"], parts["validation"], tcfg)

def victim_label(graph):
    return M.predict(graph, params)[0]

for arch in AT.ARCHITECTURES:
    tic = time.perf_counter()
    surrogate, agreement = AT.distill_surrogate(
        victim_label, parts["validation"], arch,
        epochs=30, hidden=16, rng_seed=0)
    dtime = time.perf_counter() - tic

    population = [g for g in parts["test"]
                  if g.label == 1 and victim_label(g) == 1]
    acfg = AT.AttackConfig(max_iterations=100, ig_steps=20)
    results = [AT.blackbox_attack(victim_label, surrogate, g, acfg)
               for g in population]
    summary = AT.compute_asr_apr(results)
    apr = f"{summary.apr:.3f}" if summary.apr_defined else "undefined"
    queries = [r.queries for r in results]
    print(f"{arch}: agreement {agreement:.3f} (distilled in {dtime:.1f}s), "
          f"ASR {summary.asr:.3f}, APR {apr}, "
          f"victim queries per graph {min(queries)}..{max(queries)} "
          f"(cap {acfg.max_iterations + 1})")
