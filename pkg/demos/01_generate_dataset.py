"""Generate a small planted-motif dataset and poke at its records.

Malicious graphs hide a densely wired ring of nodes carrying a fixed feature
signature inside random background; benign graphs are pure background. The
file format is line-oriented JSON with a schema header, so reruns with the
same seed are byte-identical.
"""
import os

from graphsentry.graphdata import (FeatureSchema, SyntheticConfig,
                                   generate_synthetic_dataset, load_dataset,
                                   save_dataset)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

schema = FeatureSchema(opcode_dim=8, permission_dim=4)
config = SyntheticConfig(
    n_graphs=200,
    benign_node_range=(8, 14),
    motif_node_count=5,
    motif_feature_signature="110010101010",
    malicious_fraction=0.1,
    background_edge_prob=0.15,
    rng_seed=42,
    schema=schema,
)

graphs = generate_synthetic_dataset(config)
path = os.path.join(OUT, "demo_dataset.jsonl")
save_dataset(path, graphs, schema)

reloaded, schema2 = load_dataset(path)
malicious = [g for g in reloaded if g.label == 1]
print(f"wrote {len(graphs)} graphs to {path}")
print(f"schema: opcode {schema2.opcode_dim} + permission {schema2.permission_dim} "
      f"= {schema2.d} feature bits")
print(f"class balance: {len(reloaded) - len(malicious)} benign, "
      f"{len(malicious)} malicious")

g = malicious[0]
print(f"\nsample malicious graph {g.graph_id}: {g.node_count} nodes, "
      f"{len(g.edges)} edges")
print(f"motif signature: {config.motif_feature_signature}")
print("feature rows (* = motif node):")
for row in g.features:
    bits = "".join(str(int(v)) for v in row)
    mark = " *" if bits == config.motif_feature_signature else ""
    print(f"  {bits}{mark}")
