"""Edge-insertion attacks against trained detectors, plus robustness metrics.

The white-box attack scores every missing directed edge with path-integrated
gradients of the benign-minus-malicious margin, taken on a relaxed forward
pass where adjacency entries vary continuously in [0,1]. The relaxation
symmetrizes smoothly (S = A + A^T - A*A^T) and normalizes by fractional
degrees, so at binary adjacency it coincides exactly with the discrete
forward. The black-box attack distills a surrogate from victim-predicted
labels and reuses the same loop, judging success by querying the victim.

Gradients with respect to adjacency are computed by a hand-derived, batched
reverse pass over the relaxed forward (one batch row per candidate edge per
integration step); the training tape stays out of the attack hot path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .graphdata import FeatureGraph
from .losses import cross_entropy_logits
from .training import Adam

DEG_EPS = 1e-12
CHUNK_ROWS = 512

ARCHITECTURES = ("mlp_on_degree_features", "gnn2_mlp")


class NoCandidateEdges(ValueError):
    """The graph is complete; there is nothing left to add."""


@dataclass
class AttackConfig:
    max_iterations: int = 100
    ig_steps: int = 20
    edges_per_iteration: int = 1
    candidate_policy: str = "any_missing_edge"
    rng_seed: int = 0

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be at least 1")
        if self.edges_per_iteration < 1:
            raise ValueError("edges_per_iteration must be at least 1")
        if self.candidate_policy != "any_missing_edge":
            raise ValueError(f"unknown candidate policy {self.candidate_policy!r}")


@dataclass
class AttackResult:
    original_id: str
    perturbed: FeatureGraph
    success: bool
    iterations_used: int
    edges_added: list[tuple[int, int]]
    original_edge_count: int
    queries: int


@dataclass
class SurrogateParams:
    """Distilled substitute model: either a 2-layer GNN + MLP head, or an MLP
    over pooled features plus a normalized-degree summary."""

    architecture: str
    weights: dict[str, np.ndarray]

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        need = ({"enc.0", "enc.1", "head.0", "head.1"}
                if self.architecture == "gnn2_mlp" else {"head.0", "head.1"})
        if set(self.weights) != need:
            raise ValueError(f"{self.architecture} expects weights {sorted(need)}")
        if self.weights["head.1"].shape[1] != 2:
            raise ValueError("surrogate head must emit 2 class scores")


@dataclass
class AttackSummary:
    asr: float
    apr: float
    apr_defined: bool
    attempted: int
    succeeded: int


def dense_adjacency(graph: FeatureGraph) -> np.ndarray:
    a = np.zeros((graph.node_count, graph.node_count))
    for s, t in graph.edges:
        a[s, t] = 1.0
    return a


# ------------------------------------------------------------------ relaxed forward


def _relaxed_propagation(a_batch: np.ndarray):
    """Smooth symmetrization and degree normalization for a (B,n,n) batch."""
    at = np.transpose(a_batch, (0, 2, 1))
    s = a_batch + at - a_batch * at
    deg = s.sum(axis=2)
    live = deg > DEG_EPS
    r = 1.0 / np.sqrt(np.maximum(deg, DEG_EPS))
    p = s * r[:, :, None] * r[:, None, :]
    return s, deg, live, r, p, at


def _margin_grad_gnn(gnn_weights: list[np.ndarray], head, x: np.ndarray,
                     a_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched margin and d(margin)/d(adjacency) for a GNN + readout + head.

    `head(g)` maps pooled embeddings (B,h) to (margin (B,), d margin/d g (B,h)).
    """
    B, n, _ = a_batch.shape
    s, deg, live, r, p, at = _relaxed_propagation(a_batch)

    hs = [np.broadcast_to(x, (B,) + x.shape)]
    qs = []
    for w in gnn_weights:
        m = hs[-1] + p @ hs[-1]
        q = m @ w
        qs.append(q)
        hs.append(np.maximum(q, 0.0))
    g = hs[-1].mean(axis=1)

    f, dg = head(g)

    dh = np.broadcast_to(dg[:, None, :] / n, hs[-1].shape)
    dp = np.zeros_like(p)
    for l in reversed(range(len(gnn_weights))):
        dq = dh * (qs[l] > 0)
        dm = dq @ gnn_weights[l].T
        dp += np.einsum("bik,bjk->bij", dm, hs[l])
        dh = dm + np.transpose(p, (0, 2, 1)) @ dm

    ds = dp * r[:, :, None] * r[:, None, :]
    dr = (np.einsum("bij,bij,bj->bi", dp, s, r)
          + np.einsum("bji,bji,bj->bi", dp, s, r))
    ddeg = np.where(live, dr * (-0.5) * r**3, 0.0)
    ds = ds + ddeg[:, :, None]  # deg_v is the row sum of S, so spread over the row

    da = (ds + np.transpose(ds, (0, 2, 1))) * (1.0 - at)
    idx = np.arange(n)
    da[:, idx, idx] = 0.0
    return f, da


def _proxy_head(p0: np.ndarray, p1: np.ndarray):
    n0 = max(float(np.linalg.norm(p0)), ad.NORM_CLAMP)
    n1 = max(float(np.linalg.norm(p1)), ad.NORM_CLAMP)

    def head(g):
        raw = np.linalg.norm(g, axis=1)
        gn = np.maximum(raw, ad.NORM_CLAMP)
        glive = (raw > ad.NORM_CLAMP)[:, None]
        c0 = (g @ p0) / (gn * n0)
        c1 = (g @ p1) / (gn * n1)
        f = c0 - c1
        dc0 = p0[None, :] / (gn * n0)[:, None] - (c0 / gn**2)[:, None] * g * glive
        dc1 = p1[None, :] / (gn * n1)[:, None] - (c1 / gn**2)[:, None] * g * glive
        return f, dc0 - dc1
    return head


def _logits_head(w0: np.ndarray, w1: np.ndarray):
    u = w1[:, 0] - w1[:, 1]  # margin = logit_benign - logit_malicious

    def head(g):
        pre = g @ w0
        hid = np.maximum(pre, 0.0)
        f = hid @ u
        dg = (u[None, :] * (pre > 0)) @ w0.T
        return f, dg
    return head


def _margin_grad_degree_mlp(weights: dict, x: np.ndarray,
                            a_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """MLP over [mean feature row, mean normalized degree]; adjacency enters
    only through the degree summary."""
    B, n, _ = a_batch.shape
    s, deg, live, r, p, at = _relaxed_propagation(a_batch)
    norm = max(n * (n - 1), 1)
    phi = np.concatenate([
        np.broadcast_to(x.mean(axis=0), (B, x.shape[1])),
        deg.sum(axis=1)[:, None] / norm,
    ], axis=1)
    head = _logits_head(weights["head.0"], weights["head.1"])
    f, dphi = head(phi)
    ds = np.broadcast_to((dphi[:, -1] / norm)[:, None, None], s.shape)
    da = (ds + np.transpose(ds, (0, 2, 1))) * (1.0 - at)
    idx = np.arange(n)
    da[:, idx, idx] = 0.0
    return f, da


class DetectorVictim:
    """White-box view of trained ModelParams: margin is benign minus malicious."""

    def __init__(self, params: M.ModelParams):
        self.params = params

    def label(self, graph: FeatureGraph) -> int:
        return M.predict(graph, self.params)[0]

    def margin_grad_batched(self, features: np.ndarray,
                            a_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        head = (_logits_head(p.head_weights[0], p.head_weights[1])
                if p.head_weights is not None
                else _proxy_head(p.proxy_benign, p.proxy_malicious))
        return _margin_grad_gnn(p.encoder_weights, head, features, a_batch)


class SurrogateVictim:
    """The same interface over distilled SurrogateParams."""

    def __init__(self, surrogate: SurrogateParams):
        surrogate.validate()
        self.surrogate = surrogate

    def label(self, graph: FeatureGraph) -> int:
        f, _ = self.margin_grad_batched(graph.features,
                                        dense_adjacency(graph)[None])
        return 1 if f[0] <= 0.0 else 0  # tie goes malicious, as in predict

    def margin_grad_batched(self, features: np.ndarray,
                            a_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = self.surrogate.weights
        if self.surrogate.architecture == "gnn2_mlp":
            head = _logits_head(w["head.0"], w["head.1"])
            return _margin_grad_gnn([w["enc.0"], w["enc.1"]], head,
                                    features, a_batch)
        return _margin_grad_degree_mlp(w, features, a_batch)


def as_victim(victim):
    """Normalize ModelParams / SurrogateParams / duck-typed victims."""
    if isinstance(victim, M.ModelParams):
        return DetectorVictim(victim)
    if isinstance(victim, SurrogateParams):
        return SurrogateVictim(victim)
    if hasattr(victim, "margin_grad_batched"):
        return victim
    raise TypeError(f"cannot attack a {type(victim).__name__}")


# ------------------------------------------------------------------ saliency


def candidate_edges(graph: FeatureGraph) -> list[tuple[int, int]]:
    existing = graph.edge_set()
    n = graph.node_count
    return [(s, t) for s in range(n) for t in range(n)
            if s != t and (s, t) not in existing]


def edge_saliency_ig(victim, graph: FeatureGraph,
                     ig_steps: int) -> dict[tuple[int, int], float]:
    """Integrated-gradient score per missing edge.

    IG(e) = (1/m) sum_{k=1..m} d f(A + (k/m) 1_e) / dA_e, where f is the
    benign-minus-malicious margin. Higher scores push harder toward benign.
    Each candidate integrates along its own path; rows are batched and chunked.
    """
    if ig_steps < 1:
        raise ValueError("ig_steps must be at least 1")
    victim = as_victim(victim)
    cands = candidate_edges(graph)
    if not cands:
        raise NoCandidateEdges(f"graph {graph.graph_id} has no missing edges")
    base = dense_adjacency(graph)
    n = graph.node_count

    scores = np.zeros(len(cands))
    rows = [(ci, (k + 1) / ig_steps) for ci in range(len(cands))
            for k in range(ig_steps)]
    for start in range(0, len(rows), CHUNK_ROWS):
        chunk = rows[start:start + CHUNK_ROWS]
        a_batch = np.tile(base, (len(chunk), 1, 1))
        for b, (ci, alpha) in enumerate(chunk):
            s, t = cands[ci]
            a_batch[b, s, t] = alpha
        _, da = victim.margin_grad_batched(graph.features, a_batch)
        for b, (ci, _) in enumerate(chunk):
            s, t = cands[ci]
            scores[ci] += da[b, s, t]
    scores /= ig_steps
    if not np.all(np.isfinite(scores)):
        raise ad.NonFiniteError("saliency scores went non-finite")
    return {edge: float(score) for edge, score in zip(cands, scores)}


# ------------------------------------------------------------------ attack loops


def _add_edges(graph: FeatureGraph, new_edges: list[tuple[int, int]]) -> FeatureGraph:
    return FeatureGraph(
        node_count=graph.node_count,
        edges=graph.edges + list(new_edges),
        features=graph.features,
        label=graph.label,
        graph_id=graph.graph_id,
        year_tag=graph.year_tag,
    )


def _attack_loop(saliency_victim, label_fn, graph: FeatureGraph,
                 config: AttackConfig) -> AttackResult:
    config.validate()
    if label_fn(graph) != 1:
        raise ValueError(f"graph {graph.graph_id} is not detected as malicious; "
                         f"nothing to evade")
    queries = 1
    work = graph
    added: list[tuple[int, int]] = []
    iterations = 0
    success = False
    while iterations < config.max_iterations:
        try:
            scores = edge_saliency_ig(saliency_victim, work, config.ig_steps)
        except NoCandidateEdges:
            break
        iterations += 1
        ranked = sorted(scores, key=lambda e: (-scores[e], e))
        picks = ranked[:config.edges_per_iteration]
        work = _add_edges(work, picks)
        added.extend(picks)
        queries += 1
        if label_fn(work) == 0:
            success = True
            break
    return AttackResult(
        original_id=graph.graph_id,
        perturbed=work,
        success=success,
        iterations_used=iterations,
        edges_added=added,
        original_edge_count=len(graph.edges),
        queries=queries,
    )


def whitebox_attack(victim, graph: FeatureGraph, config: AttackConfig) -> AttackResult:
    """Gradient-guided edge insertion with full access to the victim.

    `victim` is ModelParams or anything exposing label/margin_grad_batched.
    Original edges, features, and nodes are never touched; only additions.
    """
    v = as_victim(victim)
    return _attack_loop(v, v.label, graph, config)


def blackbox_attack(victim_label_fn, surrogate, graph: FeatureGraph,
                    config: AttackConfig) -> AttackResult:
    """Saliency from the surrogate; success judged by querying the victim.

    Victim queries are bounded by max_iterations + 1 (one precondition check
    plus one per iteration).
    """
    return _attack_loop(as_victim(surrogate), victim_label_fn, graph, config)


# ------------------------------------------------------------------ distillation


def _degree_summary(graph: FeatureGraph) -> np.ndarray:
    a = dense_adjacency(graph)
    s = np.maximum(a, a.T)
    n = graph.node_count
    norm = max(n * (n - 1), 1)
    return np.concatenate([graph.features.mean(axis=0),
                           [s.sum() / norm]])


def _init_surrogate(architecture: str, d: int, hidden: int,
                    rng_seed: int) -> SurrogateParams:
    rng = np.random.default_rng(rng_seed)

    def glorot(fi, fo):
        a = np.sqrt(6.0 / (fi + fo))
        return rng.uniform(-a, a, size=(fi, fo))

    if architecture == "gnn2_mlp":
        weights = {"enc.0": glorot(d, hidden), "enc.1": glorot(hidden, hidden),
                   "head.0": glorot(hidden, hidden), "head.1": glorot(hidden, 2)}
    elif architecture == "mlp_on_degree_features":
        weights = {"head.0": glorot(d + 1, hidden), "head.1": glorot(hidden, 2)}
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    return SurrogateParams(architecture=architecture, weights=weights)


def _surrogate_loss(sp: SurrogateParams, graph: FeatureGraph, label: int):
    tape = ad.Tape()
    bound = {k: tape.param(v) for k, v in sp.weights.items()}
    if sp.architecture == "gnn2_mlp":
        h = M.encode(graph, tape.constant(graph.features),
                     [bound["enc.0"], bound["enc.1"]])
        g = M.readout(h)
    else:
        g = tape.constant(_degree_summary(graph))
    logits = M.head_logits(g, [bound["head.0"], bound["head.1"]])
    loss = cross_entropy_logits(logits, label)
    return tape, bound, loss


def distill_surrogate(victim_label_fn, train_graphs: list[FeatureGraph],
                      architecture: str, epochs: int, hidden: int = 32,
                      learning_rate: float = 0.01, batch_size: int = 32,
                      rng_seed: int = 0) -> tuple[SurrogateParams, float]:
    """Train a substitute on victim-predicted labels with cross-entropy.

    Returns (surrogate, agreement rate on train_graphs). A constant-label
    victim degenerates gracefully: the surrogate just learns that class.
    """
    if not train_graphs:
        raise ValueError("distillation needs at least one graph")
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    labels = {g.graph_id: int(victim_label_fn(g)) for g in train_graphs}
    for gid, y in labels.items():
        if y not in (0, 1):
            raise ValueError(f"victim label for {gid} must be 0 or 1, got {y}")

    d = train_graphs[0].feature_dim
    sp = _init_surrogate(architecture, d, hidden, rng_seed)
    optimizer = Adam(sp.weights, learning_rate)
    rng = np.random.default_rng(rng_seed)

    for _ in range(epochs):
        order = rng.permutation(len(train_graphs))
        for start in range(0, len(order), batch_size):
            batch = [train_graphs[i] for i in order[start:start + batch_size]]
            grad_sums = {k: np.zeros_like(v) for k, v in sp.weights.items()}
            for graph in batch:
                tape, bound, loss = _surrogate_loss(sp, graph, labels[graph.graph_id])
                grads = ad.backward(tape, loss)
                for name, tensor in bound.items():
                    grad_sums[name] += grads[tensor.tid]
            scale = 1.0 / len(batch)
            optimizer.step(sp.weights, {k: g * scale for k, g in grad_sums.items()})

    victim = SurrogateVictim(sp)
    agree = sum(1 for g in train_graphs if victim.label(g) == labels[g.graph_id])
    return sp, agree / len(train_graphs)


# ------------------------------------------------------------------ metrics


def compute_asr_apr(results: list[AttackResult]) -> AttackSummary:
    """ASR over all attempts; APR averaged over successful attacks only,
    flagged undefined (reported as 0) when nothing succeeded."""
    if not results:
        raise ValueError("no attack results to summarize")
    succ = [r for r in results if r.success]
    ratios = []
    for r in succ:
        if r.original_edge_count == 0:
            raise ValueError(f"{r.original_id}: perturbation ratio undefined for "
                             f"an edgeless original")
        ratios.append(len(r.edges_added) / r.original_edge_count)
    return AttackSummary(
        asr=len(succ) / len(results),
        apr=float(np.mean(ratios)) if ratios else 0.0,
        apr_defined=bool(ratios),
        attempted=len(results),
        succeeded=len(succ),
    )
