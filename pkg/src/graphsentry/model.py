"""The detector: node masking, GNN encoder/decoder, readout, proxy inference.

Forward passes are built from tape ops so training gradients flow; inference
uses the same code path with constant tensors. Propagation follows the
symmetric-normalized rule: a node's new state is (own state + sum of neighbor
states / sqrt(deg_u * deg_v)) times the layer weight, through ReLU.
Neighborhoods are taken on the symmetrized edge set.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphdata import FeatureGraph, FeatureSchema, canonical_json

CHECKPOINT_FORMAT = "graphsentry-checkpoint"
CHECKPOINT_VERSION = 1

# Forward-pass instrumentation, used to verify which training variants touch
# the masking and reconstruction machinery at all.
counters = {"mask_samples": 0, "decoder_passes": 0}


def reset_counters() -> None:
    counters["mask_samples"] = 0
    counters["decoder_passes"] = 0


def snapshot_counters() -> dict[str, int]:
    return dict(counters)


@dataclass
class ModelParams:
    """All learnable arrays. head_weights is only present for MLP-head variants."""

    encoder_weights: list[np.ndarray]
    decoder_weights: list[np.ndarray]
    mask_token: np.ndarray
    proxy_benign: np.ndarray
    proxy_malicious: np.ndarray
    head_weights: list[np.ndarray] | None = None

    def validate(self) -> None:
        if not self.encoder_weights or not self.decoder_weights:
            raise ValueError("encoder and decoder need at least one layer each")
        d = self.encoder_weights[0].shape[0]
        h = self.encoder_weights[0].shape[1]
        chain = [w.shape for w in self.encoder_weights]
        expect = [(d, h)] + [(h, h)] * (len(self.encoder_weights) - 1)
        if chain != expect:
            raise ValueError(f"encoder shape chain {chain} does not compose d->h")
        chain = [w.shape for w in self.decoder_weights]
        expect = [(h, h)] * (len(self.decoder_weights) - 1) + [(h, d)]
        if chain != expect:
            raise ValueError(f"decoder shape chain {chain} does not compose h->d")
        if self.mask_token.shape != (d,):
            raise ValueError(f"mask_token must have length {d}")
        if self.proxy_benign.shape != (h,) or self.proxy_malicious.shape != (h,):
            raise ValueError(f"proxies must have length {h}")
        for arr in self.named_arrays().values():
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters contain non-finite entries")

    @property
    def feature_dim(self) -> int:
        return self.encoder_weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.encoder_weights[0].shape[1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Stable name -> array view of every learnable tensor, in a fixed order."""
        out = {}
        for i, w in enumerate(self.encoder_weights):
            out[f"encoder.{i}"] = w
        for i, w in enumerate(self.decoder_weights):
            out[f"decoder.{i}"] = w
        out["mask_token"] = self.mask_token
        out["proxy_benign"] = self.proxy_benign
        out["proxy_malicious"] = self.proxy_malicious
        if self.head_weights is not None:
            for i, w in enumerate(self.head_weights):
                out[f"head.{i}"] = w
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder_weights=[w.copy() for w in self.encoder_weights],
            decoder_weights=[w.copy() for w in self.decoder_weights],
            mask_token=self.mask_token.copy(),
            proxy_benign=self.proxy_benign.copy(),
            proxy_malicious=self.proxy_malicious.copy(),
            head_weights=None if self.head_weights is None
            else [w.copy() for w in self.head_weights],
        )


@dataclass(frozen=True)
class MaskPlan:
    """Which node rows get replaced by the learnable mask token."""

    masked: tuple[int, ...]
    gamma: float


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(schema: FeatureSchema | int, hidden: int = 128, layers: int = 2,
                rng_seed: int = 0) -> ModelParams:
    """Uniform [-a, a] weights with a = sqrt(6/(fan_in+fan_out)); small-normal
    mask token and proxies. Draw order is fixed so seeds reproduce exactly.

    `schema` may be a FeatureSchema or the bare feature width."""
    if hidden < 1 or layers < 1:
        raise ValueError("hidden and layers must be positive")
    d = schema.d if isinstance(schema, FeatureSchema) else int(schema)
    h = hidden
    rng = np.random.default_rng(rng_seed)
    enc = [_glorot(rng, d, h)] + [_glorot(rng, h, h) for _ in range(layers - 1)]
    dec = [_glorot(rng, h, h) for _ in range(layers - 1)] + [_glorot(rng, h, d)]
    params = ModelParams(
        encoder_weights=enc,
        decoder_weights=dec,
        mask_token=rng.standard_normal(d) * 0.01,
        proxy_benign=rng.standard_normal(h) * 0.01,
        proxy_malicious=rng.standard_normal(h) * 0.01,
    )
    params.validate()
    return params


def init_head(params: ModelParams, rng_seed: int) -> None:
    """Attach a fresh 2-layer MLP head (h -> h -> 2 logits) in place."""
    h = params.hidden_dim
    rng = np.random.default_rng(rng_seed)
    params.head_weights = [_glorot(rng, h, h), _glorot(rng, h, 2)]


def sample_mask(node_count: int, gamma: float, rng: np.random.Generator) -> MaskPlan:
    """Choose clamp(round(gamma*n), 1, n-1) node indices uniformly without
    replacement. Single-node graphs cannot be masked; callers skip them."""
    if node_count < 2:
        raise ValueError("masking needs at least 2 nodes")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    k = int(np.floor(gamma * node_count + 0.5))  # round half up
    k = min(max(k, 1), node_count - 1)
    counters["mask_samples"] += 1
    idx = rng.choice(node_count, size=k, replace=False)
    return MaskPlan(masked=tuple(sorted(int(i) for i in idx)), gamma=gamma)


def apply_mask(features: ad.Tensor, plan: MaskPlan, mask_token: ad.Tensor) -> ad.Tensor:
    """Replace masked rows with the mask token; gradient reaches the token."""
    if not plan.masked:
        return features
    n = features.value.shape[0]
    if plan.masked[-1] >= n:
        raise ValueError(f"mask index {plan.masked[-1]} out of range for {n} nodes")
    tiled = ad.tile_rows(mask_token, len(plan.masked))
    return ad.scatter_rows(features, list(plan.masked), tiled)


def remask(embeddings: ad.Tensor, plan: MaskPlan) -> ad.Tensor:
    """Zero the masked rows before decoding. The zero is a constant, so no
    gradient flows back into the encoder through these rows."""
    if not plan.masked:
        return embeddings
    n, h = embeddings.value.shape
    if plan.masked[-1] >= n:
        raise ValueError(f"mask index {plan.masked[-1]} out of range for {n} nodes")
    zeros = embeddings.tape.constant(np.zeros((len(plan.masked), h)))
    return ad.scatter_rows(embeddings, list(plan.masked), zeros)


def propagation_terms(graph: FeatureGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrized edge list plus 1/sqrt(deg_u*deg_v) coefficients."""
    und = set()
    for s, t in graph.edges:
        und.add((s, t))
        und.add((t, s))
    if not und:
        z = np.zeros(0, dtype=np.intp)
        return z, z, np.zeros(0)
    pairs = np.array(sorted(und), dtype=np.intp)
    deg = np.zeros(graph.node_count)
    np.add.at(deg, pairs[:, 1], 1.0)
    src, dst = pairs[:, 0], pairs[:, 1]
    coef = 1.0 / np.sqrt(deg[src] * deg[dst])
    return src, dst, coef


def _gnn_forward(features: ad.Tensor, terms, weights: list[ad.Tensor],
                 final_linear: bool) -> ad.Tensor:
    src, dst, coef = terms
    h = features
    for i, w in enumerate(weights):
        agg = ad.add(h, ad.edge_aggregate(h, src, dst, coef))
        z = ad.matmul(agg, w)
        h = z if (final_linear and i == len(weights) - 1) else ad.relu(z)
    return h


def encode(graph: FeatureGraph, features: ad.Tensor,
           encoder_weights: list[ad.Tensor]) -> ad.Tensor:
    """L propagation layers with ReLU; isolated nodes keep only their self term."""
    if features.value.shape[0] != graph.node_count:
        raise ValueError("feature row count does not match the graph")
    return _gnn_forward(features, propagation_terms(graph), encoder_weights,
                        final_linear=False)


def decode(graph: FeatureGraph, remasked: ad.Tensor,
           decoder_weights: list[ad.Tensor]) -> ad.Tensor:
    """Same propagation rule; the final layer is linear so reconstructions can
    approach binary targets from both sides."""
    counters["decoder_passes"] += 1
    return _gnn_forward(remasked, propagation_terms(graph), decoder_weights,
                        final_linear=True)


def readout(node_embeddings: ad.Tensor) -> ad.Tensor:
    """Mean pooling over nodes."""
    if node_embeddings.value.shape[0] < 1:
        raise ValueError("readout needs at least one node")
    return ad.mean_rows(node_embeddings)


def bind_params(tape: ad.Tape, params: ModelParams,
                trainable: bool = True) -> dict[str, ad.Tensor]:
    """Place every parameter array on a tape, keyed by its stable name."""
    make = tape.param if trainable else tape.constant
    return {name: make(arr) for name, arr in params.named_arrays().items()}


def encoder_tensors(bound: dict[str, ad.Tensor]) -> list[ad.Tensor]:
    return [bound[k] for k in sorted(bound) if k.startswith("encoder.")]


def decoder_tensors(bound: dict[str, ad.Tensor]) -> list[ad.Tensor]:
    return [bound[k] for k in sorted(bound) if k.startswith("decoder.")]


def head_tensors(bound: dict[str, ad.Tensor]) -> list[ad.Tensor]:
    return [bound[k] for k in sorted(bound) if k.startswith("head.")]


def head_logits(g: ad.Tensor, head_weights: list[ad.Tensor]) -> ad.Tensor:
    """2-logit MLP head used by the non-contrastive variants."""
    row = ad.tile_rows(g, 1)
    hid = ad.relu(ad.matmul(row, head_weights[0]))
    return ad.mean_rows(ad.matmul(hid, head_weights[1]))  # (1,2) -> (2,)


def graph_embedding(graph: FeatureGraph, params: ModelParams) -> np.ndarray:
    """Unmasked encode + readout, no gradients."""
    if graph.node_count < 1:
        raise ValueError(f"graph {graph.graph_id} is empty")
    tape = ad.Tape()
    bound = bind_params(tape, params, trainable=False)
    x = tape.constant(graph.features)
    g = readout(encode(graph, x, encoder_tensors(bound)))
    return g.value


def predict(graph: FeatureGraph, params: ModelParams) -> tuple[int, float, float]:
    """Full unmasked forward; scores are proxy cosines (or head logits when a
    head is attached). Ties go to malicious."""
    g = graph_embedding(graph, params)
    if params.head_weights is not None:
        hid = np.maximum(g @ params.head_weights[0], 0.0)
        s0, s1 = (hid @ params.head_weights[1]).tolist()
    else:
        gn = max(float(np.linalg.norm(g)), ad.NORM_CLAMP)
        p0, p1 = params.proxy_benign, params.proxy_malicious
        s0 = float(g @ p0) / (gn * max(float(np.linalg.norm(p0)), ad.NORM_CLAMP))
        s1 = float(g @ p1) / (gn * max(float(np.linalg.norm(p1)), ad.NORM_CLAMP))
    return (1 if s1 >= s0 else 0), s0, s1


def _encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(obj["shape"]).copy()


def save_checkpoint(path, params: ModelParams, meta: dict) -> None:
    """Single-file checkpoint: versioned header, run metadata, and every
    parameter tensor as named base64 float64 bytes. Round-trips bit-exactly."""
    params.validate()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "feature_dim": params.feature_dim,
        "hidden_dim": params.hidden_dim,
        "encoder_layers": len(params.encoder_weights),
        "decoder_layers": len(params.decoder_weights),
        "has_head": params.head_weights is not None,
        "meta": meta,
        "tensors": {name: _encode_array(arr)
                    for name, arr in params.named_arrays().items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    tensors = {name: _decode_array(obj) for name, obj in payload["tensors"].items()}
    enc_n, dec_n = payload["encoder_layers"], payload["decoder_layers"]
    params = ModelParams(
        encoder_weights=[tensors[f"encoder.{i}"] for i in range(enc_n)],
        decoder_weights=[tensors[f"decoder.{i}"] for i in range(dec_n)],
        mask_token=tensors["mask_token"],
        proxy_benign=tensors["proxy_benign"],
        proxy_malicious=tensors["proxy_malicious"],
        head_weights=[tensors["head.0"], tensors["head.1"]]
        if payload["has_head"] else None,
    )
    params.validate()
    return params, payload["meta"]
