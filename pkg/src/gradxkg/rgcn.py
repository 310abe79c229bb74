"""Relational GCN encoder with basis-decomposed weights and a full trace.

Each layer computes H' = act(sum_r A_r H W_r + H W_0) with W_r assembled as
a coefficient-weighted sum of shared basis matrices. Besides the aggregate
output, every layer records its per-relation pre-activation terms and the
per-relation feature maps act(A_r H W_r + H W_0) that the saliency stage
consumes. The factored evaluation keeps the basis products unmaterialized
(per-basis H V_b shared across relations) and must agree with the
materialized path.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from gradxkg.autodiff import (
    ShapeError,
    Tensor,
    add,
    ewise,
    matmul,
    scale,
)
from gradxkg.tkg import Snapshot, relation_adjacency

__all__ = [
    "RGCNConfig",
    "RGCNParams",
    "LayerTrace",
    "EncodeTrace",
    "init_rgcn_params",
    "basis_materialize",
    "rgcn_layer",
    "rgcn_encode",
    "save_tensors",
    "load_tensors",
]

_ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class RGCNConfig:
    layers: int = 2
    input_dim: int = 8
    hidden_dim: int = 8
    bases: int = 2
    activation: str = "relu"
    self_loop: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.bases < 1:
            raise ShapeError("layers and bases must be at least 1")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ShapeError("dimensions must be at least 1")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"activation must be one of {_ACTIVATIONS}")

    def layer_input_dim(self, l: int) -> int:
        return self.input_dim if l == 0 else self.hidden_dim


@dataclass
class RGCNParams:
    """Initial node embeddings plus per-layer bases/coefficients/self-loop."""

    x: Tensor
    bases: list  # per layer: list of B Tensors (d_in_l x hidden)
    coeffs: list  # per layer: Tensor (R x B)
    self_weights: list  # per layer: Tensor (d_in_l x hidden) or None

    @property
    def num_layers(self) -> int:
        return len(self.bases)

    @property
    def num_relations(self) -> int:
        return self.coeffs[0].shape[0]

    @property
    def num_bases(self) -> int:
        return self.coeffs[0].shape[1]

    def named_tensors(self) -> dict:
        out = {"x": self.x}
        for l in range(self.num_layers):
            for b, basis in enumerate(self.bases[l]):
                out[f"layer{l}.basis{b}"] = basis
            out[f"layer{l}.coeffs"] = self.coeffs[l]
            if self.self_weights[l] is not None:
                out[f"layer{l}.self"] = self.self_weights[l]
        return out


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))


def init_rgcn_params(
    config: RGCNConfig, num_nodes: int, num_relations: int, rng: np.random.Generator
) -> RGCNParams:
    """Seeded uniform init on [-1/sqrt(fan_in), +1/sqrt(fan_in)] per matrix."""
    x = Tensor(
        rng.uniform(
            -1.0 / np.sqrt(config.input_dim),
            1.0 / np.sqrt(config.input_dim),
            size=(num_nodes, config.input_dim),
        )
    )
    bases, coeffs, selfs = [], [], []
    for l in range(config.layers):
        d_in = config.layer_input_dim(l)
        bases.append([_uniform(rng, d_in, config.hidden_dim) for _ in range(config.bases)])
        coeffs.append(_uniform(rng, num_relations, config.bases))
        selfs.append(_uniform(rng, d_in, config.hidden_dim) if config.self_loop else None)
    return RGCNParams(x=x, bases=bases, coeffs=coeffs, self_weights=selfs)


def _one_hot(size: int, index: int, row: bool) -> Tensor:
    v = np.zeros((1, size) if row else (size, 1))
    v[(0, index) if row else (index, 0)] = 1.0
    return Tensor(v)


def _coeff_row(params: RGCNParams, l: int, r: int) -> Tensor:
    return matmul(_one_hot(params.num_relations, r, row=True), params.coeffs[l])


def _coeff_entry(row: Tensor, b: int, num_bases: int) -> Tensor:
    return matmul(row, _one_hot(num_bases, b, row=False))


def basis_materialize(params: RGCNParams, l: int, r: int) -> Tensor:
    """Assemble W_r at layer l as the coefficient-weighted sum of bases."""
    if not (0 <= l < params.num_layers):
        raise ShapeError(f"layer {l} out of range")
    if not (0 <= r < params.num_relations):
        raise ShapeError(f"relation {r} out of range")
    row = _coeff_row(params, l, r)
    num_b = params.num_bases
    acc = None
    for b in range(num_b):
        term = scale(params.bases[l][b], _coeff_entry(row, b, num_b))
        acc = term if acc is None else add(acc, term)
    return acc


def materialized_weight(params: RGCNParams, l: int, r: int) -> np.ndarray:
    """Plain numpy W_r value (no taping); used by the saliency stage."""
    coeff = params.coeffs[l].data[r]
    stacked = np.stack([b.data for b in params.bases[l]])
    return np.einsum("b,bio->io", coeff, stacked)


@dataclass
class LayerTrace:
    """Everything one layer recorded: pre-activation terms per relation,
    the self-loop term, the aggregate output, and the per-relation maps."""

    input: Tensor
    rel_terms: list
    self_term: Optional[Tensor]
    preact: Tensor
    output: Tensor
    rel_map_preacts: list
    rel_maps: list
    adjacencies: list = field(default_factory=list)  # numpy values
    w_rel: list = field(default_factory=list)  # numpy values
    w_self: Optional[np.ndarray] = None


@dataclass
class EncodeTrace:
    layers: list
    output: Tensor
    activation: str
    self_loop: bool

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def rgcn_layer(
    h: Tensor,
    adjacencies: Sequence[Tensor],
    config: RGCNConfig,
    params: RGCNParams,
    l: int,
    factored: bool = False,
) -> tuple:
    """One message-passing layer; returns (output, LayerTrace), all taped."""
    act = lambda t: ewise(config.activation, t)
    num_b = params.num_bases

    if factored:
        basis_products = [matmul(h, basis) for basis in params.bases[l]]
    rel_terms = []
    for r, adj in enumerate(adjacencies):
        if factored:
            row = _coeff_row(params, l, r)
            combo = None
            for b in range(num_b):
                term = scale(basis_products[b], _coeff_entry(row, b, num_b))
                combo = term if combo is None else add(combo, term)
            rel_terms.append(matmul(adj, combo))
        else:
            w_r = basis_materialize(params, l, r)
            rel_terms.append(matmul(adj, matmul(h, w_r)))

    self_term = matmul(h, params.self_weights[l]) if config.self_loop else None
    if self_term is None and not rel_terms:
        raise ShapeError("layer has neither relation terms nor a self-loop")

    preact = self_term
    for t_r in rel_terms:
        preact = t_r if preact is None else add(preact, t_r)
    output = act(preact)

    rel_map_preacts, rel_maps = [], []
    for t_r in rel_terms:
        u_r = t_r if self_term is None else add(t_r, self_term)
        rel_map_preacts.append(u_r)
        rel_maps.append(act(u_r))

    trace = LayerTrace(
        input=h,
        rel_terms=rel_terms,
        self_term=self_term,
        preact=preact,
        output=output,
        rel_map_preacts=rel_map_preacts,
        rel_maps=rel_maps,
        adjacencies=[a.data for a in adjacencies],
        w_rel=[materialized_weight(params, l, r) for r in range(len(adjacencies))],
        w_self=params.self_weights[l].data if config.self_loop else None,
    )
    return output, trace


def rgcn_encode(
    snap: Snapshot,
    config: RGCNConfig,
    params: RGCNParams,
    adjacencies: Optional[Sequence[Tensor]] = None,
    factored: bool = False,
) -> tuple:
    """Encode one snapshot through all layers; returns (H, EncodeTrace)."""
    if params.x.shape[0] != snap.num_nodes:
        raise ShapeError(
            f"params cover {params.x.shape[0]} nodes but snapshot has {snap.num_nodes}"
        )
    if adjacencies is None:
        adjacencies = [relation_adjacency(snap, r) for r in range(snap.num_relations)]
    h = params.x
    layers = []
    for l in range(config.layers):
        h, trace = rgcn_layer(h, adjacencies, config, params, l, factored=factored)
        layers.append(trace)
    return h, EncodeTrace(
        layers=layers, output=h, activation=config.activation, self_loop=config.self_loop
    )


_CHECKPOINT_FORMAT = "gradxkg-checkpoint/1"


def save_tensors(path, header: dict, tensors: dict) -> None:
    """Write the self-describing checkpoint container.

    JSON object with a config header and named tensors; tensor payloads are
    base64 of little-endian float64 bytes in row-major order.
    """
    doc = {"format": _CHECKPOINT_FORMAT, "header": header, "tensors": {}}
    for name, value in sorted(tensors.items()):
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        payload = base64.b64encode(
            np.ascontiguousarray(arr, dtype="<f8").tobytes()
        ).decode("ascii")
        doc["tensors"][name] = {"shape": list(arr.shape), "data": payload}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_tensors(path) -> tuple:
    """Read a checkpoint container; returns (header, {name: ndarray})."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ShapeError(f"unrecognized checkpoint format in {path}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        raw = base64.b64decode(entry["data"])
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return doc["header"], tensors
