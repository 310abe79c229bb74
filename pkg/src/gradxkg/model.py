"""Reference temporal KG reasoner on top of the RGCN encoder.

The model encodes each history snapshot, pools node states around the query
subject, runs a GRU-style gated recurrence over the pooled sequence, and
scores [subject state, relation embedding, object state, history context]
through a linear layer and a sigmoid. It exists so explanations are computed
against a model that has actually learned structure; the trainer minimizes
binary cross-entropy against object-corrupted negatives with plain SGD.

Forward/backward counters track model evaluations so explanation costs can
be compared architecture-independently.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from gradxkg.autodiff import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward_multi,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    sub,
    tsum,
)
from gradxkg.rgcn import (
    EncodeTrace,
    RGCNConfig,
    RGCNParams,
    init_rgcn_params,
    load_tensors,
    rgcn_encode,
    save_tensors,
)
from gradxkg.tkg import DataError, Quadruple, Snapshot, TemporalKG, relation_adjacency

__all__ = [
    "TopLayerParams",
    "ReasonerModel",
    "TrainConfig",
    "ScoreResult",
    "CounterScope",
    "init_model",
    "score_query",
    "train",
    "eval_counter",
    "reset_counters",
    "save_model",
    "load_model",
]


@dataclass
class TopLayerParams:
    """Gated recurrence weights, relation embeddings, and the scorer."""

    update_in: Tensor
    update_state: Tensor
    cand_in: Tensor
    cand_state: Tensor
    rel_emb: Tensor
    score_subject: Tensor
    score_relation: Tensor
    score_object: Tensor
    score_context: Tensor
    bias: Tensor

    def named_tensors(self) -> dict:
        return {
            "update_in": self.update_in,
            "update_state": self.update_state,
            "cand_in": self.cand_in,
            "cand_state": self.cand_state,
            "rel_emb": self.rel_emb,
            "score_subject": self.score_subject,
            "score_relation": self.score_relation,
            "score_object": self.score_object,
            "score_context": self.score_context,
            "bias": self.bias,
        }


_counter_local = threading.local()


def _collectors() -> list:
    stack = getattr(_counter_local, "stack", None)
    if stack is None:
        stack = []
        _counter_local.stack = stack
    return stack


class CounterScope:
    """Collects forward/backward increments made on the current thread."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    def __enter__(self) -> "CounterScope":
        _collectors().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _collectors().remove(self)


@dataclass
class ReasonerModel:
    rgcn_config: RGCNConfig
    rgcn: RGCNParams
    top: TopLayerParams
    window: int
    num_nodes: int
    num_relations: int
    forward_count: int = 0
    backward_count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_forward(self) -> None:
        with self._lock:
            self.forward_count += 1
        for col in _collectors():
            col.forward += 1

    def count_backward(self) -> None:
        with self._lock:
            self.backward_count += 1
        for col in _collectors():
            col.backward += 1

    def named_tensors(self) -> dict:
        out = {f"rgcn.{k}": v for k, v in self.rgcn.named_tensors().items()}
        out.update({f"top.{k}": v for k, v in self.top.named_tensors().items()})
        return out


def eval_counter(model: ReasonerModel) -> tuple:
    """Current (forward_count, backward_count)."""
    return model.forward_count, model.backward_count


def reset_counters(model: ReasonerModel) -> None:
    with model._lock:
        model.forward_count = 0
        model.backward_count = 0


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))


def init_model(
    rgcn_config: RGCNConfig,
    num_nodes: int,
    num_relations: int,
    window: int,
    rng: np.random.Generator,
) -> ReasonerModel:
    if window < 1:
        raise DataError("history window must be at least 1")
    d = rgcn_config.hidden_dim
    rgcn = init_rgcn_params(rgcn_config, num_nodes, num_relations, rng)
    top = TopLayerParams(
        update_in=_uniform(rng, d, d),
        update_state=_uniform(rng, d, d),
        cand_in=_uniform(rng, d, d),
        cand_state=_uniform(rng, d, d),
        rel_emb=_uniform(rng, num_relations, d),
        score_subject=_uniform(rng, d, 1),
        score_relation=_uniform(rng, d, 1),
        score_object=_uniform(rng, d, 1),
        score_context=_uniform(rng, d, 1),
        bias=Tensor(np.zeros((1, 1))),
    )
    return ReasonerModel(
        rgcn_config=rgcn_config,
        rgcn=rgcn,
        top=top,
        window=window,
        num_nodes=num_nodes,
        num_relations=num_relations,
    )


def neighborhood_mask(snap: Snapshot, subject: int) -> np.ndarray:
    """Mean-pooling row over the subject's 2-hop neighborhood (undirected,
    subject included). An isolated subject falls back to the global mean."""
    n = snap.num_nodes
    neighbors: dict = {}
    for s, _, o in snap.edges:
        neighbors.setdefault(s, set()).add(o)
        neighbors.setdefault(o, set()).add(s)
    if subject not in neighbors:
        return np.full((1, n), 1.0 / n)
    reach = {subject}
    frontier = {subject}
    for _ in range(2):
        frontier = set().union(*(neighbors.get(v, set()) for v in frontier)) - reach
        reach |= frontier
        if not frontier:
            break
    mask = np.zeros((1, n))
    mask[0, sorted(reach)] = 1.0 / len(reach)
    return mask


def _one_hot_row(size: int, index: int) -> Tensor:
    v = np.zeros((1, size))
    v[0, index] = 1.0
    return Tensor(v)


def _top_forward(
    model: ReasonerModel,
    query: Quadruple,
    ts_list: Sequence[int],
    h_by_ts: dict,
    masks_by_ts: dict,
) -> tuple:
    """Recurrence plus scorer over already-encoded snapshots. Returns the
    (score, pre-sigmoid) tensors; caller owns the tape and the counters."""
    top = model.top
    d = model.rgcn_config.hidden_dim
    state = Tensor(np.zeros((1, d)))
    for ts in ts_list:
        pooled = matmul(Tensor(masks_by_ts[ts]), h_by_ts[ts])
        z = sigmoid(add(matmul(pooled, top.update_in), matmul(state, top.update_state)))
        cand = relu(add(matmul(pooled, top.cand_in), matmul(state, top.cand_state)))
        state = add(sub(state, mul(z, state)), mul(z, cand))

    h_last = h_by_ts[ts_list[-1]]
    subj_state = matmul(_one_hot_row(model.num_nodes, query.subject), h_last)
    obj_state = matmul(_one_hot_row(model.num_nodes, query.object), h_last)
    rel_state = matmul(_one_hot_row(model.num_relations, query.relation), top.rel_emb)
    # DistMult-style interaction <subject, relation, object> carried into a
    # 1x1 tensor via scale so it can join the linear terms.
    interaction = scale(
        Tensor(np.ones((1, 1))), tsum(mul(mul(subj_state, rel_state), obj_state))
    )
    pre = add(
        add(
            add(matmul(subj_state, top.score_subject), matmul(rel_state, top.score_relation)),
            add(matmul(obj_state, top.score_object), matmul(state, top.score_context)),
        ),
        add(interaction, top.bias),
    )
    return sigmoid(pre), pre


def _window_timesteps(model: ReasonerModel, tkg: TemporalKG, query: Quadruple, window: int) -> list:
    t = query.timestamp
    if t - window < 0 or t > tkg.num_timesteps:
        raise DataError(
            f"query at t={t} needs history [{t - window}, {t}) inside [0, {tkg.num_timesteps})"
        )
    return list(range(t - window, t))


def _encode_window(
    model: ReasonerModel,
    tkg: TemporalKG,
    ts_list: Sequence[int],
    adjacencies: Optional[dict] = None,
) -> tuple:
    h_by_ts, traces = {}, {}
    for ts in ts_list:
        snap = tkg.snapshot_at(ts)
        adj = adjacencies.get(ts) if adjacencies else None
        h, trace = rgcn_encode(snap, model.rgcn_config, model.rgcn, adjacencies=adj)
        h_by_ts[ts] = h
        traces[ts] = trace
    return h_by_ts, traces


@dataclass
class ScoreResult:
    """One scored query plus everything the explainers need afterwards."""

    score: float
    s_tensor: Tensor
    pre_tensor: Tensor
    tape: Tape
    traces: dict
    h_by_ts: dict
    masks_by_ts: dict
    ts_list: list
    query: Quadruple


def score_query(
    model: ReasonerModel,
    tkg: TemporalKG,
    query: Quadruple,
    window: Optional[int] = None,
    adjacencies: Optional[dict] = None,
) -> ScoreResult:
    """Score one query on a fresh tape; increments forward_count by 1."""
    w = window if window is not None else model.window
    ts_list = _window_timesteps(model, tkg, query, w)
    if not (0 <= query.subject < model.num_nodes and 0 <= query.object < model.num_nodes):
        raise DataError("query entities out of vocabulary range")
    if not (0 <= query.relation < model.num_relations):
        raise DataError("query relation out of vocabulary range")
    with Tape() as tape:
        h_by_ts, traces = _encode_window(model, tkg, ts_list, adjacencies)
        masks = {ts: neighborhood_mask(tkg.snapshot_at(ts), query.subject) for ts in ts_list}
        s, pre = _top_forward(model, query, ts_list, h_by_ts, masks)
    model.count_forward()
    return ScoreResult(
        score=s.item(),
        s_tensor=s,
        pre_tensor=pre,
        tape=tape,
        traces=traces,
        h_by_ts=h_by_ts,
        masks_by_ts=masks,
        ts_list=ts_list,
        query=query,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    negatives: int = 4
    window: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise DataError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise DataError("learning rate must be positive")
        if self.negatives < 1:
            raise DataError("need at least one negative per positive")
        if self.window < 1:
            raise DataError("window must be at least 1")


def _bce(score: float, label: float) -> float:
    s = min(max(score, 1e-12), 1.0 - 1e-12)
    return -(label * math.log(s) + (1.0 - label) * math.log(1.0 - s))


def train(
    tkg: TemporalKG,
    rgcn_config: RGCNConfig,
    train_config: TrainConfig,
    exclude: Iterable[Quadruple] = (),
) -> tuple:
    """SGD on binary cross-entropy over true quadruples vs object-corrupted
    negatives. One step per (epoch, timestamp) batch sharing the window
    encodings. Deterministic given the seed; returns (model, loss curve)."""
    w = train_config.window
    if tkg.num_timesteps < w + 1:
        raise DataError(f"training needs at least {w + 1} snapshots, have {tkg.num_timesteps}")
    root = np.random.SeedSequence(train_config.seed)
    init_rng = np.random.default_rng(root.spawn(1)[0])
    neg_rng = np.random.default_rng(root.spawn(2)[0])
    model = init_model(rgcn_config, tkg.num_nodes, tkg.num_relations, w, init_rng)

    excluded = set(exclude)
    by_time: dict = {}
    for q in tkg.quadruples():
        if q.timestamp >= w and q not in excluded:
            by_time.setdefault(q.timestamp, []).append(q)
    if not by_time:
        raise DataError("no trainable quadruples: every fact is earlier than the window")

    params = model.named_tensors()
    adjacency_cache = {
        ts: [relation_adjacency(tkg.snapshot_at(ts), r) for r in range(tkg.num_relations)]
        for ts in range(tkg.num_timesteps)
    }
    lr = train_config.learning_rate
    losses = []
    for epoch in range(train_config.epochs):
        epoch_loss = 0.0
        n_samples = 0
        try:
            for t in sorted(by_time):
                quads = by_time[t]
                ts_list = list(range(t - w, t))
                with Tape() as tape:
                    h_by_ts, _ = _encode_window(model, tkg, ts_list, adjacency_cache)
                    scored = []
                    for q in quads:
                        candidates = [(q, 1.0)]
                        for _ in range(train_config.negatives):
                            corrupt = int(neg_rng.integers(0, tkg.num_nodes - 1))
                            if corrupt >= q.object:
                                corrupt += 1
                            candidates.append(
                                (Quadruple(q.subject, q.relation, corrupt, q.timestamp), 0.0)
                            )
                        for qq, label in candidates:
                            masks = {
                                ts: neighborhood_mask(tkg.snapshot_at(ts), qq.subject)
                                for ts in ts_list
                            }
                            s, pre = _top_forward(model, qq, ts_list, h_by_ts, masks)
                            scored.append((pre, s.item(), label))
                group = 1 + train_config.negatives
                roots = [(pre, (sv - label) / group) for pre, sv, label in scored]
                backward_multi(roots, tape)
                for tensor in params.values():
                    g = tape.grad(tensor)
                    if g is not None:
                        tensor.data -= lr * g
                epoch_loss += sum(_bce(sv, label) for _, sv, label in scored)
                n_samples += len(scored)
        except NumericError as exc:
            raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
        mean_loss = epoch_loss / n_samples
        if not math.isfinite(mean_loss):
            raise NumericError(f"training diverged at epoch {epoch}: non-finite loss")
        losses.append(mean_loss)
    return model, losses


_MODEL_KIND = "rgcn-reasoner/1"


def save_model(model: ReasonerModel, path) -> None:
    cfg = model.rgcn_config
    header = {
        "kind": _MODEL_KIND,
        "rgcn": {
            "layers": cfg.layers,
            "input_dim": cfg.input_dim,
            "hidden_dim": cfg.hidden_dim,
            "bases": cfg.bases,
            "activation": cfg.activation,
            "self_loop": cfg.self_loop,
        },
        "window": model.window,
        "num_nodes": model.num_nodes,
        "num_relations": model.num_relations,
    }
    save_tensors(path, header, model.named_tensors())


def load_model(path) -> ReasonerModel:
    header, tensors = load_tensors(path)
    if header.get("kind") != _MODEL_KIND:
        raise DataError(f"checkpoint at {path} is not a reasoner checkpoint")
    cfg = RGCNConfig(**header["rgcn"])
    num_nodes = header["num_nodes"]
    num_relations = header["num_relations"]
    bases, coeffs, selfs = [], [], []
    for l in range(cfg.layers):
        bases.append([Tensor(tensors[f"rgcn.layer{l}.basis{b}"]) for b in range(cfg.bases)])
        coeffs.append(Tensor(tensors[f"rgcn.layer{l}.coeffs"]))
        selfs.append(Tensor(tensors[f"rgcn.layer{l}.self"]) if cfg.self_loop else None)
    rgcn = RGCNParams(x=Tensor(tensors["rgcn.x"]), bases=bases, coeffs=coeffs, self_weights=selfs)
    top = TopLayerParams(**{k: Tensor(tensors[f"top.{k}"]) for k in (
        "update_in",
        "update_state",
        "cand_in",
        "cand_state",
        "rel_emb",
        "score_subject",
        "score_relation",
        "score_object",
        "score_context",
        "bias",
    )})
    return ReasonerModel(
        rgcn_config=cfg,
        rgcn=rgcn,
        top=top,
        window=header["window"],
        num_nodes=num_nodes,
        num_relations=num_relations,
    )
