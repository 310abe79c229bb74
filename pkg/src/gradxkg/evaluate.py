"""Automatic evaluation of explainers: fidelity, stability, and cost.

Fidelity is the score drop when explanation-designated nodes are removed
from their attributed window snapshots (union removal by default, plus the
literal one-node-at-a-time reading). Stability is the top-N overlap between
the explanation on the original graph and on slightly edge-perturbed
copies. Cost is reported both as wall time normalized to the fastest
explainer and as model-evaluation counts, which are architecture- and
machine-independent.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from gradxkg.autodiff import NumericError
from gradxkg.explain import ExplainError, Saliency
from gradxkg.model import CounterScope, ReasonerModel, score_query
from gradxkg.tkg import DataError, Quadruple, TemporalKG, perturb_edges, remove_node

__all__ = [
    "EvalError",
    "EvalConfig",
    "EvalReport",
    "fidelity",
    "stability",
    "time_cost",
    "run_suite",
]


class EvalError(RuntimeError):
    """Evaluation preconditions violated or degenerate measurements."""


_SCOPES = ("union", "per-node")


@dataclass(frozen=True)
class EvalConfig:
    queries: tuple
    top_n: int = 5
    perturb_fraction: float = 0.05
    stability_seeds: tuple = (0, 1, 2)
    removal_scope: str = "union"
    jobs: int = 1

    def __post_init__(self):
        if self.top_n < 1:
            raise EvalError("top_n must be at least 1")
        if not (0.0 < self.perturb_fraction < 1.0):
            raise EvalError("perturb_fraction must lie in (0, 1)")
        if self.removal_scope not in _SCOPES:
            raise EvalError(f"removal scope must be one of {_SCOPES}")
        if not self.stability_seeds:
            raise EvalError("stability needs at least one perturbation seed")
        if self.jobs < 1:
            raise EvalError("jobs must be at least 1")
        if not self.queries:
            raise EvalError("query set is empty")


def _remove_selection(tkg: TemporalKG, selection) -> TemporalKG:
    by_ts: dict = {}
    for (node, ts), _ in selection:
        by_ts.setdefault(ts, []).append(node)
    out = tkg
    for ts, nodes in by_ts.items():
        snap = out.snapshot_at(ts)
        for node in nodes:
            snap = remove_node(snap, node)
        out = out.replace_snapshot(ts, snap)
    return out


def fidelity(
    model: ReasonerModel,
    tkg: TemporalKG,
    query: Quadruple,
    saliency: Saliency,
    scope: str = "union",
    top_n: Optional[int] = None,
) -> float:
    """Score drop caused by removing the explanation's top-N nodes at their
    attributed timesteps. Union removal deletes them all at once; per-node
    averages the one-at-a-time drops. Removal must stay inside the query's
    history window."""
    if scope not in _SCOPES:
        raise EvalError(f"removal scope must be one of {_SCOPES}")
    selection = saliency.top(top_n)
    if not selection:
        raise EvalError("saliency has no entries to remove")
    window = set(range(query.timestamp - model.window, query.timestamp))
    for (node, ts), _ in selection:
        if ts not in window:
            raise EvalError(f"selected node {node} at t={ts} is outside the history window")
    s0 = score_query(model, tkg, query).score
    if scope == "union":
        return s0 - score_query(model, _remove_selection(tkg, selection), query).score
    drops = []
    for entry in selection:
        drops.append(s0 - score_query(model, _remove_selection(tkg, [entry]), query).score)
    return float(np.mean(drops))


def _perturb_window(
    tkg: TemporalKG, query: Quadruple, window: int, fraction: float, seed: int
) -> TemporalKG:
    """Edge-delete each window snapshot with a per-(seed, timestep) stream.
    Only the scored history is touched, so the query-timestamp snapshot is
    never altered."""
    out = tkg
    for ts in range(query.timestamp - window, query.timestamp):
        child = int(np.random.SeedSequence([seed, ts]).generate_state(1)[0])
        out = out.replace_snapshot(ts, perturb_edges(tkg.snapshot_at(ts), fraction, child))
    return out


def stability(
    explainer: Callable,
    model: ReasonerModel,
    tkg: TemporalKG,
    query: Quadruple,
    config: EvalConfig,
) -> float:
    """Mean top-N overlap between the original explanation and explanations
    on edge-perturbed graphs, comparing (node, timestep) pairs."""
    base = explainer(model, tkg, query)
    original = {key for key, _ in base.top(config.top_n)}
    if not original:
        raise EvalError("original explanation selected no nodes")
    overlaps = []
    for seed in config.stability_seeds:
        perturbed = _perturb_window(tkg, query, model.window, config.perturb_fraction, seed)
        sal = explainer(model, perturbed, query)
        chosen = {key for key, _ in sal.top(config.top_n)}
        overlaps.append(len(chosen & original) / len(original))
    return float(np.mean(overlaps))


def time_cost(measurements: dict) -> dict:
    """Normalize wall times so the fastest explainer reads 1.0; also report
    forward-count ratios against the smallest positive count (explainers
    that never touch the model read 0)."""
    if len(measurements) < 2:
        raise EvalError("time comparison needs at least two explainers")
    walls = {name: m["wall_time"] for name, m in measurements.items()}
    min_wall = min(walls.values())
    if min_wall <= 0.0:
        raise EvalError("zero-time degenerate measurement rejected")
    forwards = {name: m["forward"] for name, m in measurements.items()}
    positive = [v for v in forwards.values() if v > 0]
    min_fwd = min(positive) if positive else 1
    return {
        name: {
            "time_cost_ratio": walls[name] / min_wall,
            "forward_ratio": forwards[name] / min_fwd if forwards[name] > 0 else 0.0,
        }
        for name in measurements
    }


@dataclass
class EvalReport:
    """Aggregated comparison across explainers plus raw per-query rows."""

    explainers: dict
    per_query: dict
    top_n: int
    removal_scope: str

    def to_json(self) -> dict:
        return {
            "top_n": self.top_n,
            "removal_scope": self.removal_scope,
            "explainers": self.explainers,
            "per_query": self.per_query,
        }

    def to_text(self) -> str:
        header = (
            f"{'Explainer':<14}{'Fidelity':>20}{'Stability':>12}"
            f"{'Time Cost':>12}{'Fwd Ratio':>12}"
        )
        lines = [header, "-" * len(header)]
        for name, agg in self.explainers.items():
            if agg.get("failed_queries"):
                note = f" [{agg['failed_queries']} failed]"
            else:
                note = ""
            fid = f"{agg['fidelity_mean']:.4f} +/- {agg['fidelity_std']:.4f}"
            lines.append(
                f"{name:<14}{fid:>20}{agg['stability_mean']:>12.4f}"
                f"{agg['time_cost_ratio']:>12.2f}{agg['forward_ratio']:>12.2f}{note}"
            )
        return "\n".join(lines) + "\n"


def _eval_one(model, tkg, name, fn, query, config):
    try:
        with CounterScope() as scope:
            t0 = time.perf_counter()
            sal = fn(model, tkg, query)
            wall = time.perf_counter() - t0
        fid = fidelity(model, tkg, query, sal, scope=config.removal_scope, top_n=config.top_n)
        stab = stability(fn, model, tkg, query, config)
        return {
            "query": list(query),
            "fidelity": fid,
            "stability": stab,
            "forward": scope.forward,
            "backward": scope.backward,
            "wall_time": wall,
            "error": None,
        }
    except (DataError, ExplainError, NumericError, EvalError) as exc:
        return {
            "query": list(query),
            "fidelity": None,
            "stability": None,
            "forward": 0,
            "backward": 0,
            "wall_time": 0.0,
            "error": f"{type(exc).__name__}: {exc}",
        }


def run_suite(
    model: ReasonerModel,
    tkg: TemporalKG,
    explainers: dict,
    config: EvalConfig,
) -> EvalReport:
    """Evaluate every explainer on every query. Explainer callables take
    (model, tkg, query) and return a Saliency. Failures are recorded as
    per-query failure markers rather than aborting the suite. Deterministic
    given the config seeds, except for wall-time fields."""
    per_query: dict = {}
    aggregates: dict = {}
    for name, fn in explainers.items():
        if config.jobs > 1:
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                rows = list(
                    pool.map(lambda q: _eval_one(model, tkg, name, fn, q, config), config.queries)
                )
        else:
            rows = [_eval_one(model, tkg, name, fn, q, config) for q in config.queries]
        per_query[name] = rows
        good = [r for r in rows if r["error"] is None]
        fids = np.array([r["fidelity"] for r in good]) if good else np.array([0.0])
        stabs = np.array([r["stability"] for r in good]) if good else np.array([0.0])
        aggregates[name] = {
            "fidelity_mean": float(fids.mean()),
            "fidelity_std": float(fids.std()),
            "stability_mean": float(stabs.mean()),
            "forward": int(sum(r["forward"] for r in rows)),
            "backward": int(sum(r["backward"] for r in rows)),
            "wall_time": float(sum(r["wall_time"] for r in rows)),
            "failed_queries": len(rows) - len(good),
        }
    if len(aggregates) >= 2:
        ratios = time_cost(
            {name: {"wall_time": max(a["wall_time"], 1e-12), "forward": a["forward"]}
             for name, a in aggregates.items()}
        )
        for name, r in ratios.items():
            aggregates[name].update(r)
    else:
        for a in aggregates.values():
            a.update({"time_cost_ratio": 1.0, "forward_ratio": 1.0 if a["forward"] else 0.0})
    return EvalReport(
        explainers=aggregates,
        per_query=per_query,
        top_n=config.top_n,
        removal_scope=config.removal_scope,
    )
