"""Command-line surface: dataset ingestion/generation, training, per-query
explanation, suite evaluation, and DOT export.

Every run writes a manifest.json next to its outputs recording the command,
the full flag snapshot, the seed, and sha256 checksums of inputs and
outputs, so a run can be reproduced bit-for-bit (wall time aside). All
randomness derives from the single --seed flag, expanded into
per-component streams.

Exit codes: 0 ok, 2 usage, 3 data problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from gradxkg.autodiff import NumericError, ShapeError, TapeError
from gradxkg.evaluate import EvalConfig, EvalError, run_suite
from gradxkg.explain import (
    ExplainError,
    Saliency,
    explain,
    perturbation_explain,
    random_explain,
    saliency_to_dot,
    saliency_to_json,
)
from gradxkg.model import TrainConfig, load_model, save_model, train
from gradxkg.rgcn import RGCNConfig
from gradxkg.tkg import (
    DataError,
    Quadruple,
    SynthConfig,
    TemporalKG,
    ingest_quadruples,
    load_dataset,
    synth_generate,
    with_inverse_relations,
    write_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: dict, outputs: dict, elapsed: float) -> Path:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in inputs.items()},
        "outputs": {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in outputs.items()},
        "elapsed_seconds": elapsed,
    }
    path = out_dir / "manifest.json"
    _dump_json(path, manifest)
    return path


def _dataset_files(dataset_dir) -> dict:
    d = Path(dataset_dir)
    return {name: d / f"{name}.tsv" for name in ("quadruples", "entities", "relations", "timestamps")}


def _parse_query(text: str, tkg: TemporalKG) -> Quadruple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise DataError(f'query must be "subject,relation,object,timestamp", got {text!r}')
    s_lbl, r_lbl, o_lbl, t_lbl = parts
    ent = {lbl: i for i, lbl in enumerate(tkg.entity_labels)}
    rel = {lbl: i for i, lbl in enumerate(tkg.relation_labels)}
    times = {lbl: i for i, lbl in enumerate(tkg.timestamp_labels)}
    if s_lbl not in ent or o_lbl not in ent:
        raise DataError(f"unknown entity in query {text!r}")
    if r_lbl not in rel:
        raise DataError(f"unknown relation in query {text!r}")
    if t_lbl in times:
        t = times[t_lbl]
    else:
        try:
            t = int(t_lbl)
        except ValueError:
            raise DataError(f"unknown timestamp {t_lbl!r} in query") from None
    return Quadruple(ent[s_lbl], rel[r_lbl], ent[o_lbl], t)


def _parse_query_file(path, tkg: TemporalKG) -> list:
    queries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path} line {lineno}: expected 4 TAB-separated fields")
            queries.append(_parse_query(",".join(parts), tkg))
    if not queries:
        raise DataError(f"no queries found in {path}")
    return queries


def _component_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def cmd_ingest(args) -> int:
    t0 = time.perf_counter()
    tkg = ingest_quadruples(args.input)
    if args.add_inverse:
        tkg = with_inverse_relations(tkg)
    out = Path(args.out)
    paths = write_dataset(tkg, out)
    _write_manifest(
        out, "ingest", args,
        inputs={"quadruples": args.input},
        outputs=paths,
        elapsed=time.perf_counter() - t0,
    )
    print(
        f"ingested {sum(len(s.edges) for s in tkg.snapshots)} facts over "
        f"{tkg.num_timesteps} timesteps ({tkg.num_nodes} entities, "
        f"{tkg.num_relations} relations) -> {out}"
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    config = SynthConfig(
        num_nodes=args.nodes,
        num_relations=args.relations,
        num_timesteps=args.timesteps,
        density=args.density,
        num_chains=args.chains,
        rule=tuple(int(x) for x in args.rule.split(",")),
    )
    tkg, chains = synth_generate(config, seed=args.seed)
    out = Path(args.out)
    paths = write_dataset(tkg, out)
    chains_path = out / "chains.json"
    _dump_json(
        chains_path,
        [
            {
                "subject": ch.subject,
                "bridge": ch.bridge,
                "object": ch.object,
                "start_t": ch.start_t,
                "query": list(ch.query),
                "cause_nodes": sorted(ch.cause_nodes),
            }
            for ch in chains
        ],
    )
    paths["chains"] = str(chains_path)
    _write_manifest(out, "synth", args, inputs={}, outputs=paths, elapsed=time.perf_counter() - t0)
    print(f"generated {len(chains)} planted chains over {tkg.num_timesteps} timesteps -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    tkg = load_dataset(args.dataset)
    exclude = ()
    inputs = dict(_dataset_files(args.dataset))
    if args.exclude_queries:
        exclude = tuple(_parse_query_file(args.exclude_queries, tkg))
        inputs["exclude_queries"] = args.exclude_queries
    rgcn_cfg = RGCNConfig(
        layers=args.layers,
        input_dim=args.input_dim,
        hidden_dim=args.hidden_dim,
        bases=args.bases,
        activation=args.activation,
        self_loop=not args.no_self_loop,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        negatives=args.negatives,
        window=args.window,
        seed=args.seed,
    )
    model, losses = train(tkg, rgcn_cfg, train_cfg, exclude=exclude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_model(model, ckpt)
    curve = out / "loss_curve.json"
    _dump_json(curve, {"epochs": args.epochs, "loss": losses})
    _write_manifest(
        out, "train", args, inputs=inputs,
        outputs={"checkpoint": ckpt, "loss_curve": curve},
        elapsed=time.perf_counter() - t0,
    )
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"trained {args.epochs} epochs{tail} -> {ckpt}")
    return EXIT_OK


def cmd_explain(args) -> int:
    t0 = time.perf_counter()
    tkg = load_dataset(args.dataset)
    model = load_model(args.checkpoint)
    query = _parse_query(args.query, tkg)
    sal = explain(
        model,
        tkg,
        query,
        top_n=args.top_n,
        mode=args.mode,
        samples=args.ig_samples,
        baseline=args.ig_baseline,
        seed=_component_seed(args.seed, 3),
        window=args.window,
    )
    payload = saliency_to_json(sal, tkg)
    payload["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sal_path = out / "saliency.json"
    _dump_json(sal_path, payload)
    inputs = dict(_dataset_files(args.dataset))
    inputs["checkpoint"] = args.checkpoint
    _write_manifest(
        out, "explain", args, inputs=inputs,
        outputs={"saliency": sal_path},
        elapsed=time.perf_counter() - t0,
    )
    print(f"explained {args.query} ({args.mode}, {args.ig_samples} samples) -> {sal_path}")
    return EXIT_OK


def _build_explainers(names, args):
    explainers = {}
    for name in names:
        if name == "gradxkg":
            explainers[name] = lambda m, g, q: explain(
                m, g, q,
                top_n=args.top_n,
                mode=args.mode,
                samples=args.ig_samples,
                baseline=args.ig_baseline,
                seed=_component_seed(args.seed, 3),
            )
        elif name == "perturbation":
            explainers[name] = lambda m, g, q: perturbation_explain(m, g, q, top_n=args.top_n)
        elif name == "random":
            explainers[name] = lambda m, g, q: random_explain(
                g, q, top_n=args.top_n, seed=_component_seed(args.seed, 4), window=m.window
            )
        else:
            raise DataError(f"unknown explainer {name!r} (use gradxkg, perturbation, random)")
    return explainers


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    tkg = load_dataset(args.dataset)
    model = load_model(args.checkpoint)
    inputs = dict(_dataset_files(args.dataset))
    inputs["checkpoint"] = args.checkpoint
    if args.queries:
        queries = _parse_query_file(args.queries, tkg)
        inputs["queries"] = args.queries
    else:
        queries = [q for q in tkg.quadruples() if model.window <= q.timestamp]
        queries = queries[: args.max_queries]
    if not queries:
        raise DataError("no evaluable queries: every fact is earlier than the window")
    names = [n.strip() for n in args.explainers.split(",") if n.strip()]
    explainers = _build_explainers(names, args)
    config = EvalConfig(
        queries=tuple(queries),
        top_n=args.top_n,
        perturb_fraction=args.perturb_frac,
        stability_seeds=tuple(_component_seed(args.seed, 100 + i) for i in range(args.stability_trials)),
        removal_scope=args.removal,
        jobs=args.jobs,
    )
    report = run_suite(model, tkg, explainers, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    _dump_json(json_path, report.to_json())
    text_path = out / "report.txt"
    text_path.write_text(report.to_text(), encoding="utf-8")
    _write_manifest(
        out, "eval", args, inputs=inputs,
        outputs={"report_json": json_path, "report_text": text_path},
        elapsed=time.perf_counter() - t0,
    )
    print(report.to_text())
    return EXIT_OK


def cmd_export(args) -> int:
    t0 = time.perf_counter()
    tkg = load_dataset(args.dataset)
    payload = json.loads(Path(args.input).read_text(encoding="utf-8"))
    scores = {
        (entry["node_id"], entry["timestep"]): entry["score"] for entry in payload["scores"]
    }
    sal = Saliency(scores=scores, mode=payload["mode"], top_n=payload["top_n"])
    dot = saliency_to_dot(sal, tkg, top_n=args.top_n or payload["top_n"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dot, encoding="utf-8")
    inputs = dict(_dataset_files(args.dataset))
    inputs["saliency"] = args.input
    _write_manifest(
        out.parent, "export", args, inputs=inputs,
        outputs={"dot": out},
        elapsed=time.perf_counter() - t0,
    )
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradxkg",
        description="Gradient-based node saliency for RGCN temporal KG reasoners",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a quadruple file into a canonical dataset")
    p.add_argument("--input", required=True, help="TAB-separated quadruple file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--add-inverse", action="store_true", help="add reversed edges as extra relations")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted causal chains")
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--timesteps", type=int, default=12)
    p.add_argument("--density", type=float, default=0.002)
    p.add_argument("--chains", type=int, default=140)
    p.add_argument("--rule", default="0,1,2", help="relation triple r1,r2,r3 of the planted rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference reasoner on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--input-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--bases", type=int, default=2)
    p.add_argument("--activation", choices=("relu", "sigmoid"), default="relu")
    p.add_argument("--no-self-loop", action="store_true")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--exclude-queries", help="quadruple file of facts to hold out of training")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="explain one query prediction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help='"subject,relation,object,timestamp" (labels)')
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--mode", choices=("signed", "unsigned"), default="signed")
    p.add_argument("--ig-samples", type=int, default=64)
    p.add_argument("--ig-baseline", choices=("zeros", "random"), default="zeros")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="compare explainers on fidelity/stability/time")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--explainers", default="gradxkg,perturbation,random",
                   help="comma list: gradxkg, perturbation, random")
    p.add_argument("--queries", help="quadruple file of queries (default: dataset facts)")
    p.add_argument("--max-queries", type=int, default=20)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--mode", choices=("signed", "unsigned"), default="signed")
    p.add_argument("--ig-samples", type=int, default=64)
    p.add_argument("--ig-baseline", choices=("zeros", "random"), default="zeros")
    p.add_argument("--removal", choices=("union", "per-node"), default="union")
    p.add_argument("--perturb-frac", type=float, default=0.05)
    p.add_argument("--stability-trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="render a saliency JSON as Graphviz DOT")
    p.add_argument("--input", required=True, help="saliency.json from the explain command")
    p.add_argument("--dataset", required=True)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--out", required=True, help="output .dot path")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, EvalError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ShapeError, TapeError, ExplainError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
