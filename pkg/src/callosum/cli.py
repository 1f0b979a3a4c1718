"""Command-line interface.

Exit codes: 0 success, 1 other failure, 2 invalid certificate, 3 configuration
or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .bench import ExperimentConfig, load_dataset, render_report, run_experiment, write_results
from .errors import CallosumError, ValidationError
from .pipeline import evaluate, load_ensemble, save_ensemble, train_callosum
from .stgraph import (DeletionRequest, export_csv, generate_synthetic, ingest_csv, load_npz,
                      read_deletion_request, save_npz)
from .unlearn import certify, execute_unlearn

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2, 3

# flag name -> (ExperimentConfig field, type)
_OVERRIDES = {
    "m": ("m", int), "gamma": ("gamma", float), "k_ring": ("k_ring", int),
    "budget_c": ("budget_c", float), "heads": ("heads", int), "layers": ("layers", int),
    "ganglion_width": ("ganglion_width", int), "lambda1": ("lambda1", float),
    "lambda2": ("lambda2", float), "lambda_reg": ("lambda_reg", float),
    "alpha_init": ("alpha_init", float), "base_hidden": ("base_hidden", int),
    "unlearn_rate": ("unlearn_rate", float),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    for name, (_, typ) in _OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--methods", nargs="+")
    p.add_argument("--epochs", type=int, help="sub-model epochs")
    p.add_argument("--lr", type=float, help="sub-model learning rate")
    p.add_argument("--global-epochs", dest="global_epochs", type=int)
    p.add_argument("--no-certify", dest="certify", action="store_false", default=None)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {f: getattr(args, name) for name, (f, _) in _OVERRIDES.items()
               if getattr(args, name, None) is not None}
    if getattr(args, "seeds", None):
        changes["seeds"] = tuple(args.seeds)
    if getattr(args, "methods", None):
        changes["methods"] = tuple(args.methods)
    if getattr(args, "certify", None) is not None:
        changes["certify"] = args.certify
    sub = {}
    if getattr(args, "epochs", None) is not None:
        sub["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        sub["learning_rate"] = args.lr
    if sub:
        changes["sub_train"] = replace(cfg.sub_train, **sub)
    if getattr(args, "global_epochs", None) is not None:
        changes["global_train"] = replace(cfg.global_train, epochs=args.global_epochs)
    try:
        return replace(cfg, **changes) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def _graph(args):
    if getattr(args, "graph", None):
        return load_npz(args.graph)
    return load_dataset(_config(args).dataset)


def cmd_ingest(args) -> int:
    graph = ingest_csv(args.features, args.edges, undirected=args.undirected)
    save_npz(graph, args.out)
    print(f"ingested {graph.node_count} nodes, {graph.timesteps} timesteps, "
          f"{int(graph.adjacency.sum())} edges -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    graph, _ = generate_synthetic(args.n, args.t, args.seed, args.diffusion_rate)
    save_npz(graph, args.out)
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        export_csv(graph, d / "features.csv", d / "edges.csv")
    print(f"synthetic graph: {graph.node_count} nodes, {graph.timesteps} timesteps -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    graph = _graph(args)
    ens = train_callosum(graph, cfg.pipeline(), seed=args.seed)
    save_ensemble(ens, args.out)
    report = evaluate(ens, graph)
    print(f"trained M={ens.partition.m}; test MAE {report.mae:.4f} RMSE {report.rmse:.4f} -> {args.out}")
    return EXIT_OK


def _emit_certificate(cert, path) -> int:
    text = json.dumps(cert.to_dict(), indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)
    if not cert.valid:
        for f in cert.failures:
            print(f"certificate invalid: {f}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_unlearn(args) -> int:
    ens = load_ensemble(args.model)
    graph = load_npz(args.graph)
    request = read_deletion_request(args.request)
    post, cert = execute_unlearn(ens, graph, request, verify=not args.no_verify)
    save_ensemble(post, args.out)
    if args.no_verify:
        print(json.dumps(cert.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    return _emit_certificate(cert, args.certificate or Path(args.out) / "certificate.json")


def cmd_certify(args) -> int:
    post = load_ensemble(args.model)
    graph = load_npz(args.graph)
    if args.request:
        request = read_deletion_request(args.request)
    elif post.requests:
        last = post.requests[-1]
        request = DeletionRequest(frozenset(last["nodes"]), frozenset(tuple(e) for e in last["edges"]))
    else:
        raise ValidationError("model has no unlearning history; pass --request")
    return _emit_certificate(certify(post, request, graph), args.certificate)


def cmd_bench(args) -> int:
    cfg = _config(args)
    graph = load_npz(args.graph) if args.graph else None
    results = run_experiment(cfg, graph)
    write_results(results, args.out)
    print(render_report(results), end="")
    invalid = [s for s, r in results["bundle"]["runs"].items()
               if r.get("certificate") and not r["certificate"]["valid"]]
    return EXIT_INVALID if invalid else EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.results)
    try:
        bundle = json.loads((root / "bundle.json").read_text())
        timings = json.loads((root / "timings.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read results in {root}: {exc}") from exc
    print(render_report({"bundle": bundle, "timings": timings}), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="callosum", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="convert feature/edge CSVs to a graph archive")
    s.add_argument("--features", required=True)
    s.add_argument("--edges", required=True)
    s.add_argument("--undirected", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate the synthetic diffusion benchmark")
    s.add_argument("--n", type=int, default=40)
    s.add_argument("--t", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--diffusion-rate", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.add_argument("--csv-dir")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an ensemble and save it to a directory")
    s.add_argument("--graph", help="graph archive (.npz); defaults to the config dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("unlearn", help="forget a deletion request and certify the result")
    s.add_argument("--model", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--request", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--certificate")
    s.add_argument("--no-verify", action="store_true")
    s.set_defaults(func=cmd_unlearn)

    s = sub.add_parser("certify", help="re-check an unlearned ensemble")
    s.add_argument("--model", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--request")
    s.add_argument("--certificate")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("bench", help="run the baseline comparison experiment")
    s.add_argument("--graph", help="graph archive overriding the config dataset")
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="print tables from a results directory")
    s.add_argument("results")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CallosumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
