"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The benchmark-scale criteria (1, 2, 8, 9, 10) share one five-seed run of the
default experiment (synthetic N=40, T=2000, M=4, 10% node deletion).
Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
repeated at the end of the terminal report.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from callosum.bench import (ExperimentConfig, deletion_bound_rhs, fusion_bound_rhs, load_dataset,
                            run_experiment)
from callosum.esc import build_partition, correlation_map, extract_backbone, info_retention, ordering_score, segment
from callosum.ggb import build_meta_graph, key_nodes_for, pagerank
from callosum.pipeline import holdout_anchors, predict, train_callosum
from callosum.stgraph import DeletionRequest, STGraph, generate_synthetic
from callosum.unlearn import execute_unlearn, locate, plan_unlearn, probe_graph, retrain_reference

from conftest import random_digraph, random_graph, report_criterion
from gradcheck import (ATTENTION_KEYS, GANGLION_KEYS, SUB_KEYS, global_problem, relative_errors,
                       sub_problem)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def config():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def graph(config):
    return load_dataset(config.dataset)


@pytest.fixture(scope="module")
def bench(config, graph):
    t0 = time.perf_counter()
    results = run_experiment(config, graph, keep_models=True)
    results["elapsed"] = time.perf_counter() - t0
    return results


def request_of(bench, seed):
    r = bench["bundle"]["runs"][str(seed)]["request"]
    return DeletionRequest(frozenset(r["nodes"]), frozenset(tuple(e) for e in r["edges"]))


def param_bytes(ens):
    """Every trained array of an ensemble, keyed by owner and name."""
    out = {}
    for m in ens.sub_models:
        for k, v in m.params.items():
            out[(f"sub{m.sid}", k)] = np.asarray(v).tobytes()
    for k, v in ens.global_layer.params.items():
        out[("global", k)] = np.asarray(v).tobytes()
    return out


# ---------------------------------------------------------------- 1


def test_criterion_1_exact_unlearning_equivalence(bench, config, graph):
    mismatches, seconds = [], 0.0
    for seed in config.seeds:
        models = bench["models"][str(seed)]
        request = request_of(bench, seed)
        assert len(request.nodes) == 4
        t0 = time.perf_counter()
        ref = retrain_reference(models["callosum"], graph, request)
        seconds += time.perf_counter() - t0 + bench["timings"][str(seed)]["callosum"]["unlearn"]
        post = models["callosum_post"]
        mine, theirs = param_bytes(post), param_bytes(ref)
        same = (mine == theirs and post.partition.to_json() == ref.partition.to_json()
                and post.meta.to_json() == ref.meta.to_json())
        cert = bench["bundle"]["runs"][str(seed)]["certificate"]
        if not (same and cert["equivalence"] and cert["valid"]):
            mismatches.append(seed)
    ok = not mismatches and seconds < 600
    report_criterion(1, "exact-unlearning equivalence", ok,
                     f"{len(config.seeds) - len(mismatches)}/{len(config.seeds)} seeds bit-identical "
                     f"to purge-and-retrain; unlearn+reference {seconds:.1f}s (< 600s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_influence_nullity(bench, config, graph):
    """Scale deleted nodes' history by 1e6 (plus offset), rerun the whole
    pipeline, unlearn, and compare retained-node forecasts bitwise."""
    pcfg = config.pipeline()
    anchors = holdout_anchors(graph.timesteps, pcfg)
    moved = []
    for seed in config.seeds:
        request = request_of(bench, seed)
        post = bench["models"][str(seed)]["callosum_post"]
        probe = probe_graph(graph, request)
        probe_post, _ = execute_unlearn(train_callosum(probe, pcfg, seed), probe, request,
                                        verify=False)
        ids_a, a = predict(post, graph.without(request), anchors)
        ids_b, b = predict(probe_post, probe.without(request), anchors)
        if ids_a != ids_b or not np.array_equal(a, b):
            moved.append(seed)
        assert not set(ids_a) & request.nodes
    ok = not moved
    report_criterion(2, "influence nullity", ok,
                     f"max |delta prediction| = 0 on {len(config.seeds) - len(moved)}/"
                     f"{len(config.seeds)} seeds (deleted history x1e6 + 1e6)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_information_identity():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(3000 + seed)
        n = int(rng.integers(4, 30))
        g = random_graph(rng, n, t=40, p=float(rng.uniform(0.1, 0.5)))
        corr = correlation_map(g, 8)
        p = segment(list(rng.permutation(n)), int(rng.integers(1, min(n, 8) + 1)), g, corr)
        intra, total = info_retention(p, corr)
        # independent recomputation of all three sums
        owner = {v: i for i, sg in enumerate(p.subgraphs) for v in sg.nodes}
        total_ref = sum(corr[u, v] for u, v in g.edges())
        cut_ref = sum(corr[u, v] for u, v in g.edges() if owner[u] != owner[v])
        intra_ref = sum(corr[u, v] for u, v in g.edges() if owner[u] == owner[v])
        worst = max(worst, abs(intra + p.delta_cut - total), abs(intra - intra_ref),
                    abs(total - total_ref), abs(p.delta_cut - cut_ref))
    ok = worst <= 1e-12
    report_criterion(3, "information-retention identity", ok,
                     f"worst |Info_intra + delta_cut - TotalCorr| = {worst:.2e} over 50 partitions")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_backbone_quality():
    worst, count = math.inf, 0
    for n in range(2, 9):
        for seed in range(6):
            g, _ = generate_synthetic(max(n, 4), 300, 100 * n + seed, 0.4) if n >= 4 else (None, None)
            if g is None:
                rng = np.random.default_rng(100 * n + seed)
                g = random_graph(rng, n, t=300, p=0.7)
            else:
                keep = list(range(n))
                g = STGraph(g.adjacency[np.ix_(keep, keep)], g.features[:, keep], g.node_ids[:n])
            corr = correlation_map(g, 16)
            rho, adj = corr.matrix, g.adjacency
            opt = max(ordering_score(p, rho, adj) for p in itertools.permutations(range(n)))
            got = ordering_score(extract_backbone(g, corr), rho, adj)
            count += 1
            if opt > 0:
                worst = min(worst, got / opt)
            elif got < (1 - 1 / math.e) * opt:
                worst = -math.inf
    ok = worst >= 1 - 1 / math.e - 1e-12
    report_criterion(4, "greedy backbone quality", ok,
                     f"min greedy/optimal = {worst:.4f} over {count} graphs with N <= 8 "
                     f"(bound {1 - 1 / math.e:.4f})")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_gradients():
    groups = {"sub-model loss": [], "global loss": [], "attention": [], "ganglion MLPs": [],
              "fusion alpha": []}
    for point in range(20):
        rng = np.random.default_rng(5000 + point)
        params, f = sub_problem(rng)
        groups["sub-model loss"].append(max(relative_errors(f, params, SUB_KEYS).values()))
        params, f, *_ = global_problem(rng)
        errs = relative_errors(f, params, list(params))
        groups["global loss"].append(max(errs.values()))
        groups["attention"].append(max(errs[k] for k in ATTENTION_KEYS))
        groups["ganglion MLPs"].append(max(errs[k] for k in GANGLION_KEYS))
        groups["fusion alpha"].append(errs["alpha"])
    worst = {k: max(v) for k, v in groups.items()}
    ok = all(v < 1e-4 for v in worst.values())
    report_criterion(5, "gradient correctness", ok,
                     "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + " (20 points each, step 1e-5)")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_meta_graph_budget():
    rows, ok = [], True
    for m in (2, 4, 8, 16):
        for seed in range(3):
            g, _ = generate_synthetic(5 * m, 200, 600 + 10 * m + seed, 0.3)
            p = build_partition(g, correlation_map(g, 16), m=m)
            meta = build_meta_graph(p, key_nodes_for(p), budget_c=8.0)
            cap = math.ceil(8 * m * math.log2(m))
            good = len(meta.edges) <= cap and meta.degrees().min() >= 1 and meta.budget == cap
            ok &= bool(good)
            if seed == 0:
                rows.append(f"M={m}: {len(meta.edges)}/{cap}")
    report_criterion(6, "meta-graph budget", ok,
                     "; ".join(rows) + "; every meta-vertex degree >= 1 (3 seeds per M)")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_pagerank_oracle():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(7000 + seed)
        n = int(rng.integers(1, 13))
        adj = random_digraph(rng, n, float(rng.uniform(0.05, 0.6)))
        out = adj.sum(axis=1)
        rows = np.where(out[:, None] > 0, adj / np.where(out > 0, out, 1)[:, None], 1.0 / n)
        google = 0.85 * rows + 0.15 / n
        vals, vecs = np.linalg.eig(google.T)
        ref = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
        ref = ref / ref.sum()
        worst = max(worst, float(np.max(np.abs(pagerank(adj, 0.85).scores - ref))))
    ok = worst < 1e-8
    report_criterion(7, "PageRank oracle", ok,
                     f"worst L-inf gap to dense eigen-solve {worst:.1e} on 20 digraphs")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_accuracy_parity(bench, config):
    runs = bench["bundle"]["runs"]
    gaps, wins = [], 0
    for seed in config.seeds:
        m = runs[str(seed)]["metrics"]
        gaps.append(m["callosum"]["train"]["mae"] / m["scratch"]["train"]["mae"] - 1.0)
        wins += m["callosum"]["unlearn"]["mae"] <= m["sisa"]["unlearn"]["mae"]
    parity = all(g <= 0.15 for g in gaps)
    ordering = wins >= 4
    unl = [(runs[str(s)]["metrics"]["callosum"]["unlearn"]["mae"],
            runs[str(s)]["metrics"]["sisa"]["unlearn"]["mae"]) for s in config.seeds]
    detail = (f"(a) worst MAE gap vs scratch {100 * max(gaps):+.1f}% (limit +15%) "
              f"{'ok' if parity else 'FAILED'}; "
              f"(b) callosum <= SISA after unlearning on {wins}/5 seeds (need 4) "
              f"{'ok' if ordering else 'FAILED'} "
              "[" + ", ".join(f"{c:.4f} vs {s:.4f}" for c, s in unl) + "]"
              f"; suite wall clock {bench['elapsed']:.0f}s")
    report_criterion(8, "accuracy parity", parity and ordering, detail)
    assert parity, "callosum MAE more than 15% above the scratch model"
    assert ordering, "callosum does not match or beat SISA on at least 4 of 5 seeds"


# ---------------------------------------------------------------- 9


def test_criterion_9_unlearning_efficiency(bench, config):
    ratios = []
    for seed in config.seeds:
        t = bench["timings"][str(seed)]
        ratios.append(t["callosum"]["unlearn"] / t["scratch"]["retrain"])
    ok = max(ratios) < 0.6
    report_criterion(9, "unlearning efficiency", ok,
                     "unlearn / scratch retrain = " + ", ".join(f"{r:.2f}" for r in ratios)
                     + " (cap 0.60)")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_freeze_and_determinism(bench, config, graph):
    # (a) carried-over sub-models across every benchmark unlearn, plus a
    # single interior-node deletion that is guaranteed to leave subgraphs untouched
    frozen_ok, carried = True, 0
    cases = [(bench["models"][str(s)]["callosum"], bench["models"][str(s)]["callosum_post"])
             for s in config.seeds]
    ens = bench["models"][str(config.seeds[0])]["callosum"]
    p = ens.partition
    interior = min(p.live_nodes, key=lambda v: (len(locate(DeletionRequest(
        frozenset([p.node_ids[v]])), p)), v))
    post, cert = execute_unlearn(ens, graph, DeletionRequest(frozenset([p.node_ids[interior]])))
    frozen_ok &= cert.valid
    cases.append((ens, post))
    for prior, after in cases:
        touched = {s for s, t in after.seed_tags.items() if t == after.global_tag}
        before = {m.sid: m.checkpoint() for m in prior.sub_models}
        for m in after.sub_models:
            if m.sid not in touched:
                carried += 1
                frozen_ok &= m.checkpoint() == before[m.sid]
    frozen_ok &= carried > 0
    # (b) a second full run must give a byte-identical bundle
    again = run_experiment(config, graph)
    same = json.dumps(again["bundle"], sort_keys=True) == json.dumps(bench["bundle"], sort_keys=True)
    ok = frozen_ok and same
    report_criterion(10, "freeze and determinism", ok,
                     f"{carried} carried-over sub-model checkpoints byte-identical: {frozen_ok}; "
                     f"two full runs give identical bundles: {same}")
    assert ok


# ---------------------------------------------------------------- 11


def test_criterion_11_degeneracy(bench, config, graph):
    pcfg = config.pipeline()
    corr = correlation_map(graph, pcfg.task.window)
    one = build_partition(graph, corr, m=1)
    zero_cut = one.delta_cut == 0.0 and one.cut_edges == []
    rhs = (fusion_bound_rhs(one.delta_cut, 1, pcfg.heads, pcfg.layers, pcfg.ganglion_width),
           deletion_bound_rhs(one.delta_cut, 4, graph.node_count, pcfg.heads, pcfg.layers, pcfg.ganglion_width))
    zero_rhs = rhs == (0.0, 0.0)

    ens = bench["models"][str(config.seeds[0])]["callosum"]
    same, cert = execute_unlearn(ens, graph, DeletionRequest())
    noop = same is ens and cert.valid and cert.affected_subgraphs == ()

    merges, trials, merged_ok = 0, 0, True
    for seed in range(40):
        rng = np.random.default_rng(11000 + seed)
        n = int(rng.integers(9, 25))
        g = random_graph(rng, n, t=40, p=float(rng.uniform(0.1, 0.4)))
        part = build_partition(g, correlation_map(g, 8), m=int(rng.integers(2, 5)))
        k = int(rng.integers(1, n - 3))
        victims = rng.choice(n, k, replace=False)
        purged, _ = plan_unlearn(part, DeletionRequest(frozenset(g.node_ids[v] for v in victims)))
        trials += 1
        shrunk = any(len([v for v in sg.nodes if v not in set(victims.tolist())]) < 3
                     for sg in part.subgraphs)
        merges += shrunk
        merged_ok &= all(sg.size >= 3 for sg in purged.subgraphs) or purged.m == 1
    ok = zero_cut and zero_rhs and noop and merged_ok
    report_criterion(11, "degeneracy suite", ok,
                     f"M=1 delta_cut=0 {zero_cut}, RHS=0 {zero_rhs}; empty request certified no-op "
                     f"{noop}; {merges}/{trials} purges shrank a subgraph below 3, all merged {merged_ok}")
    assert ok
