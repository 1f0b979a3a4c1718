from dataclasses import replace

import numpy as np
import pytest

from callosum.errors import CertificateError, ValidationError
from callosum.esc import correlation_map, repair_all, segment
from callosum.ledger import DataAccess, Ledger
from callosum.pipeline import holdout_anchors, load_ensemble, predict, save_ensemble
from callosum.stgraph import DeletionRequest, STGraph
from callosum.unlearn import (UnlearnCertificate, certify, execute_unlearn, locate, merge_small,
                              plan_unlearn, probe_graph, purge_structure)

from conftest import random_graph


def path_partition(n=9, m=3):
    adj = np.zeros((n, n), dtype=np.int8)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = 1
    x = np.random.default_rng(0).normal(size=(30, n, 1))
    g = STGraph(adj, x, tuple(f"n{i}" for i in range(n)))
    return repair_all(segment(list(range(n)), m, g, correlation_map(g, 4), k_ring=1))


def req(nodes=(), edges=()):
    return DeletionRequest(nodes=frozenset(nodes), edges=frozenset(edges))


def nodes_of(ens, pos):
    p = ens.partition
    return [p.node_ids[n] for n in p.subgraphs[pos].nodes]


# ---------------------------------------------------------------- locate / purge / merge


def test_locate_examples():
    p = path_partition()
    assert locate(req(["n4"]), p) == {1}
    assert locate(req(["n3"]), p) == {0, 1}
    assert locate(req(edges=[("n2", "n3")]), p) == {0, 1}
    assert locate(req(edges=[("n0", "n1")]), p) == {0}
    assert locate(req(), p) == set()


@pytest.mark.parametrize("seed", range(10))
def test_locate_matches_membership_scan(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 14, t=30, p=0.2)
    p = repair_all(segment(list(rng.permutation(14)), 4, g, correlation_map(g, 4)))
    owner = {n: i for i, sg in enumerate(p.subgraphs) for n in sg.nodes}
    dels = rng.choice(14, 2, replace=False)
    expect = set()
    for d in dels:
        expect.add(owner[d])
        for v in range(14):
            if g.adjacency[d, v] or g.adjacency[v, d]:
                expect.add(owner[v])
    assert locate(req([f"v{d}" for d in dels]), p) == expect


def test_purge_structure():
    p = path_partition()
    q = purge_structure(p, {4}, {(0, 1)})
    assert 4 not in q.backbone and 4 in q.removed
    assert not q.adjacency[4].any() and not q.adjacency[:, 4].any()
    assert q.adjacency[0, 1] == 0 and q.adjacency[1, 0] == 1 and q.rho[0, 1] == 0
    assert q.subgraphs is p.subgraphs
    assert p.adjacency[4].any()                      # input untouched


def test_small_subgraph_joins_correlated_neighbour():
    p = path_partition()
    purged, affected = plan_unlearn(p, req(["n3", "n4"]))
    assert [sg.sid for sg in purged.subgraphs] == [0, 2]
    assert purged.subgraphs[1].nodes == (5, 6, 7, 8)
    assert affected == {0, 2}


def test_merge_tie_goes_to_earlier_neighbour():
    p = path_partition()
    purged, affected = plan_unlearn(p, req(["n3", "n5"]))
    assert purged.subgraphs[0].nodes == (0, 1, 2, 4)
    assert affected == {0, 2}
    assert all(sg.size >= 3 for sg in purged.subgraphs)


@pytest.mark.parametrize("seed", range(10))
def test_post_purge_subgraphs_never_stay_small(seed):
    rng = np.random.default_rng(50 + seed)
    g = random_graph(rng, 16, t=30, p=0.25)
    p = repair_all(segment(list(rng.permutation(16)), 4, g, correlation_map(g, 4)))
    dels = rng.choice(16, int(rng.integers(1, 8)), replace=False)
    purged, _ = plan_unlearn(p, req([f"v{d}" for d in dels]))
    assert all(sg.size >= 3 for sg in purged.subgraphs) or purged.m == 1
    live = sorted(n for sg in purged.subgraphs for n in sg.nodes)
    assert live == sorted(set(range(16)) - set(dels.tolist()))


def test_merge_is_noop_when_sizes_are_fine():
    p = path_partition()
    q, merged = merge_small(p)
    assert merged == set() and [sg.nodes for sg in q.subgraphs] == [sg.nodes for sg in p.subgraphs]


def test_plan_rejections():
    p = path_partition(n=4, m=1)
    with pytest.raises(ValidationError, match="at least 3"):
        plan_unlearn(p, req(["n0", "n1"]))
    with pytest.raises(ValidationError, match="ghost"):
        plan_unlearn(p, req(["ghost"]))
    with pytest.raises(ValidationError, match="does not exist"):
        plan_unlearn(p, req(edges=[("n0", "n2")]))
    q = purge_structure(p, {0}, set())
    with pytest.raises(ValidationError):
        locate(req(["n0"]), q)


# ---------------------------------------------------------------- ledger


def test_ledger_chain_and_reads():
    led = Ledger()
    led.record_read("s", ["a", "b"])
    led.record_purge("r1", ["a"])
    led.record_read("s", ["b"])
    assert led.verify_chain() and led.has_purge("r1")
    assert led.reads_after_purge("r1", ["a"]) == []
    led.record_read("s", ["a"])
    assert [e.seq for e in led.reads_after_purge("r1", ["a"])] == [3]
    bad = Ledger(list(led.entries))
    bad.entries[1] = replace(bad.entries[1], nodes=("z",))
    assert not bad.verify_chain()


def test_ledger_round_trip(tmp_path):
    led = Ledger()
    DataAccess(random_graph(np.random.default_rng(0), 3), led).features(["v0", "v2"], "x")
    led.record_purge("r", ["v0"])
    led.save(tmp_path / "l.jsonl")
    back = Ledger.load(tmp_path / "l.jsonl")
    assert back.entries == led.entries and back.verify_chain()


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def one_node(small_ensemble, small_graph):
    request = req([nodes_of(small_ensemble, 1)[0]])
    post, cert = execute_unlearn(small_ensemble, small_graph, request)
    return request, post, cert


def test_empty_request_is_certified_noop(small_ensemble, small_graph):
    post, cert = execute_unlearn(small_ensemble, small_graph, req())
    assert post is small_ensemble and cert.valid and cert.affected_subgraphs == ()


def test_unlearn_is_certified(one_node):
    _, post, cert = one_node
    assert cert.valid, cert.failures
    assert cert.equivalence and cert.ledger_clean and cert.influence_null
    assert cert.failures == ()


def test_untouched_submodels_are_byte_identical(one_node, small_ensemble):
    _, post, cert = one_node
    before = {m.sid: m.checkpoint() for m in small_ensemble.sub_models}
    touched = set(cert.affected_subgraphs)
    assert touched and touched != set(before)
    for m in post.sub_models:
        if m.sid not in touched:
            assert m.checkpoint() == before[m.sid]
        else:
            assert m.checkpoint() != before[m.sid]


def test_deleted_node_is_gone(one_node):
    request, post, _ = one_node
    gone = next(iter(request.nodes))
    assert all(gone not in m.node_ids for m in post.sub_models)
    assert post.ledger.has_purge(request.digest())
    assert post.ledger.reads_after_purge(request.digest(), request.nodes) == []


def test_tampered_parameters_fail_equivalence(one_node, small_graph):
    request, post, _ = one_node
    m = post.sub_models[0]
    params = {k: np.array(v) for k, v in m.params.items()}
    params["br"] = params["br"] + 1e-9
    bad = replace(post, sub_models=(replace(m, params=params),) + post.sub_models[1:])
    cert = certify(bad, request, small_graph)
    assert not cert.valid and cert.equivalence is False
    assert any(f.startswith("equivalence") and f"sub-model {m.sid}" in f for f in cert.failures)


def test_dirty_ledger_fails(one_node, small_graph):
    request, post, _ = one_node
    led = post.ledger.copy()
    led.record_read("sneaky", request.nodes)
    cert = certify(replace(post, ledger=led), request, small_graph)
    assert cert.equivalence and not cert.ledger_clean and not cert.valid
    assert any("reads deleted nodes" in f for f in cert.failures)


def test_certify_rejects_mismatch(one_node, small_ensemble, small_graph):
    request, post, _ = one_node
    with pytest.raises(CertificateError):
        certify(small_ensemble, request, small_graph)
    with pytest.raises(CertificateError):
        certify(post, req([nodes_of(small_ensemble, 0)[0]]), small_graph)


def test_probe_does_not_move_predictions(one_node, small_ensemble, small_graph):
    request, post, _ = one_node
    probe = probe_graph(small_graph, request)
    probe_post, _ = execute_unlearn(small_ensemble, probe, request, verify=False)
    anchors = holdout_anchors(small_graph.timesteps, post.config)
    _, a = predict(post, small_graph.without(request), anchors)
    _, b = predict(probe_post, probe.without(request), anchors)
    assert np.array_equal(a, b)


def test_merge_during_unlearn_is_certified(small_ensemble, small_graph):
    victims = nodes_of(small_ensemble, 2)[:2]
    post, cert = execute_unlearn(small_ensemble, small_graph, req(victims))
    assert cert.valid, cert.failures
    assert post.partition.m == small_ensemble.partition.m - 1
    assert all(sg.size >= 3 for sg in post.partition.subgraphs)


def test_edge_only_request(small_ensemble, small_graph):
    p = small_ensemble.partition
    u, v = p.cut_edges[0]
    request = req(edges=[(p.node_ids[u], p.node_ids[v])])
    post, cert = execute_unlearn(small_ensemble, small_graph, request)
    assert cert.valid, cert.failures
    assert post.partition.adjacency[u, v] == 0


def test_save_load_and_recertify(one_node, small_graph, tmp_path):
    request, post, cert = one_node
    save_ensemble(post, tmp_path / "m")
    back = load_ensemble(tmp_path / "m")
    assert back.fingerprint() == post.fingerprint()
    assert back.parent.fingerprint() == post.parent.fingerprint()
    again = certify(back, request, small_graph)
    assert again.valid and again.model_digest == cert.model_digest


def test_certificate_round_trip(one_node):
    _, _, cert = one_node
    back = UnlearnCertificate.from_dict(cert.to_dict())
    assert back.to_json() == cert.to_json() and back.valid
