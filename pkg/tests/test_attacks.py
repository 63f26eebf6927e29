import numpy as np
import pytest

from dgsl import attacks as atk
from dgsl import trainer as tr
from dgsl.config import ExperimentConfig
from dgsl.dyngraph import TemporalSplit, generate_synthetic, temporal_split
from dgsl.numerics import Rng

SPLIT = TemporalSplit(3, 1, 1)


@pytest.fixture(scope="module")
def graph():
    return generate_synthetic(n_nodes=24, n_communities=3, T=5, noise_fraction=0.2, seed=4)


@pytest.fixture(scope="module")
def surrogate(graph):
    cfg = ExperimentConfig(
        seed=1, hidden_dim=8, state_dim=4, n_features=32, lambda_merge=0.0, max_epochs=15,
        train_len=3, val_len=1, test_len=1,
    )
    state, _ = tr.train(graph, cfg)
    return state


def same_graph(a, b):
    return a.T == b.T and all(
        np.array_equal(x.edges, y.edges) and np.array_equal(x.features, y.features) for x, y in zip(a.snapshots, b.snapshots)
    )


# AttackSpec ----------------------------------------------------------------------------------------

@pytest.mark.parametrize(
    "kw", [{"kind": "bogus"}, {"kind": "feature", "lambda_attack": -1.0}, {"kind": "targeted", "n_perturbations": -1}, {"kind": "targeted", "mode": "x"}]
)
def test_attack_spec_validation(kw):
    with pytest.raises(ValueError):
        atk.AttackSpec(**kw)


# structure --------------------------------------------------------------------------------------

def test_structure_attack_counts_and_test_untouched(graph):
    k = graph.meta["noise_type"]
    before = sum(int(np.sum(s.edges[:, 2] == k)) for s in graph.snapshots[:4])
    out, man = atk.structure_attack(graph, k, SPLIT)
    assert before > 0 and man.details["removed_edges"] == before
    for a, b in zip(graph.snapshots[:4], out.snapshots[:4]):
        assert b.n_edges == a.n_edges - int(np.sum(a.edges[:, 2] == k))
        assert not np.any(b.edges[:, 2] == k)
    assert out[4] is graph[4]
    assert np.array_equal(out[4].edges, graph[4].edges)


def test_structure_attack_absent_type_is_noop():
    dg = generate_synthetic(n_nodes=24, n_communities=3, T=5, p_inter=0.0, seed=4)
    absent = 3  # cross-community type, never drawn with p_inter = 0
    assert not any(np.any(s.edges[:, 2] == absent) for s in dg.snapshots)
    out, _ = atk.structure_attack(dg, absent, SPLIT)
    assert same_graph(out, dg)


def test_structure_attack_zeroes_type_columns(graph):
    out, _ = atk.structure_attack(graph, 0, SPLIT, type_feature_dims=[0, 2])
    for s in out.snapshots[:4]:
        assert np.all(s.features[:, [0, 2]] == 0)
    np.testing.assert_array_equal(out[4].features, graph[4].features)
    assert out.feature_dim == graph.feature_dim


def test_structure_attack_invalid_type(graph):
    with pytest.raises(ValueError):
        atk.structure_attack(graph, graph.n_types, SPLIT)


# features ----------------------------------------------------------------------------------------

def test_feature_attack_zero_lambda(graph):
    out, _ = atk.feature_attack(graph, 0.0, Rng(0))
    for a, b in zip(graph.snapshots, out.snapshots):
        assert np.array_equal(a.features, b.features)


def test_feature_noise_law():
    dg = generate_synthetic(n_nodes=500, T=20, seed=0, identity_dim=4)
    r = atk.feature_scale(dg)
    out, _ = atk.feature_attack(dg, 1.5, Rng(3))
    diff = (out.features() - dg.features()).reshape(-1, dg.feature_dim)
    np.testing.assert_allclose(diff.std(axis=0), 1.5 * r, rtol=0.05)


def test_feature_attack_determinism(graph):
    a, _ = atk.feature_attack(graph, 1.0, Rng(5))
    b, _ = atk.feature_attack(graph, 1.0, Rng(5))
    c, _ = atk.feature_attack(graph, 1.0, Rng(6))
    assert same_graph(a, b)
    assert not np.array_equal(a.features(), c.features())


def test_feature_attack_commutes_with_split(graph):
    r = atk.feature_scale(graph)
    whole, _ = atk.feature_attack(graph, 1.0, Rng(2), r=r)
    parts = [atk.feature_attack(p, 1.0, Rng(2), r=r)[0] for p in temporal_split(graph, SPLIT)]
    joined = np.concatenate([p.features() for p in parts])
    np.testing.assert_array_equal(joined, whole.features())


def test_attacks_preserve_shapes(graph):
    for out in (atk.feature_attack(graph, 1.0, Rng(0))[0], atk.structure_attack(graph, 1, SPLIT)[0]):
        assert (out.T, out.n_nodes, out.feature_dim) == (graph.T, graph.n_nodes, graph.feature_dim)


# targeted --------------------------------------------------------------------------------------

def test_candidates_within_two_hops(graph):
    snap = graph[3]
    pair = tuple(snap.edges[0, :2])
    cands = atk.candidate_flips(snap, pair, graph.n_nodes)
    assert (min(pair), max(pair)) not in cands
    hop = atk._two_hop(snap, int(pair[0]), graph.n_nodes) + atk._two_hop(snap, int(pair[1]), graph.n_nodes)
    for a, b in cands:
        assert (a in pair and b in hop) or (b in pair and a in hop)


def test_targeted_zero_budget(graph, surrogate):
    out, man = atk.targeted_attack(graph, graph[4].edges[:2, :2], 0, "evasion", surrogate)
    assert same_graph(out, graph) and man.perturbations == []


def test_targeted_flips_strictly_lower_scores(graph, surrogate):
    targets = graph[4].edges[:2, :2]
    out, man = atk.targeted_attack(graph, targets, 2, "evasion", surrogate)
    for rec in man.details["targets"]:
        s = rec["scores"]
        assert all(b < a for a, b in zip(s, s[1:]))
    assert man.details["applied"] == len(man.perturbations) <= 2 * len(targets)
    assert all(t == 3 for t, *_ in man.perturbations)
    assert same_graph(atk.apply_manifest(graph, man), out)


def test_targeted_rescored_after_each_flip(graph, surrogate):
    pair = graph[4].edges[0, :2]
    out, man = atk.targeted_attack(graph, [pair], 1, "evasion", surrogate)
    ctx = tr.GraphContext.build(out.view(0, 4), surrogate.cfg)
    z = tr.forward(ctx, surrogate).Z_hat[3]
    assert tr.predict_links(z, pair[None]).item() == pytest.approx(man.details["targets"][0]["scores"][-1], abs=1e-12)


def test_targeted_stops_when_nothing_improves(graph, surrogate, monkeypatch):
    monkeypatch.setattr(atk, "candidate_flips", lambda *a: [])
    out, man = atk.targeted_attack(graph, graph[4].edges[:1, :2], 3, "poisoning", surrogate)
    assert man.perturbations == [] and man.details["applied"] == 0
    assert same_graph(out, graph)


def test_targeted_poisoning_must_hit_held_in_data(graph, surrogate):
    with pytest.raises(ValueError, match="poisoning"):
        atk.targeted_attack(graph, graph[4].edges[:1, :2], 1, "poisoning", surrogate, target_t=4, split=TemporalSplit(2, 1, 2), attack_t=3)


def test_targeted_poisoning_defaults_to_last_training_snapshot(graph, surrogate):
    _, man = atk.targeted_attack(graph, graph[4].edges[:2, :2], 1, "poisoning", surrogate)
    assert man.details["attacked_t"] == 2 and man.details["target_t"] == 4
    assert all(t == 2 for t, *_ in man.perturbations)


def test_targeted_attack_snapshot_must_precede_target(graph, surrogate):
    with pytest.raises(ValueError, match="precede"):
        atk.targeted_attack(graph, graph[4].edges[:1, :2], 1, "evasion", surrogate, attack_t=4)


def test_targeted_is_deterministic(graph, surrogate):
    targets = graph[4].edges[:1, :2]
    a = atk.targeted_attack(graph, targets, 1, "evasion", surrogate)[1]
    b = atk.targeted_attack(graph, targets, 1, "evasion", surrogate)[1]
    assert a.to_dict() == b.to_dict()


# manifests -------------------------------------------------------------------------------------

def test_manifest_round_trip_and_replay(tmp_path, graph):
    out, man = atk.feature_attack(graph, 0.5, Rng(9).child(4))
    p = tmp_path / "m.json"
    man.save(p)
    back = atk.Manifest.load(p)
    assert back.to_dict() == man.to_dict()
    assert same_graph(atk.apply_manifest(graph, back), out)
    s_out, s_man = atk.structure_attack(graph, 0, SPLIT)
    assert same_graph(atk.apply_manifest(graph, s_man, SPLIT), s_out)


def test_type_columns(graph):
    assert atk.type_columns(graph, 1) == [1]
    assert atk.type_columns(graph, graph.meta["noise_type"]) == []
    plain = graph.replace(meta={})
    assert atk.type_columns(plain, 1) == []
