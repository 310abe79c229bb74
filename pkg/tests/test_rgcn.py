import numpy as np
import pytest

from gradxkg.autodiff import ShapeError, Tape, Tensor
from gradxkg.rgcn import (
    RGCNConfig,
    RGCNParams,
    basis_materialize,
    init_rgcn_params,
    load_tensors,
    materialized_weight,
    rgcn_encode,
    rgcn_layer,
    save_tensors,
)
from gradxkg.tkg import Snapshot, relation_adjacency


def make_params(config, n, r, seed=0):
    return init_rgcn_params(config, n, r, np.random.default_rng(seed))


def relu(x):
    return np.maximum(x, 0.0)


def node_level_layer_oracle(h, edges, w_rel, w_self, num_nodes):
    """Per-node message passing: for each node i, average incoming messages
    per relation with c = in-degree, add the self-loop term, then ReLU."""
    out = np.zeros((num_nodes, w_rel[0].shape[1]))
    for i in range(num_nodes):
        acc = h[i] @ w_self if w_self is not None else np.zeros(w_rel[0].shape[1])
        for r, w in enumerate(w_rel):
            senders = [s for s, rel, o in edges if rel == r and o == i]
            if senders:
                msg = np.zeros(w.shape[1])
                for s in senders:
                    msg += h[s] @ w
                acc = acc + msg / len(senders)
        out[i] = relu(acc)
    return out


class TestBasisMaterialize:
    def test_single_basis_unit_coeff(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=3, bases=1)
        params = make_params(cfg, n=4, r=2)
        params.coeffs[0] = Tensor([[1.0], [1.0]])
        w = basis_materialize(params, 0, 0)
        np.testing.assert_array_equal(w.data, params.bases[0][0].data)

    def test_zero_coefficients(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=3, bases=2)
        params = make_params(cfg, n=4, r=2)
        params.coeffs[0] = Tensor(np.zeros((2, 2)))
        np.testing.assert_array_equal(basis_materialize(params, 0, 1).data, np.zeros((3, 3)))

    def test_three_bases_against_loop_oracle(self):
        cfg = RGCNConfig(layers=1, input_dim=4, hidden_dim=5, bases=3)
        params = make_params(cfg, n=4, r=3, seed=5)
        for r in range(3):
            expected = np.zeros((4, 5))
            for b in range(3):
                expected += params.coeffs[0].data[r, b] * params.bases[0][b].data
            np.testing.assert_allclose(basis_materialize(params, 0, r).data, expected, atol=1e-12)
            np.testing.assert_allclose(materialized_weight(params, 0, r), expected, atol=1e-12)

    def test_out_of_range(self):
        cfg = RGCNConfig(layers=1, input_dim=2, hidden_dim=2, bases=1)
        params = make_params(cfg, n=3, r=2)
        with pytest.raises(ShapeError):
            basis_materialize(params, 1, 0)
        with pytest.raises(ShapeError):
            basis_materialize(params, 0, 2)


class TestRgcnLayer:
    def test_zero_adjacency_identity_self_loop(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=3, bases=1, activation="relu")
        params = make_params(cfg, n=4, r=1)
        params.self_weights[0] = Tensor(np.eye(3))
        h = Tensor(np.abs(np.random.default_rng(1).normal(size=(4, 3))))
        adj = [Tensor(np.zeros((4, 4)))]
        out, _ = rgcn_layer(h, adj, cfg, params, 0)
        np.testing.assert_allclose(out.data, h.data, atol=1e-15)

    def test_single_relation_output_equals_map(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=4, bases=2)
        params = make_params(cfg, n=5, r=1, seed=2)
        snap = Snapshot(0, frozenset({(0, 0, 1), (2, 0, 1), (1, 0, 3)}), 5, 1)
        adj = [relation_adjacency(snap, 0)]
        h = Tensor(np.random.default_rng(3).normal(size=(5, 3)))
        out, trace = rgcn_layer(h, adj, cfg, params, 0)
        np.testing.assert_array_equal(out.data, trace.rel_maps[0].data)

    def test_matches_per_node_oracle(self):
        cfg = RGCNConfig(layers=1, input_dim=4, hidden_dim=4, bases=2, activation="relu")
        params = make_params(cfg, n=5, r=2, seed=7)
        edges = {(0, 0, 1), (2, 0, 1), (3, 1, 1), (1, 1, 4), (4, 0, 0)}
        snap = Snapshot(0, frozenset(edges), 5, 2)
        adj = [relation_adjacency(snap, r) for r in range(2)]
        hv = np.random.default_rng(9).normal(size=(5, 4))
        out, _ = rgcn_layer(Tensor(hv), adj, cfg, params, 0)
        w_rel = [materialized_weight(params, 0, r) for r in range(2)]
        oracle = node_level_layer_oracle(hv, edges, w_rel, params.self_weights[0].data, 5)
        np.testing.assert_allclose(out.data, oracle, atol=1e-10)

    def test_factored_matches_materialized(self):
        cfg = RGCNConfig(layers=1, input_dim=4, hidden_dim=4, bases=3)
        params = make_params(cfg, n=6, r=3, seed=11)
        edges = {(0, 0, 1), (1, 1, 2), (2, 2, 3), (3, 0, 4), (4, 1, 5)}
        snap = Snapshot(0, frozenset(edges), 6, 3)
        adj = [relation_adjacency(snap, r) for r in range(3)]
        h = Tensor(np.random.default_rng(13).normal(size=(6, 4)))
        out_m, trace_m = rgcn_layer(h, adj, cfg, params, 0, factored=False)
        out_f, trace_f = rgcn_layer(h, adj, cfg, params, 0, factored=True)
        np.testing.assert_allclose(out_m.data, out_f.data, atol=1e-12)
        for m, f in zip(trace_m.rel_maps, trace_f.rel_maps):
            np.testing.assert_allclose(m.data, f.data, atol=1e-12)


class TestRgcnEncode:
    def test_single_layer_reduces_to_layer(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=4, bases=1)
        params = make_params(cfg, n=4, r=2, seed=17)
        snap = Snapshot(0, frozenset({(0, 0, 1), (1, 1, 2)}), 4, 2)
        h_enc, trace = rgcn_encode(snap, cfg, params)
        adj = [relation_adjacency(snap, r) for r in range(2)]
        h_layer, _ = rgcn_layer(params.x, adj, cfg, params, 0)
        np.testing.assert_array_equal(h_enc.data, h_layer.data)
        assert trace.num_layers == 1

    def test_empty_snapshot_self_loop_only(self):
        cfg = RGCNConfig(layers=2, input_dim=3, hidden_dim=3, bases=1, activation="relu")
        params = make_params(cfg, n=4, r=2, seed=19)
        snap = Snapshot(0, frozenset(), 4, 2)
        h, _ = rgcn_encode(snap, cfg, params)
        expected = params.x.data
        for l in range(2):
            expected = relu(expected @ params.self_weights[l].data)
        np.testing.assert_allclose(h.data, expected, atol=1e-12)

    def test_two_layers_match_composition_oracle(self):
        cfg = RGCNConfig(layers=2, input_dim=4, hidden_dim=4, bases=2)
        params = make_params(cfg, n=5, r=2, seed=23)
        edges = {(0, 0, 1), (1, 1, 2), (3, 0, 2), (2, 1, 4)}
        snap = Snapshot(0, frozenset(edges), 5, 2)
        h, _ = rgcn_encode(snap, cfg, params)

        adj = [relation_adjacency(snap, r) for r in range(2)]
        h1, _ = rgcn_layer(params.x, adj, cfg, params, 0)
        h2, _ = rgcn_layer(h1, adj, cfg, params, 1)
        np.testing.assert_array_equal(h.data, h2.data)

    def test_node_count_mismatch(self):
        cfg = RGCNConfig(layers=1, input_dim=2, hidden_dim=2, bases=1)
        params = make_params(cfg, n=4, r=1)
        snap = Snapshot(0, frozenset(), 6, 1)
        with pytest.raises(ShapeError):
            rgcn_encode(snap, cfg, params)

    def test_permutation_equivariance(self):
        cfg = RGCNConfig(layers=2, input_dim=3, hidden_dim=3, bases=2)
        rng = np.random.default_rng(29)
        n = 6
        params = make_params(cfg, n=n, r=2, seed=31)
        edges = {(0, 0, 1), (1, 1, 2), (2, 0, 3), (4, 1, 5), (5, 0, 0)}
        snap = Snapshot(0, frozenset(edges), n, 2)
        h, _ = rgcn_encode(snap, cfg, params)

        perm = rng.permutation(n)
        p = np.zeros((n, n))
        p[perm, np.arange(n)] = 1.0  # new_index = perm[old_index]
        permuted_edges = {(int(perm[s]), r, int(perm[o])) for s, r, o in edges}
        snap_p = Snapshot(0, frozenset(permuted_edges), n, 2)
        params_p = RGCNParams(
            x=Tensor(p @ params.x.data),
            bases=params.bases,
            coeffs=params.coeffs,
            self_weights=params.self_weights,
        )
        h_p, _ = rgcn_encode(snap_p, cfg, params_p)
        np.testing.assert_allclose(h_p.data, p @ h.data, atol=1e-10)

    def test_isolated_node_without_self_loop(self):
        cfg = RGCNConfig(layers=1, input_dim=3, hidden_dim=3, bases=1, self_loop=False)
        params = make_params(cfg, n=4, r=1, seed=37)
        snap = Snapshot(0, frozenset({(0, 0, 1)}), 4, 1)
        h, _ = rgcn_encode(snap, cfg, params)
        np.testing.assert_array_equal(h.data[3], np.zeros(3))  # relu(0)

    def test_gradients_reach_all_intermediates(self):
        from gradxkg.autodiff import backward, tsum

        cfg = RGCNConfig(layers=2, input_dim=3, hidden_dim=3, bases=2)
        params = make_params(cfg, n=4, r=2, seed=41)
        snap = Snapshot(0, frozenset({(0, 0, 1), (1, 1, 2), (2, 0, 3)}), 4, 2)
        with Tape() as tape:
            h, trace = rgcn_encode(snap, cfg, params)
            s = tsum(h)
        backward(s, tape)
        for lt in trace.layers:
            assert tape.grad(lt.preact) is not None
            assert tape.grad(lt.input) is not None
        assert tape.grad(params.x) is not None


class TestCheckpointContainer:
    def test_round_trip_exact_bits(self, tmp_path):
        rng = np.random.default_rng(43)
        tensors = {
            "x": rng.normal(size=(5, 3)),
            "layer0.coeffs": rng.normal(size=(2, 2)),
        }
        path = tmp_path / "ckpt.json"
        save_tensors(path, {"kind": "test", "layers": 1}, tensors)
        header, back = load_tensors(path)
        assert header == {"kind": "test", "layers": 1}
        for name, arr in tensors.items():
            np.testing.assert_array_equal(back[name], arr)
            assert back[name].dtype == np.float64

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "tensors": {}}')
        with pytest.raises(ShapeError):
            load_tensors(path)
