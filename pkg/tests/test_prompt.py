import numpy as np
import pytest

from psp.autodiff import Tape, Tensor, backward, grad_check
from psp.data import generate_sbm, labeled_from_split, sample_k_shot
from psp.encoders import (
    freeze,
    gnn_forward,
    init_encoder_params,
    mlp_forward,
    params_checksum,
)
from psp.errors import ContractError, DataError, ParameterError
from psp.graph import GraphData, PromptedGraph, build_csr, gcn_normalize
from psp.inference import evaluate, predict
from psp.prompt import (
    LabeledSet,
    PromptConfig,
    graph_task_views,
    init_edge_weights,
    init_prototype_features,
    prompt_loss,
    prompt_tune,
    prototype_embeddings,
    restrict_edge_ratio,
)


def frozen_params(n_features, hidden=8, seed=0):
    return freeze(init_encoder_params(n_features, hidden, seed))


def toy_graph(n=5, feat_dim=4, seed=0, edges=((0, 1), (1, 2), (2, 3), (3, 4))):
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n)])
    return GraphData(n_nodes=n, features=Tensor(rng.standard_normal((n, feat_dim))),
                     adjacency=build_csr(n, list(edges)), labels=labels, n_classes=2)


def multi_graph(seed=0):
    """Six tiny graphs: triangles (class 0) and 3-paths (class 1)."""
    rng = np.random.default_rng(seed)
    edges, graph_of, offset = [], [], 0
    graph_labels = []
    for i in range(6):
        if i % 2 == 0:
            edges += [(offset, offset + 1), (offset + 1, offset + 2), (offset, offset + 2)]
            graph_labels.append(0)
        else:
            edges += [(offset, offset + 1), (offset + 1, offset + 2)]
            graph_labels.append(1)
        graph_of += [i] * 3
        offset += 3
    n = offset
    feats = rng.standard_normal((n, 4)) * 0.1
    feats[:, 0] += [1.0 if gl == 0 else -1.0 for gl in np.array(graph_labels)[graph_of]]
    return GraphData(n_nodes=n, features=Tensor(feats), adjacency=build_csr(n, edges),
                     labels=None, n_classes=0, graph_of=np.array(graph_of),
                     graph_labels=np.array(graph_labels), n_graph_classes=2)


# ---------------------------------------------------------------------------
# LabeledSet / PromptConfig


def test_labeled_set_rejects_duplicates():
    with pytest.raises(DataError):
        LabeledSet([(0, 0), (0, 1)], k=1)


def test_labeled_set_coverage():
    ls = LabeledSet([(0, 0), (1, 1)], k=1)
    ls.require_coverage(2)
    with pytest.raises(DataError, match=r"\[2\]"):
        ls.require_coverage(3)


def test_prompt_config_grids():
    PromptConfig(lr=1e-3, weight_decay=1e-5)
    with pytest.raises(ParameterError):
        PromptConfig(lr=5e-3)
    with pytest.raises(ParameterError):
        PromptConfig(weight_decay=0.5)
    with pytest.raises(ParameterError):
        PromptConfig(edge_ratio=1.5)
    with pytest.raises(ParameterError):
        PromptConfig(task="edge")


# ---------------------------------------------------------------------------
# prototype attribute initialization


def test_proto_features_singleton_copies_rows():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    got = init_prototype_features(x, LabeledSet([(1, 0), (3, 1)], k=1), 2)
    np.testing.assert_array_equal(got.data, x.data[[1, 3]])


def test_proto_features_arithmetic_mean():
    x = Tensor([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]])
    got = init_prototype_features(x, LabeledSet([(0, 0), (1, 0), (2, 1)], k=2), 2)
    np.testing.assert_array_equal(got.data[0], [1.0, 1.0])


def test_proto_features_permutation_invariant():
    x = Tensor(np.random.default_rng(0).standard_normal((6, 3)))
    items = [(0, 0), (2, 0), (3, 1), (5, 1)]
    a = init_prototype_features(x, LabeledSet(items, k=2), 2).data
    b = init_prototype_features(x, LabeledSet(items[::-1], k=2), 2).data
    np.testing.assert_array_equal(a, b)


def test_proto_features_empty_class():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(DataError):
        init_prototype_features(x, LabeledSet([(0, 0)], k=1), 2)


# ---------------------------------------------------------------------------
# edge weight initialization


def test_edge_weights_zero_embeddings():
    z = Tensor(np.zeros((4, 3)))
    got = init_edge_weights(z, LabeledSet([(0, 0), (1, 1)], k=1), 2)
    np.testing.assert_array_equal(got.data, np.zeros((4, 2)))


def test_edge_weights_unit_dot():
    z = Tensor([[1.0, 0.0], [0.0, 1.0]])
    got = init_edge_weights(z, LabeledSet([(0, 0), (1, 1)], k=1), 2)
    assert got.data[0, 0] == 1.0 and got.data[1, 1] == 1.0


def test_edge_weights_match_brute_force():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((3, 4))
    labeled = LabeledSet([(0, 0), (2, 1)], k=1)
    got = init_edge_weights(Tensor(z), labeled, 2).data
    proto = np.stack([z[0], z[2]])
    expected = np.empty((3, 2))
    for i in range(3):
        for c in range(2):
            expected[i, c] = float(np.dot(z[i], proto[c]))
    np.testing.assert_allclose(got, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# trainable-row mask


def test_edge_ratio_zero_marks_training_rows_only():
    labeled = LabeledSet([(2, 0), (5, 1)], k=1)
    mask = restrict_edge_ratio(8, labeled, 0.0, seed=0)
    assert mask.sum() == 2 and mask[2] and mask[5]


def test_edge_ratio_one_marks_everything():
    labeled = LabeledSet([(0, 0)], k=1)
    assert restrict_edge_ratio(5, labeled, 1.0, seed=0).all()


def test_edge_ratio_counts_and_determinism():
    labeled = LabeledSet([(0, 0), (1, 1)], k=1)
    m1 = restrict_edge_ratio(100, labeled, 0.1, seed=4)
    m2 = restrict_edge_ratio(100, labeled, 0.1, seed=4)
    assert np.array_equal(m1, m2)
    assert m1.sum() == 2 + 10  # N_t + floor(r * N)
    m3 = restrict_edge_ratio(100, labeled, 0.1, seed=5)
    assert not np.array_equal(m1, m3)


# ---------------------------------------------------------------------------
# prototype embeddings


def test_prototype_isolation_with_zero_weights():
    g = toy_graph()
    params = frozen_params(4)
    proto_feats = Tensor(np.random.default_rng(3).standard_normal((2, 4)))
    ps = PromptedGraph(base=g, n_prototypes=2, proto_features=proto_feats,
                       weight_rows=Tensor(np.zeros((5, 2))),
                       trainable_row_mask=np.ones(5, dtype=bool))
    got = prototype_embeddings(g, ps, params, "eval")
    # prototypes decouple: same as running the GNN on an edgeless graph of
    # just the prototype features
    iso = GraphData(n_nodes=2, features=proto_feats, adjacency=build_csr(2, []),
                    labels=None, n_classes=0)
    expected = gnn_forward(proto_feats, gcn_normalize(iso.adjacency), params, "eval")
    np.testing.assert_allclose(got.data, expected.data, atol=1e-12)


def test_prototype_single_node_single_class_hand_propagation():
    g = GraphData(n_nodes=1, features=Tensor([[1.0, 2.0]]), adjacency=build_csr(1, []),
                  labels=np.array([0]), n_classes=1)
    params = frozen_params(2, hidden=3, seed=5)
    ps = PromptedGraph(base=g, n_prototypes=1, proto_features=Tensor([[0.5, -1.0]]),
                       weight_rows=Tensor([[1.0]]), trainable_row_mask=np.ones(1, bool))
    got = prototype_embeddings(g, ps, params, "eval").data

    # independent dense two-layer propagation over the 2x2 augmented operator
    feats = np.vstack([g.features.data, ps.proto_features.data])
    signed = np.array([[1.0, 1.0], [1.0, 1.0]])       # [[a00+1, w], [w, 1]]
    deg = np.array([1.0 + 1.0, 1.0 + 1.0])            # |w| + implicit/self loops
    m = signed / np.sqrt(np.outer(deg, deg))
    (w1, b1), (w2, b2) = params.gnn_layers
    h1 = np.maximum(m @ (feats @ w1.data) + b1.data, 0.0)
    out = m @ (h1 @ w2.data) + b2.data
    np.testing.assert_allclose(got, out[1:], atol=1e-12)


def test_prototype_embeddings_require_frozen_encoders():
    g = toy_graph()
    params = init_encoder_params(4, 8, 0)
    ps = PromptedGraph(base=g, n_prototypes=2,
                       proto_features=Tensor(np.zeros((2, 4))),
                       weight_rows=Tensor(np.zeros((5, 2))),
                       trainable_row_mask=np.ones(5, bool))
    with pytest.raises(ContractError):
        prototype_embeddings(g, ps, params)


def test_prototype_embeddings_masked_rows_do_not_leak():
    g = toy_graph()
    params = frozen_params(4)
    rng = np.random.default_rng(8)
    w = rng.standard_normal((5, 2))
    mask = np.array([True, False, True, False, True])
    ps = PromptedGraph(base=g, n_prototypes=2, proto_features=Tensor(rng.standard_normal((2, 4))),
                       weight_rows=Tensor(w), trainable_row_mask=mask)
    got = prototype_embeddings(g, ps, params, "eval").data
    ps_zeroed = PromptedGraph(base=g, n_prototypes=2, proto_features=ps.proto_features,
                              weight_rows=Tensor(w * mask[:, None]),
                              trainable_row_mask=np.ones(5, bool))
    expected = prototype_embeddings(g, ps_zeroed, params, "eval").data
    np.testing.assert_allclose(got, expected, atol=1e-15)


def test_weight_doubling_changes_but_bounds_prototypes():
    g = toy_graph(n=3, edges=((0, 1), (1, 2)))
    params = frozen_params(4)
    rng = np.random.default_rng(9)
    proto_feats = Tensor(rng.standard_normal((1, 4)))
    base_w = np.abs(rng.standard_normal((3, 1))) + 0.1
    outs = {}
    for factor in (1.0, 2.0):
        ps = PromptedGraph(base=g, n_prototypes=1, proto_features=proto_feats,
                           weight_rows=Tensor(base_w * factor),
                           trainable_row_mask=np.ones(3, bool))
        outs[factor] = prototype_embeddings(g, ps, params, "eval").data
    assert not np.allclose(outs[1.0], outs[2.0])
    # normalization bounds every aggregation coefficient by 1 at any weight
    # scale: |w_i| <= d_i and |w_i| <= d_c give |w_i|/sqrt(d_i d_c) <= 1
    from psp.graph import augment_prompted, normalize_prompted

    for factor in (1.0, 2.0, 100.0):
        op = normalize_prompted(augment_prompted(g.adjacency, Tensor(base_w * factor)))
        assert np.abs(op.dense()).max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# prompt loss


def test_prompt_loss_hand_case():
    anchors = Tensor([[1.0, 0.0]])
    protos = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert prompt_loss(anchors, protos, [0], tau=1.0).item() == pytest.approx(-1.0, abs=1e-9)


def test_prompt_loss_anchor_scale_invariance():
    rng = np.random.default_rng(10)
    anchors = rng.standard_normal((4, 3))
    protos = Tensor(rng.standard_normal((3, 3)))
    labels = [0, 1, 2, 0]
    base = prompt_loss(Tensor(anchors), protos, labels, tau=0.5).item()
    scaled = prompt_loss(Tensor(7.5 * anchors), protos, labels, tau=0.5).item()
    assert scaled == pytest.approx(base, abs=1e-9)


def test_prompt_loss_identical_prototypes_is_zero():
    anchors = Tensor(np.random.default_rng(11).standard_normal((3, 4)))
    row = np.random.default_rng(12).standard_normal((1, 4))
    protos = Tensor(np.vstack([row, row]))
    assert prompt_loss(anchors, protos, [0, 1, 0], tau=1.0).item() == pytest.approx(0.0, abs=1e-9)


def test_prompt_loss_needs_two_classes():
    with pytest.raises(ContractError):
        prompt_loss(Tensor([[1.0]]), Tensor([[1.0]]), [0], tau=1.0)


def test_prompt_loss_detaches_anchors():
    anchors = Tensor(np.random.default_rng(13).standard_normal((2, 3)), requires_grad=True)
    protos = Tensor(np.random.default_rng(14).standard_normal((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = prompt_loss(anchors, protos, [0, 1], tau=0.5)
    backward(tape, loss)
    assert anchors.grad is None and protos.grad is not None


def test_prompt_loss_gradient_through_augmented_propagation():
    g = toy_graph()
    params = frozen_params(4, hidden=6, seed=2)
    rng = np.random.default_rng(15)
    proto_feats = Tensor(rng.standard_normal((2, 4)))
    anchors = Tensor(rng.standard_normal((3, 6)))
    labels = [0, 1, 0]
    mask = np.ones(5, dtype=bool)

    def f(w):
        ps = PromptedGraph(base=g, n_prototypes=2, proto_features=proto_feats,
                           weight_rows=w, trainable_row_mask=mask)
        proto = prototype_embeddings(g, ps, params, "eval")
        return prompt_loss(anchors, proto, labels, tau=0.5)

    assert grad_check(f, Tensor(rng.standard_normal((5, 2))), h=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# graph-level views


def test_graph_views_single_node_graphs_equal_node_rows():
    rng = np.random.default_rng(16)
    g = GraphData(n_nodes=2, features=Tensor(rng.standard_normal((2, 4))),
                  adjacency=build_csr(2, []), labels=None, n_classes=0,
                  graph_of=np.array([0, 1]), graph_labels=np.array([0, 1]),
                  n_graph_classes=2)
    params = frozen_params(4)
    attr, struct = graph_task_views(g, params)
    np.testing.assert_allclose(attr.data, mlp_forward(g.features, params).data, atol=1e-12)
    np.testing.assert_allclose(
        struct.data,
        gnn_forward(g.features, gcn_normalize(g.adjacency), params).data, atol=1e-12)


def test_graph_views_duplicate_graph_rows_match():
    g = multi_graph()
    params = frozen_params(4)
    attr, struct = graph_task_views(g, params)
    # graphs 0 and 2 are isomorphic triangles; perturb features to be equal
    g.features.data[6:9] = g.features.data[0:3]
    attr2, struct2 = graph_task_views(g, params)
    np.testing.assert_allclose(attr2.data[0], attr2.data[2], atol=1e-12)
    np.testing.assert_allclose(struct2.data[0], struct2.data[2], atol=1e-12)


def test_graph_views_need_membership():
    g = toy_graph()
    with pytest.raises(ContractError):
        graph_task_views(g, frozen_params(4))


def test_graph_task_weight_rows_per_graph():
    g = multi_graph()
    params = frozen_params(4)
    labeled = LabeledSet([(0, 0), (1, 1)], k=1)
    cfg = PromptConfig(epochs=2, lr=1e-3, weight_decay=1e-4, tau=0.5, seed=0,
                       task="graph", dropout=0.0)
    prompted, _ = prompt_tune(g, labeled, params, cfg)
    assert prompted.weight_rows.rows == g.n_graphs  # one row per graph, not per node


# ---------------------------------------------------------------------------
# prompt_tune contracts


@pytest.fixture(scope="module")
def sbm_setup():
    from psp.pretrain import PretrainConfig, pretrain

    g = generate_sbm(120, 3, 0.8, 4.0, 16, 0.5, seed=0)
    params, _ = pretrain(g, PretrainConfig(epochs=120, hidden_dim=32, seed=0))
    split = sample_k_shot(g.labels, 3, 0, val_k=3)
    labeled = LabeledSet(labeled_from_split(split.train, g.labels), k=3)
    val = LabeledSet(labeled_from_split(split.val, g.labels), k=3)
    return g, params, split, labeled, val


def test_tune_zero_epochs_keeps_masked_init(sbm_setup):
    g, params, split, labeled, _ = sbm_setup
    cfg = PromptConfig(epochs=0, lr=1e-2, weight_decay=1e-4, tau=0.5, seed=0,
                       edge_ratio=0.1)
    prompted, losses = prompt_tune(g, labeled, params, cfg)
    assert losses == []
    struct = gnn_forward(g.features, gcn_normalize(g.adjacency), params, "eval")
    w0 = init_edge_weights(struct, labeled, 3)
    expected = w0.data * prompted.trainable_row_mask[:, None]
    np.testing.assert_allclose(prompted.weight_rows.data, expected, atol=1e-15)


def test_tune_improves_training_accuracy(sbm_setup):
    g, params, split, labeled, val = sbm_setup
    anchors = mlp_forward(g.features, params, "eval")
    train_anchors = Tensor(anchors.data[labeled.indices()])
    cfg0 = PromptConfig(epochs=0, lr=1e-3, weight_decay=1e-4, tau=0.5, seed=0)
    before, _ = prompt_tune(g, labeled, params, cfg0)
    acc_before = evaluate(
        predict(train_anchors, prototype_embeddings(g, before, params, "eval"), 0.5),
        labeled.classes())
    cfg = PromptConfig(epochs=60, lr=1e-3, weight_decay=1e-4, tau=0.5, seed=0)
    after, _ = prompt_tune(g, labeled, params, cfg)
    acc_after = evaluate(
        predict(train_anchors, prototype_embeddings(g, after, params, "eval"), 0.5),
        labeled.classes())
    assert acc_after >= acc_before


def test_tune_masked_rows_stay_zero(sbm_setup):
    g, params, split, labeled, val = sbm_setup
    cfg = PromptConfig(epochs=25, lr=1e-2, weight_decay=1e-3, tau=0.5, seed=0,
                       edge_ratio=0.05)
    prompted, _ = prompt_tune(g, labeled, params, cfg)
    frozen_rows = prompted.weight_rows.data[~prompted.trainable_row_mask]
    assert np.array_equal(frozen_rows, np.zeros_like(frozen_rows))


def test_tune_leaves_encoders_bitwise_unchanged(sbm_setup):
    g, params, split, labeled, val = sbm_setup
    checksum = params_checksum(params)
    cfg = PromptConfig(epochs=15, lr=1e-2, weight_decay=1e-4, tau=0.5, seed=0)
    prompt_tune(g, labeled, params, cfg, val=val)
    assert params_checksum(params) == checksum


def test_tune_is_seed_deterministic(sbm_setup):
    g, params, split, labeled, val = sbm_setup
    cfg = dict(epochs=10, lr=1e-2, weight_decay=1e-4, tau=0.5, dropout=0.3)
    a, _ = prompt_tune(g, labeled, params, PromptConfig(seed=7, **cfg), val=val)
    b, _ = prompt_tune(g, labeled, params, PromptConfig(seed=7, **cfg), val=val)
    assert np.array_equal(a.weight_rows.data, b.weight_rows.data)


def test_tune_requires_frozen_and_nonempty(sbm_setup):
    g, params, split, labeled, _ = sbm_setup
    thawed = init_encoder_params(16, 32, 0)
    with pytest.raises(ContractError):
        prompt_tune(g, labeled, thawed, PromptConfig())
    with pytest.raises(ContractError):
        prompt_tune(g, LabeledSet([], k=0), params, PromptConfig())
