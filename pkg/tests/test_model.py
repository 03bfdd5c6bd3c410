from __future__ import annotations

import numpy as np
import pytest

from fimtta import autodiff as ad
from fimtta import scheduler
from fimtta.model import (
    LayerParams,
    Model,
    build_classifier,
    load_checkpoint,
    predict,
    record_source_stats,
    save_checkpoint,
)


def test_build_is_deterministic_per_seed():
    a = build_classifier(2, [16, 16], 3, seed=7)
    b = build_classifier(2, [16, 16], 3, seed=7)
    for la, lb in zip(a.layers, b.layers):
        assert la.name == lb.name and la.kind == lb.kind
        for pa, pb in zip(la.params, lb.params):
            assert np.array_equal(pa.data, pb.data)


def test_different_seeds_differ():
    a = build_classifier(2, [8], 3, seed=0)
    b = build_classifier(2, [8], 3, seed=1)
    assert not np.array_equal(a.layers[0].params[0].data, b.layers[0].params[0].data)


def test_empty_hidden_dims_is_minimal_linear_classifier():
    m = build_classifier(4, [], 2, seed=0)
    assert len(m.weight_layers()) == 1
    assert m.weight_layers()[0].kind == "dense"
    assert m.forward(np.zeros((3, 4))).data.shape == (3, 2)


def test_layer_count_follows_construction_rule():
    # one dense + one norm per hidden block, plus the dense head
    for hidden in ([32, 32, 32, 32], [16], [5, 6, 7]):
        m = build_classifier(16, hidden, 3, seed=1)
        assert len(m.weight_layers()) == 2 * len(hidden) + 1
    assert len(build_classifier(16, [32, 32, 32, 32], 3, seed=1).weight_layers()) == 9


def test_layer_enumeration_order_is_stable():
    m = build_classifier(4, [8, 8], 3, seed=2)
    assert m.weight_layer_names() == ["dense1", "norm1", "dense2", "norm2", "head"]
    assert m.weight_layer_names() == m.weight_layer_names()


def test_zero_weight_head_gives_uniform_probabilities():
    m = build_classifier(4, [], 5, seed=0)
    head = m.weight_layers()[0]
    head.params[0].data[:] = 0.0
    head.params[1].data[:] = 0.0
    logits = predict(m, np.random.default_rng(0).standard_normal((6, 4)))
    probs = np.exp(ad.log_softmax(logits).data)
    assert np.allclose(probs, 0.2, atol=1e-15)


def test_single_sample_matches_batch_row_under_fixed_stats():
    rng = np.random.default_rng(4)
    m = build_classifier(5, [8, 8], 3, seed=3)
    record_source_stats(m, rng.standard_normal((64, 5)))
    batch = rng.standard_normal((4, 5))
    full = m.forward(batch, batch_stats=False).data
    single = m.forward(batch[:1], batch_stats=False).data
    assert np.allclose(single[0], full[0], rtol=1e-12, atol=1e-14)


def test_forward_rejects_dimension_mismatch():
    m = build_classifier(4, [8], 2, seed=0)
    with pytest.raises(ad.ShapeError, match="forward"):
        m.forward(np.zeros((3, 5)))
    with pytest.raises(ad.ShapeError):
        m.forward(np.zeros(4))


def test_frozen_source_path_requires_recorded_stats():
    m = build_classifier(4, [8], 2, seed=0)
    with pytest.raises(RuntimeError, match="source statistics"):
        m.forward(np.zeros((2, 4)), batch_stats=False)


def test_duplicate_layer_names_rejected():
    layers = [
        LayerParams(name="a", kind="dense", params=[ad.param(np.ones((2, 2))), ad.param(np.zeros(2))]),
        LayerParams(name="a", kind="relu"),
    ]
    with pytest.raises(ValueError, match="duplicate"):
        Model(layers, 2, 2)


def test_bad_dims_rejected():
    with pytest.raises(ValueError):
        build_classifier(0, [4], 2, seed=0)
    with pytest.raises(ValueError):
        build_classifier(4, [0], 2, seed=0)


def test_untrainable_layer_is_bit_identical_across_steps():
    rng = np.random.default_rng(9)
    m = build_classifier(3, [6], 2, seed=5)
    frozen = m.weight_layers()[1]
    frozen.trainable = False
    before = [p.data.copy() for p in frozen.params]
    opt = scheduler.AdamState()
    for _ in range(5):
        logits = m.forward(rng.standard_normal((8, 3)))
        loss = ad.mean_all(ad.mul(logits, logits))
        grads = {
            layer.name: ad.grads_of(loss, layer.params) for layer in m.weight_layers()
        }
        assert scheduler.weighted_step(m, grads, np.full(3, 1e-2), optimizer=opt)
    for p, b in zip(frozen.params, before):
        assert np.array_equal(p.data, b)
    assert not np.array_equal(m.weight_layers()[0].params[0].data.copy(), np.zeros((3, 6)))


def test_clone_is_independent():
    m = build_classifier(3, [4], 2, seed=1)
    c = m.clone()
    c.weight_layers()[0].params[0].data[:] = 99.0
    assert not np.array_equal(
        m.weight_layers()[0].params[0].data, c.weight_layers()[0].params[0].data
    )


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    m = build_classifier(6, [9, 7], 4, seed=11)
    record_source_stats(m, rng.standard_normal((32, 6)))
    m.weight_layers()[2].trainable = False
    path = tmp_path / "model.txt"
    save_checkpoint(m, path, meta={"d": "6", "note": "with spaces"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"d": "6", "note": "with spaces"}
    assert loaded.input_dim == 6 and loaded.class_count == 4
    for la, lb in zip(m.layers, loaded.layers):
        assert (la.name, la.kind, la.trainable) == (lb.name, lb.kind, lb.trainable)
        for pa, pb in zip(la.params, lb.params):
            assert pa.data.shape == pb.data.shape
            assert np.array_equal(pa.data, pb.data)
        for buf in ("source_mean", "source_var"):
            a, b = getattr(la, buf), getattr(lb, buf)
            assert (a is None) == (b is None)
            if a is not None:
                assert np.array_equal(a, b)


def test_checkpoint_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a checkpoint\n", encoding="utf-8")
    with pytest.raises(ValueError, match="header"):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage_line(tmp_path):
    m = build_classifier(2, [], 2, seed=0)
    path = tmp_path / "model.txt"
    save_checkpoint(m, path)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("mystery 1 2 3\n")
    with pytest.raises(ValueError, match="unrecognized"):
        load_checkpoint(path)


def test_forward_output_shape_is_batch_by_classes():
    m = build_classifier(7, [5], 4, seed=2)
    out = m.forward(np.zeros((9, 7)))
    assert out.data.shape == (9, 4)
