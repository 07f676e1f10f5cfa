import numpy as np
import pytest

from finemoe.config import GroupConfig
from finemoe.routing import RouterConfig
from finemoe.toy import (GLUWeights, ToyError, ToyMoELayer, dump_layer, glu_forward, load_layer,
                         moe_forward, random_glu, random_layer, split_glu_into_experts)
from finemoe.verify import PROPERTIES, naive_glu, run_suite

from oracles import oracle_route


def test_identity_glu_is_elementwise_square():
    eye = np.eye(4)
    w = GLUWeights(eye, eye, eye, "identity")
    h = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(glu_forward(w, h), h * h)
    assert not glu_forward(random_glu(np.random.default_rng(0), 4, 6), np.zeros(4)).any()


def test_glu_matches_naive_loop():
    rng = np.random.default_rng(1)
    w = random_glu(rng, 8, 16, dtype=np.float32)
    h = rng.uniform(-1, 1, 8).astype(np.float32)
    slow = naive_glu(w, h)
    assert np.linalg.norm(glu_forward(w, h) - slow) <= 1e-6 * np.linalg.norm(slow)


@pytest.mark.parametrize("parts", [1, 4, 16])
def test_partition_equivalence(parts):
    rng = np.random.default_rng(parts)
    w = random_glu(rng, 8, 16)
    h = rng.normal(size=(8, 3))
    pieces = split_glu_into_experts(w, parts)
    if parts == 1:
        assert np.array_equal(pieces[0].W_u, w.W_u)
    assert np.allclose(sum(glu_forward(p, h) for p in pieces), glu_forward(w, h), rtol=1e-12)


def test_split_must_divide():
    with pytest.raises(ToyError):
        split_glu_into_experts(random_glu(np.random.default_rng(0), 4, 6), 4)


def test_bad_shapes():
    with pytest.raises(ToyError):
        GLUWeights(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 4)))
    with pytest.raises(ToyError):
        glu_forward(random_glu(np.random.default_rng(0), 4, 6), np.zeros(5))


def test_single_expert_moe_is_its_glu():
    rng = np.random.default_rng(2)
    e = random_glu(rng, 5, 7)
    layer = ToyMoELayer((e,), rng.normal(size=(1, 5)), RouterConfig("softmax", True, 1, 1))
    h = rng.normal(size=5)
    assert np.allclose(moe_forward(layer, h, weight_override=[1.0]), glu_forward(e, h))


def test_moe_is_shared_plus_weighted_experts():
    layer = random_layer(3, d=6, d_e=4, n_e=8, n_a=3, d_s=5, router_kind="sigmoid",
                         group_config=GroupConfig(4, 2))
    h = np.random.default_rng(3).normal(size=6)
    logits = layer.router @ h
    sel, w = oracle_route(logits, "sigmoid", True, 3, 4, 2)
    ref = glu_forward(layer.shared, h) + sum(w[i] * glu_forward(layer.experts[i], h) for i in sel)
    assert np.allclose(moe_forward(layer, h), ref)


def test_block_matches_per_token():
    layer = random_layer(4, d=6, d_e=4, n_e=8, n_a=2)
    H = np.random.default_rng(4).normal(size=(6, 5))
    block = moe_forward(layer, H)
    for j in range(5):
        assert np.allclose(block[:, j], moe_forward(layer, H[:, j]))


def test_masked_top_expert_reroutes():
    layer = random_layer(5, d=6, d_e=4, n_e=8, n_a=1)
    h = np.random.default_rng(5).normal(size=6)
    order = np.argsort(-(layer.router @ h))
    _, (dec,) = moe_forward(layer, h, mask=[int(i) for i in order[1:]], return_decisions=True)
    assert dec.selected == (int(order[1]),)
    with pytest.raises(ToyError):
        moe_forward(layer, h, n_a_override=2, mask=[0])


def test_dump_roundtrip_and_corruption(tmp_path):
    layer = random_layer(6, d=6, d_e=4, n_e=4, n_a=2, d_s=3, group_config=GroupConfig(2, 1))
    path = tmp_path / "w.bin"
    dump_layer(layer, path)
    again = load_layer(path)
    h = np.ones(6)
    assert np.array_equal(moe_forward(layer, h), moe_forward(again, h))
    assert again.router_cfg == layer.router_cfg
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ToyError):
        load_layer(path)


def test_suite_names_corrupted_dump(tmp_path):
    path = tmp_path / "w.bin"
    dump_layer(random_layer(7, d=6, d_e=4, n_e=4, n_a=2), path)
    assert all(ok for _, ok, _ in run_suite(seed=1, rounds=1, weights=str(path)))
    raw = bytearray(path.read_bytes())
    raw[80] ^= 0x01
    path.write_bytes(bytes(raw))
    failed = [name for name, ok, _ in run_suite(seed=1, rounds=1, weights=str(path)) if not ok]
    assert failed == ["weight-dump-integrity"]


@pytest.mark.parametrize("seed", [0, 17, 12345])
def test_suite_passes_for_other_seeds(seed):
    results = run_suite(seed=seed, rounds=1)
    assert len(results) == len(PROPERTIES)
    assert all(ok for _, ok, _ in results), [r for r in results if not r[1]]
