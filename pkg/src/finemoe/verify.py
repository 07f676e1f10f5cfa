"""Randomised property suite over the toy executor and the router.

Each property takes a ``numpy.random.Generator`` and raises ``AssertionError``
on failure. :func:`run_suite` returns one ``(name, passed, detail)`` triple
per property.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .config import GroupConfig
from .routing import (RouterConfig, RoutingStats, accumulate_stats, expected_distinct_experts,
                      monte_carlo_distinct, pre_topk_probs, route, route_restricted)
from .toy import (ToyError, dump_layer, glu_forward, load_layer, moe_forward, random_glu,
                  random_layer, split_glu_into_experts)


def naive_glu(w, h):
    """Triple-loop GLU used as an independent oracle."""
    d_i, d = w.W_u.shape
    inter = []
    for i in range(d_i):
        u = sum(float(w.W_u[i, j]) * float(h[j]) for j in range(d))
        g = sum(float(w.W_g[i, j]) * float(h[j]) for j in range(d))
        a = u / (1.0 + math.exp(-u)) if w.activation == "silu" else u
        inter.append(a * g)
    return np.array([sum(float(w.W_d[k, i]) * inter[i] for i in range(d_i)) for k in range(d)])


def brute_force_route(logits, cfg: RouterConfig, retained=None):
    """Enumerate groups and expert subsets; return (sorted indices, weights by index)."""
    r = [float(x) for x in logits]
    allowed = set(range(cfg.n_e) if retained is None else retained)
    if cfg.group_config is not None:
        g = cfg.group_config
        size = cfg.n_e // g.n_group

        def score(gi):
            vals = sorted((r[i] for i in range(gi * size, (gi + 1) * size) if i in allowed), reverse=True)
            if not vals:
                return None
            return sum(vals[:2]) if cfg.group_score == "top2" else vals[0]

        live = [gi for gi in range(g.n_group) if score(gi) is not None]
        best = None
        for combo in itertools.combinations(live, min(g.topk_group, len(live))):
            total = sum(score(gi) for gi in combo)
            if best is None or total > best[0]:
                best = (total, combo)
        allowed = {i for i in allowed if i // size in best[1]}
    best = None
    for combo in itertools.combinations(sorted(allowed), cfg.n_a):
        total = sum(r[i] for i in combo)
        if best is None or total > best[0]:
            best = (total, combo)
    sel = best[1]
    if cfg.router_kind == "softmax":
        if cfg.normalize_selected:
            pool = sel
        else:
            pool = sorted(set(range(cfg.n_e)) if retained is None else set(retained))
        m = max(r[i] for i in pool)
        z = sum(math.exp(r[i] - m) for i in pool)
        w = {i: math.exp(r[i] - m) / z for i in sel}
    else:
        s = {i: 1.0 / (1.0 + math.exp(-r[i])) for i in sel}
        tot = sum(s.values()) if cfg.normalize_selected else 1.0
        w = {i: v / tot for i, v in s.items()}
    return list(sel), w


def random_router_cfg(rng, kind=None, grouped=None) -> RouterConfig:
    kind = kind or ("softmax", "sigmoid")[rng.integers(2)]
    grouped = bool(rng.integers(2)) if grouped is None else grouped
    if grouped:
        n_group = int(rng.choice([2, 4]))
        n_e = n_group * int(rng.integers(2, 5))
        topk_group = int(rng.integers(1, n_group + 1))
        n_a = int(rng.integers(1, topk_group * (n_e // n_group) + 1))
        return RouterConfig(kind, bool(rng.integers(2)), n_e, min(n_a, 4), GroupConfig(n_group, topk_group))
    n_e = int(rng.integers(2, 13))
    return RouterConfig(kind, bool(rng.integers(2)), n_e, int(rng.integers(1, min(n_e, 4) + 1)))


def prop_glu_naive_oracle(rng):
    w = random_glu(rng, 8, 16, dtype=np.float32)
    h = rng.uniform(-1, 1, 8).astype(np.float32)
    fast = glu_forward(w, h).astype(np.float64)
    slow = naive_glu(w, h)
    assert np.linalg.norm(fast - slow) <= 1e-6 * max(np.linalg.norm(slow), 1e-30) + 1e-12


def prop_partition_equivalence(rng):
    w = random_glu(rng, 16, 64, dtype=np.float32)
    h = rng.uniform(-1, 1, 16).astype(np.float32)
    full = glu_forward(w, h)
    for parts in (1, 8, 64):
        total = sum(glu_forward(p, h) for p in split_glu_into_experts(w, parts))
        assert np.linalg.norm(total - full) <= 1e-5 * np.linalg.norm(full), parts


def prop_topk_prefix(rng):
    layer = random_layer(int(rng.integers(1 << 31)), d=8, d_e=4, n_e=12, n_a=6)
    h = rng.uniform(-1, 1, 8)
    _, (big,) = moe_forward(layer, h, return_decisions=True)
    _, (small,) = moe_forward(layer, h, n_a_override=2, return_decisions=True)
    assert small.selected == big.selected[:2]


def prop_masked_reroute(rng):
    layer = random_layer(int(rng.integers(1 << 31)), d=8, d_e=4, n_e=10, n_a=2, d_s=6)
    h = rng.uniform(-1, 1, 8)
    logits = layer.router @ h
    top = int(np.argmax(logits))
    mask = [i for i in range(10) if i != top]
    out = moe_forward(layer, h, mask=mask)
    sel, w = brute_force_route(logits, layer.router_cfg, mask)
    ref = glu_forward(layer.shared, h) + sum(w[i] * glu_forward(layer.experts[i], h) for i in sel)
    assert top not in sel
    assert np.allclose(out, ref, rtol=1e-10, atol=1e-12)


def prop_route_oracle(rng):
    for _ in range(50):
        cfg = random_router_cfg(rng)
        logits = rng.normal(size=cfg.n_e) * 3
        dec = route(logits, cfg)
        sel, w = brute_force_route(logits, cfg)
        assert sorted(dec.selected) == sel, (dec.selected, sel)
        assert all(abs(dec.weights[k] - w[i]) <= 1e-6 for k, i in enumerate(dec.selected))


def prop_permutation_equivariance(rng):
    cfg = RouterConfig("softmax", True, 16, 4)
    logits = rng.normal(size=16)
    perm = rng.permutation(16)
    a = route(logits, cfg)
    b = route(logits[perm], cfg)
    assert sorted(int(perm[i]) for i in b.selected) == sorted(a.selected)


def prop_scale_and_shift_invariance(rng):
    cfg = RouterConfig("softmax", True, 16, 4)
    logits = rng.normal(size=16)
    a = route(logits, cfg)
    b = route(logits * float(rng.uniform(0.1, 10)), cfg)
    c = route(logits + float(rng.normal() * 5), cfg)
    assert set(a.selected) == set(b.selected) == set(c.selected)
    assert np.allclose(a.weights, c.weights, rtol=0, atol=1e-12)


def prop_group_limit(rng):
    cfg = RouterConfig("sigmoid", True, 64, 8, GroupConfig(8, 2))
    for _ in range(20):
        dec = route(rng.normal(size=64), cfg)
        assert len({i // 8 for i in dec.selected}) <= 2


def prop_weight_normalisation(rng):
    for _ in range(20):
        cfg = random_router_cfg(rng)
        keep = sorted(rng.choice(cfg.n_e, size=int(rng.integers(cfg.n_a, cfg.n_e + 1)), replace=False))
        try:
            dec = route_restricted(rng.normal(size=cfg.n_e), cfg, keep)
        except ValueError:
            continue  # group limit left fewer than n_a survivors
        assert all(w > 0 for w in dec.weights)
        if cfg.normalize_selected:
            assert abs(sum(dec.weights) - 1) <= 1e-6


def prop_distinct_experts(rng):
    seed = int(rng.integers(1 << 31))
    for T in (1, 8, 32):
        samples = monte_carlo_distinct(64, 6, T, 20000, seed)
        mean, se = samples.mean(), samples.std(ddof=1) / math.sqrt(samples.size)
        assert abs(mean - expected_distinct_experts(64, 6, T)) <= 4 * se + 1e-12, T


def prop_stats_invariants(rng):
    cfg = RouterConfig("softmax", True, 8, 2)
    items = []
    for t in range(50):
        dec = route(rng.normal(size=8), cfg)
        items.append((t % 3, dec, None))
    stats = accumulate_stats(items, 8, 2)
    stats.check()
    for st in stats.layers.values():
        assert abs(st.soft.sum() - st.tokens_seen) <= 1e-9
    again = RoutingStats.from_json(stats.to_json())
    assert again.to_json() == stats.to_json()
    assert np.allclose(pre_topk_probs(items[0][1].logits, "softmax").sum(), 1.0)


def prop_dump_roundtrip(rng):
    layer = random_layer(int(rng.integers(1 << 31)), d=6, d_e=4, n_e=4, n_a=2, d_s=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.bin"
        dump_layer(layer, path)
        again = load_layer(path)
    h = rng.uniform(-1, 1, 6)
    assert np.array_equal(moe_forward(layer, h), moe_forward(again, h))


PROPERTIES = {
    "glu-naive-oracle": prop_glu_naive_oracle,
    "partition-equivalence": prop_partition_equivalence,
    "topk-prefix": prop_topk_prefix,
    "masked-reroute": prop_masked_reroute,
    "route-brute-force-oracle": prop_route_oracle,
    "route-permutation-equivariance": prop_permutation_equivariance,
    "softmax-scale-shift-invariance": prop_scale_and_shift_invariance,
    "group-limit": prop_group_limit,
    "weight-normalisation": prop_weight_normalisation,
    "distinct-experts-monte-carlo": prop_distinct_experts,
    "routing-stats-invariants": prop_stats_invariants,
    "weight-dump-roundtrip": prop_dump_roundtrip,
}


def _check_dump(path, rng):
    layer = load_layer(path)
    h = rng.uniform(-1, 1, layer.d)
    out = moe_forward(layer, h)
    assert np.isfinite(out).all(), "non-finite output"
    for e in layer.experts[:2]:
        total = sum(glu_forward(p, h) for p in split_glu_into_experts(e, 1))
        assert np.allclose(total, glu_forward(e, h))


def run_suite(seed: int = 0, rounds: int = 3, weights: Optional[str] = None) -> list:
    results = []
    for name, prop in PROPERTIES.items():
        try:
            for k in range(rounds):
                prop(np.random.default_rng([seed, k, len(name)]))
            results.append((name, True, ""))
        except AssertionError as exc:
            results.append((name, False, str(exc) or "assertion failed"))
    if weights is not None:
        try:
            _check_dump(weights, np.random.default_rng(seed))
            results.append(("weight-dump-integrity", True, ""))
        except (ToyError, AssertionError, OSError) as exc:
            results.append(("weight-dump-integrity", False, str(exc)))
    return results
