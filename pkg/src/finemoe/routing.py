"""Top-k gating, distinct-expert loading model and calibration statistics.

Selection runs on logits after the group-limiting modifier (``F_r``); combine
weights come from the weight function (``F_w``) applied to the selected
logits. Ties are always broken toward the lower expert (or group) index.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import GroupConfig, ModelConfig


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    router_kind: str
    normalize_selected: bool
    n_e: int
    n_a: int
    group_config: Optional[GroupConfig] = None
    # "top2" sums each group's two largest logits; "max" takes the largest
    group_score: str = "top2"

    def __post_init__(self):
        if self.router_kind not in ("softmax", "sigmoid"):
            raise RoutingError(f"unknown router_kind {self.router_kind!r}")
        if not 1 <= self.n_a <= self.n_e:
            raise RoutingError(f"n_a={self.n_a} outside [1, n_e={self.n_e}]")
        g = self.group_config
        if g is not None and (self.n_e % g.n_group or not 1 <= g.topk_group <= g.n_group):
            raise RoutingError(f"invalid group config {g} for n_e={self.n_e}")
        if self.group_score not in ("top2", "max"):
            raise RoutingError(f"unknown group_score {self.group_score!r}")

    @classmethod
    def from_model(cls, model: ModelConfig, n_a: Optional[int] = None) -> "RouterConfig":
        return cls(
            router_kind=model.router_kind,
            normalize_selected=model.normalize_selected,
            n_e=model.n_e,
            n_a=model.n_a if n_a is None else n_a,
            group_config=model.group_config,
        )

    def with_n_a(self, n_a: int) -> "RouterConfig":
        return RouterConfig(self.router_kind, self.normalize_selected, self.n_e, n_a,
                            self.group_config, self.group_score)


@dataclass(frozen=True)
class RoutingDecision:
    selected: tuple
    weights: tuple
    logits: tuple


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _topk_desc(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values keeps lower indices first among ties
    return np.argsort(-values, kind="stable")[:k]


def _group_limit(logits: np.ndarray, allowed: np.ndarray, cfg: RouterConfig) -> np.ndarray:
    g = cfg.group_config
    size = cfg.n_e // g.n_group
    scores = np.full(g.n_group, -np.inf)
    for gi in range(g.n_group):
        vals = np.sort(logits[gi * size:(gi + 1) * size][allowed[gi * size:(gi + 1) * size]])[::-1]
        if vals.size == 0:
            continue
        scores[gi] = vals[:2].sum() if cfg.group_score == "top2" else vals[0]
    live = np.flatnonzero(np.isfinite(scores))
    keep_groups = live[_topk_desc(scores[live], g.topk_group)]
    group_mask = np.zeros(cfg.n_e, dtype=bool)
    for gi in keep_groups:
        group_mask[gi * size:(gi + 1) * size] = True
    return allowed & group_mask


def _route(logits: Sequence[float], cfg: RouterConfig, allowed: Optional[np.ndarray]) -> RoutingDecision:
    r = np.asarray(logits, dtype=np.float64)
    if r.shape != (cfg.n_e,):
        raise RoutingError(f"expected {cfg.n_e} logits, got shape {r.shape}")
    if np.isnan(r).any():
        raise RoutingError("NaN router logit")
    if not np.isfinite(r).all():
        raise RoutingError("non-finite router logit")
    if allowed is None:
        allowed = np.ones(cfg.n_e, dtype=bool)
    survivors = _group_limit(r, allowed, cfg) if cfg.group_config else allowed
    cand = np.flatnonzero(survivors)
    if cand.size < cfg.n_a:
        raise RoutingError(f"n_a={cfg.n_a} exceeds the {cand.size} experts surviving F_r")
    sel = cand[_topk_desc(r[cand], cfg.n_a)]
    weights = gate_weights(r, sel, cfg, allowed)
    return RoutingDecision(tuple(int(i) for i in sel), tuple(float(w) for w in weights), tuple(r.tolist()))


def gate_weights(r: np.ndarray, sel: np.ndarray, cfg: RouterConfig, allowed: np.ndarray) -> np.ndarray:
    """F_w: combine weights for the selected experts."""
    if cfg.router_kind == "softmax":
        if cfg.normalize_selected:
            return _softmax(r[sel])
        # full-softmax reading: probabilities over every expert still in the model
        probs = np.zeros_like(r)
        probs[allowed] = _softmax(r[allowed])
        return probs[sel]
    w = _sigmoid(r[sel])
    if cfg.normalize_selected:
        w = w / w.sum()
    return w


def route(logits: Sequence[float], cfg: RouterConfig) -> RoutingDecision:
    return _route(logits, cfg, None)


def route_restricted(logits: Sequence[float], cfg: RouterConfig, retained: Sequence[int]) -> RoutingDecision:
    """Route with every expert outside ``retained`` removed before selection."""
    allowed = np.zeros(cfg.n_e, dtype=bool)
    idx = np.asarray(list(retained), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= cfg.n_e):
        raise RoutingError("retained index out of range")
    allowed[idx] = True
    if allowed.sum() < cfg.n_a:
        raise RoutingError(f"only {int(allowed.sum())} experts retained, need n_a={cfg.n_a}")
    return _route(logits, cfg, allowed)


def pre_topk_probs(logits: Sequence[float], router_kind: str) -> np.ndarray:
    r = np.asarray(logits, dtype=np.float64)
    return _softmax(r) if router_kind == "softmax" else _sigmoid(r)


# ---------------------------------------------------------------------------
# distinct experts touched by a batch


def expected_distinct_experts(n_e: int, n_a: int, T: int) -> float:
    """E[# distinct experts] when T tokens each pick n_a distinct experts uniformly."""
    if not 1 <= n_a <= n_e:
        raise RoutingError(f"n_a={n_a} outside [1, n_e={n_e}]")
    if T < 0:
        raise RoutingError("T must be non-negative")
    return n_e * (1.0 - (1.0 - n_a / n_e) ** T)


def expected_distinct_skewed(inclusion: Sequence[float], T: int) -> float:
    """Distinct-expert expectation for per-expert per-token inclusion probabilities.

    ``inclusion[j]`` is the chance expert j is among a token's selections (the
    entries sum to n_a). Tokens are treated as independent.
    """
    q = np.clip(np.asarray(inclusion, dtype=np.float64), 0.0, 1.0)
    return float(np.sum(1.0 - (1.0 - q) ** T))


def inclusion_from_popularity(popularity: Sequence[float], n_a: int) -> np.ndarray:
    """Approximate inclusion probabilities as n_a * p, clipped to 1."""
    p = _check_popularity(popularity, len(popularity))
    return np.minimum(1.0, n_a * p)


def monte_carlo_distinct(n_e: int, n_a: int, T: int, trials: int, seed: int) -> np.ndarray:
    """Sample the distinct-expert count for ``trials`` independent batches.

    Tokens are added one at a time; the number of new experts a token adds is
    hypergeometric given how many experts are already loaded.
    """
    rng = np.random.default_rng(seed)
    seen = np.zeros(trials, dtype=np.int64)
    for _ in range(T):
        unseen = n_e - seen
        seen += rng.hypergeometric(unseen, seen, n_a) if n_a < n_e else unseen
    return seen


def _check_popularity(popularity: Optional[Sequence[float]], n_e: int) -> Optional[np.ndarray]:
    if popularity is None:
        return None
    p = np.asarray(popularity, dtype=np.float64)
    if p.shape != (n_e,) or (p < 0).any() or not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise RoutingError("popularity must be a non-negative sequence of length n_e summing to 1")
    return p


# ---------------------------------------------------------------------------
# calibration statistics


@dataclass
class LayerStats:
    hard: np.ndarray
    soft: np.ndarray
    tokens_seen: int = 0


@dataclass
class RoutingStats:
    n_e: int
    n_a: int
    layers: dict = field(default_factory=dict)

    def layer(self, idx: int) -> LayerStats:
        if idx not in self.layers:
            self.layers[idx] = LayerStats(np.zeros(self.n_e, dtype=np.int64), np.zeros(self.n_e))
        return self.layers[idx]

    def check(self) -> None:
        for idx, st in self.layers.items():
            if int(st.hard.sum()) != st.tokens_seen * self.n_a:
                raise RoutingError(f"layer {idx}: hard counts do not sum to tokens_seen * n_a")
            if (st.soft < 0).any():
                raise RoutingError(f"layer {idx}: negative soft count")

    def to_json(self) -> str:
        doc = {
            "n_e": self.n_e,
            "n_a": self.n_a,
            "layers": {
                str(i): {
                    "hard": [int(x) for x in st.hard],
                    "soft": [float(x) for x in st.soft],
                    "tokens_seen": st.tokens_seen,
                }
                for i, st in sorted(self.layers.items())
            },
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RoutingStats":
        doc = json.loads(text)
        stats = cls(int(doc["n_e"]), int(doc["n_a"]))
        for key, entry in doc["layers"].items():
            hard = np.asarray(entry["hard"], dtype=np.int64)
            soft = np.asarray(entry["soft"], dtype=np.float64)
            if hard.shape != (stats.n_e,) or soft.shape != (stats.n_e,):
                raise RoutingError(f"layer {key}: count vectors must have length n_e")
            stats.layers[int(key)] = LayerStats(hard, soft, int(entry["tokens_seen"]))
        stats.check()
        return stats

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def merge(self, other: "RoutingStats") -> None:
        for idx, st in sorted(other.layers.items()):
            mine = self.layer(idx)
            mine.hard += st.hard
            mine.soft += st.soft
            mine.tokens_seen += st.tokens_seen


def accumulate_stats(
    decisions: Iterable[tuple],
    n_e: int,
    n_a: int,
    router_kind: str = "softmax",
    selected_only: bool = False,
    stats: Optional[RoutingStats] = None,
) -> RoutingStats:
    """Tally hard and soft expert counts from ``(layer, decision, probs)`` items.

    ``probs`` are the pre-top-k probabilities of all experts; pass ``None`` to
    derive them from ``decision.logits``. With ``selected_only`` the soft
    count only accumulates the selected experts' probabilities.
    """
    stats = stats or RoutingStats(n_e, n_a)
    for layer, dec, probs in decisions:
        if layer < 0:
            raise RoutingError(f"invalid layer index {layer}")
        if len(dec.selected) != n_a:
            raise RoutingError(f"decision selects {len(dec.selected)} experts, expected {n_a}")
        p = pre_topk_probs(dec.logits, router_kind) if probs is None else np.asarray(probs, dtype=np.float64)
        if p.shape != (n_e,):
            raise RoutingError(f"expected {n_e} probabilities, got shape {p.shape}")
        st = stats.layer(layer)
        sel = np.asarray(dec.selected)
        st.hard[sel] += 1
        if selected_only:
            st.soft[sel] += p[sel]
        else:
            st.soft += p
        st.tokens_seen += 1
    return stats


BLOCK_TOKENS = 256


def _simulate_block(cfg: RouterConfig, n_tokens: int, log_pop: np.ndarray, seed: int, block: int):
    # one counter-based stream per token block, so results do not depend on
    # how blocks are spread over workers
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, block]))
    gumbel = rng.gumbel(size=(n_tokens, cfg.n_e))
    stats = RoutingStats(cfg.n_e, cfg.n_a)
    touched = np.zeros(cfg.n_e, dtype=bool)
    items = []
    for row in log_pop + gumbel:
        dec = route(row, cfg)
        touched[list(dec.selected)] = True
        items.append((0, dec, None))
    accumulate_stats(items, cfg.n_e, cfg.n_a, cfg.router_kind, stats=stats)
    return touched, stats


def simulate_batch_routing(
    cfg: RouterConfig,
    T: int,
    popularity: Optional[Sequence[float]] = None,
    seed: int = 0,
    workers: int = 1,
):
    """Route T synthetic tokens and return ``(distinct_count, RoutingStats)``.

    Token logits are ``log(popularity) + Gumbel noise``; without group limits,
    top-n_a of those logits samples n_a experts without replacement in
    proportion to ``popularity`` (uniform when omitted).
    """
    if T < 0:
        raise RoutingError("T must be non-negative")
    p = _check_popularity(popularity, cfg.n_e)
    with np.errstate(divide="ignore"):
        log_pop = np.zeros(cfg.n_e) if p is None else np.log(p)
    # zero-popularity experts get a very negative but finite logit
    log_pop = np.where(np.isfinite(log_pop), log_pop, -1e9)
    blocks = [(b, min(BLOCK_TOKENS, T - b * BLOCK_TOKENS)) for b in range(math.ceil(T / BLOCK_TOKENS))]
    run = lambda blk: _simulate_block(cfg, blk[1], log_pop, seed, blk[0])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(blk) for blk in blocks]
    touched = np.zeros(cfg.n_e, dtype=bool)
    stats = RoutingStats(cfg.n_e, cfg.n_a)
    for t, st in results:
        touched |= t
        stats.merge(st)
    return int(touched.sum()), stats
