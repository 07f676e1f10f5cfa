"""Pre-inference expert pruning: retained-expert masks and masked routing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .routing import RouterConfig, RoutingStats, route_restricted

STRATEGIES = ("random", "odd", "even", "first_half", "last_half", "activate_count", "soft_count")


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneMask:
    layers: tuple  # one sorted tuple of retained expert indices per MoE layer
    strategy: str
    keep: int
    n_e: int
    seed: Optional[int] = None
    stats_digest: Optional[str] = None

    def __post_init__(self):
        for i, kept in enumerate(self.layers):
            if len(kept) != self.keep or len(set(kept)) != self.keep:
                raise PruneError(f"layer {i}: expected {self.keep} distinct retained experts")
            if kept and (min(kept) < 0 or max(kept) >= self.n_e):
                raise PruneError(f"layer {i}: retained index out of range")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def to_json(self) -> str:
        doc = {
            "strategy": self.strategy,
            "keep": self.keep,
            "n_e": self.n_e,
            "seed": self.seed,
            "stats_digest": self.stats_digest,
            "layers": {str(i): list(kept) for i, kept in enumerate(self.layers)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PruneMask":
        doc = json.loads(text)
        layers = tuple(tuple(doc["layers"][str(i)]) for i in range(len(doc["layers"])))
        return cls(layers, doc["strategy"], doc["keep"], doc["n_e"], doc.get("seed"),
                   doc.get("stats_digest"))


def _top_by_count(counts: np.ndarray, keep: int) -> tuple:
    order = np.argsort(-counts, kind="stable")[:keep]
    return tuple(sorted(int(i) for i in order))


def build_mask(
    strategy: str,
    keep: int,
    n_e: int,
    n_layers: int,
    seed: Optional[int] = None,
    stats: Optional[RoutingStats] = None,
    n_a: int = 1,
) -> PruneMask:
    if strategy not in STRATEGIES:
        raise PruneError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if not 1 <= keep <= n_e:
        raise PruneError(f"keep={keep} outside [1, n_e={n_e}]")
    if keep < n_a:
        raise PruneError(f"keep={keep} is below n_a={n_a}; routing would be infeasible")
    digest = None

    if strategy in ("odd", "even"):
        pool = list(range(1 if strategy == "odd" else 0, n_e, 2))
        if keep > len(pool):
            raise PruneError(f"{strategy} strategy has only {len(pool)} candidates, keep={keep}")
        per_layer = [tuple(pool[:keep])] * n_layers
    elif strategy == "first_half":
        per_layer = [tuple(range(keep))] * n_layers
    elif strategy == "last_half":
        per_layer = [tuple(range(n_e - keep, n_e))] * n_layers
    elif strategy == "random":
        if seed is None:
            raise PruneError("random strategy requires a seed")
        per_layer = []
        for layer in range(n_layers):
            rng = np.random.default_rng([seed, layer])
            per_layer.append(tuple(sorted(int(i) for i in rng.choice(n_e, keep, replace=False))))
    else:
        if stats is None:
            raise PruneError(f"{strategy} strategy requires routing stats")
        if stats.n_e != n_e:
            raise PruneError(f"stats cover n_e={stats.n_e}, mask wants n_e={n_e}")
        missing = [i for i in range(n_layers) if i not in stats.layers]
        if missing:
            raise PruneError(f"stats missing layers {missing[:5]}")
        attr = "hard" if strategy == "activate_count" else "soft"
        per_layer = [_top_by_count(getattr(stats.layers[i], attr).astype(np.float64), keep)
                     for i in range(n_layers)]
        digest = stats.digest()

    return PruneMask(tuple(per_layer), strategy, keep, n_e,
                     seed if strategy == "random" else None, digest)


def full_mask(n_e: int, n_layers: int) -> PruneMask:
    return PruneMask(tuple([tuple(range(n_e))] * n_layers), "first_half", n_e, n_e)


def route_masked(logits: Sequence[float], cfg: RouterConfig, mask_layer: Sequence[int]):
    if len(mask_layer) < cfg.n_a:
        raise PruneError(f"mask keeps {len(mask_layer)} experts, fewer than n_a={cfg.n_a}")
    return route_restricted(logits, cfg, mask_layer)


def mask_memory_savings(mask: PruneMask, config: ModelConfig) -> int:
    """Bytes of routed-expert weights no longer resident."""
    return (mask.n_e - mask.keep) * 3 * config.d_e * config.d * config.bytes_per_element * config.n_moe_layers
