"""Small deterministic GLU / MoE executor for checking routing semantics.

Hidden states are column vectors of length ``d`` or ``d x L`` blocks. A GLU
computes ``W_d (act(W_u h) * (W_g h))``; an MoE layer adds the shared expert
(weight 1) to the gate-weighted sum of the routed experts.

Weight dump layout (little-endian)::

    magic  b"TMOE"          4 bytes
    header 12 x uint32      version, d, d_e, d_s (0 = no shared), n_e, n_a,
                            activation (0 silu, 1 identity),
                            router_kind (0 softmax, 1 sigmoid),
                            normalize_selected, n_group (0 = none), topk_group,
                            crc32 of the body
    body   float64 row-major: W_r (n_e x d), then per expert W_u, W_g
           (d_e x d) and W_d (d x d_e), then the shared expert if present
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import GroupConfig
from .routing import RouterConfig, route, route_restricted

ACTIVATIONS = ("silu", "identity")
MAGIC = b"TMOE"
DUMP_VERSION = 1


class ToyError(ValueError):
    pass


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        return x / (1.0 + np.exp(-x))
    return x


@dataclass(frozen=True)
class GLUWeights:
    W_u: np.ndarray
    W_g: np.ndarray
    W_d: np.ndarray
    activation: str = "silu"

    def __post_init__(self):
        d_i, d = self.W_u.shape
        if self.W_g.shape != (d_i, d) or self.W_d.shape != (d, d_i):
            raise ToyError(
                f"inconsistent GLU shapes {self.W_u.shape}, {self.W_g.shape}, {self.W_d.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ToyError(f"unknown activation {self.activation!r}")

    @property
    def d(self) -> int:
        return self.W_u.shape[1]

    @property
    def d_i(self) -> int:
        return self.W_u.shape[0]


def random_glu(rng: np.random.Generator, d: int, d_i: int, activation: str = "silu",
               dtype=np.float64, scale: float = 0.1) -> GLUWeights:
    u = lambda *shape: rng.uniform(-scale, scale, size=shape).astype(dtype)
    return GLUWeights(u(d_i, d), u(d_i, d), u(d, d_i), activation)


def glu_forward(w: GLUWeights, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[0] != w.d:
        raise ToyError(f"hidden size {h.shape[0]} does not match GLU d={w.d}")
    return w.W_d @ (_act(w.W_u @ h, w.activation) * (w.W_g @ h))


def split_glu_into_experts(w: GLUWeights, parts: int) -> list:
    """Partition the intermediate dimension into ``parts`` equal experts."""
    if parts < 1 or w.d_i % parts:
        raise ToyError(f"d_i={w.d_i} is not divisible into {parts} parts")
    size = w.d_i // parts
    return [
        GLUWeights(w.W_u[k * size:(k + 1) * size].copy(),
                   w.W_g[k * size:(k + 1) * size].copy(),
                   w.W_d[:, k * size:(k + 1) * size].copy(),
                   w.activation)
        for k in range(parts)
    ]


@dataclass(frozen=True)
class ToyMoELayer:
    experts: tuple
    router: np.ndarray  # W_r, n_e x d
    router_cfg: RouterConfig
    shared: Optional[GLUWeights] = None

    def __post_init__(self):
        if not self.experts:
            raise ToyError("need at least one expert")
        shape = self.experts[0].W_u.shape
        if any(e.W_u.shape != shape for e in self.experts):
            raise ToyError("all experts must share one shape")
        if self.router.shape != (len(self.experts), shape[1]):
            raise ToyError(f"router must be n_e x d = {(len(self.experts), shape[1])}")
        if self.router_cfg.n_e != len(self.experts):
            raise ToyError("router config n_e does not match expert count")
        if self.shared is not None and self.shared.d != shape[1]:
            raise ToyError("shared expert hidden size mismatch")

    @property
    def n_e(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.router.shape[1]


def random_layer(seed: int, d: int, d_e: int, n_e: int, n_a: int, d_s: int = 0,
                 router_kind: str = "softmax", normalize_selected: bool = True,
                 group_config: Optional[GroupConfig] = None,
                 activation: str = "silu") -> ToyMoELayer:
    rng = np.random.default_rng(seed)
    experts = tuple(random_glu(rng, d, d_e, activation) for _ in range(n_e))
    shared = random_glu(rng, d, d_s, activation) if d_s else None
    router = rng.uniform(-0.1, 0.1, size=(n_e, d))
    cfg = RouterConfig(router_kind, normalize_selected, n_e, n_a, group_config)
    return ToyMoELayer(experts, router, cfg, shared)


def _token_forward(layer, h, cfg, mask, weight_override):
    logits = layer.router @ h
    dec = route(logits, cfg) if mask is None else route_restricted(logits, cfg, mask)
    weights = dec.weights if weight_override is None else weight_override
    if len(weights) != len(dec.selected):
        raise ToyError(f"weight_override has {len(weights)} entries, expected {len(dec.selected)}")
    out = glu_forward(layer.shared, h) if layer.shared is not None else np.zeros_like(h)
    for idx, r in zip(dec.selected, weights):
        out = out + r * glu_forward(layer.experts[idx], h)
    return out, dec


def moe_forward(
    layer: ToyMoELayer,
    h: np.ndarray,
    n_a_override: Optional[int] = None,
    mask: Optional[Sequence[int]] = None,
    weight_override: Optional[Sequence[float]] = None,
    return_decisions: bool = False,
):
    """Evaluate the MoE layer on one token (``d``) or a block (``d x L``)."""
    h = np.asarray(h)
    if h.shape[0] != layer.d:
        raise ToyError(f"hidden size {h.shape[0]} does not match layer d={layer.d}")
    cfg = layer.router_cfg if n_a_override is None else layer.router_cfg.with_n_a(n_a_override)
    if mask is not None and len(mask) < cfg.n_a:
        raise ToyError(f"mask keeps {len(mask)} experts, fewer than n_a={cfg.n_a}")
    if h.ndim == 1:
        out, dec = _token_forward(layer, h, cfg, mask, weight_override)
        return (out, [dec]) if return_decisions else out
    cols, decs = [], []
    for j in range(h.shape[1]):
        o, dec = _token_forward(layer, h[:, j], cfg, mask, weight_override)
        cols.append(o)
        decs.append(dec)
    out = np.stack(cols, axis=1)
    return (out, decs) if return_decisions else out


# ---------------------------------------------------------------------------
# weight dumps


def _layer_matrices(layer: ToyMoELayer):
    yield layer.router
    for e in layer.experts:
        yield e.W_u
        yield e.W_g
        yield e.W_d
    if layer.shared is not None:
        yield layer.shared.W_u
        yield layer.shared.W_g
        yield layer.shared.W_d


def dump_layer(layer: ToyMoELayer, path) -> None:
    body = b"".join(np.ascontiguousarray(m, dtype="<f8").tobytes() for m in _layer_matrices(layer))
    cfg = layer.router_cfg
    g = cfg.group_config
    header = struct.pack(
        "<12I", DUMP_VERSION, layer.d, layer.experts[0].d_i,
        layer.shared.d_i if layer.shared is not None else 0, layer.n_e, cfg.n_a,
        ACTIVATIONS.index(layer.experts[0].activation),
        0 if cfg.router_kind == "softmax" else 1, int(cfg.normalize_selected),
        g.n_group if g else 0, g.topk_group if g else 0, zlib.crc32(body),
    )
    Path(path).write_bytes(MAGIC + header + body)


def load_layer(path) -> ToyMoELayer:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ToyError("not a toy MoE weight dump (bad magic)")
    (version, d, d_e, d_s, n_e, n_a, act, kind, norm, n_group, topk_group,
     crc) = struct.unpack_from("<12I", raw, 4)
    if version != DUMP_VERSION:
        raise ToyError(f"unsupported dump version {version}")
    body = raw[4 + 48:]
    expected = 8 * (n_e * d + n_e * 3 * d_e * d + 3 * d_s * d)
    if len(body) != expected:
        raise ToyError(f"dump body is {len(body)} bytes, expected {expected}")
    if zlib.crc32(body) != crc:
        raise ToyError("dump checksum mismatch")
    flat = np.frombuffer(body, dtype="<f8")
    pos = 0

    def take(rows, cols):
        nonlocal pos
        m = flat[pos:pos + rows * cols].reshape(rows, cols).copy()
        pos += rows * cols
        return m

    activation = ACTIVATIONS[act]
    router = take(n_e, d)
    experts = tuple(GLUWeights(take(d_e, d), take(d_e, d), take(d, d_e), activation) for _ in range(n_e))
    shared = GLUWeights(take(d_s, d), take(d_s, d), take(d, d_s), activation) if d_s else None
    cfg = RouterConfig("softmax" if kind == 0 else "sigmoid", bool(norm), n_e, n_a,
                       GroupConfig(n_group, topk_group) if n_group else None)
    return ToyMoELayer(experts, router, cfg, shared)
