"""Model architectures, hardware profiles and the flat config-file format.

Config files are plain ``key = value`` lines. ``#`` starts a comment, blank
lines are ignored, and every file must carry a ``kind`` key (``model`` or
``hardware``). Unknown keys are rejected. Example::

    kind = model
    name = tiny
    d = 64
    d_e = 16
    d_s = 32
    n_e = 8
    n_a = 2
    n_layers_total = 4
    n_layers_dense = 1
    router_kind = softmax
    normalize_selected = true
    n_group = 4          # optional, together with topk_group
    topk_group = 2
    bytes_per_element = 2
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

ROUTER_KINDS = ("softmax", "sigmoid")


class ConfigError(ValueError):
    """Invalid model/hardware configuration or config file."""


@dataclass(frozen=True)
class GroupConfig:
    n_group: int
    topk_group: int


@dataclass(frozen=True)
class ModelConfig:
    name: str
    d: int
    d_e: int
    d_s: int
    n_e: int
    n_a: int
    n_layers_total: int
    n_layers_dense: int
    router_kind: str = "softmax"
    normalize_selected: bool = True
    group_config: Optional[GroupConfig] = None
    bytes_per_element: int = 2

    def __post_init__(self):
        validate_model(self)

    @property
    def d_a(self) -> int:
        return self.d_e * self.n_a

    @property
    def n_moe_layers(self) -> int:
        return self.n_layers_total - self.n_layers_dense

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    peak_flops: float
    mem_bw: float
    intra_node_bw: float
    inter_node_bw: float
    n_devices_per_node: int = 8

    def __post_init__(self):
        validate_hardware(self)

    def replace(self, **changes) -> "HardwareProfile":
        return dataclasses.replace(self, **changes)


def validate_model(cfg: ModelConfig) -> None:
    for field in ("d", "d_e", "n_e", "n_a", "n_layers_total", "bytes_per_element"):
        if getattr(cfg, field) <= 0:
            raise ConfigError(f"{field} must be positive, got {getattr(cfg, field)}")
    # d_s = 0 is allowed for what-if studies without a shared expert
    if cfg.d_s < 0:
        raise ConfigError(f"d_s must be non-negative, got {cfg.d_s}")
    if not 1 <= cfg.n_a <= cfg.n_e:
        raise ConfigError(f"n_a must lie in [1, n_e={cfg.n_e}], got {cfg.n_a}")
    if not 0 <= cfg.n_layers_dense < cfg.n_layers_total:
        raise ConfigError(
            f"n_layers_dense must lie in [0, n_layers_total), got {cfg.n_layers_dense}"
        )
    if cfg.router_kind not in ROUTER_KINDS:
        raise ConfigError(f"router_kind must be one of {ROUTER_KINDS}, got {cfg.router_kind!r}")
    g = cfg.group_config
    if g is not None:
        if g.n_group <= 0 or g.topk_group <= 0:
            raise ConfigError("n_group and topk_group must be positive")
        if cfg.n_e % g.n_group:
            raise ConfigError(f"n_e={cfg.n_e} not divisible by n_group={g.n_group}")
        if g.topk_group > g.n_group:
            raise ConfigError(f"topk_group={g.topk_group} exceeds n_group={g.n_group}")


def validate_hardware(hw: HardwareProfile) -> None:
    for field in ("peak_flops", "mem_bw", "intra_node_bw", "inter_node_bw", "n_devices_per_node"):
        if not getattr(hw, field) > 0:
            raise ConfigError(f"{field} must be positive, got {getattr(hw, field)}")


MODEL_PRESETS = {
    "v2-lite": ModelConfig(
        name="v2-lite", d=2048, d_e=1408, d_s=10944, n_e=64, n_a=6,
        n_layers_total=27, n_layers_dense=1, router_kind="softmax",
        normalize_selected=True,
    ),
    "v3": ModelConfig(
        name="v3", d=7168, d_e=2048, d_s=18432, n_e=256, n_a=8,
        n_layers_total=61, n_layers_dense=3, router_kind="sigmoid",
        normalize_selected=True, group_config=GroupConfig(n_group=8, topk_group=2),
    ),
}

# Link rates are the commonly quoted NVLink (~160 GB/s) and InfiniBand
# (~50 GB/s) figures. Compute/memory rates are vendor-nominal; edit freely.
HARDWARE_PRESETS = {
    "a800": HardwareProfile(
        name="a800", peak_flops=312e12, mem_bw=1.935e12,
        intra_node_bw=160e9, inter_node_bw=50e9, n_devices_per_node=2,
    ),
    "h200": HardwareProfile(
        name="h200", peak_flops=989e12, mem_bw=4.8e12,
        intra_node_bw=160e9, inter_node_bw=50e9, n_devices_per_node=8,
    ),
}

# d_a / (d_s + d_a) as printed in the published model table, for comparison.
PRINTED_REDUCTION_BOUND = {"v2-lite": 0.456, "v3": 0.471}


def activated_intermediate(config: ModelConfig, n_a_override: Optional[int] = None) -> int:
    n_a = config.n_a if n_a_override is None else n_a_override
    if not 1 <= n_a <= config.n_e:
        raise ConfigError(f"n_a override must lie in [1, {config.n_e}], got {n_a}")
    return config.d_e * n_a


def compute_reduction_upper_bound(config: ModelConfig) -> float:
    """Fraction of FFN compute spent in routed experts, d_a / (d_s + d_a)."""
    d_a = activated_intermediate(config)
    return d_a / (config.d_s + d_a)


def reduction_bound_discrepancy(config: ModelConfig, tol: float = 0.0005) -> Optional[dict]:
    """Compare the computed bound with the printed table value, if one exists.

    Returns ``None`` for models without a printed value, otherwise a dict with
    ``computed``, ``printed`` and ``flagged`` (True when they disagree beyond
    the printed rounding).
    """
    printed = PRINTED_REDUCTION_BOUND.get(config.name)
    if printed is None:
        return None
    computed = compute_reduction_upper_bound(config)
    return {
        "computed": computed,
        "printed": printed,
        "flagged": abs(round(computed, 3) - printed) > tol,
    }


# ---------------------------------------------------------------------------
# flat key = value files

_MODEL_KEYS = {
    "name": str, "d": int, "d_e": int, "d_s": int, "n_e": int, "n_a": int,
    "n_layers_total": int, "n_layers_dense": int, "router_kind": str,
    "normalize_selected": bool, "n_group": int, "topk_group": int,
    "bytes_per_element": int,
}
_HW_KEYS = {
    "name": str, "peak_flops": float, "mem_bw": float, "intra_node_bw": float,
    "inter_node_bw": float, "n_devices_per_node": int,
}


def _parse_value(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_kv_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _fields_from(raw: dict, schema: dict, kind: str) -> dict:
    if raw.pop("kind", None) != kind:
        raise ConfigError(f"expected 'kind = {kind}'")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    return {k: _parse_value(k, v, schema[k]) for k, v in raw.items()}


def model_from_text(text: str) -> ModelConfig:
    fields = _fields_from(parse_kv_text(text), _MODEL_KEYS, "model")
    n_group, topk_group = fields.pop("n_group", None), fields.pop("topk_group", None)
    if (n_group is None) != (topk_group is None):
        raise ConfigError("n_group and topk_group must be given together")
    if n_group is not None:
        fields["group_config"] = GroupConfig(n_group, topk_group)
    try:
        return ModelConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"incomplete model config: {exc}") from None


def model_to_text(cfg: ModelConfig) -> str:
    lines = ["kind = model"]
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "group_config":
            if value is not None:
                lines += [f"n_group = {value.n_group}", f"topk_group = {value.topk_group}"]
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def hardware_from_text(text: str) -> HardwareProfile:
    fields = _fields_from(parse_kv_text(text), _HW_KEYS, "hardware")
    try:
        return HardwareProfile(**fields)
    except TypeError as exc:
        raise ConfigError(f"incomplete hardware config: {exc}") from None


def hardware_to_text(hw: HardwareProfile) -> str:
    lines = ["kind = hardware"]
    lines += [f"{f.name} = {getattr(hw, f.name)!r}" if isinstance(getattr(hw, f.name), float)
              else f"{f.name} = {getattr(hw, f.name)}" for f in dataclasses.fields(hw)]
    return "\n".join(lines) + "\n"


def load_model_preset(name: Union[str, Path]) -> ModelConfig:
    """Return a named preset (``v2-lite``, ``v3``) or parse a config file."""
    if str(name) in MODEL_PRESETS:
        return MODEL_PRESETS[str(name)]
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"unknown model preset {str(name)!r} (known: {', '.join(MODEL_PRESETS)})")
    return model_from_text(path.read_text())


def load_hardware_preset(name: Union[str, Path]) -> HardwareProfile:
    if str(name) in HARDWARE_PRESETS:
        return HARDWARE_PRESETS[str(name)]
    path = Path(name)
    if not path.is_file():
        raise ConfigError(
            f"unknown hardware preset {str(name)!r} (known: {', '.join(HARDWARE_PRESETS)})"
        )
    return hardware_from_text(path.read_text())
