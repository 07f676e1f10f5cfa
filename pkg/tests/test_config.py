import pytest

from finemoe.config import (HARDWARE_PRESETS, MODEL_PRESETS, ConfigError, GroupConfig, ModelConfig,
                            activated_intermediate, compute_reduction_upper_bound,
                            hardware_from_text, hardware_to_text, load_hardware_preset,
                            load_model_preset, model_from_text, model_to_text)

V2 = MODEL_PRESETS["v2-lite"]
V3 = MODEL_PRESETS["v3"]


def test_presets_match_table_values():
    assert (V2.n_e, V2.n_a, V2.d, V2.d_e, V2.d_s, V2.router_kind) == (64, 6, 2048, 1408, 10944, "softmax")
    assert (V3.n_e, V3.n_a, V3.d, V3.d_e, V3.d_s, V3.router_kind) == (256, 8, 7168, 2048, 18432, "sigmoid")
    assert V3.group_config == GroupConfig(8, 2)
    assert V2.group_config is None
    assert V2.n_moe_layers == 26
    assert V3.n_moe_layers == 58


def test_activated_intermediate():
    assert activated_intermediate(V2) == 8448
    assert activated_intermediate(V3) == 16384
    assert activated_intermediate(V2, 1) == 1408


def test_reduction_bound_without_shared_expert_is_one():
    assert compute_reduction_upper_bound(V2.replace(d_s=0)) == 1.0


@pytest.mark.parametrize("changes", [
    {"n_a": 0}, {"n_a": 65}, {"d": 0}, {"router_kind": "relu"},
    {"group_config": GroupConfig(5, 2)}, {"group_config": GroupConfig(8, 9)},
    {"n_layers_dense": 30},
])
def test_invalid_models_rejected(changes):
    with pytest.raises(ConfigError):
        V2.replace(**changes)


def test_model_text_roundtrip():
    for m in MODEL_PRESETS.values():
        assert model_from_text(model_to_text(m)) == m


def test_hardware_text_roundtrip():
    for hw in HARDWARE_PRESETS.values():
        assert hardware_from_text(hardware_to_text(hw)) == hw


def test_model_file_with_zero_active_is_error(tmp_path):
    text = model_to_text(V2).replace("n_a = 6", "n_a = 0")
    assert "n_a = 0" in text
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_model_preset(str(path))


def test_unknown_key_and_missing_kind(tmp_path):
    with pytest.raises(ConfigError):
        model_from_text(model_to_text(V2) + "colour = blue\n")
    with pytest.raises(ConfigError):
        model_from_text("\n".join(l for l in model_to_text(V2).splitlines() if not l.startswith("kind")))


def test_preset_lookup():
    assert load_model_preset("v3") is V3
    assert load_hardware_preset("h200").peak_flops == 989e12
    with pytest.raises(ConfigError):
        load_model_preset("no-such-model")


def test_a800_profile():
    hw = HARDWARE_PRESETS["a800"]
    assert (hw.peak_flops, hw.mem_bw, hw.intra_node_bw, hw.inter_node_bw) == (312e12, 1.935e12, 160e9, 50e9)


def test_frozen():
    with pytest.raises(Exception):
        V2.n_a = 3
    assert isinstance(V2, ModelConfig)
