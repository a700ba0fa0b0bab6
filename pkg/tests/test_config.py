import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikedistill.config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_config


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert (cfg.mode, cfg.T, cfg.b, cfg.alpha, cfg.beta) == ("sastc", 3, 64, 1.0, 1.0)
    assert (cfg.lif.lam, cfg.lif.v_th, cfg.lif.gamma) == (0.5, 1.0, 0.3)


def test_overrides_top_level_and_dotted():
    cfg = apply_overrides(RunConfig(), ["T=5", "optim.lr=0.1", "feature_pairs=0:1, 1:2", "qk.per_layer=true"])
    assert cfg.T == 5 and cfg.optim.lr == 0.1 and cfg.feature_pairs == [(0, 1), (1, 2)] and cfg.qk.per_layer
    assert RunConfig().T == 3


@pytest.mark.parametrize("item,key", [("Tt=3", "Tt"), ("optim.lrr=1", "optim.lrr"), ("nope.x=1", "nope.x"),
                                      ("T=abc", "T"), ("optim=1", "optim")])
def test_unknown_or_bad_keys_name_the_key(item, key):
    with pytest.raises(ConfigError) as exc:
        apply_overrides(RunConfig(), [item])
    assert exc.value.key == key and key in str(exc.value)


@pytest.mark.parametrize("item,key", [("T=0", "T"), ("b=1", "b"), ("epochs=0", "epochs"), ("beta=-1", "beta"),
                                      ("mode=feature_kd", "feature_pairs"), ("mode=magic", "mode")])
def test_invariants_rejected(item, key):
    with pytest.raises(ConfigError) as exc:
        apply_overrides(RunConfig(), [item]).validate()
    assert exc.value.key == key


def test_bad_lif_values_are_config_errors():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["lif.lam=1.5"])


def test_file_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["mode=feature_kd", "feature_pairs=1:2", "optim.lr=0.0123", "seeds.init=7"])
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_parse_sections():
    cfg = parse_config("[run]\nmode = kd\nT = 2\n\n[optim]\nkind = adam\n")
    assert cfg.mode == "kd" and cfg.T == 2 and cfg.optim.kind == "adam"
    with pytest.raises(ConfigError):
        parse_config("[bogus]\nx = 1\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 128), st.floats(0, 10, allow_nan=False), st.booleans(),
       st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=4))
def test_roundtrip_property(T, b, beta, dump, pairs):
    cfg = RunConfig(T=T, b=b, beta=beta, dump_diagnostics=dump, stm_pairs=pairs)
    assert parse_config(dump_config(cfg)) == cfg
