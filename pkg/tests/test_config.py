import pytest

from chaos_da.config import ConfigError, ExperimentConfig, config_for_row, dump_config, load_config, parse_config
from chaos_da.envda import NoiseModel
from chaos_da.registry import ROWS, RegistryMiss, registry_lookup

MINIMAL = """\
[experiment]
name = demo
steps_per_obs = 50
mask = 1,1,1

[noise]
kind = gaussian
sigma = 1.0
"""


@pytest.mark.parametrize("noise,T,mask,expected", [
    (NoiseModel("none"), 5, (1, 1, 1), (0.9, 0.9, 0.7, 100)),
    (NoiseModel("gaussian", 3.0), 50, (1, 1, 1), (0.1, 0.9, 0.9, 1000)),
    (NoiseModel("gaussian", 1.0), 50, (1, 0, 1), (0.25, 0.8, 0.95, 1000)),
    (NoiseModel("gaussian", 1.0), 50, (1, 1, 1), (0.9, 0.95, 0.95, 1000)),
    (NoiseModel("lognormal"), 50, (1, 1, 1), (0.8, 0.85, 0.95, 100)),
])
def test_registry_rows(noise, T, mask, expected):
    row = registry_lookup(noise, T, tuple(bool(m) for m in mask))
    assert (row.gamma, row.max_grad_norm, row.value_coef, row.n_assim_per_episode) == expected


def test_registry_has_fifteen_rows_and_misses_error():
    assert len(ROWS) == 15
    with pytest.raises(RegistryMiss):
        registry_lookup(NoiseModel("gaussian", 1.5), 50, (True, True, True))
    with pytest.raises(KeyError):
        registry_lookup(NoiseModel("uniform"), 5, (True, True, True))


def test_parse_fills_registry_values():
    cfg = parse_config(MINIMAL)
    assert cfg.name == "demo"
    assert (cfg.ppo.gamma, cfg.ppo.max_grad_norm, cfg.ppo.value_coef, cfg.ppo.n_assim_per_episode) == (
        0.9, 0.95, 0.95, 1000)


def test_explicit_values_override_registry():
    cfg = parse_config(MINIMAL + "\n[rl]\ngamma = 0.5\n")
    assert cfg.ppo.gamma == 0.5 and cfg.ppo.value_coef == 0.95


def test_registry_miss_without_overrides_is_error():
    text = MINIMAL.replace("sigma = 1.0", "sigma = 1.5")
    with pytest.raises(ConfigError, match=r"\[rl\]"):
        parse_config(text)
    full = text + "\n[rl]\ngamma = 0.5\nmax_grad_norm = 0.5\nvalue_coef = 0.5\nn_assim_per_episode = 10\n"
    assert parse_config(full).noise.sigma == 1.5


def test_dump_round_trip():
    cfg = parse_config(MINIMAL).replace(horizon=5.0, seed=12, histogram_times=(1.0, 2.5))
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_diagnostics_name_every_bad_field_with_line_numbers():
    text = """\
[experiment]
steps_per_obs = 7
mask = 0,0,0
repetitions = -1

[noise]
kind = gaussian
sigma = 1.0

[rl]
gamma = 1.5
max_grad_norm = 0.5
value_coef = 0.5
n_assim_per_episode = 10
"""
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "bad.ini")
    msgs = exc.value.problems
    joined = "\n".join(msgs)
    assert "bad.ini:11: [rl] gamma" in joined
    assert "bad.ini:3: [experiment] mask" in joined
    text2 = text.replace("mask = 0,0,0", "mask = 1,1,1").replace("gamma = 1.5", "gamma = 0.5")
    with pytest.raises(ConfigError) as exc:
        parse_config(text2, "bad.ini")
    joined = "\n".join(exc.value.problems)
    assert "bad.ini:2: [experiment] steps_per_obs" in joined
    assert "bad.ini:4: [experiment] repetitions" in joined


def test_unknown_keys_sections_and_kinds():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(MINIMAL + "\n[enkf]\nensemble = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "\n[plots]\nx = 1\n")
    with pytest.raises(ConfigError, match="kind"):
        parse_config(MINIMAL.replace("kind = gaussian", "kind = cauchy"))
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config(MINIMAL.replace("steps_per_obs = 50", "steps_per_obs = fifty"))
    with pytest.raises(ConfigError):
        parse_config("not an ini file")


def test_horizon_must_be_whole_windows():
    with pytest.raises(ConfigError, match="horizon"):
        parse_config(MINIMAL.replace("mask = 1,1,1", "mask = 1,1,1\nhorizon = 0.07"))


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


def test_bundled_configs_cover_registry():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "experiments"
    files = sorted(root.glob("*.ini"))
    assert len(files) == 15
    names = set()
    for f in files:
        cfg = load_config(f)
        row = registry_lookup(cfg.noise, cfg.steps_per_obs, cfg.mask)
        assert cfg.ppo.gamma == row.gamma and cfg.ppo.n_assim_per_episode == row.n_assim_per_episode
        names.add(cfg.name)
        assert f.read_text() == dump_config(config_for_row(row if row.name == cfg.name else
                                                          next(r for r in ROWS if r.name == cfg.name)))
    assert names == {r.name for r in ROWS}


def test_config_validation_api():
    odd = ExperimentConfig(steps_per_obs=7, horizon=0.7)
    with pytest.raises(ConfigError):
        odd.validate()
    assert odd.validate(strict_enums=False).n_cycles == 100
    assert ExperimentConfig().n_cycles == 1000
    assert ExperimentConfig(repetitions=10).max_divergences == 5
