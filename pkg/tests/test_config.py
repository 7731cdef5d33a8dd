"""Run-configuration parsing and validation."""

import pytest

from advsynth import config, mpc


def write_toml(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return str(path)


def test_defaults_are_valid():
    cfg = config.RunConfig()
    assert cfg.mode == "analytic"
    assert cfg.latent_len == 2 + 4 * cfg.n_obs
    assert cfg.steps >= 1 and cfg.kappa >= 0


def test_load_overrides_and_tuple_casting(tmp_path):
    path = write_toml(tmp_path, "\n".join([
        'n_train = 12',
        'kappa = 0.0',
        'q_diag = [1.0, 1.0, 0.2, 0.2]',
        'mode = "vae"',
        'latent_dim = 6',
    ]))
    cfg = config.load_config(path)
    assert cfg.n_train == 12
    assert cfg.kappa == 0.0
    assert cfg.q_diag == (1.0, 1.0, 0.2, 0.2)
    assert cfg.latent_len == 6


def test_unknown_keys_are_listed(tmp_path):
    path = write_toml(tmp_path, "n_trian = 5\nkapa = 1\n")
    with pytest.raises(config.ConfigError, match="kapa, n_trian"):
        config.load_config(path)


def test_parse_error_names_the_file(tmp_path):
    path = write_toml(tmp_path, "n_train = = 5\n")
    with pytest.raises(config.ConfigError, match="cannot parse"):
        config.load_config(path)


@pytest.mark.parametrize("kwargs,needle", [
    (dict(mode="magic"), "mode"),
    (dict(dynamics="hovercraft"), "dynamics"),
    (dict(relabel="nearest"), "relabel"),
    (dict(n_test=0), "n_test"),
    (dict(image_size=-4), "image_size"),
    (dict(task_lr=0.0), "task_lr"),
    (dict(kappa=-1.0), "kappa"),
    (dict(mode="vae", relabel="oracle"), "oracle"),
])
def test_validation_errors(kwargs, needle):
    with pytest.raises(config.ConfigError, match=needle):
        config.RunConfig(**kwargs)


def test_mpc_config_mapping():
    cfg = config.RunConfig(horizon=7, dt=2.0, q_diag=(2.0, 2.0, 0.5, 0.5))
    mc = cfg.mpc_config()
    assert isinstance(mc, mpc.MpcConfig)
    assert (mc.horizon, mc.dt) == (7, 2.0)
    assert mc.q_diag == (2.0, 2.0, 0.5, 0.5)
    assert mc.mode == cfg.dynamics
