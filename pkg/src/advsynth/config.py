"""Run configuration: one flat TOML document drives every stage.

All pipeline stages (generation, training, synthesis, evaluation) read
the same frozen file, so a benchmark is reproducible from the config
plus a seed and nothing else.  Unknown keys are rejected by name to
catch typos before a long run burns its budget on the wrong knob.
"""

import dataclasses

try:
    import tomllib
except ModuleNotFoundError:            # Python 3.10
    import tomli as tomllib

from . import mpc, scene


class ConfigError(Exception):
    pass


MODES = (scene.ANALYTIC, scene.VAE)
RELABELS = ("reuse", "oracle")


@dataclasses.dataclass
class RunConfig:
    # scene and rendering
    mode: str = scene.ANALYTIC
    image_size: int = 64
    n_obs: int = 4
    latent_dim: int = 20            # learned-code length (vae mode only)

    # waypoints and tracking problem
    past_len: int = 10
    horizon: int = 20
    dt: float = 1.0
    dynamics: str = mpc.UNICYCLE
    q_diag: tuple = (1.0, 1.0, 0.1, 0.1)
    r_diag: tuple = (0.1, 0.1)
    u_min: tuple = None             # None means the per-mode defaults
    u_max: tuple = None
    x_min: tuple = None
    x_max: tuple = None

    # adversary
    kappa: float = 30.0
    steps: int = 10
    adv_step_size: float = 1e-2
    adv_grad_clip: float = 10.0
    adv_per_record: int = 1
    relabel: str = "reuse"

    # dataset sizes: train/test/ood splits plus the per-scheme addition
    n_train: int = 1000
    n_test: int = 300
    n_ood: int = 300
    n_extra: int = 1000

    # training budgets
    task_epochs: int = 60
    task_lr: float = 1e-3
    task_pool: int = 4
    task_channels: tuple = (4, 8, 16)
    vae_epochs: int = 200
    vae_lr: float = 1e-3

    seed: int = 0
    outdir: str = "out"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode must be one of %s, got %r"
                              % ("/".join(MODES), self.mode))
        if self.dynamics not in (mpc.UNICYCLE, mpc.DOUBLE_INTEGRATOR):
            raise ConfigError("unknown dynamics %r" % (self.dynamics,))
        if self.relabel not in RELABELS:
            raise ConfigError("relabel must be one of %s, got %r"
                              % ("/".join(RELABELS), self.relabel))
        if self.relabel == "oracle" and self.mode == scene.VAE:
            raise ConfigError("oracle relabeling needs analytic latents; "
                              "it cannot be combined with vae mode")
        for name in ("image_size", "n_obs", "latent_dim", "past_len",
                     "horizon", "adv_per_record", "n_train", "n_test",
                     "n_ood", "n_extra", "task_epochs", "task_pool",
                     "vae_epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError("%s must be a positive integer, got %r"
                                  % (name, value))
        for name in ("dt", "task_lr", "vae_lr", "adv_step_size",
                     "adv_grad_clip"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError("%s must be positive, got %r"
                                  % (name, getattr(self, name)))
        if not float(self.kappa) >= 0:
            raise ConfigError("kappa must be nonnegative, got %r"
                              % (self.kappa,))
        if self.steps < 1:
            raise ConfigError("steps must be at least 1, got %r"
                              % (self.steps,))
        for name in ("q_diag", "r_diag", "u_min", "u_max", "x_min",
                     "x_max", "task_channels"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))

    @property
    def latent_len(self):
        """Length of the stored latent vector for this renderer mode."""
        if self.mode == scene.ANALYTIC:
            return 2 + 4 * self.n_obs
        return self.latent_dim

    def mpc_config(self):
        return mpc.MpcConfig(mode=self.dynamics, horizon=self.horizon,
                             dt=self.dt, q_diag=self.q_diag,
                             r_diag=self.r_diag, u_min=self.u_min,
                             u_max=self.u_max, x_min=self.x_min,
                             x_max=self.x_max)


def load_config(path):
    """Parse a TOML file into a RunConfig; unknown keys are an error."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError("cannot parse %s: %s" % (path, err)) from err
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError("unknown config keys in %s: %s"
                          % (path, ", ".join(unknown)))
    return RunConfig(**raw)
