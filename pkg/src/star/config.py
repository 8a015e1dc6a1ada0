"""Run configuration: every knob of the model, training loop, and ablations.

Configs are plain dataclasses. They round-trip through a flat ``key=value``
text format (one pair per line, ``#`` comments allowed) and through dicts for
checkpoint manifests. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

ABLATION_VARIANTS = ("S1", "S2", "S3", "S4", "S5", "S6")
REINFORCE_TARGETS = ("actions", "prediction")


@dataclass
class RunConfig:
    # input geometry
    window_len: int = 20          # time steps per window
    n_channels: int = 23          # sensor channels (modalities)
    n_classes: int = 12

    # model structure
    n_agents: int = 3
    episode_len: int = 40         # attend-observe-decide steps per episode
    mc_copies: int = 5            # stochastic episode duplicates averaged per window
    enc_glimpse_width: int = 128
    enc_loc_width: int = 128
    enc_out_width: int = 220
    conv_filters: int = 40
    core_width: int = 220
    n_scales: int = 3             # foveation pyramid depth
    scale_factor: int = 2         # patch growth per pyramid level

    # selection policy
    variance: float = 0.22        # Gaussian policy variance (sigma^2)
    time_variance: float = -1.0   # separate variance for the time policy; <0 means "use `variance`"

    # ablation flags (S6 = everything on)
    use_encoder: bool = True        # glimpse+location encoding stage; off feeds raw glimpses onward
    use_conv_merge: bool = True     # row-wise conv over stacked observations; off flattens them
    use_time_attention: bool = True # learned time policy; off sweeps time linearly over the episode
    per_agent_encoders: bool = False
    variant: str = "S6"

    # training
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 26
    keep_best: bool = True        # restore the best-train-reward epoch's parameters
    grad_clip: float = 10.0       # per-group norm clip; <=0 disables
    reinforce_weight: float = 1.0
    reinforce_target: str = "actions"  # or "prediction": reward-weight per-step class log-likelihoods
    use_baseline: bool = False    # EMA reward baseline for variance reduction
    baseline_momentum: float = 0.9
    workers: int = 1              # thread workers over computation chunks
    fuse_windows: int = 8         # windows vectorized per computation chunk
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        counts = {
            "window_len": self.window_len, "n_channels": self.n_channels,
            "n_classes": self.n_classes, "n_agents": self.n_agents,
            "episode_len": self.episode_len, "mc_copies": self.mc_copies,
            "enc_glimpse_width": self.enc_glimpse_width,
            "enc_loc_width": self.enc_loc_width,
            "enc_out_width": self.enc_out_width,
            "conv_filters": self.conv_filters, "core_width": self.core_width,
            "n_scales": self.n_scales, "scale_factor": self.scale_factor,
            "batch_size": self.batch_size, "workers": self.workers,
            "fuse_windows": self.fuse_windows,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.variance < 0:
            raise ConfigError(f"variance must be >= 0, got {self.variance}")
        if self.enc_glimpse_width != self.enc_loc_width:
            # the two encoding branches are summed, so their widths must agree
            raise ConfigError(
                "enc_glimpse_width and enc_loc_width must match "
                f"({self.enc_glimpse_width} != {self.enc_loc_width})")
        if self.variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {ABLATION_VARIANTS}")
        if self.reinforce_target not in REINFORCE_TARGETS:
            raise ConfigError(
                f"unknown reinforce_target {self.reinforce_target!r}; expected one of {REINFORCE_TARGETS}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    @property
    def time_policy_variance(self) -> float:
        return self.variance if self.time_variance < 0 else self.time_variance

    @property
    def observation_width(self) -> int:
        """Width of one agent's per-step observation vector."""
        if self.use_encoder:
            return self.enc_out_width
        from .glimpse import glimpse_length
        return glimpse_length(self)

    @property
    def core_input_width(self) -> int:
        """Width of the vector fed to the recurrent core each step."""
        if self.use_conv_merge:
            return self.n_agents * self.conv_filters
        return self.n_agents * self.observation_width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, text: str, target_type):
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key=value`` lines into a RunConfig, starting from `base`."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {
        name: (bool if "bool" in str(t) else float if "float" in str(t) else
               str if "str" in str(t) else int)
        for name, t in fields.items()
    }
    values = (base or RunConfig()).to_dict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value, types[key])
    return RunConfig.from_dict(values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def save_config(cfg: RunConfig, path):
    lines = [f"{k}={v}" for k, v in cfg.to_dict().items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
