"""Run-level configuration with declared hyperparameter ranges.

A RunConfig carries every tunable the CLI exposes, with defaults. Values can
come from a flat key=value config file, with explicitly passed CLI flags
taking precedence; unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError

ALLOWED_LR = (1e-3, 4e-4, 1e-4, 4e-5, 1e-5)
ALLOWED_BATCH = (32, 64, 128)


@dataclass(frozen=True)
class RunConfig:
    """All pipeline hyperparameters with their defaults.

    ``cls_weight`` is the auxiliary-classifier weight (the CLI's --beta) and
    ``gp_weight`` the gradient-penalty weight (the CLI's --lambda).
    ``latent_width`` zero-pads representations to a common width for the
    later stages; None keeps the encoder's native width.
    """

    lr: float = 1e-5
    batch: int = 64
    epochs: int = 20
    diffusion_epochs: int = 200
    steps: int = 100
    gan_steps: int = 300
    cls_weight: float = 175.0
    gp_weight: float = 10.0
    n_critic: int = 5
    dim: int = 64
    latent_width: int | None = None
    max_len: int = 256
    val_fraction: float = 0.2
    p_uncond: float = 0.1
    guidance: float = 0.0
    kmer: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.lr not in ALLOWED_LR:
            raise ConfigError(
                f"lr must be one of {ALLOWED_LR}, got {self.lr}"
            )
        if self.batch not in ALLOWED_BATCH:
            raise ConfigError(
                f"batch must be one of {ALLOWED_BATCH}, got {self.batch}"
            )
        self._require(self.epochs >= 0, "epochs must be >= 0")
        self._require(self.diffusion_epochs >= 0, "diffusion_epochs must be >= 0")
        self._require(self.steps >= 1, "steps must be >= 1")
        self._require(self.gan_steps >= 1, "gan_steps must be >= 1")
        self._require(self.cls_weight >= 0, "cls_weight must be >= 0")
        self._require(self.gp_weight >= 0, "gp_weight must be >= 0")
        self._require(self.n_critic >= 1, "n_critic must be >= 1")
        self._require(self.dim >= 1, "dim must be >= 1")
        self._require(
            self.latent_width is None or self.latent_width >= 1,
            "latent_width must be >= 1 when set",
        )
        self._require(self.max_len >= 1, "max_len must be >= 1")
        self._require(
            0.0 <= self.val_fraction < 1.0, "val_fraction must lie in [0, 1)"
        )
        self._require(0.0 <= self.p_uncond < 1.0, "p_uncond must lie in [0, 1)")
        self._require(self.guidance >= 0.0, "guidance must be >= 0")
        self._require(self.kmer >= 1, "kmer must be >= 1")

    def _require(self, ok, message):
        if not ok:
            raise ConfigError(f"{message} (got {self!r})")

    def merged(self, **overrides):
        """Copy with the non-None overrides applied; ranges re-checked."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a key -> value mapping (values may be strings).

        Unknown keys are an error, as are values that do not parse to the
        field's type.
        """
        parsers = _field_parsers()
        unknown = sorted(set(mapping) - set(parsers))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, raw in mapping.items():
            try:
                kwargs[key] = parsers[key](raw)
            except (TypeError, ValueError):
                raise ConfigError(
                    f"config key {key!r}: cannot parse {raw!r}"
                ) from None
        return cls(**kwargs)


def _optional_int(value):
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in ("", "none"):
        return None
    return int(value)


def _field_parsers():
    parsers = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "latent_width":
            parsers[f.name] = _optional_int
        elif f.type in ("int", int):
            parsers[f.name] = int
        else:
            parsers[f.name] = float
    return parsers


def parse_config_text(text):
    """Flat key=value lines into a dict; '#' starts a comment line."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"config line {line_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path):
    """RunConfig from a key=value file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    return RunConfig.from_mapping(parse_config_text(text))
