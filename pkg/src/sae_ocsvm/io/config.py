"""Line-based ``section.key = value`` run configuration.

Every option of SaeConfig, SolverConfig, PhantomConfig and the scoring,
metric and run settings is addressable.  Values are Python literals
(numbers, strings, tuples, None); bare words are read as strings.  Blank
lines and ``#`` comments are ignored, unknown keys are an error.
"""
import ast
from dataclasses import dataclass, field, fields, replace

from ..errors import ConfigError
from ..ocsvm import SolverConfig
from ..phantom import PhantomConfig
from ..sae import SaeConfig


@dataclass(frozen=True)
class OcsvmOptions:
    nu: float = 0.03
    n_train: int = 500

    def __post_init__(self):
        if not 0 < self.nu <= 1:
            raise ValueError("nu must be in (0, 1]")
        if self.n_train < 2:
            raise ValueError("n_train must be >= 2")


@dataclass(frozen=True)
class MetricOptions:
    connectivity: int = 26
    fpr_limit: float = 0.3
    alpha: float = 0.01
    bonferroni: bool = False


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    threads: int = 1
    n_controls: int = 20
    n_patients: int = 10
    n_pairs: int = None  # None: patches_per_subject * n_controls / 2


@dataclass
class RunConfig:
    sae: SaeConfig = field(default_factory=SaeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ocsvm: OcsvmOptions = field(default_factory=OcsvmOptions)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    run: RunOptions = field(default_factory=RunOptions)


SECTIONS = ("sae", "solver", "ocsvm", "phantom", "metrics", "run")


def _literal(text):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() == "none":
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value, default, key):
    """Match the type of the default where that is unambiguous."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_config(text, source="<config>"):
    values = {s: {} for s in SECTIONS}
    base = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        target = getattr(base, section)
        names = {f.name for f in fields(target)}
        if name not in names:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(_literal(value), getattr(target, name), key)
    parts = {}
    for section in SECTIONS:
        try:
            parts[section] = replace(getattr(base, section), **values[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid {section} options: {exc}") from exc
    return RunConfig(**parts)


def format_config(cfg):
    """Every option, one per line, in a form ``parse_config`` reads back identically."""
    lines = []
    for section in SECTIONS:
        part = getattr(cfg, section)
        for f in fields(part):
            lines.append(f"{section}.{f.name} = {getattr(part, f.name)!r}")
    return "\n".join(lines) + "\n"


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def write_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
