"""
Run configuration files.

A run is described by one text file with a section per component:

    [data]
    num_clips = 2000
    kinds = ["square", "cross"]

    [model]
    variant = nar
    posenc = rpe2d

Sections map onto the dataclasses that own the settings; anything
not in the file keeps its default. Unknown sections and keys are
errors. `RunConfig.dumps()` writes every value back out, so a dumped
config reloads to an equal one.
"""

from dataclasses import dataclass, field, fields, asdict
import ast
import hashlib
import os
from pathlib import Path

from appdirs import AppDirs
from lark import Lark, Transformer, v_args
from lark.exceptions import LarkError

from pyvptr.autoencoder import AutoencoderConfig
from pyvptr.core import ConfigError
from pyvptr.evalsuite import EvalConfig, SyntheticDatasetSpec
from pyvptr.models import VPTRConfig
from pyvptr.training import TrainConfig

parser = Lark.open("config.lark", rel_to=__file__, parser="lalr")

dirs = AppDirs("pyvptr", "pyvptr")

SECTIONS = {
    "data": SyntheticDatasetSpec,
    "autoencoder": AutoencoderConfig,
    "model": VPTRConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def default_run_dir():
    """`$VPTR_RUN_DIR`, else `runs/` in the per-user data directory."""
    if os.environ.get("VPTR_RUN_DIR"):
        return Path(os.environ["VPTR_RUN_DIR"])
    return Path(dirs.user_data_dir) / "runs"


@v_args(inline=True)
class ConfigToDict(Transformer):
    def start(self, *sections):
        out = {}
        for name, entries in sections:
            if name in out:
                raise ConfigError(f"Section [{name}] appears twice")
            out[name] = entries
        return out

    def section(self, name, *entries):
        out = {}
        for key, value in entries:
            if key in out:
                raise ConfigError(f"Key {key!r} appears twice in [{name}]")
            out[key] = value
        return str(name), out

    def entry(self, key, value):
        return str(key), value

    def number(self, token):
        text = str(token)
        if any(c in text for c in ".eE"):
            return float(text)
        return int(text)

    def string(self, token):
        return ast.literal_eval(str(token))

    def word(self, token):
        return {"true": True, "false": False}.get(str(token), str(token))

    def array(self, *items):
        return [item for item in items if item is not None]


def parse(text):
    """Config text -> `{section: {key: value}}`."""
    try:
        tree = parser.parse(text + "\n")
    except LarkError as err:
        raise ConfigError(f"Cannot parse config: {err}") from err
    try:
        return ConfigToDict().transform(tree)
    except LarkError as err:
        # errors raised inside the transformer arrive wrapped
        if isinstance(getattr(err, "orig_exc", None), ConfigError):
            raise err.orig_exc from None
        raise ConfigError(f"Cannot read config: {err}") from err


def _coerce(cls, values, section):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {', '.join(unknown)}")
    coerced = {}
    for key, value in values.items():
        kind = known[key].type
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif kind in (int, float, str, bool) and not isinstance(value, kind):
            raise ConfigError(f"[{section}] {key} must be {kind.__name__}, got {value!r}")
        elif kind is int and isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be int, got {value!r}")
        coerced[key] = value
    try:
        return cls(**coerced)
    except ValueError as err:
        raise ConfigError(f"[{section}] {err}") from err


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    raise ConfigError(f"Cannot write config value {value!r}")


@dataclass
class RunConfig:
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    model: VPTRConfig = field(default_factory=VPTRConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def profile(cls, name):
        """`desk` is the default small setup, `full` the published model sizes."""
        if name == "desk":
            return cls()
        if name == "full":
            return cls(
                data=SyntheticDatasetSpec(clip_length=20),
                autoencoder=AutoencoderConfig(d_model=528),
                model=VPTRConfig.full(),
            )
        raise ConfigError(f"Unknown profile {name!r}, expected 'desk' or 'full'")

    @classmethod
    def from_dict(cls, sections, base=None):
        """Override `base` (default: the desk profile) with parsed sections."""
        base = base or cls()
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
        values = {}
        for name, kind in SECTIONS.items():
            merged = asdict(getattr(base, name))
            merged.update(sections.get(name, {}))
            values[name] = _coerce(kind, merged, name)
        return cls(**values)

    @classmethod
    def loads(cls, text, base=None):
        return cls.from_dict(parse(text), base)

    @classmethod
    def load(cls, path, base=None):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"Cannot read config file {path}: {err}") from err
        return cls.loads(text, base)

    def dumps(self):
        chunks = []
        for name in SECTIONS:
            chunks.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                chunks.append(f"{key} = {_format(value)}")
            chunks.append("")
        return "\n".join(chunks)

    def digest(self):
        return hashlib.md5(self.dumps().encode()).hexdigest()
