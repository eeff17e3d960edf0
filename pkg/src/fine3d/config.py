"""Line-based ``key = value`` run configuration.

Keys are namespaced ``model.*``, ``train.*`` and ``data.*`` after the fields
of :class:`ModelConfig`, :class:`TrainConfig` and :class:`SyntheticSpec`;
``seed`` is top level and seeds all three. The generator takes its grid
and class count from the model section; its volume extent defaults to the
model's (set it smaller to have ``gen-data`` pad the volumes) and its blob
exclusion extent to the crop's x/y extent. Tuples are written comma
separated (``model.crop_size = 16,16,8``), stages as ``dim/blocks/down``
triples (``model.stages = 8/0/1, 16/2/2``). ``#`` starts a comment.
Overrides (``key=value`` strings, e.g. from ``--set``) take precedence over
the file. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .model import ModelConfig, StageSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SyntheticSpec}
# seeds come from the top-level key; the generator shares the model's geometry
_DERIVED = {"model.seed", "train.seed", "data.grid_cells", "data.classes"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0

    def as_dict(self) -> dict:
        return {"model": self.model.as_dict(), "train": dataclasses.asdict(self.train),
                "data": _plain(dataclasses.asdict(self.data)), "seed": self.seed}

    def volume_seed(self, index: int) -> int:
        return self.seed * 100_000 + index

    def render(self) -> str:
        """The fully resolved config in the file syntax (parses back to itself)."""
        lines = [f"seed = {self.seed}"]
        for sec, obj in (("model", self.model), ("train", self.train), ("data", self.data)):
            for f in dataclasses.fields(obj):
                key = f"{sec}.{f.name}"
                if key not in _DERIVED:
                    lines.append(f"{key} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Inverse of :meth:`as_dict` (used to rebuild a run from a checkpoint)."""
        items = {"seed": str(d["seed"])}
        for sec in _SECTIONS:
            for k, v in d[sec].items():
                if f"{sec}.{k}" not in _DERIVED:
                    items[f"{sec}.{k}"] = _format(_untuple(v) if k == "stages" else v)
        return build(items)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _untuple(stages):
    return tuple(StageSpec(**s) if isinstance(s, dict) else StageSpec(*s) for s in stages)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (StageSpec, dict)):
            return ", ".join(f"{s.dim}/{s.blocks}/{s.down}" if isinstance(s, StageSpec)
                             else f"{s['dim']}/{s['blocks']}/{s['down']}" for s in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if key == "model.stages":
        out = []
        for part in text.split(","):
            dims = [int(t) for t in part.strip().split("/")]
            if len(dims) != 3:
                raise ValueError(f"stage {part.strip()!r} is not dim/blocks/down")
            out.append(StageSpec(*dims))
        return tuple(out)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        like = default[0] if default else 0
        return tuple(_parse_scalar(p, like) for p in parts)
    return _parse_scalar(text, default)


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        items[key] = value
    return items


def _defaults() -> dict:
    out = {"seed": 0}
    for sec, cls in _SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            out[f"{sec}.{f.name}"] = getattr(inst, f.name)
    return out


def build(items: dict[str, str]) -> RunConfig:
    defaults = _defaults()
    values = {sec: {} for sec in _SECTIONS}
    seed = 0
    for key, text in items.items():
        if key not in defaults or key in _DERIVED:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _parse_value(key, text, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        if key == "seed":
            seed = value
        else:
            sec, name = key.split(".", 1)
            values[sec][name] = value
    try:
        model = ModelConfig(**values["model"], seed=seed)
        train = TrainConfig(**values["train"], seed=seed)
        values["data"].setdefault("exclusion", tuple(model.crop_size[:2]))
        values["data"].setdefault("volume_dims", model.volume_dims)
        data = SyntheticSpec(**values["data"], grid_cells=model.grid_cells, classes=model.classes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(model, train, data, seed)


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    items = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        items.update(parse_lines(text, str(p)))
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        items[k.strip()] = v.strip()
    return build(items)
