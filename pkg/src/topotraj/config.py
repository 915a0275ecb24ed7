"""The run configuration document (YAML) with dotted-key overrides.

Every section is optional; missing keys take the package defaults. Errors
point at the line of the offending key when the document came from a file.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .datagen import DatagenParams
from .diffcore import ConfigError
from .model import ModelConfig
from .raster import GridSpec
from .train import InputSettings, TrainConfig

CONFIG_ENV = "TOPOTRAJ_CONFIG"

# the reduced backbone used on a single CPU core; widths are the only change
DESK_MODEL = {
    "stem_channels": 16,
    "block_channels": [16, 32, 64, 96],
    "fpn_channels": 48,
    "ffn_hidden": 256,
}
DESK_TRAIN = {"warmup_steps": 200}


class ConfigLoadError(ConfigError):
    """A configuration problem, optionally tied to a source line."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)


@dataclass
class MetricSettings:
    ks: List[int] = field(default_factory=lambda: [1])
    ds: List[float] = field(default_factory=lambda: [1.0, 2.0, 3.0])
    aligned: bool = True
    baseline_window: int = 5
    magnitudes: List[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    trials: int = 3
    constant_offset: bool = False


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**DESK_MODEL))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    datagen: DatagenParams = field(default_factory=DatagenParams)
    input: Dict[str, float] = field(default_factory=lambda: {
        "route_width": 2.0, "forward_window": 50.0, "backward_window": 20.0, "heatmap_sigma": 2.0})
    metrics: MetricSettings = field(default_factory=MetricSettings)
    paths: Dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def input_settings(self) -> InputSettings:
        return InputSettings(grid=self.grid, **self.input)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "datagen": self.datagen.to_dict(),
            "input": dict(self.input),
            "metrics": {f.name: copy.deepcopy(getattr(self.metrics, f.name)) for f in fields(MetricSettings)},
            "paths": dict(self.paths),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


# ------------------------------------------------------------ line lookup


def _line_index(text: str) -> Dict[Tuple[str, ...], int]:
    """Map key paths to 1-based line numbers using the YAML node marks."""
    out: Dict[Tuple[str, ...], int] = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (str(k.value),)
                out[key] = k.start_mark.line + 1
                walk(v, key)

    if root is not None:
        walk(root, ())
    return out


class _Ctx:
    def __init__(self, lines, source):
        self.lines = lines
        self.source = source

    def fail(self, msg, *path):
        line = None
        for n in range(len(path), 0, -1):
            line = self.lines.get(tuple(path[:n]))
            if line:
                break
        raise ConfigLoadError(msg, line, self.source)


# ---------------------------------------------------------------- building

_SECTIONS = ("seed", "grid", "model", "train", "datagen", "input", "metrics", "paths")


def _typed(value, default, ctx: _Ctx, path):
    """Coerce ``value`` to the type of ``default`` (bool/int/float/str/list)."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            ctx.fail(f"{'.'.join(path)} must be true or false, got {value!r}", *path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            ctx.fail(f"{'.'.join(path)} must be an integer, got {value!r}", *path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(f"{'.'.join(path)} must be a number, got {value!r}", *path)
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            ctx.fail(f"{'.'.join(path)} must be a list, got {value!r}", *path)
        if default:
            return [_typed(v, default[0], ctx, path) for v in value]
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            ctx.fail(f"{'.'.join(path)} must be a string, got {value!r}", *path)
    return value


def _merge_section(name, cls_defaults: dict, given, ctx: _Ctx, optional: Optional[dict] = None) -> dict:
    """Defaults updated by ``given``; keys in ``optional`` accept null and
    are otherwise typed like the sample value given there."""
    optional = optional or {}
    if given is None:
        return dict(cls_defaults)
    if not isinstance(given, dict):
        ctx.fail(f"section '{name}' must be a mapping", name)
    out = dict(cls_defaults)
    for k, v in given.items():
        if k not in cls_defaults:
            ctx.fail(f"unknown key '{name}.{k}'", name, k)
        if k in optional:
            out[k] = None if v is None else _typed(v, optional[k], ctx, (name, str(k)))
        else:
            out[k] = _typed(v, cls_defaults[k], ctx, (name, str(k)))
    return out


def from_dict(doc: Optional[dict], source: Optional[str] = None, text: Optional[str] = None) -> RunConfig:
    doc = doc or {}
    ctx = _Ctx(_line_index(text) if text else {}, source)
    if not isinstance(doc, dict):
        raise ConfigLoadError("configuration must be a mapping at the top level", 1, source)
    for k in doc:
        if k not in _SECTIONS:
            ctx.fail(f"unknown section '{k}'", k)
    base = RunConfig()
    seed = _typed(doc.get("seed", 0), 0, ctx, ("seed",))

    g = _merge_section("grid", base.grid.to_dict(), doc.get("grid"), ctx)
    try:
        grid = GridSpec(**g)
    except ValueError as e:
        ctx.fail(str(e), "grid")

    mdef = base.model.to_dict()
    mdef["height"], mdef["width"] = grid.height, grid.width
    m = _merge_section("model", mdef, doc.get("model"), ctx)
    if (m["height"], m["width"]) != (grid.height, grid.width):
        ctx.fail(f"model input {m['height']}x{m['width']} does not match grid {grid.height}x{grid.width}",
                 "model", "height")
    try:
        model = ModelConfig(**m)
    except (ValueError, TypeError) as e:
        ctx.fail(str(e), "model")

    t = _merge_section("train", base.train.to_dict(), doc.get("train"), ctx,
                       optional={"max_steps": 0, "stop_train_ade": 1.0, "grad_clip": 1.0})
    try:
        train = TrainConfig(**t)
        train.validate()
    except (ValueError, TypeError) as e:
        ctx.fail(str(e), "train")

    d = _merge_section("datagen", base.datagen.to_dict(), doc.get("datagen"), ctx)
    try:
        datagen = DatagenParams(**d)
        datagen.validate()
    except ValueError as e:
        ctx.fail(str(e), "datagen")
    if datagen.num_waypoints != model.num_waypoints:
        ctx.fail(f"datagen.num_waypoints ({datagen.num_waypoints}) must equal model.num_waypoints "
                 f"({model.num_waypoints})", "datagen", "num_waypoints")

    inp = _merge_section("input", base.input, doc.get("input"), ctx)
    for k, v in inp.items():
        if v <= 0:
            ctx.fail(f"input.{k} must be positive", "input", k)

    ms = _merge_section("metrics", base.to_dict()["metrics"], doc.get("metrics"), ctx)
    if not ms["ks"] or min(ms["ks"]) < 1:
        ctx.fail("metrics.ks must be a non-empty list of positive integers", "metrics", "ks")
    if any(v < 0 for v in ms["magnitudes"]):
        ctx.fail("metrics.magnitudes must be >= 0", "metrics", "magnitudes")
    if ms["trials"] < 1:
        ctx.fail("metrics.trials must be >= 1", "metrics", "trials")
    metrics = MetricSettings(**ms)

    paths = doc.get("paths") or {}
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        ctx.fail("paths must map names to strings", "paths")

    return RunConfig(grid=grid, model=model, train=train, datagen=datagen, input=inp, metrics=metrics,
                     paths={str(k): v for k, v in paths.items()}, seed=seed)


def loads(text: str, source: Optional[str] = None) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigLoadError(f"invalid YAML: {getattr(e, 'problem', e)}",
                              mark.line + 1 if mark else None, source) from None
    return from_dict(doc, source, text)


def load(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a config file (or the file named by ``$TOPOTRAJ_CONFIG``, or the
    defaults when neither is set) and apply ``key.sub=value`` overrides."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        text, source = "", None
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigLoadError(f"config file not found: {p}")
        text, source = p.read_text(), str(p)
    if not overrides:
        return loads(text, source)
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigLoadError(f"invalid YAML: {getattr(e, 'problem', e)}",
                              mark.line + 1 if mark else None, source) from None
    doc = apply_overrides(doc, overrides)
    return from_dict(doc, source, text)


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """``a.b=value`` sets ``doc['a']['b']``; the value is parsed as YAML."""
    doc = copy.deepcopy(doc) if doc else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigLoadError(f"override {item!r} is not of the form key.sub=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigLoadError(f"override {item!r} has an empty key")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            value = raw
        node = doc
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigLoadError(f"override {item!r}: '{p}' is not a section")
            node = nxt
        node[parts[-1]] = value
    return doc
