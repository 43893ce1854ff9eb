"""Structured-text (YAML) configuration for the model, controller and simulator.

Every mapping remembers the line of each key so validation errors can point
at the offending entry.
"""
from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .model import BodySpec, CapsuleSpec, ModelDescription, ModelError, PointSpec, build_model


class ConfigError(ValueError):
    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


class LineDict(dict):
    """``dict`` that records the 1-based source line of the mapping and its keys."""

    line = None
    key_lines: dict

    def line_of(self, key):
        return self.key_lines.get(key, self.line)


class _LineLoader(yaml.SafeLoader):
    def construct_mapping(self, node, deep=False):
        mapping = LineDict(super().construct_mapping(node, deep=deep))
        mapping.line = node.start_mark.line + 1
        mapping.key_lines = {k.value: k.start_mark.line + 1 for k, _ in node.value if hasattr(k, "value")}
        return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _LineLoader.construct_mapping)


def load_text(text, source=None):
    try:
        data = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line, source) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    return data


def load_file(path):
    path = Path(path)
    return load_text(path.read_text(), str(path))


def default_config_text():
    return resources.files("rmpwbc").joinpath("data/pat.yaml").read_text()


def load_default():
    return load_text(default_config_text(), "pat.yaml")


# -- model section ------------------------------------------------------------------


def _line(d, key):
    return d.line_of(key) if isinstance(d, LineDict) else None


def _require(d, key, source, what):
    if key not in d:
        raise ConfigError(f"{what}: missing '{key}'", getattr(d, "line", None), source)
    return d[key]


def _array(d, key, shape, source, what, default=None):
    if key not in d:
        if default is None:
            raise ConfigError(f"{what}: missing '{key}'", getattr(d, "line", None), source)
        return default
    try:
        arr = np.asarray(d[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: '{key}' must be numeric", _line(d, key), source) from exc
    if shape == (3, 3) and arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != shape:
        raise ConfigError(f"{what}: '{key}' must have shape {shape}, got {arr.shape}", _line(d, key), source)
    return arr


def parse_model(section, source=None):
    """Build a :class:`ModelDescription` from the ``model`` mapping."""
    bodies = []
    body_lines = {}
    for entry in _require(section, "bodies", source, "model"):
        name = str(_require(entry, "name", source, "body"))
        what = f"body '{name}'"
        joint = str(entry.get("joint", "revolute"))
        axis = _array(entry, "axis", (3,), source, what, np.array([0.0, 0.0, 1.0]))
        if joint == "revolute" and abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ConfigError(f"{what}: joint axis is not unit norm", _line(entry, "axis"), source)
        mass = entry.get("mass")
        if mass is None or not float(mass) > 0:
            raise ConfigError(f"{what}: mass must be positive", _line(entry, "mass") or entry.line, source)
        inertia = _array(entry, "inertia", (3, 3), source, what)
        if not np.allclose(inertia, inertia.T) or np.linalg.eigvalsh(inertia).min() <= 0:
            raise ConfigError(f"{what}: inertia must be symmetric positive definite", _line(entry, "inertia"), source)
        bodies.append(
            BodySpec(
                name=name,
                parent=entry.get("parent"),
                joint_type=joint,
                mass=float(mass),
                rotational_inertia=tuple(map(tuple, inertia)),
                com_offset=tuple(_array(entry, "com", (3,), source, what, np.zeros(3))),
                joint_axis=tuple(axis),
                origin_xyz=tuple(_array(entry, "xyz", (3,), source, what, np.zeros(3))),
                origin_rpy=tuple(_array(entry, "rpy", (3,), source, what, np.zeros(3))),
            )
        )
        body_lines[name] = entry.line
    capsules = []
    for entry in section.get("capsules", []) or []:
        name = str(_require(entry, "name", source, "capsule"))
        what = f"capsule '{name}'"
        radius = float(_require(entry, "radius", source, what))
        if radius <= 0:
            raise ConfigError(f"{what}: radius must be positive", _line(entry, "radius"), source)
        capsules.append(
            CapsuleSpec(
                name,
                str(_require(entry, "body", source, what)),
                tuple(_array(entry, "a", (3,), source, what)),
                tuple(_array(entry, "b", (3,), source, what)),
                radius,
            )
        )
    points = []
    for entry in section.get("points", []) or []:
        name = str(_require(entry, "name", source, "point"))
        points.append(
            PointSpec(name, str(_require(entry, "body", source, f"point '{name}'")), tuple(_array(entry, "offset", (3,), source, name, np.zeros(3))))
        )
    actuated = section.get("actuated")
    desc = ModelDescription(
        bodies=tuple(bodies),
        capsules=tuple(capsules),
        points=tuple(points),
        actuated_joint_names=tuple(actuated) if actuated is not None else None,
        gravity=tuple(_array(section, "gravity", (3,), source, "model", np.array([0.0, 0.0, -9.81]))),
    )
    try:
        build_model(desc)
    except ModelError as exc:
        line = None
        for name, ln in body_lines.items():
            if f"'{name}'" in str(exc):
                line = ln
                break
        raise ConfigError(str(exc), line or getattr(section, "line", None), source) from exc
    return desc


def load_model(path=None):
    data = load_default() if path is None else load_file(path)
    source = "pat.yaml" if path is None else str(path)
    return build_model(parse_model(_require(data, "model", source, "config"), source))


# -- dataclass sections -------------------------------------------------------------


def fill_dataclass(cls, section, source=None, what=None):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys with their line.

    Fields whose default is itself a dataclass are filled recursively from
    nested mappings.
    """
    what = what or cls.__name__
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"{what}: expected a mapping", None, source)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in fields:
            raise ConfigError(f"{what}: unknown key '{key}'", _line(section, key), source)
        f = fields[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            if value is not None and not isinstance(value, dict):
                raise ConfigError(f"{what}.{key}: expected a mapping", _line(section, key), source)
            value = fill_dataclass(type(default), value, source, f"{what}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}", getattr(section, "line", None), source) from exc


@dataclasses.dataclass
class Config:
    """Everything needed to run trials: model, controller and simulator settings."""

    model: object
    controller: object
    sim: object
    source: str = "pat.yaml"


KNOWN_SECTIONS = ("model", "controller", "sim")


def parse_config(data, source=None):
    from .controller import ControllerConfig
    from .sim import SimConfig

    for key in data:
        if key not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown top-level section '{key}'", _line(data, key), source)
    model = build_model(parse_model(_require(data, "model", source, "config"), source))
    controller = fill_dataclass(ControllerConfig, data.get("controller"), source, "controller")
    sim = fill_dataclass(SimConfig, data.get("sim"), source, "sim")
    return Config(model, controller, sim, source or "<text>")


def load_config(path=None):
    """Parse the bundled configuration or the file at ``path``."""
    if path is None:
        return parse_config(load_default(), "pat.yaml")
    return parse_config(load_file(path), str(path))
