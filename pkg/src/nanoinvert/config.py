"""INI configuration: one section per component, unknown keys are errors.

Every field of the device, constants, contacts, solver and study objects
has a key.  ``dumps`` writes a configuration that ``loads`` reads back to an
equal object, with floats in their shortest round-tripping form.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace

from .bayes import Prior
from .device import PARAMETER_NAMES, Contacts, DeviceSpec, ParameterVector, PhysicalConstants
from .inversion import (DEFAULT_GATES, PSA_CHARGE, SAMPLING_TOLERANCE, WARM_SLOTS,
                        ForwardModel, StudyConfig, default_priors)
from .transport import SRHParams


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


@dataclass(frozen=True)
class SolverOptions:
    kind: str = "coupled"
    tolerance: float = SAMPLING_TOLERANCE
    warm_slots: int = WARM_SLOTS
    z_mol: float = PSA_CHARGE


@dataclass(frozen=True)
class RunOptions:
    seed: int = 7
    threads: int = 1
    timings: bool = False


@dataclass(frozen=True)
class Config:
    run: RunOptions = RunOptions()
    device: DeviceSpec = DeviceSpec()
    constants: PhysicalConstants = PhysicalConstants()
    contacts: Contacts = Contacts()
    srh: SRHParams | None = SRHParams()
    dipole: float = 0.0
    parameters: ParameterVector = ParameterVector()
    gate_voltages: tuple = DEFAULT_GATES
    solver: SolverOptions = SolverOptions()
    epsilon: float = 0.01
    study: StudyConfig = StudyConfig(active=("rho_s",))

    def forward_model(self, threads: int | None = None) -> ForwardModel:
        return ForwardModel(self.device, self.constants, self.contacts, self.srh,
                            solver=self.solver.kind, tolerance=self.solver.tolerance,
                            threads=self.run.threads if threads is None else threads,
                            warm_slots=self.solver.warm_slots, z_mol=self.solver.z_mol,
                            dipole=self.dipole)

    def truth(self) -> ParameterVector:
        """The parameter vector with the study's active set attached."""
        return replace(self.parameters, active=self.study.active)


# -- value codecs ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text):
    value = float(text)
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _parse_int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def _parse_floats(text):
    return tuple(_parse_float(t) for t in text.split(",") if t.strip())


def _parse_names(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


_PARSERS = {float: _parse_float, int: _parse_int, bool: _parse_bool, str: str.strip}


def _dataclass_keys(cls, skip=()):
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = f.type if isinstance(f.type, type) else {"float": float, "int": int,
                                                       "bool": bool, "str": str}.get(f.type)
        if kind is not None:
            out[f.name] = _PARSERS[kind]
    return out


_SCHEMA = {
    "run": _dataclass_keys(RunOptions),
    "device": _dataclass_keys(DeviceSpec),
    "constants": _dataclass_keys(PhysicalConstants),
    "contacts": _dataclass_keys(Contacts),
    "interface": {"dipole": _parse_float},
    "srh": {"enabled": _parse_bool, "tau_n": _parse_float, "tau_p": _parse_float},
    "parameters": {n: _parse_float for n in PARAMETER_NAMES},
    "sweep": {"gate_voltages": _parse_floats},
    "solver": _dataclass_keys(SolverOptions),
    "synth": {"epsilon": _parse_float},
    "study": {
        "active": _parse_names, "n_steps": _parse_int, "burn_in": _parse_float,
        "bins": _parse_int, "sigma_dr": _parse_float, "adapt_start": _parse_int,
        "eps_reg": _parse_float, "proposal_std": _parse_floats,
        "delayed_rejection": _parse_bool, "adapt": _parse_bool, "adapt_scale": _parse_float,
    },
}
_PRIOR_KEYS = {"kind": str.strip, "mean": _parse_float, "std": _parse_float,
               "lo": _parse_float, "hi": _parse_float}


def _read_section(parser, name, schema):
    out = {}
    if not parser.has_section(name):
        return out
    for key, text in parser.items(name):
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}")
        try:
            out[key] = schema[key](text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}.{key}: {exc}") from exc
    return out


def _prior_from(section, values) -> Prior:
    kind = values.get("kind", "gaussian")
    try:
        if kind == "gaussian":
            missing = [k for k in ("mean", "std") if k not in values]
            if missing:
                raise ConfigError(f"{section} needs {', '.join(missing)}")
            return Prior.gaussian(values["mean"], values["std"], values.get("lo", -math.inf),
                                  values.get("hi", math.inf))
        if kind == "uniform":
            extra = [k for k in ("mean", "std") if k in values]
            if extra:
                raise ConfigError(f"unknown key {section}.{extra[0]} for a uniform prior")
            missing = [k for k in ("lo", "hi") if k not in values]
            if missing:
                raise ConfigError(f"{section} needs {', '.join(missing)}")
            return Prior.uniform(values["lo"], values["hi"])
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad prior {section}: {exc}") from exc
    raise ConfigError(f"bad value for {section}.kind: {kind!r}")


def _build(cls, base, values, section):
    try:
        return replace(base, **values) if values else base
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section [{section}]: {exc}") from exc


def loads(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for name in parser.sections():
        if name not in _SCHEMA and not (name.startswith("prior.")
                                         and name[6:] in PARAMETER_NAMES):
            raise ConfigError(f"unknown section [{name}]")
    v = {name: _read_section(parser, name, schema) for name, schema in _SCHEMA.items()}

    run = _build(RunOptions, RunOptions(), v["run"], "run")
    device = _build(DeviceSpec, DeviceSpec(), v["device"], "device")
    constants = _build(PhysicalConstants, PhysicalConstants(), v["constants"], "constants")
    contacts = _build(Contacts, Contacts(), v["contacts"], "contacts")
    srh_values = dict(v["srh"])
    enabled = srh_values.pop("enabled", True)
    srh = _build(SRHParams, SRHParams(), srh_values, "srh") if enabled else None
    params = _build(ParameterVector, ParameterVector(thermal_voltage=constants.thermal_voltage),
                    v["parameters"], "parameters")
    gates = v["sweep"].get("gate_voltages", DEFAULT_GATES)
    solver = _build(SolverOptions, SolverOptions(), v["solver"], "solver")
    if solver.kind not in ("coupled", "gummel"):
        raise ConfigError(f"bad value for solver.kind: {solver.kind!r}")
    epsilon = v["synth"].get("epsilon", 0.01)
    if not epsilon > 0:
        raise ConfigError("bad value for synth.epsilon: must be positive")

    priors = default_priors()
    for name in PARAMETER_NAMES:
        section = f"prior.{name}"
        if parser.has_section(section):
            priors[name] = _prior_from(section, _read_section(parser, section, _PRIOR_KEYS))
    study_values = dict(v["study"])
    study_values.setdefault("active", ("rho_s",))
    try:
        study = StudyConfig(priors=priors, fixed=params, epsilon=epsilon, **study_values)
    except ValueError as exc:
        raise ConfigError(f"bad section [study]: {exc}") from exc
    return Config(run, device, constants, contacts, srh, v["interface"].get("dipole", 0.0),
                  params, tuple(gates), solver, epsilon, study)


def load(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def _section(lines, name, items):
    lines.append(f"[{name}]")
    lines.extend(f"{k} = {_fmt(val)}" for k, val in items)
    lines.append("")


def _fields(obj, skip=()):
    return [(f.name, getattr(obj, f.name)) for f in fields(obj) if f.name not in skip]


def dumps(cfg: Config) -> str:
    lines = []
    _section(lines, "run", _fields(cfg.run))
    _section(lines, "device", _fields(cfg.device))
    _section(lines, "constants", _fields(cfg.constants))
    _section(lines, "contacts", _fields(cfg.contacts))
    _section(lines, "interface", [("dipole", cfg.dipole)])
    srh = cfg.srh or SRHParams()
    _section(lines, "srh", [("enabled", cfg.srh is not None), ("tau_n", srh.tau_n),
                            ("tau_p", srh.tau_p)])
    _section(lines, "parameters", [(n, getattr(cfg.parameters, n)) for n in PARAMETER_NAMES])
    _section(lines, "sweep", [("gate_voltages", tuple(cfg.gate_voltages))])
    _section(lines, "solver", _fields(cfg.solver))
    _section(lines, "synth", [("epsilon", cfg.epsilon)])
    st = cfg.study
    items = [("active", st.active), ("n_steps", st.n_steps), ("burn_in", st.burn_in),
             ("bins", st.bins), ("sigma_dr", st.sigma_dr), ("adapt_start", st.adapt_start),
             ("eps_reg", st.eps_reg)]
    if st.proposal_std is not None:
        items.append(("proposal_std", tuple(st.proposal_std)))
    items += [("delayed_rejection", st.delayed_rejection), ("adapt", st.adapt)]
    if st.adapt_scale is not None:
        items.append(("adapt_scale", st.adapt_scale))
    _section(lines, "study", items)
    for name in PARAMETER_NAMES:
        p = st.priors[name]
        if p.kind == "gaussian":
            items = [("kind", "gaussian"), ("mean", p.a), ("std", p.b), ("lo", p.lo), ("hi", p.hi)]
        else:
            items = [("kind", "uniform"), ("lo", p.lo), ("hi", p.hi)]
        _section(lines, f"prior.{name}", items)
    return "\n".join(lines)


def snapshot(cfg: Config) -> dict:
    """Plain-data view of a configuration for manifests."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(dumps(cfg))
    return {s: dict(parser.items(s)) for s in parser.sections()}
