"""Run configuration: dotted keys, typed defaults, INI-style text files.

A config file looks like::

    [obj]
    T = 10
    lambda = 1e-7

    [anneal]
    kind = linear

Unknown sections or keys are rejected.  ``auto`` is accepted where noted.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _auto_int(s: str):
    return "auto" if str(s).strip() == "auto" else int(s)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = str(s).strip()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s

    return parse


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    doc: str


KEYS: dict[str, Key] = {
    "case.id": Key(1, int, "benchmark case 1..5"),
    "case.n": Key(1024, int, "training observations per run"),
    "case5.as_variance": Key(True, _bool, "read Case 5's 0.1 as a variance (else a standard deviation)"),
    "spline.H": Key("auto", _auto_int, "interior knots; auto = 6, or 9 for Case 5"),
    "spline.degree": Key(3, int, "spline degree"),
    "latent.J": Key(1, int, "latent dimension (benchmark cases are univariate)"),
    "train.epochs": Key(40, int, "training epochs"),
    "train.batch": Key(32, int, "minibatch size"),
    "train.replicates": Key(20, int, "independent runs per cell"),
    "opt.lr": Key(0.01, float, "Adam learning rate"),
    "opt.decay": Key(0.05, float, "fractional learning-rate decay per epoch"),
    "net.hidden": Key(20, int, "units per hidden layer"),
    "net.seed": Key("auto", _auto_int, "weight-init seed; auto derives it from the run seed"),
    "obj.T": Key(10, int, "importance samples"),
    "obj.lambda": Key(1e-7, float, "roughness penalty weight"),
    "obj.estimator": Key("stl", _choice("full", "stl", "stl-hard"),
                         "gradient of log q w.r.t. coefficients: full, or path derivative only (stl)"),
    "obj.kappa": Key(0.0, float, "anti-collapse weight (0 = off)"),
    "anneal.kind": Key("exponential", _choice("exponential", "linear"), "temperature schedule"),
    "anneal.lambda0": Key(1.0, float, "initial temperature"),
    "anneal.lambda1": Key(0.05, float, "final temperature"),
    "anneal.rate": Key(4.0, float, "decay scale (exponential) or turning epoch (linear)"),
    "mh.burn_in": Key(50, int, "Metropolis-Hastings burn-in steps"),
    "mh.thin": Key(5, int, "Metropolis-Hastings thinning"),
    "mh.bank": Key(2048, int, "basis draws kept per basis and refreshed every epoch"),
    "baseline.kind": Key("auto", _choice("auto", "gaussian", "truncated-gaussian"),
                         "Gaussian baseline; auto truncates to the posterior support when bounded"),
    "eval.grid_n": Key(4096, int, "quadrature nodes for RISE / KL"),
    "eval.tail": Key(1e-6, float, "posterior tail mass excluded from the evaluation range"),
    "seed.base": Key(0, int, "replicate r uses seed base + r"),
    "report.timing": Key(False, _bool, "write wall-clock seconds into results.csv (breaks bitwise reproducibility)"),
}

SECTIONS = sorted({k.split(".")[0] for k in KEYS})


class RunConfig(Mapping):
    """Resolved configuration; immutable, keyed by dotted names."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        resolved = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            resolved[k] = _coerce(k, v)
        self._values = resolved
        self._validate()

    def _validate(self):
        v = self._values
        checks = [
            (1 <= v["case.id"] <= 5, "case.id must be in 1..5"),
            (v["case.n"] >= 1, "case.n must be >= 1"),
            (v["spline.degree"] >= 0, "spline.degree must be >= 0"),
            (v["spline.H"] == "auto" or v["spline.H"] >= 0, "spline.H must be >= 0"),
            (v["latent.J"] >= 1, "latent.J must be >= 1"),
            (v["train.epochs"] >= 0, "train.epochs must be >= 0"),
            (v["train.batch"] >= 1, "train.batch must be >= 1"),
            (v["train.replicates"] >= 1, "train.replicates must be >= 1"),
            (v["opt.lr"] > 0, "opt.lr must be positive"),
            (0 <= v["opt.decay"] < 1, "opt.decay must be in [0, 1)"),
            (v["net.hidden"] >= 1, "net.hidden must be >= 1"),
            (v["obj.T"] >= 1, "obj.T must be >= 1"),
            (v["obj.lambda"] >= 0, "obj.lambda must be >= 0"),
            (v["obj.kappa"] >= 0, "obj.kappa must be >= 0"),
            (v["anneal.lambda0"] >= v["anneal.lambda1"] > 0, "need anneal.lambda0 >= anneal.lambda1 > 0"),
            (v["anneal.rate"] > 0, "anneal.rate must be positive"),
            (v["mh.burn_in"] >= 0 and v["mh.thin"] >= 1, "need mh.burn_in >= 0 and mh.thin >= 1"),
            (v["mh.bank"] >= 1, "mh.bank must be >= 1"),
            (v["eval.grid_n"] >= 256, "eval.grid_n must be >= 256"),
            (0 < v["eval.tail"] < 0.5, "eval.tail must be in (0, 0.5)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        return f"RunConfig({self._values!r})"

    def replace(self, **updates) -> "RunConfig":
        """Copy with updates; keyword names use ``__`` for the dot."""
        vals = dict(self._values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def with_values(self, values: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self._values)
        vals.update(values)
        return RunConfig(vals)

    @property
    def H(self) -> int:
        h = self._values["spline.H"]
        if h == "auto":
            return 9 if self._values["case.id"] == 5 else 6
        return h

    def to_text(self) -> str:
        """Canonical serialization: sorted sections and keys."""
        out = io.StringIO()
        for sec in SECTIONS:
            out.write(f"[{sec}]\n")
            for k in sorted(KEYS):
                s, name = k.split(".", 1)
                if s == sec:
                    out.write(f"{name} = {_format(self._values[k])}\n")
            out.write("\n")
        return out.getvalue()

    def content_hash(self) -> str:
        """git-style blob hash of the canonical text."""
        data = self.to_text().encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, v):
    spec = KEYS[key]
    if isinstance(v, str):
        try:
            return spec.parse(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    if isinstance(spec.default, bool) or spec.parse is _bool:
        return bool(v)
    if spec.parse in (int, float):
        return spec.parse(v)
    return spec.parse(str(v))


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    values = {}
    for sec in cp.sections():
        for name, raw in cp.items(sec):
            values[f"{sec}.{name}"] = raw
    return RunConfig(values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
