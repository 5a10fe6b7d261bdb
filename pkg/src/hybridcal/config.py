"""INI experiment configs: strict key tables and a resolved-value echo.

Unknown sections or keys are rejected outright (a typo must not silently
fall back to a default). Values are stored as strings until a command
asks for them through Resolver.get, which parses, applies the default,
and records what was actually used; the record is what `echo()` returns
and what every run writes next to its outputs.
"""

import configparser

from .errors import ConfigError


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _floats(text):
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _words(text):
    return [tok.strip() for tok in text.split(",") if tok.strip()]


_SECTIONS = {
    "system": {
        "name": str,
        "sigma": float,
        "rho": float,
        "beta": float,
        "forcing": float,
        "n_slow": int,
        "n_fast": int,
        "c": float,
        "gamma": float,
        "coupling": float,
    },
    "submodel": {"layers": _ints, "seed": int},
    "solver": {"scheme": str, "substeps": int, "h": float, "n": int},
    "data": {
        "size": int,
        "burn_in": int,
        "substeps": int,
        "seed": int,
        "path": str,
        "anchor_stride": int,
    },
    "train": {
        "mode": str,
        "jacobian": str,
        "optimizer": str,
        "lr": float,
        "batch": int,
        "epochs": int,
        "val_fraction": float,
        "reg_weight": float,
        "seed": int,
        "ensemble": int,
        "ensemble_sigma": float,
        "params": str,
        "init_params": str,
    },
    "metrics": {
        "model": str,
        "lyap_transient": int,
        "lyap_steps": int,
        "lyap_qr_interval": int,
        "grad_h_values": _floats,
        "grad_modes": _words,
        "grad_n": int,
        "grad_window": float,
        "grad_seeds": int,
        "grad_anchors": int,
        "grad_loss_level": _bool,
        "meg_lead": int,
        "meg_initials": int,
        "meg_spacing": int,
        "pdf_steps": int,
        "pdf_transient": int,
        "pdf_bins": int,
        "pdf_component": int,
    },
    "io": {"out": str},
}


def load_config(path):
    """Parse and validate an INI file into {section: {key: raw string}}."""
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config {path}")
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        table = _SECTIONS[section]
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in table:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][key] = raw
    return out


class Resolver:
    """Typed access to a loaded config that remembers every lookup."""

    def __init__(self, raw):
        self.raw = raw
        self.used = {}

    def get(self, section, key, default=None, required=False):
        table = _SECTIONS.get(section)
        if table is None or key not in table:
            raise ConfigError(f"no such config key [{section}] {key}")
        parse = table[key]
        raw = self.raw.get(section, {}).get(key)
        if raw is None:
            if required:
                raise ConfigError(f"missing required key {key!r} in [{section}]")
            value = default
        else:
            try:
                value = parse(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from e
        self.used.setdefault(section, {})[key] = value
        return value

    def override(self, section, key, value):
        """Force a parsed value (command-line flags beat the file)."""
        self.used.setdefault(section, {})[key] = value
        self.raw.setdefault(section, {})[key] = str(value)

    def echo(self):
        return {s: dict(kv) for s, kv in sorted(self.used.items())}
