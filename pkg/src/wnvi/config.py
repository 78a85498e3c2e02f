"""Run configuration: flat key-value text with sections, strict schema.

Unknown sections or keys are errors (fail-fast); missing keys fall back to
the desk-scale defaults below.  The full-scale settings of the original
experiment (32x32 inversion grid, d_z = 50, 7x40 displacement network,
24576 weight functions, K = 200, lambda_e = 1e10) remain valid values.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def _floats(s):
    return tuple(float(v) for v in str(s).replace(",", " ").split())


def _strings(s):
    return tuple(v for v in str(s).replace(",", " ").split() if v)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # [mesh]
    inversion_n: int = 17          # nodes per side, inversion + weight mesh
    truth_n: int = 33              # ground-truth mesh (finer)
    obs_n: int = 9                 # observation grid incl. boundary

    # [bc]
    fixed_edges: tuple = ("bottom",)
    traction_edge: str = "top"
    traction: tuple = (0.0, -0.1)

    # [material]
    background_E: float = 1.0
    nu: float = 0.3
    inclusion: bool = True
    inclusion_center: tuple = (0.5, 0.5)
    inclusion_radius: float = 0.2
    inclusion_axis: tuple = (0.0, 1.0)   # stiff axis aligned with the load
    inclusion_E_axial: float = 3.0
    inclusion_E_transverse: float = 1.0
    inclusion_G_axial: float = 1.154

    # [noise]
    noise_percent: float = 1.0
    tau: float = 0.0               # 0 -> derive from noise_percent

    # [displacement]
    d_z: int = 20
    u_width: int = 20
    u_depth: int = 4
    displacement_basis: str = "nn"   # nn | fe

    # [inference]
    lambda_e: float = 1e8
    K: int = 32
    L: int = 10
    n_weight_functions: int = 0    # 0 -> nodal family size
    learning_rate: float = 1e-4
    max_iters: int = 60000
    warmup_iters: int = 2000
    mean_width: int = 128
    mean_layers: int = 2
    rank: int = 10                 # low-rank conditional covariance factors
    trace_every: int = 50
    convergence_window: int = 500
    convergence_tol: float = 1e-5
    seed: int = 0
    use_mc_integration: bool = False
    mc_points: int = 500

    # [output]
    out_dir: str = "out"
    render_px: int = 192
    posterior_samples: int = 1000


_SECTIONS = {
    "mesh": ("inversion_n", "truth_n", "obs_n"),
    "bc": ("fixed_edges", "traction_edge", "traction"),
    "material": ("background_E", "nu", "inclusion", "inclusion_center",
                 "inclusion_radius", "inclusion_axis", "inclusion_E_axial",
                 "inclusion_E_transverse", "inclusion_G_axial"),
    "noise": ("noise_percent", "tau"),
    "displacement": ("d_z", "u_width", "u_depth", "displacement_basis"),
    "inference": ("lambda_e", "K", "L", "n_weight_functions", "learning_rate",
                  "max_iters", "warmup_iters", "mean_width", "mean_layers",
                  "rank", "trace_every", "convergence_window",
                  "convergence_tol", "seed", "use_mc_integration",
                  "mc_points"),
    "output": ("out_dir", "render_px", "posterior_samples"),
}

_PARSERS = {
    int: lambda s: int(str(s).strip()),
    float: lambda s: float(str(s).strip()),
    str: lambda s: str(s).strip(),
    bool: _bool,
    tuple: None,   # resolved per-field below
}

_TUPLE_FIELDS_FLOAT = {"traction", "inclusion_center", "inclusion_axis"}
_TUPLE_FIELDS_STR = {"fixed_edges"}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str        # keys are case-sensitive (K vs k)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    hints = {f.name: type(getattr(RunConfig(), f.name))
             for f in dataclasses.fields(RunConfig)}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            t = hints[key]
            try:
                if key in _TUPLE_FIELDS_FLOAT:
                    values[key] = _floats(raw)
                elif key in _TUPLE_FIELDS_STR:
                    values[key] = _strings(raw)
                else:
                    values[key] = _PARSERS[t](raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"bad value for {key!r} in [{section}]: {raw!r}") from exc
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def validate_config(cfg: RunConfig) -> None:
    positive = ("inversion_n", "truth_n", "obs_n", "d_z", "u_width", "u_depth",
                "K", "L", "max_iters", "mean_width", "mean_layers", "rank",
                "trace_every", "convergence_window", "mc_points", "render_px",
                "posterior_samples", "learning_rate", "lambda_e",
                "background_E", "inclusion_radius")
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.displacement_basis not in ("nn", "fe"):
        raise ConfigError("displacement_basis must be 'nn' or 'fe'")
    if not 0.0 <= cfg.nu < 0.5:
        raise ConfigError(f"nu must lie in [0, 0.5), got {cfg.nu}")
    if cfg.tau < 0:
        raise ConfigError("tau must be non-negative (0 selects noise_percent)")
    if cfg.tau == 0 and cfg.noise_percent <= 0:
        raise ConfigError("either tau or noise_percent must be positive")
    for e in cfg.fixed_edges:
        if e not in ("bottom", "top", "left", "right"):
            raise ConfigError(f"unknown edge {e!r} in fixed_edges")


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form (stable ordering), reparseable."""
    out = io.StringIO()
    for section, keys in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            v = getattr(cfg, key)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x)
                              for x in v)
            out.write(f"{key} = {v}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]
