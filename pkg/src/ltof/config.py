"""Run configuration: a hand-rolled TOML-subset parser plus validation.

The accepted grammar is flat `[section]` headers over `key = value` lines,
where values are booleans, integers, floats, quoted strings, or one-level
arrays of those.  That is all the experiments need, and parsing it by hand
keeps configs dependency-free and diff-friendly.

Unknown sections or keys are errors, and every defaulted value is echoed
back into the effective config that gets persisted next to the artifacts.
"""

import os

from .ioutil import atomic_write_text


class ConfigError(Exception):
    """Raised for malformed, unknown, or ill-typed configuration input."""


# schema: section -> key -> (type tag, default); None default means
# "filled in from the problem-kind defaults below"
_SCHEMA = {
    "problem": {
        "id": ("str", "portfolio"),
        "n_assets": ("int", 20),
        "num_factors": ("int", 4),
        "n_var": ("int", 20),
        "n_eq": ("int", 10),
        "n_ineq": ("int", 10),
        "n_samples": ("int", None),
        "seeds": ("int_list", [0, 1, 2, 3, 4]),
        "data_seed": ("int", 0),
        "test_fraction": ("float", 0.1),
        "risk_weight": ("float", 2.0),
        "noise_std": ("float", 0.05),
        "zeta_low": ("float", None),
        "zeta_high": ("float", None),
        "oracle_restarts": ("int", 24),
        "oracle_tol": ("float", 1e-7),
        "deploy_restarts": ("int", 1),
    },
    "features": {
        "k": ("int_list", [1, 2, 4, 8]),
        "width": ("int", None),
        "seed": ("int", None),
    },
    "model": {
        "hidden_width": ("int", 128),
        "dropout": ("float", 0.1),
        "batchnorm": ("bool", True),
    },
    "training": {
        "epochs": ("int", 300),
        "batch_size": ("int", 200),
        "lr": ("float", 1e-3),
        "patience": ("int", 20),
        "eval_every": ("int", 1),
    },
    "ld": {
        "lambda0": ("float", 0.1),
        "mu0": ("float", 0.5),
        "step_size": ("float", 200.0),
        "updating_epochs": ("float", 1e-3),
        "update_period": ("int", 5),
    },
    "pdl": {
        "rho": ("float", 0.5),
        "rho_max": ("float", 5000.0),
        "alpha": ("float", 5.0),
        "tau": ("float", 0.8),
        "inner_primal": ("int", 10),
        "inner_dual": ("int", 5),
    },
    "dc3": {
        "penalty_total": ("float", 10.0),
        "penalty_ineq_fraction": ("float", 0.75),
        "t_train": ("int", 5),
        "t_test": ("int", 5),
        "gamma": ("float", 1e-4),
    },
    "two_stage": {
        "layers": ("int_list", [1, 2, 4, 8]),
    },
    "epo": {
        "proxy_method": ("str", None),
        "proxy_epochs": ("int", None),
        "layers": ("int", 2),
    },
    "shift": {
        "direction": ("float_list", [1.0, 1.0]),
        "shifts": ("float_list", [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]),
    },
    "output": {
        "dir": ("str", "runs"),
        "timing_samples": ("int", 32),
    },
}

# problem-kind dependent defaults for schema entries left as None
_KIND_DEFAULTS = {
    "portfolio": {("problem", "n_samples"): 3000, ("features", "width"): 30,
                  ("problem", "zeta_low"): 0.0, ("problem", "zeta_high"): 2.0,
                  ("epo", "proxy_method"): "ld"},
    "nonconvex": {("problem", "n_samples"): 2000, ("features", "width"): 50,
                  ("problem", "zeta_low"): 0.0, ("problem", "zeta_high"): 2.0,
                  ("epo", "proxy_method"): "ld"},
    "toy2d": {("problem", "n_samples"): 1000, ("features", "width"): 2,
              ("problem", "zeta_low"): 1.0, ("problem", "zeta_high"): 3.0,
              ("epo", "proxy_method"): "pdl"},
}

_PAPER_SCALE = {
    "portfolio": {("problem", "n_assets"): 50, ("problem", "n_samples"): 12000,
                  ("model", "hidden_width"): 500, ("training", "lr"): 1e-4},
    "nonconvex": {("problem", "n_var"): 50, ("problem", "n_eq"): 25,
                  ("problem", "n_ineq"): 25, ("problem", "n_samples"): 12000,
                  ("model", "hidden_width"): 500, ("training", "lr"): 1e-4},
    "toy2d": {},
}


def _parse_scalar(token, where):
    token = token.strip()
    if token in ("true", "false"):
        return token == "true"
    if len(token) >= 2 and token[0] == token[-1] == '"':
        return token[1:-1]
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {token!r}")


def parse_toml_like(text):
    """Parse the supported TOML subset into {section: {key: value}}."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"line {lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: unterminated section header {line!r}")
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{where}: empty section name")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, rhs = line.partition("=")
        key = key.strip()
        rhs = rhs.strip()
        # strip trailing comments outside quotes
        if "#" in rhs and not rhs.startswith('"'):
            rhs = rhs.split("#", 1)[0].strip()
        if not key or not rhs:
            raise ConfigError(f"{where}: empty key or value")
        if key in out[section]:
            raise ConfigError(f"{where}: duplicate key {section}.{key}")
        if rhs.startswith("["):
            if not rhs.endswith("]"):
                raise ConfigError(f"{where}: unterminated array")
            body = rhs[1:-1].strip()
            vals = [] if not body else [_parse_scalar(t, where) for t in body.split(",")]
            out[section][key] = vals
        else:
            out[section][key] = _parse_scalar(rhs, where)
    return out


def _check_type(value, tag, where):
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected boolean, got {value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if tag == "int_list":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int)
                                              for v in value):
            raise ConfigError(f"{where}: expected list of integers, got {value!r}")
        return list(value)
    if tag == "float_list":
        if not isinstance(value, list) or any(isinstance(v, bool)
                                              or not isinstance(v, (int, float))
                                              for v in value):
            raise ConfigError(f"{where}: expected list of numbers, got {value!r}")
        return [float(v) for v in value]
    raise AssertionError(tag)


def resolve_config(parsed, paper_scale=False):
    """Validate against the schema and fill every default.

    Returns the effective config as {section: {key: value}} with all keys
    present.  Unknown sections/keys and type mismatches raise ConfigError.
    """
    for section in parsed:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parsed[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    kind = parsed.get("problem", {}).get("id", _SCHEMA["problem"]["id"][1])
    if kind not in _KIND_DEFAULTS:
        raise ConfigError(f"problem.id must be one of {sorted(_KIND_DEFAULTS)}, got {kind!r}")

    eff = {}
    for section, keys in _SCHEMA.items():
        eff[section] = {}
        for key, (tag, default) in keys.items():
            if section in parsed and key in parsed[section]:
                eff[section][key] = _check_type(parsed[section][key], tag,
                                                f"{section}.{key}")
            else:
                if default is None:
                    default = _KIND_DEFAULTS[kind].get((section, key))
                eff[section][key] = default
    if paper_scale:
        for (section, key), value in _PAPER_SCALE[kind].items():
            eff[section][key] = value
    if eff["epo"]["proxy_epochs"] is None:
        eff["epo"]["proxy_epochs"] = eff["training"]["epochs"]
    if eff["features"]["seed"] is None:
        eff["features"]["seed"] = eff["problem"]["data_seed"]
    return eff


def load_config(path, paper_scale=False):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    return resolve_config(parse_toml_like(text), paper_scale=paper_scale)


def render_config(eff):
    """Serialize an effective config back to the TOML subset."""
    lines = []
    for section, keys in eff.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"{key} = {_render_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, list):
        return "[" + ", ".join(_render_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_effective_config(eff, path):
    atomic_write_text(path, render_config(eff))


def harness_config(eff):
    """Map an effective config onto the harness cell-config dict."""
    p, f, m, t = eff["problem"], eff["features"], eff["model"], eff["training"]
    kind = p["id"]
    cfg = {
        "kind": kind, "n_samples": p["n_samples"],
        "test_fraction": p["test_fraction"], "data_seed": p["data_seed"],
        "feature_dim": f["width"], "feature_seed": f["seed"],
        "hidden_width": m["hidden_width"], "dropout": m["dropout"],
        "batchnorm": m["batchnorm"],
        "epochs": t["epochs"], "batch_size": t["batch_size"], "lr": t["lr"],
        "patience": t["patience"], "eval_every": t["eval_every"],
        "ld": dict(eff["ld"]), "pdl": dict(eff["pdl"]), "dc3": dict(eff["dc3"]),
        "two_stage_layers": list(eff["two_stage"]["layers"]),
        "proxy_method": eff["epo"]["proxy_method"],
        "proxy_epochs": eff["epo"]["proxy_epochs"],
        "epo_layers": eff["epo"]["layers"],
    }
    if kind == "portfolio":
        cfg.update({"n_assets": p["n_assets"], "num_factors": p["num_factors"],
                    "risk_weight": p["risk_weight"], "noise_std": p["noise_std"]})
    elif kind == "nonconvex":
        cfg.update({"n_var": p["n_var"], "n_eq": p["n_eq"], "n_ineq": p["n_ineq"],
                    "zeta_low": p["zeta_low"], "zeta_high": p["zeta_high"],
                    "oracle_restarts": p["oracle_restarts"],
                    "oracle_tol": p["oracle_tol"],
                    "deploy_restarts": p["deploy_restarts"]})
    else:
        cfg.update({"zeta_low": p["zeta_low"], "zeta_high": p["zeta_high"],
                    "shift_direction": eff["shift"]["direction"],
                    "shifts": eff["shift"]["shifts"]})
    return cfg
