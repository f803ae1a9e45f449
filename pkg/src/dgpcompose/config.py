"""JSON run configs: strict validation, defaulting and canonical hashing.

A run config is a JSON object with blocks

    dataset   {generator, n, range, noise, seed, path}
    model     {L, M, kernels, mean_fns, sigma2, z_range}
    scheme    a scheme name, or a list of them
    training  {iters, lr, n_samples, seed, refresh_noise_every, ...}
    outputs   {dir}

Unknown keys are rejected at every level so typos fail loudly instead of
silently running with defaults.  `load_config` returns a RunConfig whose
`resolved` dict has every default filled in; the config hash is the
sha256 of that resolved document, so two files with the same meaning get
the same hash.
"""

import hashlib
import json

import numpy as np

from .gp_layers import DgpModelSpec, GPLayerSpec, MeanFnSpec, default_mean_fns
from .math_core import KernelSpec
from .training import SCHEMES


class ConfigError(ValueError):
    """Malformed, incomplete or unknown config content."""


GENERATORS = ("sine", "identity", "chirp", "from_file")

_TRAINING_DEFAULTS = {
    "iters": 800,
    "lr": 5e-3,
    "n_samples": 10,
    "seed": 0,
    "refresh_noise_every": 10,
    "eval_every": 25,
    "eval_samples": 2000,
    "n_inner": 1,
    "transition_scale": 0.0,
    "train_hypers": False,
    "train_noise": False,
    "h_scale": 1e-4,
}


def _check_keys(block, allowed, required, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(block).__name__}")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")
    missing = sorted(set(required) - set(block))
    if missing:
        raise ConfigError(f"missing key(s) {missing} in {where}")


def _number(block, key, where, default=None, minimum=None, exclusive=False,
            integer=False):
    if key not in block:
        return default
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {v!r}")
    if integer:
        if v != int(v):
            raise ConfigError(f"{where}.{key} must be an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
    if minimum is not None:
        if exclusive and not v > minimum:
            raise ConfigError(f"{where}.{key} must be > {minimum}, got {v}")
        if not exclusive and not v >= minimum:
            raise ConfigError(f"{where}.{key} must be >= {minimum}, got {v}")
    return v


def _pair(block, key, where, default):
    if key not in block:
        return list(default)
    v = block[key]
    if (not isinstance(v, list) or len(v) != 2
            or any(isinstance(e, bool) or not isinstance(e, (int, float)) for e in v)):
        raise ConfigError(f"{where}.{key} must be a [low, high] number pair")
    lo, hi = float(v[0]), float(v[1])
    if not lo < hi:
        raise ConfigError(f"{where}.{key} must satisfy low < high, got {v}")
    return [lo, hi]


def validate_dataset(block, where="dataset"):
    """Resolve a dataset block, filling defaults; returns a plain dict."""
    _check_keys(block, ("generator", "n", "range", "noise", "seed", "path"),
                ("generator",), where)
    gen = block["generator"]
    if gen not in GENERATORS:
        raise ConfigError(f"{where}.generator must be one of {GENERATORS}, got {gen!r}")
    out = {"generator": gen}
    if gen == "from_file":
        path = block.get("path")
        if not isinstance(path, str) or not path:
            raise ConfigError(f"{where}.path is required for the from_file generator")
        out["path"] = path
        for key in ("n", "range", "noise", "seed"):
            if key in block:
                raise ConfigError(f"{where}.{key} is not accepted with from_file")
        return out
    if "path" in block:
        raise ConfigError(f"{where}.path is only accepted with from_file")
    out["n"] = _number(block, "n", where, minimum=2, integer=True)
    if out["n"] is None:
        raise ConfigError(f"missing key(s) ['n'] in {where}")
    out["range"] = _pair(block, "range", where, (-1.0, 1.0))
    out["noise"] = _number(block, "noise", where, default=0.0, minimum=0.0)
    out["seed"] = _number(block, "seed", where, default=0, integer=True)
    return out


def _validate_kernel(block, where):
    _check_keys(block, ("family", "variance", "lengthscale", "period"),
                ("family",), where)
    fam = block["family"]
    if not isinstance(fam, str):
        raise ConfigError(f"{where}.family must be a string")
    out = {
        "family": fam,
        "variance": _number(block, "variance", where, default=1.0,
                            minimum=0.0, exclusive=True),
        "lengthscale": _number(block, "lengthscale", where, default=1.0,
                               minimum=0.0, exclusive=True),
    }
    if "period" in block:
        out["period"] = _number(block, "period", where, minimum=0.0, exclusive=True)
    return out


def validate_model(block, where="model"):
    _check_keys(block, ("L", "M", "kernels", "mean_fns", "sigma2", "z_range"),
                ("L", "M", "sigma2"), where)
    L = _number(block, "L", where, minimum=1, integer=True)
    M = _number(block, "M", where, minimum=1, integer=True)
    sigma2 = _number(block, "sigma2", where, minimum=0.0, exclusive=True)
    out = {"L": L, "M": M, "sigma2": sigma2}
    kernels = block.get("kernels", [{"family": "se"}] * L)
    if not isinstance(kernels, list) or len(kernels) != L:
        raise ConfigError(f"{where}.kernels must be a list of {L} kernel objects")
    out["kernels"] = [
        _validate_kernel(k, f"{where}.kernels[{i}]") for i, k in enumerate(kernels)
    ]
    mean_fns = block.get("mean_fns",
                         [fn.variant for fn in default_mean_fns(L)])
    if (not isinstance(mean_fns, list) or len(mean_fns) != L
            or any(v not in ("zero", "identity") for v in mean_fns)):
        raise ConfigError(
            f"{where}.mean_fns must be a list of {L} entries from ('zero', 'identity')"
        )
    out["mean_fns"] = list(mean_fns)
    if "z_range" in block:
        out["z_range"] = _pair(block, "z_range", where, None)
    return out


def validate_schemes(value, where="scheme"):
    names = [value] if isinstance(value, str) else value
    if (not isinstance(names, list) or not names
            or any(not isinstance(s, str) for s in names)):
        raise ConfigError(f"{where} must be a scheme name or a non-empty list of them")
    bad = [s for s in names if s not in SCHEMES]
    if bad:
        raise ConfigError(f"unknown scheme(s) {bad} in {where}; known: {list(SCHEMES)}")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate scheme names in {where}")
    return list(names)


def validate_training(block, where="training"):
    _check_keys(block, tuple(_TRAINING_DEFAULTS), (), where)
    out = {}
    for key, default in _TRAINING_DEFAULTS.items():
        if key == "seed":
            continue
        if key in ("train_hypers", "train_noise"):
            v = block.get(key, default)
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
            out[key] = v
        elif key in ("iters", "n_samples", "refresh_noise_every", "eval_every",
                     "eval_samples", "n_inner"):
            out[key] = _number(block, key, where, default=default,
                               minimum=1, integer=True)
        elif key == "transition_scale":
            out[key] = _number(block, key, where, default=default, minimum=0.0)
        else:  # lr, h_scale
            out[key] = _number(block, key, where, default=default,
                               minimum=0.0, exclusive=True)
    seed = block.get("seed", _TRAINING_DEFAULTS["seed"])
    seeds = [seed] if isinstance(seed, int) and not isinstance(seed, bool) else seed
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds)):
        raise ConfigError(f"{where}.seed must be an integer or a non-empty list of them")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {where}.seed")
    out["seed"] = list(seeds)
    return out


def resolve_config(raw):
    """Validate a parsed config dict and fill every default.

    Returns the resolved dict; `scheme` and `training.seed` are always
    lists in it, so semantically equal configs hash identically.
    """
    _check_keys(raw, ("dataset", "model", "scheme", "training", "outputs"),
                ("dataset", "model", "scheme"), "config")
    resolved = {
        "dataset": validate_dataset(raw["dataset"]),
        "model": validate_model(raw["model"]),
        "scheme": validate_schemes(raw["scheme"]),
        "training": validate_training(raw.get("training", {})),
    }
    outputs = raw.get("outputs", {"dir": "runs"})
    _check_keys(outputs, ("dir",), ("dir",), "outputs")
    if not isinstance(outputs["dir"], str) or not outputs["dir"]:
        raise ConfigError("outputs.dir must be a non-empty string")
    resolved["outputs"] = {"dir": outputs["dir"]}
    return resolved


def config_hash(resolved):
    """First 12 hex chars of the sha256 of the canonical resolved document."""
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def build_model(model_block, data_range):
    """Construct the layered model from a resolved model block.

    Inducing locations are linearly spaced over z_range when given,
    otherwise over the dataset input range.
    """
    lo, hi = model_block.get("z_range", data_range)
    z = np.linspace(lo, hi, model_block["M"])
    layers = []
    for kern, mean in zip(model_block["kernels"], model_block["mean_fns"]):
        spec = KernelSpec(kern["family"], kern["variance"], kern["lengthscale"],
                          kern.get("period"))
        layers.append(GPLayerSpec(kernel=spec, mean_fn=MeanFnSpec(mean), z=z))
    return DgpModelSpec(layers=layers, likelihood_noise=model_block["sigma2"])


class RunConfig:
    """A validated config: the resolved dict plus ready-to-use pieces."""

    def __init__(self, resolved):
        self.resolved = resolved
        self.config_hash = config_hash(resolved)
        self.dataset = resolved["dataset"]
        self.schemes = tuple(resolved["scheme"])
        self.training = resolved["training"]
        self.seeds = tuple(resolved["training"]["seed"])
        self.out_dir = resolved["outputs"]["dir"]

    def model(self, data_range=None):
        if data_range is None:
            data_range = self.dataset.get("range", (-1.0, 1.0))
        return build_model(self.resolved["model"], data_range)


def parse_config(text, source="<config>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {source}: {e}") from e
    return RunConfig(resolve_config(raw))


def load_config(path):
    """Read, parse and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_config(text, source=str(path))
