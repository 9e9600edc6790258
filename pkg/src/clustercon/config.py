"""Run configuration: one JSON document, schema-validated before any
computation.

Unknown keys are rejected everywhere (fail-closed) so typos in gain or timer
names surface as schema errors instead of silently running defaults.  The
canonical hash of a config is embedded in run summaries, making every output
traceable to its inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from . import scenarios
from .ensemble import EnsembleSystem, GainSet, Plant, build_ensemble
from .hybridsim import NoiseModel
from .network import ClusteredNetwork, build_clustered_network, random_clustered_network

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VECTOR = {"type": "array", "items": {"type": "number"}}
_SCALAR_OR_VECTOR = {"anyOf": [{"type": "number"}, _VECTOR]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "network"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_nodes": {"type": "integer", "minimum": 2},
                "edges": {"type": "array", "items": {"type": "array",
                          "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
                "clusters": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                "random": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n_nodes", "n_clusters", "extra_edge_prob", "seed"],
                    "properties": {
                        "n_nodes": {"type": "integer", "minimum": 2},
                        "n_clusters": {"type": "integer", "minimum": 1},
                        "extra_edge_prob": {"type": "number", "minimum": 0, "maximum": 1},
                        "seed": {"type": "integer"},
                    },
                },
                "preset": {"enum": ["demo14"]},
                "file": {"type": "string"},
            },
        },
        "plant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "A": _MATRIX, "B": _MATRIX, "H": _MATRIX,
                "mass_damping": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["mass", "damping"],
                    "properties": {"mass": _MATRIX, "damping": _MATRIX},
                },
                "preset": {"enum": ["demo"]},
            },
        },
        "gains": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_u": _MATRIX,
                "k_eta": _MATRIX,
                "k_zeta": _MATRIX,
                "k_u_scale": {"type": "number"},
                "preset": {"enum": ["demo"]},
            },
        },
        "timers": {
            "type": "object",
            "additionalProperties": False,
            "required": ["t1", "t2"],
            "properties": {
                "t1": _SCALAR_OR_VECTOR, "t2": _SCALAR_OR_VECTOR,
                "t3": _SCALAR_OR_VECTOR, "t4": _SCALAR_OR_VECTOR,
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "reset_policy": {"enum": ["uniform", "midpoint", "max"]},
                "record_dt": {"type": "number", "exclusiveMinimum": 0},
                "timer_subdivision": {"type": "integer", "minimum": 1},
                "initial": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "x": _VECTOR,
                        "eta": _VECTOR,
                        "zeta": _VECTOR,
                        "tau": _SCALAR_OR_VECTOR,
                        "rho": _SCALAR_OR_VECTOR,
                        "random_bows": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["seed"],
                            "properties": {
                                "seed": {"type": "integer"},
                                "box": {"type": "number", "exclusiveMinimum": 0},
                            },
                        },
                    },
                },
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["none", "paper", "custom"]},
                "agent_amplitude": {"type": "number", "minimum": 0},
                "inter_amplitude": {"type": "number", "minimum": 0},
                "agent_freqs": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "inter_freqs": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "certificate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "params_file": {"type": "string"},
                "grid_samples": {"type": "integer", "minimum": 1},
                "margin": {"type": "number", "minimum": 0},
                "search": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "sweeps": {"type": "integer", "minimum": 1},
                        "grid_points": {"type": "integer", "minimum": 3},
                        "log_range": {"type": "array", "items": {"type": "number"},
                                      "minItems": 2, "maxItems": 2},
                    },
                },
            },
        },
        "rendezvous": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "length": {"type": "number", "exclusiveMinimum": 0},
                "craft_dt": {"type": "number", "exclusiveMinimum": 0},
                "headings_seed": {"type": "integer"},
            },
        },
        "montecarlo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "runs": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "amplitude_range": {"type": "array", "items": {"type": "number"},
                                    "minItems": 2, "maxItems": 2},
                "n_nodes": {"type": "integer", "minimum": 2},
                "cluster_range": {"type": "array", "items": {"type": "integer"},
                                  "minItems": 2, "maxItems": 2},
                "extra_edge_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "k_u_scale": {"type": "number"},
            },
        },
    },
}


def validate_config(data: dict) -> None:
    """Schema validation; raises ConfigError with the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path
        )
        raise ConfigError(f"config schema violation at {path}: {err.message}")


def load_config(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    validate_config(data)
    data["_config_dir"] = str(path.parent)
    return data


def config_hash(data: dict) -> str:
    """sha256 over the canonical JSON form (private keys stripped)."""
    clean = {k: v for k, v in data.items() if not k.startswith("_")}
    canonical = json.dumps(clean, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_network(data: dict) -> ClusteredNetwork:
    net_cfg = data["network"]
    keys = [k for k in ("preset", "random", "edges", "file") if k in net_cfg]
    if len(keys) != 1:
        raise ConfigError("network must specify exactly one of: preset, random, edges (+n_nodes+clusters), file")
    if "preset" in net_cfg:
        return scenarios.demo_network()
    if "random" in net_cfg:
        r = net_cfg["random"]
        return random_clustered_network(r["n_nodes"], r["n_clusters"], r["extra_edge_prob"], r["seed"])
    if "file" in net_cfg:
        from .network import load_network
        return load_network(Path(data.get("_config_dir", ".")) / net_cfg["file"])
    for key in ("n_nodes", "clusters"):
        if key not in net_cfg:
            raise ConfigError(f"inline network requires '{key}'")
    return build_clustered_network(net_cfg["n_nodes"], net_cfg["edges"], net_cfg["clusters"])


def build_plant(data: dict) -> Plant:
    plant_cfg = data.get("plant")
    if plant_cfg is None:
        raise ConfigError("missing 'plant' section")
    if "preset" in plant_cfg:
        return scenarios.demo_plant()
    if "mass_damping" in plant_cfg:
        md = plant_cfg["mass_damping"]
        return scenarios.virtual_plant(np.array(md["mass"]), np.array(md["damping"]))
    for key in ("A", "B", "H"):
        if key not in plant_cfg:
            raise ConfigError(f"plant requires '{key}' (or a preset / mass_damping)")
    return Plant(A=np.array(plant_cfg["A"]), B=np.array(plant_cfg["B"]), H=np.array(plant_cfg["H"]))


def build_gains(data: dict, net: ClusteredNetwork, plant: Plant) -> GainSet:
    gains_cfg = data.get("gains")
    timers_cfg = data.get("timers")
    if gains_cfg is None:
        raise ConfigError("missing 'gains' section")
    if "preset" in gains_cfg:
        scale = gains_cfg.get("k_u_scale", 0.5)
        return scenarios.demo_gains(net, k_u_scale=scale)
    for key in ("k_u", "k_eta", "k_zeta"):
        if key not in gains_cfg:
            raise ConfigError(f"gains requires '{key}' (or a preset)")
    if timers_cfg is None:
        raise ConfigError("missing 'timers' section")
    t1, t2 = timers_cfg["t1"], timers_cfg["t2"]
    t3 = timers_cfg.get("t3", t1)
    t4 = timers_cfg.get("t4", t2)

    def spread(value, count):
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if arr.size == 1:
            return np.full(count, float(arr[0]))
        if arr.size != count:
            raise ConfigError(f"timer bound list has {arr.size} entries, expected {count}")
        return arr

    return GainSet(
        k_u=np.array(gains_cfg["k_u"]),
        k_eta=np.broadcast_to(np.array(gains_cfg["k_eta"], dtype=float),
                              (net.n_nodes, plant.m, plant.m)).copy(),
        k_zeta=np.broadcast_to(np.array(gains_cfg["k_zeta"], dtype=float),
                               (net.n_inter_clusters, net.n_nodes, plant.m, plant.m)).copy(),
        t1=spread(t1, net.n_nodes),
        t2=spread(t2, net.n_nodes),
        t3=spread(t3, net.n_inter_clusters),
        t4=spread(t4, net.n_inter_clusters),
    )


def build_system(data: dict) -> EnsembleSystem:
    net = build_network(data)
    plant = build_plant(data)
    gains = build_gains(data, net, plant)
    return build_ensemble(net, plant, gains)


def perturbation_from_config(data: dict) -> scenarios.PerturbationSpec | None:
    noise_cfg = data.get("noise", {"kind": "none"})
    kind = noise_cfg["kind"]
    if kind == "none":
        return None
    if kind == "paper":
        return scenarios.PerturbationSpec()
    return scenarios.PerturbationSpec(
        agent_amplitude=noise_cfg.get("agent_amplitude", 0.07),
        inter_amplitude=noise_cfg.get("inter_amplitude", 0.04),
        agent_freqs=tuple(noise_cfg.get("agent_freqs", (0.015, 0.2))),
        inter_freqs=tuple(noise_cfg.get("inter_freqs", (0.095, 0.4))),
    )


def noise_from_config(data: dict, m: int) -> NoiseModel | None:
    spec = perturbation_from_config(data)
    if spec is None:
        return None
    return scenarios.noise_model(spec, m)


def initial_from_config(data: dict, sys: EnsembleSystem):
    from .hybridsim import make_initial

    sim_cfg = data.get("simulation", {})
    init_cfg = sim_cfg.get("initial", {})
    kwargs = {}
    for key in ("eta", "zeta", "tau", "rho"):
        if key in init_cfg:
            kwargs[key] = np.array(init_cfg[key], dtype=float)
    if "x" in init_cfg:
        x0 = np.array(init_cfg["x"], dtype=float)
    elif "random_bows" in init_cfg:
        rb = init_cfg["random_bows"]
        if sys.plant.n != 4 or sys.plant.m != 2:
            raise ConfigError("random_bows initialisation requires the planar double-integrator plant")
        bows, _ = scenarios.seeded_initial_bows(sys.n_agents, rb["seed"], box=rb.get("box", 2.5))
        x0 = np.hstack([bows, np.zeros((sys.n_agents, 2))]).reshape(-1)
    else:
        raise ConfigError("simulation.initial requires 'x' or 'random_bows'")
    return make_initial(sys, x0, **kwargs)
