"""Command-line experiment runner.

Every command reads a JSON configuration, writes CSV (or an edge list
for ``generate``) to ``--out`` or standard output, and is deterministic
given the configuration and seed.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 Monte Carlo validation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional

import jsonschema
import numpy as np

from . import analysis, dynamics, gramian, netdesign
from .dynamics import MisbehaviorModel, PriorModel
from .graphs import GraphSpec, Network, dumps_network, from_edges, generate, load_network, mark_misbehaving
from .numerics import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FAIL = 0, 1, 2, 3
Z_FAIL = 4.0
DEFAULT_TRIALS_COMPARE = 200
DEFAULT_TRIALS_MC = 10_000
DEFAULT_MC_LAMBDAS = (0.1, 0.3, 0.5, 0.8, 1.0)
_BIAS_STREAM = 104729
_PLACEMENT_STREAM = 15485863

_NUM = {"type": "number"}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUM}}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "graph": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["k_regular", "erdos_renyi", "geometric", "explicit"]},
                "n": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "degree": {"type": "integer", "minimum": 0},
                "p": _NUM,
                "radius": _NUM,
                "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                      "minItems": 2, "maxItems": 2}},
                "file": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "misbehaving": {
            "type": "object",
            "properties": {
                "ids": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "count": {"type": "integer", "minimum": 0},
                "placement": {"enum": ["random", "paired"]},
            },
            "additionalProperties": False,
        },
        "prior": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["identity", "diagonal", "exp_decay", "explicit"]},
                "scale": _NUM,
                "variances": {"type": "array", "items": _NUM},
                "base": _NUM,
                "rate": _NUM,
                "sigma": _MATRIX,
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "misbehavior": {
            "type": "object",
            "properties": {
                "d": _NUM,
                "q": _NUM,
                "V": _MATRIX,
                "Q": _MATRIX,
                "bias": {"oneOf": [
                    {"type": "array", "items": _NUM},
                    {"type": "object", "properties": {"uniform": {"type": "array", "items": _NUM,
                                                                  "minItems": 2, "maxItems": 2}},
                     "required": ["uniform"], "additionalProperties": False},
                ]},
            },
            "additionalProperties": False,
        },
        "protocol": {
            "type": "object",
            "properties": {
                "lambda": {"oneOf": [_NUM, {"const": "auto"}]},
                "design_V": _NUM,
                "F": {"type": "integer", "minimum": 0},
                "protocols": {"type": "array", "items": {"enum": list(dynamics.PROTOCOLS)}},
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "axis": {"enum": ["lambda", "d", "q", "M", "density", "prune-step"]},
                "values": {"type": "array", "items": _NUM},
            },
            "required": ["axis"],
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {"resolution": {"type": "integer", "minimum": 2}},
            "additionalProperties": False,
        },
        "objective": {
            "type": "object",
            "properties": {
                "kind": {"enum": list(netdesign.OBJECTIVES)},
                "lambda": _NUM,
                "prior": {"enum": ["identity", "exp_decay"]},
                "base": _NUM,
                "rate": _NUM,
                "d": _NUM,
                "q": _NUM,
                "K": {"oneOf": [{"type": "integer", "minimum": 1}, {"enum": ["reachability", "R"]}]},
            },
            "additionalProperties": False,
        },
        "study": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["k_regular", "erdos_renyi", "geometric"]},
                "n": {"type": "integer", "minimum": 2},
                "policy": {"enum": ["worst_case", "random"]},
                "M": {"type": "integer", "minimum": 1},
                "seeds": {"oneOf": [{"type": "integer", "minimum": 1},
                                    {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
                "max_removals": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "horizon": {"type": "integer", "minimum": 1},
        "trials": {"type": "integer", "minimum": 2},
        "K": {"oneOf": [{"type": "integer", "minimum": 1}, {"enum": ["reachability", "R"]}]},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


class ValidationFailure(RuntimeError):
    pass


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {exc.message}") from None
    proto = cfg.get("protocol", {})
    if proto.get("lambda") == "auto" and "design_V" not in proto:
        raise ConfigError("protocol.lambda = 'auto' requires protocol.design_V")
    return cfg


# -- building blocks --------------------------------------------------------------

def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"missing '{key}' section")
    return cfg[key]


def build_base_network(cfg: dict) -> Network:
    g = _require(cfg, "graph")
    if "file" in g:
        return load_network(g["file"])
    if "kind" not in g or "n" not in g:
        raise ConfigError("graph needs 'kind' and 'n' (or 'file')")
    seed = g.get("seed", cfg.get("seed", 0))
    if g["kind"] == "explicit":
        if "edges" not in g:
            raise ConfigError("explicit graph needs 'edges'")
        return from_edges(g["n"], [(u - 1, v - 1) for u, v in g["edges"]], seed=seed)
    spec = GraphSpec(g["kind"], g["n"], seed=seed, degree=g.get("degree"), p=g.get("p"), radius=g.get("radius"))
    return generate(spec)


def paired_placement(net: Network, count: int, rng) -> list[int]:
    """Misbehaving nodes in pairs that share a common regular neighbor."""
    if count % 2:
        raise ConfigError("paired placement needs an even count")
    chosen: list[int] = []
    hubs = set()
    for hub in rng.permutation(net.n_total).tolist():
        if len(chosen) == count:
            break
        if hub in chosen:
            continue
        free = [int(j) for j in net.neighbors(hub) if j not in chosen and j not in hubs]
        if len(free) < 2:
            continue
        pair = rng.choice(free, size=2, replace=False).tolist()
        chosen += pair
        hubs.add(hub)
    if len(chosen) < count:
        raise ConfigError(f"could not place {count} paired misbehaving nodes")
    return chosen


def misbehaving_ids(cfg: dict, net: Network, count: Optional[int] = None) -> list[int]:
    mb = cfg.get("misbehaving", {})
    if "ids" in mb:
        ids = [i - 1 for i in mb["ids"]]
        if any(i >= net.n_total for i in ids):
            raise ConfigError("misbehaving id out of range")
        return ids if count is None else ids[:count]
    count = mb.get("count", 0) if count is None else count
    if count == 0:
        return []
    rng = np.random.default_rng([cfg.get("seed", 0), _PLACEMENT_STREAM])
    if mb.get("placement", "random") == "paired":
        return paired_placement(net, count, rng)
    return rng.choice(net.n_total, size=count, replace=False).tolist()


def build_network(cfg: dict, count: Optional[int] = None) -> Network:
    base = build_base_network(cfg)
    ids = misbehaving_ids(cfg, base, count)
    return mark_misbehaving(base, ids) if ids else base


def build_prior(cfg: dict, net: Network) -> PriorModel:
    p = cfg.get("prior", {"kind": "identity"})
    kind = p["kind"]
    if kind == "identity":
        return PriorModel.identity(net.n_total, p.get("scale", 1.0))
    if kind == "exp_decay":
        return PriorModel.exp_decay(net, p.get("base", 10.0), p.get("rate", 0.2))
    if kind == "diagonal":
        if "variances" not in p:
            raise ConfigError("diagonal prior needs 'variances'")
        prior = PriorModel.diagonal(p["variances"])
    else:
        if "sigma" not in p:
            raise ConfigError("explicit prior needs 'sigma'")
        prior = PriorModel(np.asarray(p["sigma"], dtype=float))
    if prior.n != net.n_total:
        raise ConfigError("prior dimension does not match the graph")
    # given in original node order
    return prior.relabel(net.labels)


def _bias(cfg, m):
    b = cfg.get("misbehavior", {}).get("bias")
    if b is None:
        return None
    if isinstance(b, dict):
        lo, hi = b["uniform"]
        return np.random.default_rng([cfg.get("seed", 0), _BIAS_STREAM]).uniform(lo, hi, m)
    if len(b) != m:
        raise ConfigError("bias length must equal the number of misbehaving nodes")
    return np.asarray(b, dtype=float)


def build_misbehavior(cfg: dict, m: int, d=None, q=None) -> MisbehaviorModel:
    mb = cfg.get("misbehavior", {})
    V = np.asarray(mb["V"], dtype=float) if "V" in mb and d is None else (mb.get("d", 0.0) if d is None else d) * np.eye(m)
    Q = np.asarray(mb["Q"], dtype=float) if "Q" in mb and q is None else (mb.get("q", 0.0) if q is None else q) * np.eye(m)
    if V.shape != (m, m) or Q.shape != (m, m):
        raise ConfigError("V and Q must be M x M")
    return MisbehaviorModel(V, Q, _bias(cfg, m))


def resolve_lambda(cfg: dict, net: Network, prior: PriorModel) -> float:
    proto = cfg.get("protocol", {})
    lam = proto.get("lambda", 0.5)
    if lam == "auto":
        design = MisbehaviorModel.isotropic(net.n_misbehaving, proto["design_V"], 0.0)
        return analysis.optimal_lambda(net, prior, design, _resolution(cfg))[0]
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("protocol.lambda must lie in [0, 1]")
    return float(lam)


def _resolution(cfg):
    return cfg.get("grid", {}).get("resolution", 256)


def build_objective(cfg: dict) -> netdesign.DesignObjective:
    o = cfg.get("objective", {})
    return netdesign.DesignObjective(
        kind=o.get("kind", "consensus_error"), lam=o.get("lambda", 0.1), prior=o.get("prior", "identity"),
        prior_base=o.get("base", 10.0), prior_rate=o.get("rate", 0.2), d=o.get("d", 10.0), q=o.get("q", 0.0),
        k_policy=o.get("K", "reachability"))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _axis(cfg, allowed):
    sw = cfg.get("sweep")
    if sw is None:
        return None, [None]
    if sw["axis"] not in allowed:
        raise ConfigError(f"sweep axis {sw['axis']!r} not supported here; use one of {allowed}")
    if not sw.get("values"):
        raise ConfigError("sweep needs 'values'")
    return sw["axis"], sw["values"]


# -- commands ---------------------------------------------------------------------

def cmd_generate(cfg: dict, threads: int = 1) -> str:
    return dumps_network(build_network(cfg))


ERROR_CURVE_HEADER = ["lambda", "e_v", "e_n", "e_total", "e_deception", "e_consensus", "lambda_star", "sweep_value"]


def error_curve_rows(cfg: dict, threads: int = 1) -> list[list]:
    axis, values = _axis(cfg, ("d", "q", "M"))
    base = build_base_network(cfg)
    grid = analysis.lambda_grid(_resolution(cfg))
    rows = []
    model = None
    for val in values:
        if model is None or axis == "M":
            count = int(val) if axis == "M" else None
            ids = misbehaving_ids(cfg, base, count)
            net = mark_misbehaving(base, ids) if ids else base
            prior = build_prior(cfg, net)
        mis = build_misbehavior(cfg, net.n_misbehaving,
                                d=val if axis == "d" else None, q=val if axis == "q" else None)
        # d and q sweeps share the cached resolvents
        model = analysis.ErrorModel(net, prior, mis) if model is None or axis == "M" else model.with_misbehavior(mis)
        lam_star, _ = analysis.optimal_lambda(model=model, resolution=grid.size)
        for lam in grid:
            r = model.report(float(lam))
            rows.append(r.csv_row() + [lam_star, "" if val is None else val])
    return rows


def cmd_error_curve(cfg: dict, threads: int = 1) -> str:
    return _csv(ERROR_CURVE_HEADER, error_curve_rows(cfg, threads))


COMPARE_HEADER = ["k", "protocol", "cost", "stderr"]


def compare_histories(cfg: dict, threads: int = 1) -> dict:
    """Mean and standard error of the cost per step for every protocol, on shared worlds."""
    net = build_network(cfg)
    prior = build_prior(cfg, net)
    mis = build_misbehavior(cfg, net.n_misbehaving)
    lam = resolve_lambda(cfg, net, prior)
    proto = cfg.get("protocol", {})
    F = proto.get("F", 1)
    horizon = cfg.get("horizon", 100)
    trials = cfg.get("trials", DEFAULT_TRIALS_COMPARE)
    seed = cfg.get("seed", 0)
    out = {}
    for p in proto.get("protocols", list(dynamics.PROTOCOLS)):
        h = dynamics.cost_histories(net, p, prior, mis, horizon, trials, seed, lam=lam, F=F)
        out[p] = (h.mean(axis=0), h.std(axis=0, ddof=1) / np.sqrt(trials))
    return {"lambda": lam, "histories": out}


def cmd_compare(cfg: dict, threads: int = 1) -> str:
    res = compare_histories(cfg, threads)
    rows = []
    for p, (mean, se) in res["histories"].items():
        rows += [[k, p, float(mean[k]), float(se[k])] for k in range(mean.size)]
    return _csv(COMPARE_HEADER, rows)


MC_HEADER = ["lambda", "analytic", "mc_mean", "mc_stderr", "z", "status"]


def mc_validate_rows(cfg: dict, threads: int = 1) -> list[list]:
    net = build_network(cfg)
    prior = build_prior(cfg, net)
    mis = build_misbehavior(cfg, net.n_misbehaving)
    axis, values = _axis(cfg, ("lambda",))
    lams = DEFAULT_MC_LAMBDAS if axis is None else values
    model = analysis.ErrorModel(net, prior, mis)
    trials = cfg.get("trials", DEFAULT_TRIALS_MC)
    seed = cfg.get("seed", 0)
    rows = []
    for lam in lams:
        if not 0.0 < lam <= 1.0:
            raise ConfigError("Monte Carlo validation needs lambda in (0, 1]")
        horizon = cfg.get("horizon") or dynamics.horizon_for(net, lam, 1e-12)
        est = dynamics.mc_cost(net, "fj", prior, mis, horizon, trials, seed, lam=lam)
        ref = model.total(lam)
        z = est.z_score(ref)
        rows.append([float(lam), ref, est.mean_cost, est.std_error, z, "FAIL" if abs(z) > Z_FAIL else "PASS"])
    return rows


def cmd_mc_validate(cfg: dict, threads: int = 1) -> str:
    rows = mc_validate_rows(cfg, threads)
    text = _csv(MC_HEADER, rows)
    if any(r[-1] == "FAIL" for r in rows):
        raise ValidationFailure(text)
    return text


def _seeds(study):
    s = study.get("seeds", 10)
    return list(range(s)) if isinstance(s, int) else s


def cmd_sweep(cfg: dict, threads: int = 1) -> str:
    study = _require(cfg, "study")
    axis, values = _axis(cfg, ("density",))
    if axis is None:
        raise ConfigError("sweep command needs sweep.axis = 'density' with values")
    if "kind" not in study or "n" not in study:
        raise ConfigError("study needs 'kind' and 'n'")
    rows = netdesign.connectivity_sweep(study["kind"], study["n"], values, build_objective(cfg), _seeds(study),
                                        policy=study.get("policy", "worst_case"), M=study.get("M", 5),
                                        threads=threads)
    return netdesign.sweep_csv(rows)


def cmd_gramian(cfg: dict, threads: int = 1) -> str:
    net = build_network(cfg)
    if net.n_misbehaving == 0:
        raise ConfigError("gramian needs at least one misbehaving node")
    axis, values = _axis(cfg, ("lambda",))
    lams = np.linspace(0.0, 0.95, 20) if axis is None else np.asarray(values, dtype=float)
    K = cfg.get("K", "reachability")
    if K == "R":
        K = net.n_regular
    elif K == "reachability":
        K = None
    traces, K = gramian.gramian_trace_curve(net, lams, K)
    return gramian.curve_csv(lams, traces, K)


def cmd_prune(cfg: dict, threads: int = 1) -> str:
    net = build_base_network(cfg)
    obj = build_objective(cfg)
    study = cfg.get("study", {})
    trace = netdesign.greedy_prune(net, obj, study.get("max_removals"), threads=threads)
    text = trace.to_csv()
    cmp = netdesign.compare_with_matching(trace, net, obj)
    return text + f"matching,,,{cmp.matching!r}\n"


COMMANDS = {
    "generate": cmd_generate,
    "error-curve": cmd_error_curve,
    "compare": cmd_compare,
    "mc-validate": cmd_mc_validate,
    "sweep": cmd_sweep,
    "gramian": cmd_gramian,
    "prune": cmd_prune,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fjresilience", description="FJ resilience experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--seed", type=int, help="override the configuration seed")
    ap.add_argument("--out", help="output path (default: stdout)")
    ap.add_argument("--threads", type=int, default=1)
    return ap


def _write(text, path):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if args.seed is not None:
            cfg["seed"] = args.seed
        validate_config(cfg)
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        out = args.out or cfg.get("out")
        text = COMMANDS[args.command](cfg, args.threads)
    except ValidationFailure as exc:
        _write(str(exc), args.out or cfg.get("out"))
        print("Monte Carlo validation FAILED", file=sys.stderr)
        return EXIT_FAIL
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write(text, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
