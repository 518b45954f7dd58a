"""Command line front end: ``linsys <subcommand> --config PATH``.

Exit codes: 0 pass, 2 inconclusive, 3 check failure, 4 config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import cltstat, dynamics, fk, kernels, lattice, regime
from .lattice import SparseField

EXIT_OK = 0
EXIT_INCONCLUSIVE = 2
EXIT_FAIL = 3
EXIT_CONFIG = 4

SUBCOMMANDS = ("moments", "green", "classify", "simulate", "verify-duality", "verify-h", "clt", "report")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

DEFAULTS: dict[str, Any] = {
    "kernel": None,
    "seed": 0,
    "out": "out",
    "green": {"R": 12, "N_q": 128},
    "simulate": {
        "init": None,
        "horizon": 10.0,
        "snapshot_times": [1.0, 5.0, 10.0],
        "replicas": 1000,
        "budget": dynamics.DEFAULT_BUDGET,
        "kind": None,
    },
    "fk": {
        "start": None,
        "ends": None,
        "t_values": [0.0, 0.5, 1.0, 2.0],
        "replicas": 10000,
        "horizon": 1000.0,
        "points": None,
        "sigmas": 3.0,
    },
    "clt": {
        "checkpoints": [25.0, 50.0, 100.0],
        "replicas": 1000,
        "library": None,
        "kinds": ["forward", "dual"],
    },
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    kernel: dict
    seed: int = 0
    out: str = "out"
    green: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    fk: dict = field(default_factory=dict)
    clt: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        full = _merge(DEFAULTS, data)
        cfg = cls(**full)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "kernel": copy.deepcopy(self.kernel),
            "seed": self.seed,
            "out": self.out,
            "green": copy.deepcopy(self.green),
            "simulate": copy.deepcopy(self.simulate),
            "fk": copy.deepcopy(self.fk),
            "clt": copy.deepcopy(self.clt),
        }

    @property
    def dimension(self) -> int:
        return int(self.kernel["dimension"])

    def validate(self) -> None:
        if not isinstance(self.kernel, dict):
            raise ConfigError("config needs a 'kernel' object")
        try:
            kernels.build_law(self.kernel)
        except (kernels.KernelError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"kernel: {exc}") from exc
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit non-negative integer")
        g = self.green
        if int(g["R"]) < 1 or int(g["N_q"]) < 4 or int(g["N_q"]) % 4:
            raise ConfigError("green: R >= 1 and N_q a positive multiple of 4 required")
        s = self.simulate
        for key in ("replicas", "budget"):
            if int(s[key]) <= 0:
                raise ConfigError(f"simulate.{key} must be positive")
        if float(s["horizon"]) <= 0:
            raise ConfigError("simulate.horizon must be positive")
        if any(float(t) > float(s["horizon"]) or float(t) < 0 for t in s["snapshot_times"]):
            raise ConfigError("simulate.snapshot_times must lie in [0, horizon]")
        if s["kind"] not in (None, dynamics.FORWARD, dynamics.DUAL):
            raise ConfigError("simulate.kind must be 'forward' or 'dual'")
        f = self.fk
        if int(f["replicas"]) <= 0 or float(f["horizon"]) <= 0:
            raise ConfigError("fk.replicas and fk.horizon must be positive")
        if any(float(t) < 0 for t in f["t_values"]):
            raise ConfigError("fk.t_values must be non-negative")
        c = self.clt
        if int(c["replicas"]) <= 0 or not c["checkpoints"] or any(float(t) <= 0 for t in c["checkpoints"]):
            raise ConfigError("clt needs positive replicas and positive checkpoints")
        if any(k not in (dynamics.FORWARD, dynamics.DUAL) for k in c["kinds"]):
            raise ConfigError("clt.kinds entries must be 'forward' or 'dual'")
        for key, pts in (("fk.points", f["points"]), ("simulate.init", s["init"])):
            if pts is not None and not isinstance(pts, list):
                raise ConfigError(f"{key} must be a list")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path: str | None, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# helpers


def _canon(obj):
    """JSON-ready copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def dumps(obj) -> str:
    return json.dumps(_canon(obj), sort_keys=True, indent=1) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _origin(d: int) -> tuple:
    return (0,) * d


def _e(d: int, i: int, s: int = 1) -> tuple:
    v = [0] * d
    v[i] = s
    return tuple(v)


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.law = kernels.build_law(cfg.kernel)
        self.m = kernels.moments(self.law)
        self._green = None

    @property
    def d(self) -> int:
        return self.law.dimension

    def green(self) -> lattice.GreenTable:
        if self._green is None:
            g = self.cfg.green
            self._green = lattice.green(self.m.k, int(g["R"]), int(g["N_q"]))
        return self._green


# ---------------------------------------------------------------------------
# subcommands; each returns (status, payload)


def cmd_moments(ctx: Context):
    payload = ctx.m.to_json()
    payload["basis_warning"] = ctx.law.basis_warning
    payload["checks"] = {
        "beta_total_vs_enumeration": abs(ctx.m.beta_total - kernels.second_moment_of_mass(ctx.law)),
        "beta_identity": (ctx.m.beta - (ctx.m.beta_tilde - ctx.m.k - ctx.m.k_check + SparseField.delta(ctx.d))).norm1(),
    }
    _write(ctx.out, "moments.json", dumps(payload))
    return EXIT_OK, payload


def cmd_green(ctx: Context):
    G = ctx.green()
    _write(ctx.out, "green.csv", G.to_csv())
    payload = G.metadata()
    payload["origin"] = G.origin
    if ctx.d >= 3:
        pi, pi_err = lattice.return_probability(ctx.d, G.nodes, with_error=True)
        payload["return_probability"] = {"value": pi, "error": pi_err}
    _write(ctx.out, "green.json", dumps(payload))
    return EXIT_OK, payload


def cmd_classify(ctx: Context):
    rep = regime.classify(ctx.m, ctx.green())
    payload = rep.to_json()
    _write(ctx.out, "classify.json", dumps(payload))
    status = EXIT_INCONCLUSIVE if rep.verdict == regime.INCONCLUSIVE else EXIT_OK
    if rep.closed_form and rep.closed_form["verdict"] != rep.verdict and regime.INCONCLUSIVE not in (
        rep.closed_form["verdict"], rep.verdict
    ):
        status = EXIT_FAIL
    return status, payload


def _init_field(ctx: Context) -> SparseField:
    init = ctx.cfg.simulate["init"]
    if init is None:
        return SparseField.delta(ctx.d)
    return SparseField.from_json(ctx.d, init)


def cmd_simulate(ctx: Context):
    s = ctx.cfg.simulate
    times = sorted(set(float(t) for t in s["snapshot_times"]) | {float(s["horizon"])})
    kind = s["kind"]
    init = _init_field(ctx)
    res = dynamics.run_replicas(
        ctx.law, init, times, int(s["replicas"]), ctx.cfg.seed, kind=kind,
        reducer=lambda snap: (snap.total_mass, snap.alive, snap.truncated, len(snap.sites)),
        threads=ctx.threads, budget=int(s["budget"]),
    )
    rows, per_t = [], {}
    for i, row in enumerate(res):
        for t, (mass, alive, trunc, n) in zip(times, row):
            rows.append([i, t, mass, int(alive), int(trunc), n])
            per_t.setdefault(t, []).append((mass, alive))
    stats = {}
    ok = True
    m0 = init.total()
    for t, vals in per_t.items():
        st = dynamics.survival_stats(vals)
        mean, se = dynamics.mean_and_se([v[0] for v in vals])
        entry = st.to_json()
        entry["mean_mass_std_error"] = se
        entry["martingale_ok"] = bool(abs(mean - m0) <= 4 * se + 1e-12)
        ok &= entry["martingale_ok"]
        stats[str(t)] = entry
    truncated = sum(r[4] for r in rows)
    payload = {"kind": kind or (dynamics.DUAL if ctx.law.is_dual else dynamics.FORWARD), "times": times,
               "initial_mass": m0, "stats": stats, "truncated": truncated, "ok": bool(ok)}
    _write(ctx.out, "simulate.json", dumps(payload))
    _write(ctx.out, "masses.csv", _csv(rows, ["replica", "t", "mass", "alive", "truncated", "sites"]))
    return (EXIT_OK if ok else EXIT_FAIL), payload


def _duality_grid(ctx: Context):
    f = ctx.cfg.fk
    d = ctx.d
    start = f["start"] or [list(_origin(d)), list(_e(d, 0))]
    if f["ends"] is not None:
        ends = [(tuple(a), tuple(b)) for a, b in f["ends"]]
    else:
        pts = [_e(d, 0, -1), _origin(d), _e(d, 0)]
        ends = [(a, b) for a in pts for b in pts]
    return (tuple(start[0]), tuple(start[1])), ends


def cmd_verify_duality(ctx: Context):
    f = ctx.cfg.fk
    start, ends = _duality_grid(ctx)
    rows = fk.three_way(ctx.law, ctx.m, start, ends, f["t_values"], int(f["replicas"]), ctx.cfg.seed,
                        sigmas=float(f["sigmas"]))
    ok = all(r["ok"] for r in rows)
    payload = {"cells": rows, "ok": ok}
    _write(ctx.out, "duality.json", dumps(payload))
    csv_rows = [[r["t"], json.dumps(r["end"]), r["forward"]["value"], r["forward"]["std_error"], r["XX"]["value"],
                 r["XX"]["std_error"], r["YY"]["value"], r["YY"]["std_error"], int(r["ok"])] for r in rows]
    _write(ctx.out, "duality.csv", _csv(csv_rows, ["t", "end", "forward", "forward_se", "XX", "XX_se", "YY", "YY_se", "ok"]))
    return (EXIT_OK if ok else EXIT_FAIL), payload


def cmd_verify_h(ctx: Context):
    G = ctx.green()
    rep = regime.classify(ctx.m, G)
    payload: dict = {"classify": rep.to_json()}
    if rep.verdict == regime.INCONCLUSIVE:
        _write(ctx.out, "verify_h.json", dumps(payload))
        return EXIT_INCONCLUSIVE, payload
    lem = regime.check_green_comparison(ctx.m, G)
    payload["green_comparison"] = lem.to_json()
    ok = lem.ok
    if rep.verdict == regime.DIFFUSIVE:
        hb = regime.h_condition_b(ctx.m, G)
        hp = regime.h_condition_bprime(ctx.m, G)
        payload["h_b"] = hb.to_json()
        payload["h_bprime"] = hp.to_json()
        ok &= hb.ok and hp.ok and hp.extra["positive"]
        r = (hb.residual.shape[0] - 1) // 2
        sites = lattice.box_sites(ctx.d, r).tolist()
        _write(ctx.out, "residual_b.csv", _csv([s + [v] for s, v in zip(sites, hb.residual.reshape(-1).tolist())],
                                               [f"x{i + 1}" for i in range(ctx.d)] + ["residual"]))
        r = (hp.residual.shape[0] - 1) // 2
        sites = lattice.box_sites(ctx.d, r).tolist()
        _write(ctx.out, "residual_bprime.csv", _csv([s + [v] for s, v in zip(sites, hp.residual.reshape(-1).tolist())],
                                                    [f"x{i + 1}" for i in range(ctx.d)] + ["residual"]))
        f = ctx.cfg.fk
        pts = f["points"] or [list(_origin(ctx.d)), list(_e(ctx.d, 0)), list(_e(ctx.d, 0, 2))]
        # direct weights when every per-visit factor has finite variance, else the renewal form
        chain = fk.difference_chain(ctx.m, fk.YMY)
        q0 = chain.table.total(_origin(ctx.d))
        method = "direct" if 2 * ctx.m.beta_total < q0 else "regenerative"
        h = regime.h0_closed_form(ctx.m, G, "YY")
        mc = []
        for i, x in enumerate(pts):
            est = fk.h0_estimate(ctx.m, tuple(x), fk.YY, float(f["horizon"]), int(f["replicas"]), ctx.cfg.seed, G,
                                 method=method, key=(i,))
            exact = float(h[tuple(c + G.radius for c in x)])
            agree = est.agrees(exact, float(f["sigmas"]))
            mc.append({"x": x, "estimate": est.to_json(), "closed_form": exact, "ok": agree})
            ok &= agree
        payload["h0_mc"] = mc
    payload["ok"] = bool(ok)
    _write(ctx.out, "verify_h.json", dumps(payload))
    return (EXIT_OK if ok else EXIT_FAIL), payload


def _library(ctx: Context) -> list:
    lib = ctx.cfg.clt["library"]
    if lib is None:
        return cltstat.default_library(ctx.d)
    return [cltstat.function_from_json(f) for f in lib]


def cmd_clt(ctx: Context):
    c = ctx.cfg.clt
    target = cltstat.GaussianTarget.from_moments(ctx.m)
    library = _library(ctx)
    times = sorted(float(t) for t in c["checkpoints"])
    payload: dict = {"target_covariance": target.covariance.tolist(), "kinds": {}}
    ok = True
    rows = []
    for kind in c["kinds"]:
        drift = cltstat.drift_for(ctx.m, kind)
        res = dynamics.run_replicas(ctx.law, SparseField.delta(ctx.d), times, int(c["replicas"]), ctx.cfg.seed,
                                    kind=kind, reducer=cltstat.summarizer(drift, library), threads=ctx.threads)
        per = {t: [r[i] for r in res] for i, t in enumerate(times)}
        try:
            rep = cltstat.test_d(per, target, library)
        except cltstat.CLTError as exc:
            rep = {"error": str(exc), "pass": False}
        payload["kinds"][kind] = rep
        ok &= bool(rep["pass"])
        for t, cp in rep.get("checkpoints", {}).items():
            for name, pr in cp["projections"].items():
                rows.append([kind, float(t), name, pr["estimate"], pr["std_error"], pr["target"], int(pr["ok"])])
    payload["ok"] = bool(ok)
    _write(ctx.out, "clt.json", dumps(payload))
    _write(ctx.out, "clt.csv", _csv(rows, ["kind", "t", "function", "estimate", "std_error", "target", "ok"]))
    return (EXIT_OK if ok else EXIT_FAIL), payload


def cmd_report(ctx: Context):
    sections = {}
    status = EXIT_OK
    plan = [("moments", cmd_moments)]
    if ctx.d >= 3:
        plan += [("green", cmd_green), ("classify", cmd_classify), ("verify_h", cmd_verify_h)]
    plan += [("simulate", cmd_simulate), ("verify_duality", cmd_verify_duality)]
    if ctx.d >= 3:
        plan.append(("clt", cmd_clt))
    for name, fn in plan:
        try:
            st, payload = fn(ctx)
        except (regime.RegimeError, fk.ChainError, cltstat.CLTError, lattice.LatticeError) as exc:
            st, payload = EXIT_FAIL, {"error": f"{type(exc).__name__}: {exc}"}
        sections[name] = {"status": st, "result": payload}
        if st == EXIT_FAIL or (st == EXIT_INCONCLUSIVE and status == EXIT_OK):
            status = st if status != EXIT_FAIL else status
    report = {
        "config": ctx.cfg.to_dict(),
        "sections": sections,
        "status": status,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write(ctx.out, "report.json", dumps(report))
    return status, report


COMMANDS = {
    "moments": cmd_moments,
    "green": cmd_green,
    "classify": cmd_classify,
    "simulate": cmd_simulate,
    "verify-duality": cmd_verify_duality,
    "verify-h": cmd_verify_h,
    "clt": cmd_clt,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linsys", description="Linear systems on Z^d: criterion, simulation, checks.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: LINSYS_THREADS or 1)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config entry, e.g. green.R=8; repeatable")
    return p


def _diagnostic(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.override, args.seed)
    except ConfigError as exc:
        _diagnostic("config", str(exc))
        return EXIT_CONFIG
    out = Path(args.out or cfg.out)
    threads = args.threads or dynamics.default_threads()
    ctx = Context(cfg, out, threads)
    try:
        status, _ = COMMANDS[args.subcommand](ctx)
    except (regime.RegimeError, fk.ChainError, cltstat.CLTError) as exc:
        _diagnostic("check", f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    except lattice.LatticeError as exc:
        _diagnostic("config", f"{type(exc).__name__}: {exc}")
        return EXIT_CONFIG
    print(json.dumps({"subcommand": args.subcommand, "status": status, "out": str(out)}, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
