"""Command-line entry point: ``dlrmarket run`` and ``dlrmarket compare``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import emissions, equilibrium_check, lme, monte_carlo_validate
from .data import fixture_path
from .errors import CaseMismatch, DLRMarketError
from .grid import load_case
from .market_multi import MultiPeriodConfig, MultiResult, successive_linearization
from .market_single import SinglePeriodConfig, line_ratings, normalise_mode, solve_single
from .uncertainty import assemble_covariance, sensitivities

log = logging.getLogger("dlrmarket")

SUMMARY_SCHEMA = 1
EXIT_INPUT = 2
EXIT_FAILURE = 1


@dataclass(frozen=True)
class RunConfig:
    case: str
    weather: str | None
    modes: tuple
    multi: bool
    epsilon: float
    out: str
    seed: int = 0
    validate: bool = False
    samples: int = 20_000
    iters: int = 10
    period: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(normalise_mode(m) for m in self.modes))
        if not self.modes:
            raise ValueError("at least one mode is required")
        if len(set(self.modes)) != len(self.modes):
            raise ValueError(f"duplicate modes in {self.modes}")


def _num(v):
    """Stable text form for CSV cells: 10 significant digits, no negative zero."""
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    s = f"{float(v):.10g}"
    return "0" if s in ("-0", "0") else s


def _clean(obj):
    """JSON-ready copy with numpy scalars/arrays converted and NaN mapped to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if not np.isfinite(x):
            return None
        return float(_num(x)) if x != 0 else 0.0
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) if isinstance(x, (float, np.floating)) else x for x in r])


def _resolve_case(path):
    if os.path.exists(path):
        return path
    bundled = fixture_path(path)
    return bundled if bundled is not None else path


def _tag(tag):
    return "|".join(str(t) for t in tag) if isinstance(tag, tuple) else str(tag)


def solve_mode(case, jc, cfg: RunConfig, mode):
    if cfg.multi:
        mc = MultiPeriodConfig(cfg.epsilon, mode, max_iters=cfg.iters)
        return successive_linearization(case, jc, mc)
    return solve_single(case, jc, SinglePeriodConfig(cfg.epsilon, mode, period=cfg.period))


def _periods(case, res):
    return list(range(case.horizon)) if isinstance(res, MultiResult) else [res.model.cfg.period]


def _col(a):
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 2 else a[:, None]


def run(cfg: RunConfig) -> dict:
    """Solve every requested mode and write the artifact set into ``cfg.out``."""
    case_path = _resolve_case(cfg.case)
    case = load_case(case_path, cfg.weather)
    if not cfg.multi and not 0 <= cfg.period < case.horizon:
        raise ValueError(f"period {cfg.period} outside horizon {case.horizon}")
    jc = assemble_covariance(case.ambient, sensitivities(case), case.rating_std_override)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(case_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if cfg.weather:
        with open(cfg.weather, "rb") as fh:
            digest = hashlib.sha256(digest.encode() + fh.read()).hexdigest()

    dispatch, prices, emis, thermal = [], [], [], []
    duals, validation, modes = {}, {}, {}
    gens = case.generators
    for mode in cfg.modes:
        log.info("solving %s (%s)", mode, "multi-period" if cfg.multi else "single period")
        res = solve_mode(case, jc, cfg, mode)
        periods = _periods(case, res)
        p, a, ru, rd = (_col(v) for v in (res.p, res.alpha, res.r_up, res.r_dn))
        lmp, flows = _col(res.lmp), _col(res.flows)
        lm = lme(res, jc)
        kg = emissions(res)
        lmrp = _col(res.lmrp)
        for j, t in enumerate(periods):
            for k, g in enumerate(gens):
                dispatch.append([mode, t, g.id, g.node, p[k, j], a[k, j], ru[k, j], rd[k, j]])
                emis.append([mode, t, g.id, g.node, kg[k, j]])
            for i, nid in enumerate(case.node_ids):
                at = [k for k, g in enumerate(gens) if g.node == nid]
                node_lmrp = max(lmrp[k, j] for k in at) if at else None
                prices.append([mode, t, nid, lmp[i, j], node_lmrp, lm.lme[i, j]])
            for e, edge in enumerate(case.edges):
                if isinstance(res, MultiResult):
                    temp, rth = res.temps[e, j + 1], res.rth[e, j + 1]
                    rating = line_ratings(case, "SLR" if mode == "SLR" else "DLR", t)[e]
                else:
                    temp, rth, rating = None, None, res.ratings[e]
                thermal.append([mode, t, edge.id, flows[e, j], rating, temp, rth])
        eq = equilibrium_check(res)
        entry = {
            "objective": res.objective,
            "total_emissions_kg": float(kg.sum()),
            "max_kkt_residual": max(float(np.max(v)) for v in res.kkt.values()),
            "degenerate": bool(res.degenerate),
            "warnings": list(res.warnings),
            "equilibrium_max_gap": eq.max_gap,
        }
        if isinstance(res, MultiResult):
            entry["converged"] = res.converged
            entry["iterations"] = len(res.iterations)
        modes[mode] = entry
        duals[mode] = {
            "tagged": {_tag(t): v for t, v in sorted(res.solution.duals.items(), key=lambda kv: _tag(kv[0]))},
            "iterations": getattr(res, "iterations", []),
        }
        validation[mode] = {"equilibrium": eq.to_dict(), "lme": lm.to_dict(),
                            "monte_carlo": monte_carlo_validate(res, jc, cfg.samples, cfg.seed).to_dict()
                            if cfg.validate else None}

    _write_csv(out / "dispatch.csv", ["mode", "t", "generator", "node", "p_MW", "alpha", "r_up_MW", "r_dn_MW"], dispatch)
    _write_csv(out / "prices.csv", ["mode", "t", "node", "lmp", "lmrp", "lme_kg_per_kWh"], prices)
    _write_csv(out / "emissions.csv", ["mode", "t", "generator", "node", "emissions_kg"], emis)
    _write_csv(out / "thermal.csv", ["mode", "t", "line", "flow_MW", "rating_MW", "temp_C", "rth_C"], thermal)
    _write_json(out / "duals.json", duals)
    _write_json(out / "validation.json", validation)
    summary = {
        "schema_version": SUMMARY_SCHEMA,
        "package_version": __version__,
        "case": case.name,
        "case_sha256": digest,
        "horizon": "multi" if cfg.multi else "single",
        "periods": case.horizon if cfg.multi else 1,
        "epsilon": cfg.epsilon,
        "seed": cfg.seed,
        "modes": modes,
        "mode_order": list(cfg.modes),
    }
    if "SLR" in modes and len(modes) > 1:
        base = modes["SLR"]["objective"]
        summary["cost_delta_vs_SLR_pct"] = {m: 100.0 * (v["objective"] - base) / base
                                            for m, v in modes.items() if m != "SLR"}
    _write_json(out / "summary.json", summary)
    return summary


def compare(run_dirs) -> list:
    """Cost and emission deltas of every (run, mode) against the first one."""
    if len(run_dirs) < 1:
        raise ValueError("compare needs at least one run directory")
    entries, digest = [], None
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(str(path))
        with open(path) as fh:
            s = json.load(fh)
        if digest is None:
            digest = (s["case_sha256"], s["horizon"])
        elif (s["case_sha256"], s["horizon"]) != digest:
            raise CaseMismatch(f"{d} was run on a different case or horizon")
        for mode in s.get("mode_order", sorted(s["modes"])):
            m = s["modes"][mode]
            entries.append({"run": str(d), "mode": mode, "cost": m["objective"],
                            "emissions_kg": m["total_emissions_kg"]})
    if len(entries) < 2:
        raise ValueError("compare needs at least two runs")
    c0, e0 = entries[0]["cost"], entries[0]["emissions_kg"]
    for r in entries:
        r["cost_delta_pct"] = 100.0 * (r["cost"] - c0) / c0 if c0 else 0.0
        r["emissions_delta_pct"] = 100.0 * (r["emissions_kg"] - e0) / e0 if e0 else 0.0
    return entries


def format_table(entries) -> str:
    head = f"{'run':<28} {'mode':<7} {'cost':>14} {'d cost':>9} {'emissions kg':>14} {'d emis':>9}"
    lines = [head, "-" * len(head)]
    for r in entries:
        lines.append(f"{Path(r['run']).name[:28]:<28} {r['mode']:<7} {r['cost']:>14.2f} "
                     f"{r['cost_delta_pct']:>+8.3f}% {r['emissions_kg']:>14.1f} {r['emissions_delta_pct']:>+8.3f}%")
    return "\n".join(lines)


def build_parser():
    ap = argparse.ArgumentParser(prog="dlrmarket", description="Electricity market clearing under dynamic line ratings.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="clear the market for one case")
    r.add_argument("--case", required=True, help="case JSON path or bundled case name")
    r.add_argument("--weather", help="weather CSV overriding the case's weather block")
    r.add_argument("--mode", default="slr,dlr,cc-dlr", help="comma list of slr, dlr, cc-dlr")
    r.add_argument("--multi", action="store_true", help="multi-period clearing over the case horizon")
    r.add_argument("--period", type=int, default=0, help="period to clear in single-period runs")
    r.add_argument("--epsilon", type=float, default=0.05)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--validate", action="store_true", help="Monte-Carlo chance-constraint check")
    r.add_argument("--samples", type=int, default=20_000)
    r.add_argument("--iters", type=int, default=10, help="max linearisation iterations")
    c = sub.add_parser("compare", help="percentage deltas between finished runs")
    c.add_argument("runs", nargs="+", help="run output directories; the first is the baseline")
    c.add_argument("--out", help="write the comparison as JSON")
    return ap


def _fail(code, exc, path=None):
    err = {"error": type(exc).__name__, "message": str(exc)}
    if path is not None:
        err["path"] = path
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DLRM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = RunConfig(args.case, args.weather, tuple(m for m in args.mode.split(",") if m), args.multi,
                            args.epsilon, args.out, args.seed, args.validate, args.samples, args.iters, args.period)
            summary = run(cfg)
            print(json.dumps(_clean(summary), sort_keys=True))
        else:
            entries = compare(args.runs)
            print(format_table(entries))
            if args.out:
                _write_json(args.out, entries)
    except FileNotFoundError as exc:
        return _fail(EXIT_INPUT, exc, exc.filename or str(exc))
    except (DLRMarketError, ValueError, KeyError) as exc:
        code = EXIT_INPUT if isinstance(exc, (ValueError, KeyError)) else EXIT_FAILURE
        return _fail(code, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
