"""Network data model, case ingestion and PTDF computation."""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field, replace

import jsonschema
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import SchemaError, SingularNetwork, UnbalancedInjection, ValidationError
from .thermal import ConductorSpec, WeatherSample, load_weather_csv, steady_state_temperature
from .uncertainty import N_AMBIENT, AmbientErrorModel, wind_power

SCHEMA_VERSION = 1
BALANCE_TOL = 1e-6


@dataclass(frozen=True)
class Node:
    id: str
    load: np.ndarray  # (T,) MW


@dataclass(frozen=True)
class Edge:
    id: str
    from_node: str
    to_node: str
    susceptance: float  # MW per rad
    static_rating: float  # MW
    conductor: ConductorSpec
    site: str
    initial_temp_C: float | None = None


@dataclass(frozen=True)
class Generator:
    id: str
    node: str
    c1: float
    c2: float
    p_min: float
    p_max: float
    ramp_up: float
    ramp_dn: float
    emission_rate: float = 0.0  # kg/kWh


@dataclass(frozen=True)
class WindFarm:
    id: str
    node: str
    site: str
    area: float  # m^2 swept
    rho: float | None = None  # None -> site air density
    capacity: float | None = None  # MW
    forecast: np.ndarray | None = None  # (T,) MW, overrides the power curve


@dataclass(frozen=True)
class SystemCase:
    name: str
    nodes: tuple
    edges: tuple
    generators: tuple
    wind_farms: tuple
    slack: str
    horizon: int
    period_s: float
    weather: dict  # site -> [WeatherSample] * horizon
    ambient: AmbientErrorModel
    rating_std_override: dict = field(default_factory=dict)  # edge index -> MW std

    # ---- index helpers
    @property
    def node_ids(self):
        return [n.id for n in self.nodes]

    def node_index(self, node_id):
        return self.node_ids.index(node_id)

    def edge_index(self, edge_id):
        return [e.id for e in self.edges].index(edge_id)

    def gen_index(self, gen_id):
        return [g.id for g in self.generators].index(gen_id)

    @property
    def n_nodes(self):
        return len(self.nodes)

    def loads(self):
        """(T, n_nodes) load matrix."""
        return np.array([n.load for n in self.nodes]).T.reshape(self.horizon, self.n_nodes)

    def wind_forecast(self):
        """(T, n_wind) forecast output: explicit series or the clipped power curve."""
        out = np.zeros((self.horizon, len(self.wind_farms)))
        for k, f in enumerate(self.wind_farms):
            if f.forecast is not None:
                out[:, k] = f.forecast
                continue
            for t in range(self.horizon):
                w = self.weather[f.site][t]
                rho = w.air_density_kg_m3 if f.rho is None else f.rho
                out[t, k] = wind_power(rho, f.area, w.wind_speed_m_s, f.capacity)
        return out

    def gen_incidence(self):
        m = np.zeros((self.n_nodes, len(self.generators)))
        for k, g in enumerate(self.generators):
            m[self.node_index(g.node), k] = 1.0
        return m

    def wind_incidence(self):
        m = np.zeros((self.n_nodes, len(self.wind_farms)))
        for k, f in enumerate(self.wind_farms):
            m[self.node_index(f.node), k] = 1.0
        return m

    def edge_weather(self, e, t):
        edge = self.edges[e]
        return self.weather[edge.site][t]

    def initial_temperatures(self):
        """T_{e,0}: from the case, else the zero-current equilibrium."""
        out = []
        for k, e in enumerate(self.edges):
            if e.initial_temp_C is not None:
                out.append(float(e.initial_temp_C))
            else:
                out.append(steady_state_temperature(e.conductor, self.edge_weather(k, 0), 0.0))
        return np.array(out)

    # ---- derived cases
    def window(self, start, stop=None):
        """Sub-horizon case covering periods [start, stop)."""
        stop = start + 1 if stop is None else stop
        nodes = tuple(replace(n, load=np.asarray(n.load)[start:stop]) for n in self.nodes)
        farms = tuple(
            replace(f, forecast=None if f.forecast is None else np.asarray(f.forecast)[start:stop])
            for f in self.wind_farms
        )
        weather = {s: list(ws[start:stop]) for s, ws in self.weather.items()}
        return replace(self, nodes=nodes, wind_farms=farms, weather=weather, horizon=stop - start)

    def with_load_delta(self, node_id, t, delta_MW):
        i = self.node_index(node_id)
        load = np.array(self.nodes[i].load, dtype=float)
        load[t] += delta_MW
        nodes = list(self.nodes)
        nodes[i] = replace(nodes[i], load=load)
        return replace(self, nodes=tuple(nodes))

    def with_uncertainty_scale(self, factor):
        over = {e: s * math.sqrt(factor) for e, s in self.rating_std_override.items()}
        return replace(self, ambient=self.ambient.scaled(factor), rating_std_override=over)

    def with_weather(self, weather):
        return replace(self, weather=weather)


# --------------------------------------------------------------------------
# PTDF


@dataclass(frozen=True)
class PtdfMatrix:
    """Slack-referenced PTDF: column of the slack node is zero."""

    S: np.ndarray
    slack: int
    node_ids: tuple = ()
    edge_ids: tuple = ()

    def mean_referenced(self):
        """Equivalent PTDF whose rows sum to zero (reference = nodal mean).

        Gives identical flows for balanced injections and is invariant to a
        uniform shift of all injections.
        """
        return self.S - self.S.mean(axis=1, keepdims=True)


def ptdf(case: SystemCase) -> PtdfMatrix:
    n = case.n_nodes
    m = len(case.edges)
    A = np.zeros((m, n))
    b = np.zeros(m)
    for k, e in enumerate(case.edges):
        A[k, case.node_index(e.from_node)] = 1.0
        A[k, case.node_index(e.to_node)] = -1.0
        b[k] = e.susceptance
    adj = csr_matrix(np.abs(A.T) @ np.abs(A))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1 or np.any(b == 0):
        raise SingularNetwork(f"case {case.name!r} has {ncomp} islands or a zero susceptance")
    s = case.node_index(case.slack)
    keep = [i for i in range(n) if i != s]
    Bbus = A.T @ np.diag(b) @ A
    Bf = np.diag(b) @ A
    S = np.zeros((m, n))
    S[:, keep] = Bf[:, keep] @ np.linalg.inv(Bbus[np.ix_(keep, keep)])
    return PtdfMatrix(S, s, tuple(case.node_ids), tuple(e.id for e in case.edges))


def nodal_flows(S, injections):
    """Edge flows for a balanced nodal injection vector (MW)."""
    mat = S.S if isinstance(S, PtdfMatrix) else np.asarray(S)
    inj = np.asarray(injections, dtype=float)
    if np.any(np.abs(np.sum(inj, axis=0)) > BALANCE_TOL):
        raise UnbalancedInjection(f"injections sum to {np.sum(inj, axis=0)} MW")
    return mat @ inj


# --------------------------------------------------------------------------
# JSON case ingestion

_NUM = {"type": "number"}
_SERIES = {"oneOf": [_NUM, {"type": "array", "items": _NUM}]}

CASE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "slack", "nodes", "edges", "generators"],
    "properties": {
        "schema_version": {"type": "integer"},
        "name": {"type": "string"},
        "period_s": _NUM,
        "horizon": {"type": "integer", "minimum": 1},
        "slack": {"type": "string"},
        "nodes": {
            "type": "array", "minItems": 1,
            "items": {"type": "object", "required": ["id"],
                      "properties": {"id": {"type": "string"}, "load": _SERIES}},
        },
        "conductors": {"type": "object"},
        "weather": {"type": "object"},
        "weather_csv": {"type": "string"},
        "edges": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "from", "to", "susceptance", "static_rating"],
                "properties": {
                    "id": {"type": "string"}, "from": {"type": "string"}, "to": {"type": "string"},
                    "susceptance": _NUM, "static_rating": _NUM, "conductor": {"type": "string"},
                    "site": {"type": "string"}, "initial_temp_C": _NUM,
                },
            },
        },
        "generators": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "node", "c1", "c2", "p_min", "p_max"],
                "properties": {k: _NUM for k in
                               ("c1", "c2", "p_min", "p_max", "ramp_up", "ramp_dn", "emission_rate")},
            },
        },
        "wind_farms": {
            "type": "array",
            "items": {
                "type": "object", "required": ["id", "node", "area"],
                "properties": {"area": _NUM, "rho": _NUM, "capacity": _NUM, "forecast": _SERIES},
            },
        },
        "uncertainty": {"type": "object"},
    },
}


def _series(value, horizon, where):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(horizon, float(arr[0]))
    if arr.size != horizon:
        raise ValidationError(f"{where}: series length {arr.size} != horizon {horizon}")
    return arr


def _conductor(spec_dict, where):
    d = dict(spec_dict)
    preset = d.pop("preset", None)
    try:
        if preset == "drake":
            return ConductorSpec.drake(**d)
        if preset is not None:
            raise ValidationError(f"{where}: unknown conductor preset {preset!r}")
        return ConductorSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{where}: {exc}") from exc


def _weather_list(records, where):
    out = []
    for k, r in enumerate(records):
        try:
            out.append(WeatherSample(**r))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{where}[{k}]: {exc}") from exc
    return out


def _ambient(raw, sites, where="uncertainty"):
    if raw is None:
        return AmbientErrorModel(np.zeros((N_AMBIENT * len(sites),) * 2), sites)
    try:
        if "sigma" in raw:
            order = tuple(raw.get("site_order", sites))
            model = AmbientErrorModel(np.asarray(raw["sigma"], dtype=float), order)
            if set(order) != set(sites):
                raise ValidationError(f"{where}.site_order {order} does not match sites {sites}")
            return model
        std = raw.get("std", {})
        missing = [s for s in sites if s not in std]
        if missing:
            raise ValidationError(f"{where}.std: missing sites {missing}")
        return AmbientErrorModel.from_site_stats(
            sites, std, raw.get("within_site_corr"), raw.get("cross_site_corr", 0.0)
        )
    except ValidationError:
        raise
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def case_from_dict(raw, base_dir=".", weather_path=None) -> SystemCase:
    """Validate a decoded case document and build a :class:`SystemCase`."""
    try:
        jsonschema.validate(raw, CASE_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"case field {loc}: {exc.message}") from exc
    if raw["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {raw['schema_version']} (expected {SCHEMA_VERSION})")
    T = int(raw.get("horizon", 1))
    period = float(raw.get("period_s", 900.0))
    if period <= 0:
        raise ValidationError("period_s must be > 0")

    # weather
    if weather_path is not None:
        if not os.path.exists(weather_path):
            raise FileNotFoundError(weather_path)
        weather = load_weather_csv(weather_path)
    elif "weather_csv" in raw:
        weather = load_weather_csv(os.path.join(base_dir, raw["weather_csv"]))
    else:
        weather = {s: _weather_list(r, f"weather/{s}") for s, r in raw.get("weather", {}).items()}
    for s, ws in weather.items():
        if len(ws) < T:
            raise ValidationError(f"weather/{s}: {len(ws)} samples for horizon {T}")
        weather[s] = ws[:T]

    conductors = {k: _conductor(v, f"conductors/{k}") for k, v in raw.get("conductors", {}).items()}
    nodes = tuple(Node(n["id"], _series(n.get("load", 0.0), T, f"nodes/{n['id']}/load")) for n in raw["nodes"])
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate node ids")
    if raw["slack"] not in ids:
        raise ValidationError(f"slack {raw['slack']!r} is not a node")

    def need_node(nid, where):
        if nid not in ids:
            raise ValidationError(f"{where}: unknown node {nid!r}")

    def need_site(site, where):
        if site not in weather:
            raise ValidationError(f"{where}: no weather for site {site!r}")

    edges = []
    for e in raw["edges"]:
        where = f"edges/{e['id']}"
        need_node(e["from"], where)
        need_node(e["to"], where)
        if e["susceptance"] <= 0 or e["static_rating"] <= 0:
            raise ValidationError(f"{where}: susceptance and static_rating must be > 0")
        cname = e.get("conductor", "drake")
        if cname not in conductors:
            if cname != "drake":
                raise ValidationError(f"{where}: unknown conductor {cname!r}")
            conductors[cname] = ConductorSpec.drake()
        site = e.get("site", "default")
        need_site(site, where)
        edges.append(Edge(e["id"], e["from"], e["to"], float(e["susceptance"]), float(e["static_rating"]),
                          conductors[cname], site, e.get("initial_temp_C")))

    gens = []
    for g in raw["generators"]:
        where = f"generators/{g['id']}"
        need_node(g["node"], where)
        if g["p_min"] > g["p_max"]:
            raise ValidationError(f"{where}: p_min {g['p_min']} > p_max {g['p_max']}")
        if g["c2"] < 0:
            raise ValidationError(f"{where}: c2 must be >= 0")
        ru = float(g.get("ramp_up", g["p_max"]))
        rd = float(g.get("ramp_dn", g["p_max"]))
        if ru < 0 or rd < 0:
            raise ValidationError(f"{where}: ramps must be >= 0")
        gens.append(Generator(g["id"], g["node"], float(g["c1"]), float(g["c2"]), float(g["p_min"]),
                              float(g["p_max"]), ru, rd, float(g.get("emission_rate", 0.0))))

    farms = []
    for f in raw.get("wind_farms", []):
        where = f"wind_farms/{f['id']}"
        need_node(f["node"], where)
        site = f.get("site", "default")
        need_site(site, where)
        fc = f.get("forecast")
        farms.append(WindFarm(f["id"], f["node"], site, float(f["area"]), f.get("rho"), f.get("capacity"),
                              None if fc is None else _series(fc, T, f"{where}/forecast")))

    sites = tuple(sorted({e.site for e in edges} | {f.site for f in farms}))
    unc = raw.get("uncertainty")
    ambient = _ambient(unc, sites)
    override = {}
    if unc:
        edge_ids = [e.id for e in edges]
        for eid, std in unc.get("rating_std_override", {}).items():
            if eid not in edge_ids:
                raise ValidationError(f"uncertainty.rating_std_override: unknown edge {eid!r}")
            if std < 0:
                raise ValidationError(f"uncertainty.rating_std_override/{eid}: must be >= 0")
            override[edge_ids.index(eid)] = float(std)
    case = SystemCase(raw.get("name", "case"), nodes, tuple(edges), tuple(gens), tuple(farms),
                      raw["slack"], T, period, weather, ambient, override)
    ptdf(case)  # connectivity check
    return case


def load_case(path, weather_path=None) -> SystemCase:
    """Read and validate a JSON case file (see README for the schema)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return case_from_dict(raw, os.path.dirname(os.path.abspath(path)), weather_path)


# --------------------------------------------------------------------------
# MATPOWER topology import

_MAT_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)


def _parse_matrix(body):
    rows = []
    for line in body.split("\n"):
        line = line.split("%")[0].strip().rstrip(";").strip()
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if chunk:
                rows.append([float(x) for x in chunk.replace(",", " ").split()])
    return rows


def import_matpower(path, site="default", conductor="drake"):
    """Translate a MATPOWER ``.m`` case into the JSON case layout.

    Only topology, loads, generator limits/costs and ramp rates are mapped;
    weather, conductor choices and uncertainty must be added by the caller.
    """
    with open(path) as fh:
        text = fh.read()
    base = re.search(r"mpc\.baseMVA\s*=\s*([\d.eE+-]+)", text)
    base_mva = float(base.group(1)) if base else 100.0
    mats = {name: _parse_matrix(body) for name, body in _MAT_RE.findall(text)}
    bus = mats.get("bus", [])
    if not bus or "branch" not in mats or "gen" not in mats:
        raise SchemaError(f"{path}: needs mpc.bus, mpc.gen and mpc.branch")
    slack = next((r for r in bus if int(r[1]) == 3), bus[0])
    nodes = [{"id": str(int(r[0])), "load": r[2]} for r in bus]
    edges = []
    for k, r in enumerate(mats["branch"]):
        if len(r) > 10 and r[10] == 0:
            continue  # out of service
        rate = r[5] if r[5] > 0 else 9999.0
        edges.append({"id": f"l{k + 1}", "from": str(int(r[0])), "to": str(int(r[1])),
                      "susceptance": base_mva / r[3], "static_rating": rate,
                      "conductor": conductor, "site": site})
    costs = mats.get("gencost", [])
    gens = []
    for k, r in enumerate(mats["gen"]):
        if len(r) > 7 and r[7] <= 0:
            continue
        c2 = c1 = 0.0
        if k < len(costs) and int(costs[k][0]) == 2:
            n = int(costs[k][3])
            coef = costs[k][4:4 + n]
            c1 = coef[-2] if n >= 2 else 0.0
            c2 = coef[-3] if n >= 3 else 0.0
        # RAMP_30 (MW per 30 min) -> MW per 15-min period
        ramp = r[18] / 2.0 if len(r) > 18 and r[18] > 0 else r[8]
        gens.append({"id": f"g{k + 1}", "node": str(int(r[0])), "c1": c1, "c2": c2,
                     "p_min": r[9], "p_max": r[8], "ramp_up": ramp, "ramp_dn": ramp})
    return {"schema_version": SCHEMA_VERSION, "name": os.path.splitext(os.path.basename(path))[0],
            "slack": str(int(slack[0])), "horizon": 1, "period_s": 900.0, "nodes": nodes,
            "edges": edges, "generators": gens, "wind_farms": []}
