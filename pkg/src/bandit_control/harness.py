"""Experiment orchestration: JSON configs, seeded multi-trial runs, regret and CSV output."""
import csv
import hashlib
import io
import json
import os
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .baselines import (BpcConfig, best_drc_hindsight, best_drc_hindsight_l1op, dare_solve,
                        run_bpc, run_lqr, run_zero)
from .control import make_ebpc_config, run_ebpc, run_ebpc_unknown
from .lds import (NOISE_KINDS, CostSpec, LdsParams, NoiseParams, double_integrator,
                  make_noise, markov_operator, natures_y_rollout)
from .sysid import run_estimation_phase

CONTROLLER_KINDS = ("ebpc_known", "ebpc_unknown", "bpc", "lqr", "zero")
TUNED_KINDS = ("ebpc_known", "ebpc_unknown", "bpc")

CONTROLLER_DEFAULTS = {
    "ebpc_known": {"H": 5, "R": 1.0, "c_eta": 1.0, "sigma": None, "stabilize": True},
    "ebpc_unknown": {"H": 5, "R": 1.0, "c_eta": 1.0, "sigma": None, "stabilize": True},
    "bpc": {"H": 5, "delta": 0.1, "lr": 1e-5, "R_bound": 1.0, "stabilize": True},
    "lqr": {},
    "zero": {},
}

SYSTEM_PRESETS = {"double_integrator": double_integrator}


class ConfigError(ValueError):
    """Raised with every validation problem found in a config."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(self.problems))


@dataclass(frozen=True)
class ControllerSpec:
    kind: str
    label: str
    params: dict


@dataclass
class ExperimentConfig:
    system: LdsParams
    noise_kinds: tuple
    noise: NoiseParams
    cost: CostSpec
    controllers: list
    T: int
    seeds: list
    moving_avg_window: int = 50
    eta_multipliers: Optional[list] = None
    out_dir: Optional[str] = None
    oracle: bool = True
    oracle_l1op: bool = True
    estimate: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)


def default_config_dict() -> dict:
    """The double-integrator study: H = 5, T = 2000, twelve seeds, three noise kinds,
    EBPC against BPC and LQR."""
    return {
        "system": "double_integrator",
        "noise": {"kind": ["gaussian", "sinusoidal", "gaussian_walk"],
                  "sigma_w": 0.1, "sigma_e": 0.1, "amplitude": 1.0, "period": 40.0,
                  "walk_std": 0.1},
        "cost": {"Q": "identity", "R": "identity"},
        "controllers": [{"kind": "ebpc_known"}, {"kind": "bpc"}, {"kind": "lqr"}],
        "T": 2000,
        "seeds": list(range(12)),
        "moving_avg_window": 50,
        "out_dir": "results",
    }


def _matrix(value, name, problems):
    try:
        M = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        problems.append(f"{name}: not a numeric matrix")
        return None
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        problems.append(f"{name}: must be a finite 2-d matrix")
        return None
    return M


def _parse_system(spec, problems):
    if isinstance(spec, str):
        if spec not in SYSTEM_PRESETS:
            problems.append(f"system: unknown preset {spec!r} (known: {sorted(SYSTEM_PRESETS)})")
            return None
        return SYSTEM_PRESETS[spec]()
    if not isinstance(spec, dict):
        problems.append("system: expected a preset name or an object with A, B, C")
        return None
    if "preset" in spec:
        return _parse_system(spec["preset"], problems)
    mats = {k: _matrix(spec.get(k), f"system.{k}", problems) if k in spec else None
            for k in ("A", "B", "C")}
    missing = [k for k in ("A", "B", "C") if k not in spec]
    if missing:
        problems.append(f"system: missing {', '.join(missing)}")
    if any(v is None for v in mats.values()):
        return None
    try:
        return LdsParams(mats["A"], mats["B"], mats["C"])
    except ValueError as exc:
        problems.append(f"system: {exc}")
        return None


def _parse_cost(spec, system, problems):
    spec = spec or {}
    if system is None:
        return None
    mats = {}
    for key, dim in (("Q", system.d_y), ("R", system.d_u)):
        v = spec.get(key, "identity")
        if isinstance(v, str):
            if v != "identity":
                problems.append(f"cost.{key}: unknown literal {v!r}")
                return None
            mats[key] = np.eye(dim)
        elif isinstance(v, (int, float)):
            mats[key] = float(v) * np.eye(dim)
        else:
            mats[key] = _matrix(v, f"cost.{key}", problems)
            if mats[key] is None:
                return None
        if mats[key].shape != (dim, dim):
            problems.append(f"cost.{key}: expected shape {(dim, dim)}, got {mats[key].shape}")
            return None
    try:
        return CostSpec(mats["Q"], mats["R"])
    except ValueError as exc:
        problems.append(f"cost: {exc}")
        return None


def _parse_controllers(items, multipliers, problems):
    if not isinstance(items, list) or not items:
        problems.append("controllers: need at least one controller")
        return []
    out = []
    for idx, item in enumerate(items):
        if isinstance(item, str):
            item = {"kind": item}
        if not isinstance(item, dict) or "kind" not in item:
            problems.append(f"controllers[{idx}]: expected an object with a 'kind'")
            continue
        kind = item["kind"]
        if kind not in CONTROLLER_KINDS:
            problems.append(f"controllers[{idx}]: unknown kind {kind!r} (known: {list(CONTROLLER_KINDS)})")
            continue
        params = dict(CONTROLLER_DEFAULTS[kind])
        extra = {k: v for k, v in item.items() if k not in ("kind", "label")}
        unknown = sorted(set(extra) - set(params))
        if unknown:
            problems.append(f"controllers[{idx}] ({kind}): unknown parameters {unknown}")
        params.update(extra)
        for key in ("H",):
            if key in params and (not isinstance(params[key], int) or params[key] < 1):
                problems.append(f"controllers[{idx}] ({kind}): H must be an integer >= 1")
        for key in ("R", "c_eta", "delta", "lr", "R_bound"):
            if key in params and not (isinstance(params[key], (int, float)) and params[key] > 0):
                problems.append(f"controllers[{idx}] ({kind}): {key} must be > 0")
        if params.get("sigma") is not None and not params["sigma"] > 0:
            problems.append(f"controllers[{idx}] ({kind}): sigma must be > 0")
        label = item.get("label", kind)
        if multipliers and kind in TUNED_KINDS:
            for m in multipliers:
                out.append(ControllerSpec(kind, f"{label}@x{m:g}", {**params, "multiplier": float(m)}))
        else:
            out.append(ControllerSpec(kind, label, {**params, "multiplier": 1.0}))
    labels = [c.label for c in out]
    dup = sorted({l for l in labels if labels.count(l) > 1})
    if dup:
        problems.append(f"controllers: duplicate labels {dup} (set 'label' to disambiguate)")
    return out


def parse_config(raw: dict, seeds_override=None) -> ExperimentConfig:
    """Expand presets and validate; raises ConfigError listing every violation."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    known = {"system", "noise", "cost", "controllers", "T", "seeds", "moving_avg_window",
             "eta_multipliers", "out_dir", "oracle", "oracle_l1op", "estimate"}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"unknown top-level keys {unknown}")
    system = _parse_system(raw.get("system", "double_integrator"), problems)

    noise_raw = dict(raw.get("noise", {}))
    kinds = noise_raw.pop("kind", "gaussian")
    kinds = tuple([kinds] if isinstance(kinds, str) else kinds)
    if not kinds:
        problems.append("noise.kind: empty")
    for k in kinds:
        if k not in NOISE_KINDS:
            problems.append(f"noise.kind: unknown kind {k!r} (known: {list(NOISE_KINDS)})")
    noise = None
    try:
        noise = NoiseParams(**noise_raw)
        for name in ("sigma_w", "sigma_e", "walk_std", "amplitude"):
            if getattr(noise, name) < 0:
                problems.append(f"noise.{name} must be >= 0")
        if noise.period <= 0:
            problems.append("noise.period must be > 0")
    except TypeError as exc:
        problems.append(f"noise: {exc}")

    cost = _parse_cost(raw.get("cost"), system, problems)

    T = raw.get("T", 2000)
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        problems.append(f"T must be an integer >= 1, got {T!r}")
    seeds = raw.get("seeds", list(range(12))) if seeds_override is None else list(seeds_override)
    if not isinstance(seeds, list) or not seeds:
        problems.append("seeds: need a nonempty list")
        seeds = []
    else:
        for s in seeds:
            if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2 ** 64:
                problems.append(f"seeds: {s!r} is not a 64-bit unsigned integer")
        if len(set(map(str, seeds))) != len(seeds):
            problems.append("seeds: must be distinct")
    window = raw.get("moving_avg_window", 50)
    if not isinstance(window, int) or window < 1:
        problems.append(f"moving_avg_window must be an integer >= 1, got {window!r}")
    mults = raw.get("eta_multipliers")
    if mults is not None:
        if not isinstance(mults, list) or not mults or not all(
                isinstance(m, (int, float)) and m > 0 for m in mults):
            problems.append("eta_multipliers: need a nonempty list of positive numbers")
            mults = None
    controllers = _parse_controllers(raw.get("controllers"), mults, problems)
    if system is not None:
        needs_full = [c.label for c in controllers
                      if c.kind in ("lqr", "bpc") or c.params.get("stabilize")]
        if needs_full and system.C.shape[0] != system.C.shape[1]:
            problems.append(f"controllers {needs_full} need full observation (square C)")
    if isinstance(T, int) and T < 4 and any(c.kind == "ebpc_unknown" for c in controllers):
        problems.append("ebpc_unknown needs T >= 4")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(system, kinds, noise, cost, controllers, T, list(seeds), window, mults,
                            raw.get("out_dir"), bool(raw.get("oracle", True)),
                            bool(raw.get("oracle_l1op", True)), dict(raw.get("estimate", {})), raw)


def load_config(path, seeds_override=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return parse_config(raw, seeds_override)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def moving_average(losses, window: int) -> np.ndarray:
    """Trailing mean over min(window, t) entries; no lookahead."""
    if window < 1:
        raise ValueError("window must be >= 1")
    return _kernels.moving_average(np.ascontiguousarray(losses, dtype=float), int(window))


def trace_hash(trace) -> str:
    h = hashlib.sha256()
    for arr in (trace.w, trace.e):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if trace.x0 is not None:
        h.update(np.ascontiguousarray(trace.x0, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class TrialRecord:
    noise: str
    controller: str
    seed: int
    cost: np.ndarray
    total_cost: float
    trace_hash: str
    oracle_fro: Optional[float] = None
    oracle_l1op: Optional[float] = None

    @property
    def regret_fro(self) -> Optional[float]:
        return None if self.oracle_fro is None else self.total_cost - self.oracle_fro

    @property
    def regret_l1op(self) -> Optional[float]:
        return None if self.oracle_l1op is None else self.total_cost - self.oracle_l1op

    def final_quarter_mean(self) -> float:
        return float(np.mean(self.cost[-max(1, self.cost.shape[0] // 4):]))


@dataclass
class RegretReport:
    trials: list
    window: int
    controllers: list
    noise_kinds: tuple

    def select(self, noise=None, controller=None):
        return [r for r in self.trials
                if (noise is None or r.noise == noise) and (controller is None or r.controller == controller)]

    def aggregate(self):
        """Per (noise, controller): mean and std over seeds of total cost and regret."""
        out = {}
        for noise in self.noise_kinds:
            for label in self.controllers:
                rows = self.select(noise, label)
                tot = np.array([r.total_cost for r in rows])
                reg = np.array([np.nan if r.regret_fro is None else r.regret_fro for r in rows])
                fq = np.array([r.final_quarter_mean() for r in rows])
                out[(noise, label)] = {
                    "total_cost_mean": float(tot.mean()), "total_cost_std": float(tot.std()),
                    "regret_fro_mean": float(reg.mean()), "regret_fro_std": float(reg.std()),
                    "final_quarter_mean": float(fq.mean()),
                }
        return out


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _controller_rng(seed: int, label: str, noise: str) -> np.random.Generator:
    key = zlib.crc32(f"{noise}/{label}".encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def thread_count() -> int:
    raw = os.environ.get("BANDIT_CONTROL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


@dataclass
class _Context:
    config: ExperimentConfig
    gain: Optional[object]
    loop: LdsParams


def _make_context(config: ExperimentConfig) -> _Context:
    system = config.system
    gain = None
    if system.C.shape[0] == system.C.shape[1]:
        gain = dare_solve(system.A, system.B, config.cost.Q, config.cost.R)
    loop = system if gain is None else system.closed_loop(gain.K)
    return _Context(config, gain, loop)


def _run_controller(ctx: _Context, spec: ControllerSpec, trace, seed: int, noise: str):
    cfg = ctx.config
    system, costs = cfg.system, cfg.cost
    rng = _controller_rng(seed, spec.label, noise)
    p = spec.params
    K = ctx.gain.K if (p.get("stabilize") and ctx.gain is not None) else None
    plant = system if K is None else ctx.loop
    if spec.kind == "zero":
        return run_zero(system, trace, costs)
    if spec.kind == "lqr":
        return run_lqr(system, trace, costs, ctx.gain)
    if spec.kind == "ebpc_known":
        ecfg = make_ebpc_config(plant, costs, p["H"], p["R"], cfg.T, cfg.noise.sigma_w,
                                cfg.noise.sigma_e, c_eta=p["c_eta"] * p["multiplier"],
                                G=markov_operator(plant, p["H"]), sigma=p.get("sigma"))
        return run_ebpc(system, trace, costs, ecfg, rng, stabilizer=K)
    if spec.kind == "ebpc_unknown":
        return run_ebpc_unknown(system, trace, costs, p["H"], p["R"], rng=rng,
                                c_eta=p["c_eta"] * p["multiplier"], sigma=p.get("sigma"),
                                stabilizer=K, sigma_e=cfg.noise.sigma_e)
    if spec.kind == "bpc":
        bcfg = BpcConfig(H=p["H"], delta=p["delta"], lr=p["lr"] * p["multiplier"],
                         R_bound=p["R_bound"], T=cfg.T)
        return run_bpc(system, trace, costs, bcfg, rng, stabilizer=K)
    raise ValueError(f"unknown controller kind {spec.kind!r}")


def _oracle(ctx: _Context, trace):
    """Best fixed DRC in hindsight (memory and radius of the first EBPC controller)."""
    cfg = ctx.config
    ebpc = [c for c in cfg.controllers if c.kind in ("ebpc_known", "ebpc_unknown")]
    ref = ebpc[0].params if ebpc else CONTROLLER_DEFAULTS["ebpc_known"]
    H, R = ref["H"], ref["R"]
    stabilize = ref.get("stabilize", True) and ctx.gain is not None
    if stabilize:
        # nature's y of the stabilized loop is the LQR run's observation sequence
        ynat = run_lqr(cfg.system, trace, cfg.cost, ctx.gain).observations
        K_obs = ctx.gain.K @ np.linalg.inv(cfg.system.C)
        G = markov_operator(ctx.loop, H)
    else:
        ynat = natures_y_rollout(cfg.system, trace)
        K_obs = None
        G = markov_operator(cfg.system, H)
    fro = best_drc_hindsight(G, ynat, cfg.cost, H, R, K_obs=K_obs).total_cost
    l1 = (best_drc_hindsight_l1op(G, ynat, cfg.cost, H, R, K_obs=K_obs).total_cost
          if cfg.oracle_l1op else None)
    return fro, l1


def make_trace(config: ExperimentConfig, noise: str, seed: int):
    s = config.system
    return make_noise(noise, config.noise, config.T, seed, s.d_x, s.d_y)


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> RegretReport:
    """Every controller sees the identical pre-generated trace for each (noise, seed)."""
    ctx = _make_context(config)
    traces = {(noise, seed): make_trace(config, noise, seed)
              for noise in config.noise_kinds for seed in config.seeds}
    hashes = {k: trace_hash(v) for k, v in traces.items()}
    jobs = [(noise, spec, seed) for noise in config.noise_kinds
            for spec in config.controllers for seed in config.seeds]
    threads = thread_count() if threads is None else max(1, threads)

    def run_job(job):
        noise, spec, seed = job
        return _run_controller(ctx, spec, traces[(noise, seed)], seed, noise)

    def run_oracle(key):
        return _oracle(ctx, traces[key])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        oracle_futs = ({k: pool.submit(run_oracle, k) for k in sorted(traces)}
                       if config.oracle else {})
        results = list(pool.map(run_job, jobs))
        oracles = {k: f.result() for k, f in oracle_futs.items()}
    trials = []
    for (noise, spec, seed), res in zip(jobs, results):
        fro, l1 = oracles.get((noise, seed), (None, None))
        trials.append(TrialRecord(noise, spec.label, seed, res.cost, res.total_cost,
                                  hashes[(noise, seed)], fro, l1))
    trials.sort(key=lambda r: (config.noise_kinds.index(r.noise),
                               [c.label for c in config.controllers].index(r.controller), r.seed))
    return RegretReport(trials, config.moving_avg_window, [c.label for c in config.controllers],
                        config.noise_kinds)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.@-]+", "_", text)


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_csv(report: RegretReport, out_dir) -> list:
    """Write per-trial timeseries, summary.csv and aggregate.csv; returns the paths."""
    out = Path(out_dir)
    try:
        (out / "timeseries").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = []
    for r in report.trials:
        ma = moving_average(r.cost, report.window)
        cum = np.cumsum(r.cost)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "cost", "moving_avg", "cum_cost"])
        for t in range(r.cost.shape[0]):
            wr.writerow([t + 1, _fmt(r.cost[t]), _fmt(ma[t]), _fmt(cum[t])])
        p = out / "timeseries" / f"{_slug(r.noise)}__{_slug(r.controller)}__seed{r.seed}.csv"
        _write(p, buf.getvalue())
        paths.append(p)

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["noise", "controller", "seed", "total_cost", "regret_fro", "regret_l1op",
                 "oracle_fro", "oracle_l1op", "final_quarter_mean", "trace_hash"])
    for r in report.trials:
        wr.writerow([r.noise, r.controller, r.seed, _fmt(r.total_cost), _fmt(r.regret_fro),
                     _fmt(r.regret_l1op), _fmt(r.oracle_fro), _fmt(r.oracle_l1op),
                     _fmt(r.final_quarter_mean()), r.trace_hash])
    p = out / "summary.csv"
    _write(p, buf.getvalue())
    paths.append(p)

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["noise", "controller", "t", "moving_avg_mean", "moving_avg_std",
                 "cum_cost_mean", "cum_cost_std"])
    for noise in report.noise_kinds:
        for label in report.controllers:
            rows = report.select(noise, label)
            ma = np.array([moving_average(r.cost, report.window) for r in rows])
            cum = np.array([np.cumsum(r.cost) for r in rows])
            mam, mas = ma.mean(axis=0), ma.std(axis=0)
            cm, cs = cum.mean(axis=0), cum.std(axis=0)
            for t in range(ma.shape[1]):
                wr.writerow([noise, label, t + 1, _fmt(mam[t]), _fmt(mas[t]), _fmt(cm[t]),
                             _fmt(cs[t])])
    p = out / "aggregate.csv"
    _write(p, buf.getvalue())
    paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Estimation study
# ---------------------------------------------------------------------------

def run_estimation_study(config: ExperimentConfig):
    """Estimation error of the Markov operator versus N for every seed and noise kind.

    ``config.estimate`` may set ``N`` (list) and ``H`` (default 5); the system is
    excited open loop. Returns rows (noise, seed, N, H, err_l1_op, rank_deficient).
    """
    est = config.estimate
    Ns = est.get("N", [100, 400, 1600])
    H = est.get("H", 5)
    G_true = markov_operator(config.system, H)
    rows = []
    for noise in config.noise_kinds:
        for seed in config.seeds:
            for N in Ns:
                s = config.system
                trace = make_noise(noise, config.noise, N, seed, s.d_x, s.d_y)
                rng = _controller_rng(seed, f"estimate/N={N}", noise)
                report, _ = run_estimation_phase(s, trace, N, H, rng, G_true=G_true)
                rows.append((noise, seed, N, H, report.err_l1_op, report.rank_deficient))
    return rows


def estimation_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["noise", "seed", "N", "H", "err_l1_op", "rank_deficient"])
    for noise, seed, N, H, err, rd in rows:
        wr.writerow([noise, seed, N, H, _fmt(err), int(rd)])
    return buf.getvalue()
