"""Config-driven experiments behind the command line.

A config is one JSON document naming an ``experiment`` plus its parameters.
Every experiment returns a payload whose ``records`` are MetricsRecord rows;
the payload is a pure function of the config, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .core import (ConfigurationError, GridStep, MechanismError, MidrInstance, PostedThreshold,
                   TopKByScore, make_rng, random_midr_instance)
from .metrics import (MetricsRecord, metrics_record, precision, revenue_ratio, risk_stats,
                      welfare_ratio)
from .reduction_midr import ProductGammaDistribution, expected_payments, run_optmidr
from .reduction_sp import (BksParams, exact_expected_allocation, exact_expected_payments,
                           run_bks_batch)
from .payments import archer_tardos_payment
from .scenarios_ppc import (NaiveVcgSampler, PpcBksSampler, PpcMultiInstance,
                            PpcSeparableInstance, appendix_a_example, ppc_midr_instance,
                            ppc_optmidr_payment_samples)
from .verify import (mc_truthfulness, misreport_grid, verify_bks_payment_identity,
                     verify_midr_truthfulness)

__all__ = ["EXPERIMENTS", "PropertyViolation", "load_config", "parse_gammas", "run_experiment",
           "records_to_csv", "records_to_json", "csv_to_records", "write_result"]

EXPERIMENTS = ("run-midr", "run-bks", "verify", "sweep", "scenario-ppc")
MIDR_TOL = 1e-9
BKS_TOL = 1e-6


class PropertyViolation(MechanismError):
    """An experiment ran but a checked property failed; the payload is attached."""

    def __init__(self, message: str, payload: dict):
        super().__init__(message)
        self.payload = payload


# ---------------------------------------------------------------------------
# configs


def builtin_configs() -> list:
    return sorted(p.name[:-5] for p in resources.files("mechlab.configs").iterdir()
                  if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config from a path, or by name from the bundled configs."""
    path = Path(ref)
    try:
        if path.is_file():
            text = path.read_text()
        else:
            bundled = resources.files("mechlab.configs") / f"{ref}.json"
            if not bundled.is_file():
                raise ConfigurationError(f"no config file or bundled config named {ref!r}")
            text = bundled.read_text()
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {ref!r} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict) or cfg.get("experiment") not in EXPERIMENTS:
        raise ConfigurationError(f"config must name an experiment in {EXPERIMENTS}")
    return cfg


def parse_gammas(spec) -> list:
    """``"0.1:0.9:0.1"`` (inclusive) or a list of numbers."""
    if isinstance(spec, (list, tuple)):
        return [float(g) for g in spec]
    try:
        start, stop, step = (float(x) for x in str(spec).split(":"))
    except ValueError:
        raise ConfigurationError(f"gammas must look like START:STOP:STEP, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ConfigurationError(f"empty gamma range {spec!r}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) for k in range(count)]


def _gamma(cfg: dict) -> float:
    g = float(cfg.get("gamma", 0.3))
    if not 0.0 < g < 1.0:
        raise ConfigurationError(f"gamma must lie in (0, 1), got {g}")
    return g


def build_midr_instance(spec: dict, seed: int) -> MidrInstance:
    """Inline ``valuations``/``range`` or a seeded ``generator``.

    Generators: ``random-midr`` (random valuations and lotteries) and
    ``single-item`` (one item, outcome j gives it to agent j, random values).
    """
    if "generator" in spec:
        rng = make_rng(seed, 1_000_003)
        n = int(spec["n"])
        if spec["generator"] == "random-midr":
            return random_midr_instance(rng, n, int(spec.get("k", 4)), int(spec.get("d", 5)))
        if spec["generator"] == "single-item":
            values = np.diag(rng.uniform(0.0, 10.0, size=n))
            return MidrInstance(tuple(f"to{j}" for j in range(n)), values, np.eye(n))
        raise ConfigurationError(f"unknown instance generator {spec['generator']!r}")
    k = len(spec["valuations"][0])
    return MidrInstance(tuple(spec.get("outcomes", range(k))), spec["valuations"], spec["range"])


def build_allocation(spec: dict, n: int, seed: int):
    family = spec.get("family", "grid-step")
    if family == "grid-step":
        if "breaks" in spec:
            return GridStep(spec["breaks"], spec["tables"], spec.get("a_max", 1.0))
        return GridStep.random(make_rng(seed, 1_000_004), n, int(spec.get("cuts", 3)))
    if family == "top-k":
        return TopKByScore(spec["weights"], int(spec["k"]))
    if family == "posted-threshold":
        return PostedThreshold(spec["thresholds"], spec.get("a_max", 1.0))
    raise ConfigurationError(f"unknown allocation family {family!r}")


# ---------------------------------------------------------------------------
# experiments


def run_experiment(cfg: dict) -> dict:
    name = cfg["experiment"]
    seed = int(cfg.get("seed", 0))
    try:
        runner = _RUNNERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown experiment {name!r}") from None
    try:
        payload = runner(cfg, seed)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad config for {name}: {exc!r}") from None
    payload = {"experiment": name, "seed": seed, **payload}
    if payload.get("violations"):
        raise PropertyViolation("; ".join(payload["violations"]), payload)
    return payload


def _run_midr(cfg, seed):
    inst = build_midr_instance(cfg["instance"], seed)
    gamma = _gamma(cfg)
    runs = int(cfg.get("runs", 1000))
    dist = ProductGammaDistribution(gamma, inst.n)
    pays = np.zeros(inst.n)
    calls = set()
    for r in range(runs):
        run = run_optmidr(inst, None, gamma, make_rng(seed, r), seed=seed)
        pays += run.payments
        calls.add(run.oracle_calls)
    residual = float(verify_midr_truthfulness(inst, None, dist).max())
    rec = metrics_record("run-midr", inst, dist, seed, truth_residual_max=residual)
    violations = []
    if calls != {1}:
        violations.append(f"oracle call counts {sorted(calls)}")
    if residual > MIDR_TOL:
        violations.append(f"truthfulness residual {residual!r} > {MIDR_TOL}")
    return {"records": [rec.as_dict()], "runs": runs,
            "mean_realized_payments": (pays / max(runs, 1)).tolist(),
            "expected_payments": expected_payments(inst, dist).tolist(),
            "violations": violations}


def _bks_record(A, b, gamma, seed, residual):
    n = len(b)
    params = BksParams(gamma, n)
    alloc = A(b)
    welfare = float(np.dot(b, alloc))
    revenue = sum(archer_tardos_payment(A, b, i) for i in range(n))
    if isinstance(A, GridStep):
        w_ratio = float(np.dot(b, exact_expected_allocation(A, b, gamma)))
        r_ratio = float(exact_expected_payments(A, b, gamma).sum())
    else:
        batch = run_bks_batch(A, b, gamma, make_rng(seed, 1_000_005), 100_000)
        w_ratio = float((batch.allocation @ b).mean())
        r_ratio = float(batch.payments.sum(axis=1).mean())
    w_ratio = w_ratio / welfare if welfare > 0 else 1.0
    r_ratio = r_ratio / revenue if revenue > 0 else 1.0
    var = (1.0 - gamma) / gamma
    return MetricsRecord("run-bks", n, gamma, seed, precision(params), w_ratio, r_ratio,
                         var, max(1.0, var), residual)


def _run_bks(cfg, seed):
    b = np.asarray(cfg["bids"], dtype=float)
    gamma = _gamma(cfg)
    A = build_allocation(cfg.get("allocation", {}), len(b), seed)
    runs = int(cfg.get("runs", 10_000))
    batch = run_bks_batch(A, b, gamma, make_rng(seed), runs)
    utility = batch.allocation * b - batch.payments
    residual = 0.0
    if isinstance(A, GridStep) and A.n <= 3:
        residual = float(verify_bks_payment_identity(A, b, gamma).max())
    rec = _bks_record(A, b, gamma, seed, residual)
    violations = []
    if batch.calls_per_run != 1:
        violations.append(f"oracle calls per run {batch.calls_per_run}")
    if utility.min() < -1e-12:
        violations.append(f"ex-post IR violated: min utility {utility.min()!r}")
    if residual > BKS_TOL:
        violations.append(f"BKS payment identity residual {residual!r} > {BKS_TOL}")
    return {"records": [rec.as_dict()], "runs": runs,
            "kept_fraction": float(batch.kept.all(axis=1).mean()),
            "min_realized_utility": float(utility.min()),
            "mean_payments": batch.payments.mean(axis=0).tolist(),
            "violations": violations}


def _run_verify(cfg, seed):
    gammas = parse_gammas(cfg.get("gammas", [0.1, 0.3, 0.5]))
    count = int(cfg.get("instances", 100))
    lo, hi = cfg.get("n_range", [2, 6])
    records, violations = [], []
    for gamma in gammas:
        worst, w_min, r_min = 0.0, math.inf, math.inf
        for r in range(count):
            rng = make_rng(seed, r)
            n = int(rng.integers(lo, hi + 1))
            inst = random_midr_instance(rng, n, int(rng.integers(2, 9)), int(rng.integers(1, 9)))
            dist = ProductGammaDistribution(gamma, n)
            worst = max(worst, float(verify_midr_truthfulness(inst, None, dist).max()))
            w_min = min(w_min, welfare_ratio(inst, dist))
            r_min = min(r_min, revenue_ratio(inst, dist))
        dist = ProductGammaDistribution(gamma, hi)
        var, mx = risk_stats(dist)
        records.append(MetricsRecord("verify", hi, gamma, seed, precision(dist),
                                     w_min, r_min, var, mx, worst).as_dict())
        if worst > MIDR_TOL:
            violations.append(f"MIDR residual {worst!r} at gamma={gamma}")
    bks_worst = 0.0
    for r in range(int(cfg.get("bks_instances", 25))):
        rng = make_rng(seed, 2_000_000 + r)
        n = int(rng.integers(1, 4))
        A = GridStep.random(rng, n)
        b = rng.uniform(0.0, 2.5, size=n)
        for gamma in (0.2, 0.5, 0.8):
            bks_worst = max(bks_worst, float(verify_bks_payment_identity(A, b, gamma).max()))
    if bks_worst > BKS_TOL:
        violations.append(f"BKS identity residual {bks_worst!r}")
    return {"records": records, "bks_residual_max": bks_worst, "violations": violations}


def _run_sweep(cfg, seed):
    n = int(cfg.get("n", 3))
    spec = cfg.get("instance", {"generator": "single-item"})
    inst = build_midr_instance({**spec, "n": n}, seed)
    records = []
    for gamma in parse_gammas(cfg.get("gammas", "0.1:0.9:0.1")):
        dist = ProductGammaDistribution(gamma, n)
        residual = float(verify_midr_truthfulness(inst, None, dist).max())
        records.append(metrics_record("sweep", inst, dist, seed,
                                      truth_residual_max=residual).as_dict())
    return {"records": records, "violations": []}


def _run_ppc(cfg, seed):
    case = cfg.get("case", "appendix-a")
    samples = int(cfg.get("samples", 200_000))
    gamma = _gamma(cfg)
    if case == "appendix-a":
        report = appendix_a_example().as_dict()
        inst = PpcSeparableInstance.appendix_a()
        grid = misreport_grid(float(inst.values[0]))
        naive = mc_truthfulness(NaiveVcgSampler(inst, 0), grid, len(grid) // 2, samples, seed)
        bks = mc_truthfulness(PpcBksSampler(inst, 0, gamma), grid, len(grid) // 2, samples, seed)
        violations = [] if bks.truthful_is_max() else ["BKS-wrapped auction not truthful"]
        if not report["profitable"]:
            violations.append("appendix example: lying should be profitable")
        return {"records": [], "report": report,
                "naive_truthful": naive.truthful_is_max(),
                "naive_best_report": float(grid[naive.best_index]),
                "naive_gain_at_zero": float(naive.gain_over_truth[0]),
                "bks_truthful": bks.truthful_is_max(),
                "violations": violations}
    if case == "separable-bks":
        out, violations = [], []
        for skew in cfg.get("skews", [1.05, 1.1, 1.25]):
            inst = PpcSeparableInstance.appendix_a(float(skew))
            grid = misreport_grid(float(inst.values[0]))
            curve = mc_truthfulness(PpcBksSampler(inst, 0, gamma), grid, len(grid) // 2,
                                    samples, seed)
            out.append({"skew": skew, "truthful": curve.truthful_is_max(),
                        "worst_z": curve.worst_violation()})
            if not curve.truthful_is_max():
                violations.append(f"BKS not truthful at skew {skew}")
        return {"records": [], "curves": out, "violations": violations}
    if case == "multi-midr":
        n, m = int(cfg.get("n", 3)), int(cfg.get("m", 2))
        ppc = PpcMultiInstance.random(make_rng(seed, 1_000_006), n, m)
        inst = ppc_midr_instance(ppc)
        dist = ProductGammaDistribution(gamma, n)
        residual = float(verify_midr_truthfulness(inst, None, dist).max())
        rec = metrics_record("scenario-ppc", inst, dist, seed, truth_residual_max=residual)
        pays = ppc_optmidr_payment_samples(ppc, gamma, make_rng(seed), samples)
        exact = expected_payments(inst, dist)
        z = np.abs(pays.mean(axis=0) - exact) / np.maximum(pays.std(axis=0) / math.sqrt(samples),
                                                           1e-300)
        violations = []
        if residual > MIDR_TOL:
            violations.append(f"truthfulness residual {residual!r}")
        if z.max() > 4.0:
            violations.append(f"click-realized payment mean off by {z.max():.2f} sigma")
        if rec.welfare_ratio < 1 - gamma - 1e-12:
            violations.append(f"welfare ratio {rec.welfare_ratio!r} below 1 - gamma")
        return {"records": [rec.as_dict()], "click_payment_z": z.tolist(),
                "violations": violations}
    raise ConfigurationError(f"unknown scenario case {case!r}")


_RUNNERS = {"run-midr": _run_midr, "run-bks": _run_bks, "verify": _run_verify,
            "sweep": _run_sweep, "scenario-ppc": _run_ppc}


# ---------------------------------------------------------------------------
# emission


def records_to_csv(records: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MetricsRecord.columns(), lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({k: _fmt(rec[k]) for k in MetricsRecord.columns()})
    return buf.getvalue()


def csv_to_records(text: str) -> list:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: _parse(k, v) for k, v in row.items()})
    return rows


def records_to_json(payload) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _fmt(value):
    # repr of a float is the shortest string that round-trips
    return repr(float(value)) if isinstance(value, float) else str(value)


_INT_COLUMNS = {"n", "seed"}


def _parse(column: str, text: str):
    if column == "experiment":
        return text
    return int(text) if column in _INT_COLUMNS else float(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_result(payload: dict, out_dir: Path, fmt: str = "json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{payload['experiment']}-seed{payload['seed']}"
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        path.write_text(records_to_csv(payload["records"]))
    else:
        path = out_dir / f"{stem}.json"
        path.write_text(records_to_json(payload))
    return path
