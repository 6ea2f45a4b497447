"""Replicated experiments: seeding, per-replicate persistence, summaries and law tables.

Replicate seeds
---------------
Every 64-bit value below is taken modulo 2**64::

    mix(z):  z = z + 0x9E3779B97F4A7C15
             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             return z ^ (z >> 31)

    replicate_seed(master, n, r) = mix(mix(mix(master) ^ n) ^ r)
    substream(seed, k)           = mix(seed ^ mix(k))

The dataset of replicate r at sample size n is generated with
``replicate_seed``; the sampler, test set and prior Monte Carlo use
substreams 1, 2 and 3 of it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import criteria as cr
from ._numerics import fsum_mean_stderr
from .rlct import scale_matched_eps_grid, two_temperature_lambda, volume_fit
from .sampler import McmcConfig, SamplerError, run_mcmc, with_beta
from .zoo import generate_data, make_model

MASK64 = (1 << 64) - 1


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def replicate_seed(master: int, n: int, r: int) -> int:
    return splitmix64(splitmix64(splitmix64(int(master) & MASK64) ^ int(n)) ^ int(r))


def substream(seed: int, k: int) -> int:
    return splitmix64((int(seed) & MASK64) ^ splitmix64(int(k)))


# ---------------------------------------------------------------------------
# configuration

ESTIMATORS = ("T", "C", "W", "G", "WBIC", "F_TI", "sBIC", "nu", "lambda_wbic", "lambda_volume")
_ESTIMATOR_ALIASES = {"ν": "nu", "λ_wbic": "lambda_wbic", "λ_volume": "lambda_volume", "GN": "G"}
_MCMC_FIELDS = {f.name for f in fields(McmcConfig)} - {"seed", "beta"}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the line or field."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    n_values: tuple
    replicates: int
    estimators: tuple
    master_seed: int = 0
    output_dir: str = "experiment"
    model_params: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    test_n: int = 100_000
    lambda_hat: Optional[float] = None
    ti_rungs: int = 16
    ti_beta_min: float = 1e-3
    volume_samples: int = 1_000_000
    volume_points: int = 9
    max_failure_fraction: float = 0.10

    def __post_init__(self):
        if not self.n_values:
            raise ConfigError("field 'n_values': must be a nonempty list")
        if any(int(n) != n or n < 1 for n in self.n_values):
            raise ConfigError("field 'n_values': entries must be positive integers")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ConfigError("field 'replicates': must be an integer >= 1")
        if not self.estimators:
            raise ConfigError("field 'estimators': must be nonempty")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"field 'estimators': unknown name(s) {bad}; valid: {list(ESTIMATORS)}")
        if self.master_seed < 0:
            raise ConfigError("field 'master_seed': must be unsigned")
        unknown = set(self.mcmc) - _MCMC_FIELDS
        if unknown:
            raise ConfigError(f"field 'mcmc': unknown key(s) {sorted(unknown)}")
        try:
            McmcConfig(**self.mcmc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'mcmc': {exc}") from None
        try:
            make_model(self.model, **self.model_params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'model': {exc}") from None
        if self.test_n < 1:
            raise ConfigError("field 'test_n': must be >= 1")
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "estimators", tuple(e for e in ESTIMATORS if e in self.estimators))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)} - {"model_params"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"field {sorted(unknown)[0]!r}: unknown field")
        for req in ("model", "n_values", "replicates", "estimators"):
            if req not in raw:
                raise ConfigError(f"field {req!r}: required")
        d = dict(raw)
        model = d.pop("model")
        if isinstance(model, dict):
            if "name" not in model:
                raise ConfigError("field 'model.name': required")
            d["model_params"] = dict(model.get("params", {}))
            model = model["name"]
        d["model"] = str(model)
        ests = d["estimators"]
        if isinstance(ests, str) or not isinstance(ests, list):
            raise ConfigError("field 'estimators': must be a list")
        d["estimators"] = tuple(_ESTIMATOR_ALIASES.get(e, e) for e in ests)
        if not isinstance(d["n_values"], list):
            raise ConfigError("field 'n_values': must be a list")
        d["n_values"] = tuple(d["n_values"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str, source: str = "config") -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_json(path.read_text(), str(path))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = {"name": d.pop("model"), "params": d.pop("model_params")}
        d["n_values"] = list(self.n_values)
        d["estimators"] = list(self.estimators)
        return d

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def mcmc_config(self, seed: int) -> McmcConfig:
        return McmcConfig(**{**self.mcmc, "seed": seed})


# ---------------------------------------------------------------------------
# one replicate


def _row(name: str, value, mcse) -> list:
    return [name, float(value), float(mcse)]


def compute_replicate(cfg: ExperimentConfig, n: int, r: int) -> list:
    """Rows ``[estimator, value, mcse]`` for one dataset; centred rows are scaled by n."""
    model = make_model(cfg.model, **cfg.model_params)
    seed = replicate_seed(cfg.master_seed, n, r)
    data = generate_data(model, n, seed)
    mc = cfg.mcmc_config(substream(seed, 1))
    est = set(cfg.estimators)
    Ln0 = cr.empirical_loss(model, data, model.theta0)
    L0 = model.analytic_L0
    lam = cfg.lambda_hat if cfg.lambda_hat is not None else model.known_lambda
    rows: list = []
    nu = None

    if est & {"T", "C", "W", "G", "nu"}:
        chains = run_mcmc(model, data, with_beta(mc, 1.0))
        ll = cr.loglik_matrix(chains, data)
        t = cr._training(chains, ll)
        loo = cr._loo(chains, ll)
        w, v = cr._waic_from(chains, ll)
        if "T" in est:
            rows += [_row("T", t.value, t.mcse), _row("nT_excess", n * (t.value - Ln0), n * t.mcse)]
        if "C" in est:
            rows += [_row("C", loo.value, loo.mcse), _row("nC_excess", n * (loo.value - Ln0), n * loo.mcse)]
            rows.append(_row("C_unstable", float(loo.unstable), 0.0))
        if "W" in est:
            rows += [_row("W", w.value, w.mcse), _row("nW_excess", n * (w.value - Ln0), n * w.mcse)]
        if "nu" in est:
            nu = cr.Estimate(0.5 * n * v.value, 0.5 * n * v.mcse)
            rows.append(_row("nu", nu.value, nu.mcse))
        if "G" in est:
            g = cr.generalization_loss_estimate(chains, model, cfg.test_n, substream(seed, 2))
            rows.append(_row("G", g.value, g.mcse))
            if L0 is not None:
                rows.append(_row("nG_excess", n * (g.value - L0), n * g.mcse))
                if "W" in est:
                    rows.append(
                        _row("nGW_sum", n * (g.value - L0) + n * (w.value - Ln0), n * math.hypot(g.mcse, w.mcse))
                    )

    if "WBIC" in est:
        wb = cr.wbic_estimate(model, data, mc)
        theta_hat = cr.mle_fit(model, data)
        nLhat = n * cr.empirical_loss(model, data, theta_hat)
        rows += [
            _row("WBIC", wb.value, wb.mcse),
            _row("WBIC_excess", wb.value - n * Ln0, wb.mcse),
            _row("WBIC_mle_ratio", (wb.value - nLhat) / math.log(n), wb.mcse / math.log(n)),
        ]
    if "F_TI" in est:
        ladder = cr.default_ti_ladder(cfg.ti_rungs, cfg.ti_beta_min)
        fe = cr.free_energy_ti_details(model, data, ladder, mc)
        rows += [_row("F_TI", fe.value, fe.mcse), _row("F_TI_excess", fe.value - n * Ln0, fe.mcse)]
    if "sBIC" in est:
        if lam is None:
            raise ValueError("sBIC needs lambda_hat or a model with a known lambda")
        rows.append(_row("sBIC", cr.sbic(model, data, float(lam)), 0.0))
    if "lambda_wbic" in est:
        lw = two_temperature_lambda(model, data, with_beta(mc, 1.0))
        rows.append(_row("lambda_wbic", lw.value, lw.mcse))
    if "lambda_volume" in est:
        vf = volume_fit(model, scale_matched_eps_grid(n, cfg.volume_points), cfg.volume_samples, substream(seed, 3))
        rows.append(_row("lambda_volume", vf.lam, vf.stderr))
    return rows


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _replicate_path(out: Path, n: int, r: int) -> Path:
    return out / "replicates" / f"n{n}_r{r:05d}.json"


def _run_one(args) -> tuple:
    cfg_dict, out, n, r = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    path = _replicate_path(Path(out), n, r)
    record: dict[str, Any] = {"fingerprint": cfg.fingerprint(), "n": n, "replicate": r}
    try:
        record["rows"] = compute_replicate(cfg, n, r)
        record["status"] = "ok"
    except (SamplerError, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
    _atomic_write(path, json.dumps(record, sort_keys=True) + "\n")
    return n, r, record["status"]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class ManifestError(RuntimeError):
    pass


class ExperimentAborted(RuntimeError):
    pass


def _verify_manifest(out: Path) -> None:
    man = out / "manifest.json"
    if not man.exists():
        return
    recorded = json.loads(man.read_text()).get("files", {})
    for rel, digest in recorded.items():
        p = out / rel
        if p.exists() and _sha256(p) != digest:
            raise ManifestError(f"manifest hash mismatch for {rel}")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


@dataclass
class ExperimentSummary:
    rows: list
    laws: list
    failures: list
    out: Path

    def lookup(self, n: int, estimator: str) -> tuple:
        for row in self.rows:
            if row[1] == n and row[2] == estimator:
                return row[3], row[4], row[5]
        raise KeyError((n, estimator))


def summarize_raw(raw_rows: list) -> list:
    """(model, n, estimator, mean, stderr, count) from long-format raw rows, in first-seen order."""
    groups: dict = {}
    for model, n, _r, est, value, _mcse in raw_rows:
        groups.setdefault((model, n, est), []).append(value)
    out = []
    for (model, n, est), vals in groups.items():
        m, se = fsum_mean_stderr(vals)
        out.append([model, n, est, m, se, len(vals)])
    return out


def _slope_with_se(x, y, se) -> tuple:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    c = xc / np.sum(xc * xc)
    return float(np.dot(c, y)), float(math.sqrt(np.sum((c * np.asarray(se)) ** 2)))


def law_table(summary_rows: list, model_lambda: Optional[float]) -> list:
    """Predicted-versus-observed rows ``[law, n, predicted, observed, stderr]``."""
    get = {(r[1], r[2]): (r[3], r[4]) for r in summary_rows}
    ns = sorted({r[1] for r in summary_rows})
    lam = None if model_lambda is None else float(model_lambda)
    laws = []
    simple = [
        ("n(G-L0) = lambda", "nG_excess", 1.0),
        ("n(C-Ln0) = lambda", "nC_excess", 1.0),
        ("n(W-Ln0) = lambda", "nW_excess", 1.0),
        ("n(G-L0)+n(W-Ln0) = 2 lambda", "nGW_sum", 2.0),
        ("(WBIC-nLn(mle))/log n = lambda", "WBIC_mle_ratio", 1.0),
        ("two-temperature lambda", "lambda_wbic", 1.0),
        ("volume-law lambda", "lambda_volume", 1.0),
    ]
    for n in ns:
        for law, key, mult in simple:
            if (n, key) in get:
                m, se = get[(n, key)]
                laws.append([law, n, None if lam is None else mult * lam, m, se])
        if (n, "nT_excess") in get and (n, "nu") in get:
            m, se = get[(n, "nT_excess")]
            nu, _ = get[(n, "nu")]
            laws.append(["n(T-Ln0) = lambda - 2 nu", n, None if lam is None else lam - 2 * nu, m, se])
    fe = [(n, *get[(n, "F_TI_excess")]) for n in ns if (n, "F_TI_excess") in get]
    if len(fe) >= 2:
        slope, se = _slope_with_se([math.log(n) for n, _, _ in fe], [m for _, m, _ in fe], [s for _, _, s in fe])
        laws.append(["slope of F-nLn0 in log n = lambda", "", lam, slope, se])
    return laws


def run_experiment(
    config: ExperimentConfig, out: Optional[os.PathLike] = None, jobs: int = 1, resume: bool = True, log=None
) -> ExperimentSummary:
    log = sys.stderr if log is None else log
    out = Path(config.output_dir if out is None else out)
    (out / "replicates").mkdir(parents=True, exist_ok=True)
    _verify_manifest(out)
    fp = config.fingerprint()
    todo = []
    for n in config.n_values:
        for r in range(config.replicates):
            p = _replicate_path(out, n, r)
            if resume and p.exists():
                rec = json.loads(p.read_text())
                if rec.get("fingerprint") != fp:
                    raise ManifestError(f"{p} was produced by a different configuration")
                continue
            todo.append((config.to_dict(), str(out), n, r))
    if todo:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                list(ex.map(_run_one, todo, chunksize=1))
        else:
            for t in todo:
                _run_one(t)

    spec = make_model(config.model, **config.model_params)
    model_name = spec.name
    raw_rows, failures = [], []
    for n in config.n_values:
        for r in range(config.replicates):
            rec = json.loads(_replicate_path(out, n, r).read_text())
            if rec["status"] != "ok":
                failures.append((n, r, rec.get("error", "")))
                print(f"warning: replicate n={n} r={r} failed and is excluded: {rec.get('error', '')}", file=log)
                continue
            for est, value, mcse in rec["rows"]:
                raw_rows.append([model_name, n, r, est, value, mcse])
    total = len(config.n_values) * config.replicates
    if failures and len(failures) > config.max_failure_fraction * total:
        raise ExperimentAborted(f"{len(failures)} of {total} replicates failed; aborting")

    summary = summarize_raw(raw_rows)
    lam = config.lambda_hat if config.lambda_hat is not None else spec.known_lambda
    laws = law_table(summary, lam)
    _atomic_write(
        out / "raw.csv",
        _csv_text(["model", "n", "replicate", "estimator", "value", "mcse"], [[_fmt(v) for v in row] for row in raw_rows]),
    )
    _atomic_write(
        out / "summary.csv",
        _csv_text(["model", "n", "estimator", "mean", "stderr", "count"], [[_fmt(v) for v in row] for row in summary]),
    )
    _atomic_write(
        out / "laws.csv",
        _csv_text(["law", "n", "predicted", "observed", "stderr"], [[_fmt(v) for v in row] for row in laws]),
    )
    saved = config.to_dict()
    saved.pop("output_dir")
    _atomic_write(out / "config.json", json.dumps(saved, indent=2, sort_keys=True) + "\n")
    write_manifest(out)
    return ExperimentSummary(summary, laws, failures, out)


def write_manifest(out: Path) -> Path:
    files = sorted(
        p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json" and ".tmp" not in p.name
    )
    manifest = {"files": {rel: _sha256(out / rel) for rel in files}}
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
