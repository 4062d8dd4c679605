"""Experiment pipeline behind the command line: configs, repetitions, grids.

One repetition of the SVM experiment is

    split -> fold plan -> build model -> run_bilevel -> re-solve the lower
    level at (mu, wbar) -> CV error -> post-process on the training set ->
    test error -> record

Records carry the fixed result fields plus the fully resolved config, so a
record alone is enough to rerun it.  Wall time covers everything after the
data file has been parsed.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bilevel import run_bilevel, solve_lower
from .data import Dataset, fold_plan, load_libsvm, split
from .dca import CRITERIA, STOPPING, VARIANTS, DcaParams, SufficientDecreaseViolation
from .errors import BidcaError, ConfigError, DataError
from .models import lasso, svm
from .models.toys import TOY_IDS, build_toy

log = logging.getLogger(__name__)

MODELS = ("svm-cv", "lasso-cv")

# Training-set sizes used by the published experiments; other files use a
# half split rounded up.
TRAIN_SIZES = {
    "australian_scale": 345,
    "breast-cancer_scale": 339,
    "diabetes_scale": 384,
    "mushrooms": 4062,
    "phishing": 5526,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "svm-cv"
    data: str | None = None
    folds: int = 3
    epsilon: float = 1e-2
    tol: float = 1e-2
    algo: str = "ipdca"
    criterion: str = "summable"
    seeds: tuple[int, ...] = (0,)
    beta0: float = 1.0
    delta_beta: float = 5.0
    rho: float = 1e-2
    sigma: float = 1e-2
    zeta0: float = 1e-2
    max_iter: int = 500
    beta_max: float = 1e6
    stopping: str | None = None
    n_train: int | None = None
    jobs: int = 1
    debug: bool = False
    out: str | None = None

    def __post_init__(self):
        seeds = tuple(int(s) for s in self.seeds)
        object.__setattr__(self, "seeds", seeds)
        if self.stopping is None:
            # the SVM experiments use the relative-step rule; everything
            # else defaults to the plain max(step, t) test
            object.__setattr__(self, "stopping", "paper" if self.model == "svm-cv" else "algorithm")
        self.validate()

    @property
    def toy(self) -> str | None:
        return self.model[4:] if self.model.startswith("toy:") else None

    def validate(self) -> None:
        if self.model not in MODELS and self.toy not in TOY_IDS:
            raise ConfigError(f"unknown model {self.model!r}; choose svm-cv, lasso-cv "
                              f"or toy:<{'|'.join(TOY_IDS)}>")
        if self.toy is None and not self.data:
            raise ConfigError(f"model {self.model} needs a data file")
        if not (isinstance(self.folds, int) and self.folds >= 2):
            raise ConfigError("folds must be an integer >= 2")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ConfigError("epsilon must be a finite number >= 0")
        if self.algo not in VARIANTS:
            raise ConfigError(f"algo must be one of {', '.join(VARIANTS)}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {', '.join(CRITERIA)}")
        if self.stopping not in STOPPING:
            raise ConfigError(f"stopping must be one of {', '.join(STOPPING)}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.n_train is not None and self.n_train < 2:
            raise ConfigError("n_train must be at least 2")
        if not (isinstance(self.jobs, int) and self.jobs >= 1):
            raise ConfigError("jobs must be a positive integer")
        self.params()

    def params(self) -> DcaParams:
        return DcaParams(rho=self.rho, sigma=self.sigma, beta0=self.beta0,
                         delta_beta=self.delta_beta, criterion=self.criterion,
                         zeta0=self.zeta0, tol=self.tol, max_iter=self.max_iter,
                         beta_max=self.beta_max, stopping=self.stopping, debug=self.debug)

    def resolved(self) -> dict:
        """Every setting with defaults filled in; output paths and job counts excluded."""
        out = dataclasses.asdict(self)
        for key in ("out", "jobs"):
            out.pop(key)
        out["seeds"] = list(self.seeds)
        return out

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=(seed,))


def config_from_record(rec: dict) -> ExperimentConfig:
    cfg = dict(rec["config"])
    cfg["seeds"] = tuple(cfg["seeds"])
    return ExperimentConfig(**cfg)


# ---------------------------------------------------------------------------
# data


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data is None:
        raise ConfigError("no data file given")
    numeric = cfg.model == "lasso-cv"
    return load_libsvm(cfg.data, numeric_labels=numeric)


def train_size(cfg: ExperimentConfig, data: Dataset) -> int:
    if cfg.n_train is not None:
        n = cfg.n_train
    else:
        n = TRAIN_SIZES.get(Path(cfg.data).name, math.ceil(0.5 * data.size))
    if not 0 < n < data.size:
        raise DataError(f"training size {n} impossible for {data.size} rows")
    return n


def _base_record(cfg: ExperimentConfig, seed: int, name: str, method: str) -> dict:
    return {"dataset": name, "method": method, "epsilon": cfg.epsilon, "tol": cfg.tol,
            "seed": seed, "cv_error": None, "test_error": None, "time_sec": None,
            "iters": None, "beta_final": None, "status": "", "config": cfg.for_seed(seed).resolved()}


# ---------------------------------------------------------------------------
# one repetition


def _solve_svm(cfg: ExperimentConfig, seed: int, data: Dataset, rec: dict) -> None:
    train, test = split(data, seed, n_train=train_size(cfg, data))
    plan = fold_plan(train, cfg.folds, seed)
    p = svm.build_svm_cv(train, plan)
    res = run_bilevel(p, cfg.epsilon, cfg.params(), cfg.algo, start=svm.svm_start(p))
    _fill_trace(rec, res)
    mu, wbar = svm.hyperparameters(p, res.x)
    cv, _ = svm.cv_error(p, res.x)
    clf = svm.post_process(mu, wbar, train, cfg.folds)
    rec.update(cv_error=cv, test_error=svm.test_error(clf, test),
               hyperparameters={"lambda": 1.0 / mu, "mu": mu, "wbar": wbar.tolist()})


def _solve_lasso(cfg: ExperimentConfig, seed: int, data: Dataset, rec: dict) -> None:
    train, test = split(data, seed, n_train=train_size(cfg, data))
    plan = fold_plan(train, cfg.folds, seed)
    p = lasso.build_lasso_cv(train, plan)
    res = run_bilevel(p, cfg.epsilon, cfg.params(), cfg.algo, start=lasso.lasso_start(p))
    _fill_trace(rec, res)
    lam = float(res.x[0])
    cv, _ = lasso.cv_error(p, res.x)
    w = lasso.refit(lam, train, cfg.folds)
    rec.update(cv_error=cv, test_error=lasso.test_mse(w, test), hyperparameters={"lambda": lam})


def _solve_toy(cfg: ExperimentConfig, seed: int, rec: dict) -> None:
    p = build_toy(cfg.toy)
    res = run_bilevel(p, cfg.epsilon, cfg.params(), cfg.algo)
    _fill_trace(rec, res)
    z = np.concatenate([res.x, res.y])
    value = float(p.F1.value(z) - p.F2.value(z))
    rec.update(cv_error=value, objective=value, x=res.x.tolist(), y=res.y.tolist())


def _fill_trace(rec: dict, res) -> None:
    tr = res.trace
    rec.update(iters=tr.iterations, beta_final=tr.beta_final, status=res.status,
               kkt_residual=tr.kkt_residual, lambda_multiplier=res.lam,
               decrease_violations=tr.decrease_violations)


def solve_one(cfg: ExperimentConfig, seed: int, data: Dataset | None = None) -> dict:
    """Run one repetition; solver failures end up in ``status``, never raised."""
    name = cfg.model if cfg.toy else Path(cfg.data).name
    rec = _base_record(cfg, seed, name, cfg.algo)
    t0 = time.perf_counter()
    try:
        if cfg.toy:
            _solve_toy(cfg, seed, rec)
        else:
            data = load_dataset(cfg) if data is None else data
            t0 = time.perf_counter()
            if cfg.model == "svm-cv":
                _solve_svm(cfg, seed, data, rec)
            else:
                _solve_lasso(cfg, seed, data, rec)
    except (ConfigError, DataError):
        raise
    except (BidcaError, SufficientDecreaseViolation) as exc:
        # with debug on, a decrease violation ends the run but not the batch
        rec["status"] = type(exc).__name__
        rec["message"] = str(exc)
        if isinstance(exc, SufficientDecreaseViolation):
            rec["decrease_violations"] = 1
        log.warning("seed %d failed: %s", seed, exc)
    rec["time_sec"] = time.perf_counter() - t0
    return rec


def _solve_task(args):
    cfg, seed = args
    return solve_one(cfg, seed)


def cmd_solve(cfg: ExperimentConfig) -> list[dict]:
    """All repetitions of ``cfg``, ordered by seed."""
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_solve_task, [(cfg, s) for s in cfg.seeds]))
    data = None if cfg.toy else load_dataset(cfg)
    return [solve_one(cfg, s, data) for s in cfg.seeds]


# ---------------------------------------------------------------------------
# grid search baseline


@dataclass(frozen=True)
class GridSpec:
    lambdas: tuple[float, ...]
    wbars: tuple[float, ...] = (1.5,)

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "wbars", tuple(float(v) for v in self.wbars))
        if not self.lambdas or min(self.lambdas) <= 0:
            raise ConfigError("grid lambdas must be positive and nonempty")
        if not self.wbars or min(self.wbars) <= 0:
            raise ConfigError("grid wbar values must be positive and nonempty")

    @classmethod
    def log_spaced(cls, lo: float, hi: float, count: int, wbars=(1.5,)) -> "GridSpec":
        if not (0 < lo <= hi) or count < 1:
            raise ConfigError("log grid needs 0 < lo <= hi and count >= 1")
        if count == 1:
            return cls((lo,), wbars)
        return cls(tuple(np.logspace(math.log10(lo), math.log10(hi), count)), wbars)


def parse_range(text: str) -> tuple[float, float, int]:
    """``lo:hi:count`` or a single value ``v`` (a one-point grid)."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            v = float(parts[0])
            return v, v, 1
        if len(parts) == 3:
            return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        pass
    raise ConfigError(f"bad grid range {text!r}; use lo:hi:count")


def _grid_points(p, cfg: ExperimentConfig, grid: GridSpec):
    """Yield (hyperparameters, x) for every grid point of the model."""
    for lam in grid.lambdas:
        if cfg.model == "svm-cv":
            lay = p.meta["layout"]
            for wb in grid.wbars:
                x = p.X.project(np.concatenate([[1.0 / lam], np.full(lay.n, wb)]))
                yield {"lambda": lam, "wbar": wb}, x
        else:
            yield {"lambda": lam}, p.X.project(np.array([lam]))


def grid_one(cfg: ExperimentConfig, grid: GridSpec, seed: int, data: Dataset | None = None) -> dict:
    if cfg.toy is not None and cfg.toy != "lasso":
        raise ConfigError("grid search needs svm-cv, lasso-cv or toy:lasso")
    name = cfg.model if cfg.toy else Path(cfg.data).name
    rec = _base_record(cfg, seed, name, "grid")
    t0 = time.perf_counter()
    try:
        if cfg.toy:
            p, train, test = build_toy("lasso"), None, None
        else:
            data = load_dataset(cfg) if data is None else data
            t0 = time.perf_counter()
            train, test = split(data, seed, n_train=train_size(cfg, data))
            plan = fold_plan(train, cfg.folds, seed)
            build = svm.build_svm_cv if cfg.model == "svm-cv" else lasso.build_lasso_cv
            p = build(train, plan)
        points = []
        for hp, x in _grid_points(p, cfg, grid):
            sol = solve_lower(p, x)
            points.append({**hp, "cv_error": float(p.F1.value(np.concatenate([sol.x, sol.y])))})
        best = min(points, key=lambda r: r["cv_error"])
        rec.update(cv_error=best["cv_error"], iters=len(points), status="converged",
                   grid=points, hyperparameters={k: v for k, v in best.items() if k != "cv_error"})
        if test is not None:
            if cfg.model == "svm-cv":
                b = p.meta["bounds"]
                wbar = np.clip(np.full(train.n, best["wbar"]), b.wbar_lb, b.wbar_ub)
                mu = float(np.clip(1.0 / best["lambda"], 1.0 / b.lam_ub, 1.0 / b.lam_lb))
                clf = svm.post_process(mu, wbar, train, cfg.folds)
                rec["test_error"] = svm.test_error(clf, test)
            else:
                rec["test_error"] = lasso.test_mse(lasso.refit(best["lambda"], train, cfg.folds), test)
    except (ConfigError, DataError):
        raise
    except BidcaError as exc:
        rec["status"] = type(exc).__name__
        rec["message"] = str(exc)
    rec["time_sec"] = time.perf_counter() - t0
    return rec


def cmd_grid(cfg: ExperimentConfig, grid: GridSpec) -> list[dict]:
    data = None if cfg.toy else load_dataset(cfg)
    return [grid_one(cfg, grid, s, data) for s in cfg.seeds]
