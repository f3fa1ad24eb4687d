"""Monte Carlo harness: scenario generation, replications and summary tables.

Each replication draws its own generator from ``SeedSequence(seed,
spawn_key=(rep,))``, so a replication's result depends only on the config
and its index. Replications may run in worker processes (at most
``QFL_THREADS``); results are collected in index order and every worker
pins BLAS to one thread, which makes reports byte-identical across
parallelism settings.
"""

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .basis import build_design_rows, make_polynomial_basis
from .changepoint import (
    DETECT,
    ESTIMATE,
    Segmentation,
    extract_changepoints,
    lambda_default,
    merge_adjacent,
    recovery_metrics,
    refit_segments,
)
from .errors import ConfigurationError
from .panel_model import LOSSES, QUANTILE, CoefficientPath, PanelDataset, assemble_problem, check_tau
from .prox_solver import SolverConfig, solve

TWO = "two"
FIVE = "five"
NORMAL = "normal"
CAUCHY = "cauchy"

BETA_A = (1.0, -1.0, 0.5)
BETA_B = (2.0, 0.5, -0.5)

# Looser than the library default: active sets and objectives agree with
# tight solves on these designs while keeping a replication near 0.1 s.
SIMULATION_SOLVER = SolverConfig(eps_abs=1e-7, eps_rel=1e-5, max_iters=5000)


def default_true_betas(phases):
    a, b = np.array(BETA_A), np.array(BETA_B)
    if phases == TWO:
        return (tuple(a), tuple(b))
    e0 = np.array([0.75, 0.0, 0.0])
    return tuple(tuple(v) for v in (a, b, a + e0, b - e0, a - e0))


def true_changepoints(T, phases):
    """Equispaced changepoints: ``{6}`` and ``{3, 5, 7, 9}`` for ``T = 10``."""
    k = 2 if phases == TWO else 5
    return tuple(1 + int(round(j * T / k)) for j in range(1, k))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    ``lambda_mode`` is ``"detect"``, ``"estimate"`` or an explicit number.
    ``refit=None`` refits segments in estimate mode only. ``noise_scale``
    multiplies the errors (``0`` gives noiseless data).
    """

    T: int = 10
    n: int = 100
    phases: str = TWO
    error_dist: str = NORMAL
    loss: str = QUANTILE
    tau: float = 0.5
    lambda_mode: object = DETECT
    refit: bool = None
    merge: bool = False
    true_betas: tuple = None
    degree: int = 2
    noise_scale: float = 1.0
    seed: int = 0
    reps: int = 1000
    solver: SolverConfig = field(default=SIMULATION_SOLVER, compare=False)

    def __post_init__(self):
        if self.phases not in (TWO, FIVE):
            raise ConfigurationError(f"phases must be 'two' or 'five', got {self.phases!r}")
        if self.error_dist not in (NORMAL, CAUCHY):
            raise ConfigurationError(f"error_dist must be 'normal' or 'cauchy', got {self.error_dist!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}")
        check_tau(self.tau)
        if isinstance(self.lambda_mode, str):
            if self.lambda_mode not in (DETECT, ESTIMATE):
                raise ConfigurationError(f"unknown lambda mode {self.lambda_mode!r}")
        elif not (float(self.lambda_mode) >= 0 and math.isfinite(self.lambda_mode)):
            raise ConfigurationError("explicit lambda must be finite and >= 0")
        k = 2 if self.phases == TWO else 5
        if self.T < k:
            raise ConfigurationError(f"{self.phases} phases need T >= {k}")
        if self.n < self.degree + 1:
            raise ConfigurationError("n must be at least the number of basis functions")
        if self.reps < 1:
            raise ConfigurationError("reps must be >= 1")
        if not self.noise_scale >= 0:
            raise ConfigurationError("noise_scale must be >= 0")
        betas = default_true_betas(self.phases) if self.true_betas is None else self.true_betas
        betas = tuple(tuple(float(v) for v in b) for b in betas)
        if len(betas) != k or any(len(b) != self.degree + 1 for b in betas):
            raise ConfigurationError(f"need {k} true coefficient vectors of length {self.degree + 1}")
        object.__setattr__(self, "true_betas", betas)

    @property
    def basis(self):
        return make_polynomial_basis(self.degree, (0.0, 1.0))

    @property
    def lam(self):
        if isinstance(self.lambda_mode, str):
            return lambda_default(self.n, self.T, self.lambda_mode)
        return float(self.lambda_mode)

    @property
    def do_refit(self):
        return self.lambda_mode == ESTIMATE if self.refit is None else bool(self.refit)

    def to_dict(self):
        d = asdict(self)
        d.pop("solver")
        d["true_betas"] = [list(b) for b in self.true_betas]
        d["lambda"] = self.lam
        d["refit"] = self.do_refit
        d["changepoints"] = list(true_changepoints(self.T, self.phases))
        return d


def _errors(rng, cfg, shape):
    # shift so that P(eps < 0) = tau
    if cfg.error_dist == NORMAL:
        e = rng.standard_normal(shape) - stats.norm.ppf(cfg.tau)
    else:
        e = rng.standard_cauchy(shape) - math.tan(math.pi * (cfg.tau - 0.5))
    return cfg.noise_scale * e


def generate_scenario(cfg, rep=0):
    """Data, true path and true segmentation for replication ``rep``."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(rep,)))
    strikes = np.linspace(0.0, 1.0, cfg.n)
    X = build_design_rows(cfg.basis, strikes)
    cps = true_changepoints(cfg.T, cfg.phases)
    truth_seg = Segmentation(cfg.T, cps, np.array(cfg.true_betas))
    B = truth_seg.betas()
    Y = B @ X.T
    if cfg.noise_scale > 0:
        Y = Y + _errors(rng, cfg, Y.shape)
    return PanelDataset(strikes, Y), CoefficientPath(B, cfg.basis), truth_seg


@dataclass(frozen=True)
class Replication:
    rep: int
    med: float
    mad: float
    discovered: float
    count_ratio: float
    n_changepoints: int
    converged: bool


def run_once(cfg, rep=0):
    data, truth, truth_seg = generate_scenario(cfg, rep)
    problem = assemble_problem(data, cfg.basis, cfg.tau, cfg.lam, cfg.loss)
    sol = solve(problem, cfg.solver)
    seg = extract_changepoints(sol)
    if cfg.merge:
        seg = merge_adjacent(seg, sol.thetas)
        seg = Segmentation(seg.T, seg.changepoints, [sol.betas[s - 1] for s, _ in seg.segments])
    betas = sol.betas
    if cfg.do_refit:
        betas = refit_segments(data, seg, problem, cfg.solver).betas()
    resid = data.prices - betas @ problem.design.T
    rec = recovery_metrics(seg, truth_seg)
    return Replication(
        rep=rep,
        med=float(np.median(resid[data.mask])),
        mad=float(np.mean(np.abs(betas - truth.betas))),
        discovered=rec.discovered,
        count_ratio=rec.count_ratio,
        n_changepoints=len(seg.changepoints),
        converged=bool(sol.converged),
    )


def _init_worker():
    global _LIMITS
    _LIMITS = threadpool_limits(1)


def _run_chunk(args):
    cfg, reps = args
    return [run_once(cfg, r) for r in reps]


def thread_cap():
    """Worker count from ``QFL_THREADS`` (default: all CPUs)."""
    raw = os.environ.get("QFL_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigurationError(f"QFL_THREADS must be a positive integer, got {raw!r}")
    if cap < 1:
        raise ConfigurationError(f"QFL_THREADS must be a positive integer, got {raw!r}")
    return cap


@dataclass(frozen=True)
class SimulationReport:
    config: dict
    reps: int
    med: float
    mad: float
    mad_median: float
    discovered: float
    count_ratio: float
    nonconverged: int
    replications: tuple = field(repr=False, default=())

    @property
    def mads(self):
        return np.array([r.mad for r in self.replications])

    def to_dict(self):
        d = asdict(self)
        d["replications"] = [asdict(r) for r in self.replications]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["replications"] = tuple(Replication(**r) for r in d.get("replications", ()))
        return cls(**d)


def _aggregate(cfg, reps):
    reps = sorted(reps, key=lambda r: r.rep)
    col = lambda name: np.array([getattr(r, name) for r in reps])  # noqa: E731
    return SimulationReport(
        config=cfg.to_dict(),
        reps=len(reps),
        med=float(np.mean(col("med"))),
        mad=float(np.mean(col("mad"))),
        mad_median=float(np.median(col("mad"))),
        discovered=float(np.mean(col("discovered"))),
        count_ratio=float(np.mean(col("count_ratio"))),
        nonconverged=int(np.sum(~col("converged"))),
        replications=tuple(reps),
    )


def run_monte_carlo(cfg, workers=None):
    """Run ``cfg.reps`` replications and average the per-replication statistics."""
    workers = min(workers or thread_cap(), cfg.reps)
    if workers <= 1:
        with threadpool_limits(1):
            results = [run_once(cfg, r) for r in range(cfg.reps)]
        return _aggregate(cfg, results)
    chunks = [(cfg, list(range(cfg.reps))[k::workers]) for k in range(workers)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    return _aggregate(cfg, results)


def paired_sign_test(a, b):
    """One-sided sign test that ``a``'s per-replication MAD tends to be below ``b``'s.

    Both reports must come from configs sharing seed and replication count,
    so that replication ``r`` of each saw the same error draws. Returns
    ``(wins, n, p_value)`` with ties dropped.
    """
    if a.reps != b.reps or a.config["seed"] != b.config["seed"]:
        raise ConfigurationError("sign test needs paired reports (same seed and reps)")
    diff = a.mads - b.mads
    wins, losses = int(np.sum(diff < 0)), int(np.sum(diff > 0))
    n = wins + losses
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def format_table(reports):
    """Aligned text table with one row per report: MED, MAD and Recovery ``a/b``."""
    head = ("n", "phases", "errors", "loss", "MED", "MAD", "Recovery")
    rows = [head]
    for r in reports:
        c = r.config
        rows.append((
            str(c["n"]), c["phases"], c["error_dist"], c["loss"],
            f"{r.med:.2f}", f"{r.mad:.2f}", f"{r.discovered:.2f}/{r.count_ratio:.2f}",
        ))
    widths = [max(len(row[j]) for row in rows) for j in range(len(head))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows) + "\n"


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
