"""Versioned JSON fit artifact and curve emission.

Floats are written with Python's shortest round-trip representation, so
every double (subnormals included) reads back bit for bit, and keys are
sorted so that save, load, save reproduces the same bytes.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, basis_matrix, to_raw_coefficients
from .chain import atomic_write, format_option_chain
from .errors import SchemaError, UsageError

SCHEMA_VERSION = 1


def fingerprint(data):
    """Observed-cell count, strike range and SHA-256 of the canonical CSV form."""
    digest = hashlib.sha256(format_option_chain(data).encode("utf-8")).hexdigest()
    return {
        "rows": int(data.n_observed),
        "strike_min": float(data.strikes[0]),
        "strike_max": float(data.strikes[-1]),
        "sha256": digest,
    }


def _matrix(a, p):
    a = np.array(a, dtype=float)
    return a.reshape(-1, p) if a.size else np.zeros((0, p))


@dataclass(frozen=True, eq=False)
class FitArtifact:
    """Everything needed to reproduce curves and audit an estimate.

    ``betas`` are the reported coefficients (after refit when ``refit`` is
    set); ``betas_penalized`` and ``thetas`` are the raw penalised solution
    that the optimality audit works on.
    """

    basis: BasisSpec
    days: tuple
    fingerprint: dict
    tau: float
    lam: float
    penalty_weight: float
    loss: str
    constraints: tuple
    refit: bool
    betas: np.ndarray
    betas_penalized: np.ndarray
    thetas: np.ndarray
    changepoints: tuple
    segments: tuple
    flagged_segments: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    feasibility: dict = field(default_factory=dict)
    lambda_rule: str = "explicit"

    @property
    def T(self):
        return len(self.days)

    @property
    def converged(self):
        return bool(self.diagnostics.get("converged", False))

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "basis": self.basis.to_dict(),
            "days": [int(d) for d in self.days],
            "fingerprint": dict(self.fingerprint),
            "tau": float(self.tau),
            "lambda": float(self.lam),
            "lambda_rule": self.lambda_rule,
            "penalty_weight": float(self.penalty_weight),
            "loss": self.loss,
            "constraints": sorted(self.constraints),
            "refit": bool(self.refit),
            "betas": np.asarray(self.betas, dtype=float).tolist(),
            "betas_raw": to_raw_coefficients(self.basis, self.betas).tolist(),
            "betas_penalized": np.asarray(self.betas_penalized, dtype=float).tolist(),
            "thetas": np.asarray(self.thetas, dtype=float).tolist(),
            "changepoints": [int(c) for c in self.changepoints],
            "segments": [[int(a), int(b)] for a, b in self.segments],
            "flagged_segments": [int(k) for k in self.flagged_segments],
            "diagnostics": dict(self.diagnostics),
            "feasibility": dict(self.feasibility),
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SchemaError("fit artifact must be a JSON object")
        version = d.get("schema")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported fit schema {version!r}; this version reads schema {SCHEMA_VERSION}")
        try:
            basis = BasisSpec.from_dict(d["basis"])
            p = basis.p
            return cls(
                basis=basis,
                days=tuple(int(x) for x in d["days"]),
                fingerprint=dict(d["fingerprint"]),
                tau=float(d["tau"]),
                lam=float(d["lambda"]),
                lambda_rule=str(d.get("lambda_rule", "explicit")),
                penalty_weight=float(d["penalty_weight"]),
                loss=str(d["loss"]),
                constraints=tuple(d["constraints"]),
                refit=bool(d["refit"]),
                betas=_matrix(d["betas"], p),
                betas_penalized=_matrix(d["betas_penalized"], p),
                thetas=_matrix(d["thetas"], p),
                changepoints=tuple(int(c) for c in d["changepoints"]),
                segments=tuple((int(a), int(b)) for a, b in d["segments"]),
                flagged_segments=tuple(int(k) for k in d.get("flagged_segments", ())),
                diagnostics=dict(d.get("diagnostics", {})),
                feasibility=dict(d.get("feasibility", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed fit artifact: {exc!r}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def __eq__(self, other):
        if not isinstance(other, FitArtifact):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None


def save_fit(fit, path):
    atomic_write(path, fit.to_json())


def load_fit(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except UnicodeDecodeError:
        raise SchemaError(f"{path}: not UTF-8 text") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: corrupt JSON ({exc})") from None
    return FitArtifact.from_dict(d)


def emit_curve(fit, grid_size=200, times=None):
    """Rows ``(time, strike, price)`` on an equispaced grid over the basis domain."""
    if int(grid_size) != grid_size or grid_size < 2:
        raise UsageError(f"grid_size must be an integer >= 2, got {grid_size!r}")
    T = fit.betas.shape[0]
    times = range(1, T + 1) if times is None else [int(t) for t in times]
    for t in times:
        if not 1 <= t <= T:
            raise UsageError(f"time {t} outside 1..{T}")
    lo, hi = fit.basis.domain
    grid = np.linspace(lo, hi, int(grid_size))
    grid[-1] = hi
    Phi = basis_matrix(fit.basis, grid)
    rows = []
    for t in times:
        prices = Phi @ fit.betas[t - 1]
        rows.extend((t, float(x), float(y)) for x, y in zip(grid, prices))
    return rows


def format_curve(rows):
    lines = ["time,strike,price"]
    lines.extend(f"{t},{x!r},{y!r}" for t, x, y in rows)
    return "\n".join(lines) + "\n"
