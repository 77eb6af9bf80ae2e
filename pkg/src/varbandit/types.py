"""Shared domain vocabulary for parameter-noise linear bandits.

Action sets, reward models, designs, run traces, experiment configs and the
seeding contract all live here so that every other module speaks the same
language.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Union

import numpy as np

__all__ = [
    "ActionSet",
    "Algorithm",
    "ConfigError",
    "Design",
    "Diagnostics",
    "ExperimentConfig",
    "FiniteActions",
    "LpBall",
    "RewardModel",
    "RunTrace",
    "SamplerKind",
    "config_hash",
    "derive_rng_stream",
    "dual_exponent",
    "conjugate_exponent",
]


def derive_rng_stream(master_seed: int, run_index: int) -> np.random.Generator:
    """Return the deterministic random stream for run ``run_index``.

    Streams for distinct run indices are statistically independent
    (``SeedSequence`` spawn keys), and the same pair always reproduces the
    same draws.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed) % 2**64, spawn_key=(int(run_index),))
    return np.random.Generator(np.random.PCG64(ss))


def conjugate_exponent(p: float) -> float:
    """Hölder conjugate of ``p`` for any ``p`` in [1, inf]."""
    if p == 1:
        return math.inf
    if math.isinf(p):
        return 1.0
    if p < 1:
        raise ValueError(f"exponent must be >= 1, got {p}")
    return p / (p - 1.0)


def dual_exponent(p: float) -> float:
    """Dual exponent ``q = p / (p - 1)`` of an lp ball with ``p`` in (1, 2]."""
    if not 1.0 < p <= 2.0:
        raise ValueError(f"p must lie in (1, 2], got {p}")
    return p / (p - 1.0)


# ---------------------------------------------------------------------------
# Action sets


@dataclass(frozen=True, eq=False)
class FiniteActions:
    """A finite list of actions, stored as a ``(K, d)`` float64 array."""

    actions: np.ndarray

    def __post_init__(self):
        arr = np.array(self.actions, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"actions must be a non-empty (K, d) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("actions must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "actions", arr)

    @property
    def d(self) -> int:
        return self.actions.shape[1]

    @property
    def K(self) -> int:
        return self.actions.shape[0]

    def spans(self, tol: float = 1e-10) -> bool:
        return np.linalg.matrix_rank(self.actions, tol=tol) == self.d


@dataclass(frozen=True)
class LpBall:
    """The unit lp ball in dimension ``d``.

    Algorithms targeting balls require ``p`` in (1, 2]; lower-bound
    instances for ``p > 2`` (including ``p = inf``) are also representable.
    """

    d: int
    p: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not self.p > 1.0:
            raise ValueError(f"p must be > 1, got {self.p}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "p", float(self.p))

    @property
    def q(self) -> float:
        return conjugate_exponent(self.p)


ActionSet = Union[FiniteActions, LpBall]


# ---------------------------------------------------------------------------
# Reward model


class SamplerKind(str, enum.Enum):
    GAUSSIAN_REJECTION = "gaussian_rejection"
    GAUSSIAN_CLIP = "gaussian_clip"
    POINT_MASS = "point_mass"


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Distribution of the random parameter ``theta_t``.

    ``theta_star`` and ``covariance`` are the nominal Gaussian parameters.
    Boundedness (``|a^T theta| <= bound_radius`` for every feasible action)
    is enforced at sampling time by the chosen ``sampler_kind``.
    """

    theta_star: np.ndarray
    covariance: np.ndarray
    sampler_kind: SamplerKind = SamplerKind.GAUSSIAN_REJECTION
    bound_radius: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=np.float64).reshape(-1)
        d = theta.shape[0]
        cov = np.array(self.covariance, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError("covariance must be positive semi-definite")
        kind = SamplerKind(self.sampler_kind)
        theta.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "sampler_kind", kind)
        # symmetric square root handles singular covariances
        w, U = np.linalg.eigh(cov)
        root = (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T
        root.setflags(write=False)
        object.__setattr__(self, "_root", root)

    @property
    def d(self) -> int:
        return self.theta_star.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return self.sampler_kind is SamplerKind.POINT_MASS or not np.any(self.covariance)

    def raw_draws(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` unconstrained Gaussian draws, shape ``(n, d)``."""
        z = rng.standard_normal((n, self.d))
        return self.theta_star + z @ self._root


# ---------------------------------------------------------------------------
# Designs


@dataclass(frozen=True, eq=False)
class Design:
    """A probability weighting over a finite action list.

    ``support`` holds action indices, ``weights`` the matching masses.
    ``g`` is the worst-case squared inverse-information norm when known.
    """

    support: np.ndarray
    weights: np.ndarray
    g: float = math.nan
    converged: bool = True
    iterations: int = 0
    history: tuple = ()

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if support.shape != weights.shape or support.size == 0:
            raise ValueError("support and weights must be non-empty and equally long")
        if np.any(weights <= 0) or np.any(weights > 1 + 1e-12):
            raise ValueError("weights must lie in (0, 1]")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        if len(np.unique(support)) != support.size:
            raise ValueError("support indices must be distinct")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_dense(cls, pi: np.ndarray, prune_eps: float = 0.0, **kw) -> "Design":
        pi = np.asarray(pi, dtype=np.float64)
        keep = np.flatnonzero(pi > prune_eps)
        w = pi[keep]
        return cls(support=keep, weights=w / w.sum(), **kw)

    def dense(self, K: int) -> np.ndarray:
        pi = np.zeros(K)
        pi[self.support] = self.weights
        return pi

    def __len__(self) -> int:
        return self.support.size


# ---------------------------------------------------------------------------
# Traces


class RunTrace:
    """Per-step record of a single bandit run.

    Columns are kept as numpy arrays with capacity ``horizon``.  ``action_id``
    indexes the finite action list, or for ball runs the rows of
    ``action_table`` (the distinct vectors that were played).
    """

    def __init__(self, horizon: int, algorithm: str = "", seed: int = 0, config_hash: str = ""):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = int(horizon)
        self.action_id = np.empty(self.horizon, dtype=np.int64)
        self.reward = np.empty(self.horizon, dtype=np.float64)
        self.gap = np.empty(self.horizon, dtype=np.float64)
        self.phase = np.empty(self.horizon, dtype=np.int32)
        self.phase_labels: list[str] = []
        self._phase_index: dict[str, int] = {}
        self.action_table: list[np.ndarray] = []
        self.length = 0
        self.meta: dict[str, Any] = {
            "algorithm": algorithm,
            "seed": int(seed),
            "config_hash": config_hash,
        }
        self.info: dict[str, Any] = {}

    @property
    def remaining(self) -> int:
        return self.horizon - self.length

    def _label(self, phase: str) -> int:
        idx = self._phase_index.get(phase)
        if idx is None:
            idx = self._phase_index[phase] = len(self.phase_labels)
            self.phase_labels.append(phase)
        return idx

    def record(self, action_id: int, rewards: np.ndarray, gap: float, phase: str) -> None:
        """Append a block of pulls of one action."""
        rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        n = rewards.size
        if n > self.remaining:
            raise ValueError("trace capacity exceeded")
        if gap < -1e-12:
            raise ValueError(f"negative gap {gap}")
        s = slice(self.length, self.length + n)
        self.action_id[s] = action_id
        self.reward[s] = rewards
        self.gap[s] = max(gap, 0.0)
        self.phase[s] = self._label(phase)
        self.length += n

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.length + 1)

    @property
    def gaps(self) -> np.ndarray:
        return self.gap[: self.length]

    @property
    def rewards(self) -> np.ndarray:
        return self.reward[: self.length]

    @property
    def actions(self) -> np.ndarray:
        return self.action_id[: self.length]

    @property
    def phases(self) -> list[str]:
        return [self.phase_labels[i] for i in self.phase[: self.length]]

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.gaps)

    @property
    def regret(self) -> float:
        return float(self.gaps.sum())

    def steps_in(self, prefix: str) -> int:
        """Number of recorded steps whose phase label starts with ``prefix``."""
        codes = [i for i, lab in enumerate(self.phase_labels) if lab.startswith(prefix)]
        return int(np.isin(self.phase[: self.length], codes).sum())

    def __len__(self) -> int:
        return self.length


# ---------------------------------------------------------------------------
# Configs


class Algorithm(str, enum.Enum):
    VASE = "VASE"
    VALEE = "VALEE"
    BASELINE_EE = "BaselineEE"
    BASELINE_SE = "BaselineSE"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: Algorithm
    horizon: int
    delta: float = 0.05
    known_covariance: bool = True
    tau: Optional[float] = None
    seed: int = 0
    run_index: int = 0
    environment: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        except ValueError:
            names = ", ".join(a.value for a in Algorithm)
            raise ConfigError("algorithm", f"must be one of {names}, got {self.algorithm!r}") from None
        if isinstance(self.horizon, bool) or not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ConfigError("horizon", f"must be an integer >= 1, got {self.horizon!r}")
        if not isinstance(self.delta, (int, float)) or not 0.0 < self.delta < 1.0:
            raise ConfigError("delta", f"must lie in (0, 1), got {self.delta!r}")
        if self.tau is not None and (not isinstance(self.tau, (int, float)) or not self.tau > 0):
            raise ConfigError("tau", f"must be > 0 when given, got {self.tau!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be a 64-bit non-negative integer, got {self.seed!r}")
        if not isinstance(self.run_index, (int, np.integer)) or self.run_index < 0:
            raise ConfigError("run_index", f"must be a non-negative integer, got {self.run_index!r}")
        if not isinstance(self.environment, dict) or "kind" not in self.environment:
            raise ConfigError("environment", "must be an object with a 'kind' key")
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "delta", float(self.delta))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for required in ("algorithm", "horizon"):
            if required not in raw:
                raise ConfigError(required, "missing required field")
        return cls(**raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["algorithm"] = self.algorithm.value
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj: Any) -> str:
    """Stable digest of a JSON-serialisable object."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"not serialisable: {type(o)!r}")


@dataclass(frozen=True)
class Diagnostics:
    """Variance functionals of an instance; all entries are non-negative."""

    sigma_q_sq: float
    sigma_max_sq: float
    m_sigma: float
    theta_star_dual_norm: float

    def to_dict(self) -> dict:
        return asdict(self)
