"""The (q, beta) link utility family and its closed-form link subproblem."""

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .net_model import Topology

SPARE_FLOOR_FRACTION = 1e-12
NAMED_EXAMPLES: frozenset[str] = frozenset({"proportional", "c2", "d0"})
Q_PRESETS: frozenset[str] = frozenset({"unit", "capacity", "delay"})


@dataclass(frozen=True)
class UtilitySpec:
    """V_ij(s) = q_ij log s (beta = 1) or q_ij s^(1-beta) / (1-beta).

    Links absent from q use q_ij = 1.
    """

    beta: float
    q: Mapping[str, float] = field(default_factory=dict)
    mode: str | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.beta) or self.beta < 0:
            raise DomainError(f"beta must be finite and >= 0, got {self.beta}")
        bad = sorted(k for k, v in self.q.items() if not (math.isfinite(v) and v > 0))
        if bad:
            raise DomainError(f"q must be positive and finite on link(s): {', '.join(bad)}")
        if self.mode is not None and self.mode not in NAMED_EXAMPLES:
            raise DomainError(f"Unknown utility mode: {self.mode}")
        object.__setattr__(self, "q", {k: float(v) for k, v in sorted(self.q.items())})

    def q_of(self, link_id: str) -> float:
        """Return q_ij for a link."""
        return self.q.get(link_id, 1.0)

    def q_vector(self, topology: Topology) -> np.ndarray:
        """q in the topology's link index order."""
        return np.array([self.q_of(link_id) for link_id in topology.link_ids])

    def to_dict(self) -> dict[str, object]:
        """Convert to the experiment-config layout."""
        return {"beta": self.beta, "q": dict(self.q), "mode": self.mode}

    @classmethod
    def named(cls, example: str, topology: Topology) -> "UtilitySpec":
        """One of the named examples: proportional, c2 or d0."""
        if example == "proportional":
            return cls(beta=1.0, mode=example)
        if example == "c2":
            return cls(
                beta=2.0,
                q={link.id: link.capacity for link in topology.links},
                mode=example,
            )
        if example == "d0":
            return cls(
                beta=0.0,
                q={link.id: link.delay for link in topology.links},
                mode=example,
            )
        raise DomainError(f"Unknown named example: {example}")

    @classmethod
    def from_config(cls, data: Mapping[str, object], topology: Topology) -> "UtilitySpec":
        """Parse {"beta": number, "q": "unit" | "capacity" | "delay" | {link: q}}."""
        try:
            beta = float(data["beta"])  # type: ignore[arg-type]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Utility config needs a numeric beta: {e}") from e
        q_spec = data.get("q", "unit")
        if isinstance(q_spec, Mapping):
            topology.check_links(q_spec)
            q = {str(k): float(v) for k, v in q_spec.items()}
        elif q_spec == "unit":
            q = {}
        elif q_spec == "capacity":
            q = {link.id: link.capacity for link in topology.links}
        elif q_spec == "delay":
            q = {link.id: link.delay for link in topology.links}
        else:
            raise ConfigError(
                f"Invalid q: {q_spec}. Valid options: {', '.join(sorted(Q_PRESETS))} "
                "or a link -> number table"
            )
        mode = data.get("mode")
        return cls(beta=beta, q=q, mode=str(mode) if mode is not None else None)


def link_utilities(beta: float, q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorised V(s); callers guarantee s > 0 when beta >= 1."""
    s = np.asarray(s, dtype=float)
    if beta == 1.0:
        return q * np.log(s)
    return q * np.power(s, 1.0 - beta) / (1.0 - beta)


def marginal_utilities(beta: float, q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorised V'(s) = q / s^beta."""
    s = np.asarray(s, dtype=float)
    if beta == 0.0:
        return np.broadcast_to(np.asarray(q, dtype=float), s.shape).copy()
    return q / np.power(s, beta)


def utility_curvatures(beta: float, q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Vectorised |V''(s)| = beta q / s^(beta + 1)."""
    s = np.asarray(s, dtype=float)
    return beta * q / np.power(s, beta + 1.0)


def inverse_marginal(beta: float, q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(V')^{-1}(w) = (q / w)^(1/beta) for beta > 0; w = 0 maps to +inf."""
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore"):
        return np.power(q / w, 1.0 / beta)


def link_subproblem_spares(
    beta: float, q: np.ndarray, w: np.ndarray, cap: np.ndarray
) -> np.ndarray:
    """Vectorised link subproblem: argmax over [0, cap] of V(s) - w s.

    w = 0 is accepted here (the projected dual update can reach it) and
    yields s = cap, the limit of the scalar rule.
    """
    w = np.asarray(w, dtype=float)
    if beta == 0.0:
        return np.where(w <= q, cap, 0.0)
    return np.minimum(cap, inverse_marginal(beta, q, w))


def utility(spec: UtilitySpec, link_id: str, s: float) -> float:
    """Return V_ij(s) for one link.

    Raises:
        DomainError: If s < 0, or s = 0 with beta >= 1.
    """
    if s < 0 or (s == 0 and spec.beta >= 1):
        raise DomainError(f"Utility undefined at spare capacity {s} for beta={spec.beta}")
    return float(link_utilities(spec.beta, np.array(spec.q_of(link_id)), np.array(s)))


def marginal_utility(spec: UtilitySpec, link_id: str, s: float) -> float:
    """Return V'_ij(s) = q_ij / s^beta.

    Raises:
        DomainError: If s <= 0 and beta > 0.
    """
    if spec.beta > 0 and s <= 0:
        raise DomainError(f"Marginal utility undefined at spare capacity {s}")
    if spec.beta == 0 and s < 0:
        raise DomainError(f"Spare capacity must be non-negative, got {s}")
    return float(marginal_utilities(spec.beta, np.array(spec.q_of(link_id)), np.array(s)))


def solve_link_subproblem(spec: UtilitySpec, link_id: str, w: float, cap: float) -> float:
    """Maximise V(s) - w s over s in [0, cap].

    For beta > 0 this is min(cap, (q / w)^(1/beta)). For beta = 0 the
    objective is linear: cap when w <= q, otherwise 0.

    Raises:
        DomainError: If w <= 0 or cap <= 0.
    """
    if not w > 0:
        raise DomainError(f"Link weight must be positive, got {w}")
    if not cap > 0:
        raise DomainError(f"Capacity must be positive, got {cap}")
    return float(
        link_subproblem_spares(
            spec.beta, np.array(spec.q_of(link_id)), np.array(w), np.array(cap)
        )
    )


def named_weight_formula(example: str, c: float, f: float = 0.0, d: float = 1.0) -> float:
    """Closed-form optimal weight of the named examples.

    proportional: 1 / (c - f); c2: c / (c - f)^2; d0: d.

    Raises:
        DomainError: If f >= c for proportional or c2, or the example is unknown.
    """
    if example not in NAMED_EXAMPLES:
        raise DomainError(
            f"Invalid example: {example}. Valid options: {', '.join(sorted(NAMED_EXAMPLES))}"
        )
    if example == "d0":
        return float(d)
    if f >= c:
        raise DomainError(f"Load {f} must be below capacity {c}")
    if example == "proportional":
        return 1.0 / (c - f)
    return c / (c - f) ** 2


def spare_floor(capacities: np.ndarray) -> np.ndarray:
    """Smallest spare capacity at which utilities are ever evaluated."""
    return SPARE_FLOOR_FRACTION * np.asarray(capacities, dtype=float)
