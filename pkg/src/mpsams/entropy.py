"""Expected-log-probability diagnostics on finite, exactly enumerable models.

The three quantities follow the masked-modeling uncertainty argument and keep
its sign convention (no leading minus), so all of them are <= 0:

* ``h1 = E_P[log P]``
* ``h2 = E_P[log Q]``  (equals ``h1 - KL(P || Q)``)
* ``h3 = E_phat[log P]`` for a sampling distribution ``phat``

Only ``h2 <= h1`` is a theorem. ``h3`` is reported per sampler, since its
relation to the other two depends entirely on how ``phat`` is chosen.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteJointModel:
    """True distribution ``P`` and model distribution ``Q`` over the same outcomes.

    ``outcomes`` are (visible-part, masked-part) pairs; any hashable labels work.
    """

    P: np.ndarray
    Q: np.ndarray
    outcomes: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        if P.shape != Q.shape or P.ndim != 1:
            raise ValueError(f"P and Q must be 1-D with equal length, got {P.shape} and {Q.shape}")
        for name, d in (("P", P), ("Q", Q)):
            if np.any(d < 0) or abs(d.sum() - 1.0) > _NORM_TOL:
                raise ValueError(f"{name} is not a normalized distribution (sum={d.sum()!r})")
        if self.outcomes and len(self.outcomes) != len(P):
            raise ValueError("outcome labels do not match distribution length")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)

    @property
    def support(self) -> np.ndarray:
        return self.P > 0


@dataclass(frozen=True)
class SamplerDistribution:
    p_hat: np.ndarray
    strategy: str = "custom"
    seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.p_hat, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > _NORM_TOL:
            raise ValueError("p_hat is not a normalized distribution")
        object.__setattr__(self, "p_hat", p)


def _expect_log(weights: np.ndarray, probs: np.ndarray, what: str) -> float:
    on = weights > 0
    if np.any(probs[on] <= 0):
        raise ValueError(f"{what} is zero somewhere the expectation puts mass")
    return float(np.sum(weights[on] * np.log(probs[on])))


def h1(model: DiscreteJointModel) -> float:
    return _expect_log(model.P, model.P, "P")


def h2(model: DiscreteJointModel) -> float:
    return _expect_log(model.P, model.Q, "Q")


def kl(model: DiscreteJointModel) -> float:
    """KL(P || Q) in nats."""
    on = model.support
    if np.any(model.Q[on] <= 0):
        raise ValueError("Q is zero somewhere the expectation puts mass")
    return float(np.sum(model.P[on] * (np.log(model.P[on]) - np.log(model.Q[on]))))


def h3(model: DiscreteJointModel, sampler: SamplerDistribution) -> float:
    if sampler.p_hat.shape != model.P.shape:
        raise ValueError("sampler and model live on different outcome spaces")
    if np.any((sampler.p_hat > 0) & ~model.support):
        raise ValueError("sampler puts mass outside the support of P")
    return _expect_log(sampler.p_hat, model.P, "P")


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    samples: int


def monte_carlo_expectation(
    f: Callable[[np.ndarray], np.ndarray],
    p: np.ndarray,
    samples: int,
    seed: int = 0,
    outcomes: np.ndarray | None = None,
) -> MonteCarloEstimate:
    """Estimate ``E_p[f(x)]`` by sampling outcome indices from ``p``.

    ``f`` is applied vectorized to the drawn outcomes (indices unless
    ``outcomes`` supplies values for them).
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    p = np.asarray(p, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(p), size=samples, p=p)
    draws = idx if outcomes is None else np.asarray(outcomes)[idx]
    values = np.asarray(f(draws), dtype=float)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return MonteCarloEstimate(mean, stderr, samples)


def random_model(rng: np.random.Generator, size: int = 8, concentration: float = 1.0) -> DiscreteJointModel:
    """Random (P, Q) pair with full support, drawn from a symmetric Dirichlet."""
    P = rng.dirichlet(np.full(size, concentration))
    Q = rng.dirichlet(np.full(size, concentration))
    # renormalize so the sums sit within rounding of 1
    return DiscreteJointModel(P / P.sum(), Q / Q.sum())


def toy_patch_model(
    n_patches: int = 4,
    lesion: Sequence[int] = (0,),
    n_masked: int = 1,
    lesion_weight: float = 4.0,
    model_temperature: float = 1.5,
) -> tuple[DiscreteJointModel, list[tuple[int, ...]]]:
    """Enumerable toy image model over which patches end up masked.

    Outcomes are the masked subsets of size ``n_masked``. ``P`` favours subsets
    containing lesion patches (weight ``lesion_weight`` per lesion patch); ``Q``
    is a tempered, smoother copy of ``P`` standing in for a network that has
    not fully learned it.
    """
    from itertools import combinations

    subsets = list(combinations(range(n_patches), n_masked))
    lesion = set(lesion)
    logw = np.array([sum(math.log(lesion_weight) for i in s if i in lesion) for s in subsets])
    P = np.exp(logw - logw.max())
    P /= P.sum()
    Q = np.exp((logw - logw.max()) / model_temperature)
    Q /= Q.sum()
    outcomes = tuple((tuple(i for i in range(n_patches) if i not in s), s) for s in subsets)
    return DiscreteJointModel(P, Q, outcomes), subsets


def sampler_for(strategy: str, model: DiscreteJointModel, lesion: Sequence[int] = (0,)) -> SamplerDistribution:
    """Built-in sampler strategies.

    ``uniform``: uniform over the support of P.
    ``mps-induced``: the masked-subset distribution induced by lesion-first
    selection; all mass on outcomes whose masked part contains every lesion
    patch the subset size allows, spread in proportion to P. Requires
    ``model.outcomes`` from :func:`toy_patch_model`.
    ``argmax`` / ``argmin``: point mass on the most / least probable supported outcome.
    """
    on = model.support
    if strategy == "uniform":
        p = on.astype(float) / on.sum()
    elif strategy == "argmax":
        p = np.zeros_like(model.P)
        p[int(np.argmax(model.P))] = 1.0
    elif strategy == "argmin":
        p = np.zeros_like(model.P)
        masked_P = np.where(on, model.P, np.inf)
        p[int(np.argmin(masked_P))] = 1.0
    elif strategy == "mps-induced":
        if not model.outcomes:
            raise ValueError("mps-induced sampler needs a model with (visible, masked) outcomes")
        lesion = set(lesion)
        hits = np.array([len(lesion & set(masked)) for _, masked in model.outcomes])
        best = (hits == hits.max()) & on
        p = np.where(best, model.P, 0.0)
        p = p / p.sum()
    else:
        raise ValueError(f"unknown sampler strategy {strategy!r}")
    return SamplerDistribution(p, strategy)


@dataclass
class OrderingRow:
    model_id: int
    h1: float
    h2: float
    h3: float
    kl: float
    h2_le_h1: bool
    h3_le_h2: bool


@dataclass
class OrderingReport:
    strategy: str
    rows: list[OrderingRow] = field(default_factory=list)

    @property
    def all_h2_le_h1(self) -> bool:
        return all(r.h2_le_h1 for r in self.rows)

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "h1", "h2", "h3", "kl", "h2_le_h1", "h3_le_h2"])
        for r in self.rows:
            w.writerow([r.model_id, repr(r.h1), repr(r.h2), repr(r.h3), repr(r.kl), int(r.h2_le_h1), int(r.h3_le_h2)])
        return buf.getvalue()


def ordering_check(
    models: Sequence[DiscreteJointModel],
    strategy: str | Callable[[DiscreteJointModel], SamplerDistribution] = "uniform",
    tol: float = 1e-12,
) -> OrderingReport:
    if not models:
        raise ValueError("need at least one model")
    name = strategy if isinstance(strategy, str) else getattr(strategy, "__name__", "custom")
    report = OrderingReport(name)
    for i, m in enumerate(models):
        sampler = sampler_for(strategy, m) if isinstance(strategy, str) else strategy(m)
        a, b, c = h1(m), h2(m), h3(m, sampler)
        report.rows.append(OrderingRow(i, a, b, c, kl(m), b <= a + tol, c <= b + tol))
    return report
