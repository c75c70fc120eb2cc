"""Convergence-bound diagnostics and cost accounting.

Estimators here are empirical lower bounds on the true constants (a max over
finitely many probes), and reports say so.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .datahub import SessionSchedule
from .models import Batch, ModelSpec

UNSATISFIABLE = "unsatisfiable"

CAVEATS = (
    "expectations in term (a) are replaced by the realized single-trajectory values",
    "beta, theta and zeta are max-over-probes estimates, i.e. lower bounds of the true constants",
    "sigma_tilde uses the 1/D_k normalization (root mean squared distance to the client mean)",
    "term (c) sums over clients inside each round g, then averages over rounds",
)


def _as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    idx = getattr(data, "indices", None)
    return Batch(data.features, data.labels, idx)


# ----------------------------------------------------------------- smoothness


def lipschitz_estimate(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    dim: int,
    num_probes: int,
    radius: float,
    rng: np.random.Generator,
    center: np.ndarray | None = None,
    scale: float = 1.0,
) -> float:
    """Max of ``||g(w) - g(w')|| / ||w - w'||`` over random probe pairs.

    Probes are drawn one after another, so the first ``n`` probes are the same
    whatever ``num_probes`` is and the estimate never decreases with it.
    """
    if num_probes < 1:
        raise ValueError("need at least one probe")
    if not radius > 0:
        raise ValueError("probe radius must be positive")
    best = 0.0
    base = np.zeros(dim) if center is None else np.asarray(center, dtype=np.float64)
    for _ in range(num_probes):
        w = base + rng.uniform(-scale, scale, size=dim)
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        w2 = w + radius * u
        step = np.linalg.norm(w2 - w)
        best = max(best, float(np.linalg.norm(grad_fn(w) - grad_fn(w2)) / step))
    return best


def estimate_beta(
    spec: ModelSpec,
    dataset,
    num_probes: int,
    radius: float,
    rng: np.random.Generator,
    center: np.ndarray | None = None,
    scale: float = 1.0,
) -> float:
    """Smoothness estimate of the full-data loss of ``dataset``."""
    batch = _as_batch(dataset)
    return lipschitz_estimate(
        lambda w: models.loss_and_grad(spec, w, batch)[1],
        spec.param_count, num_probes, radius, rng, center, scale,
    )


# ---------------------------------------------------------- data variability


def estimate_theta(spec: ModelSpec, w: np.ndarray, dataset, num_pairs: int, rng: np.random.Generator) -> float:
    """Max of ``||grad f(w,d) - grad f(w,d')|| / ||d - d'||`` over sample pairs.

    Samples are put in a canonical order first, so the estimate does not
    depend on how the dataset is ordered. All pairs are used when
    ``num_pairs`` covers them; otherwise ``num_pairs`` random pairs.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    n = y.size
    if n < 2:
        raise ValueError("data variability needs at least two samples")
    order = np.lexsort((y,) + tuple(X.T[::-1]))
    X, y = X[order], y[order]
    total = n * (n - 1) // 2
    if num_pairs >= total:
        ii, jj = np.triu_indices(n, k=1)
    else:
        ii = rng.integers(0, n, size=num_pairs)
        jj = (ii + rng.integers(1, n, size=num_pairs)) % n
    cache: dict[int, np.ndarray] = {}

    def g(i):
        if i not in cache:
            cache[i] = models.loss_and_grad(spec, w, Batch(X[i : i + 1], y[i : i + 1]))[1]
        return cache[i]

    best, used = 0.0, 0
    for i, j in zip(ii.tolist(), jj.tolist()):
        dist = float(np.linalg.norm(X[i] - X[j]))
        if dist < 1e-12:
            continue
        used += 1
        best = max(best, float(np.linalg.norm(g(i) - g(j))) / dist)
    if used == 0:
        raise ValueError("every sampled pair has identical features; need two distinct samples")
    return best


def estimate_theta_round(spec, w, client_datasets, num_pairs, rng) -> float:
    """Theta for one round: max over active clients with at least two distinct samples."""
    vals = []
    for c in client_datasets:
        if len(c) < 2:
            continue
        try:
            vals.append(estimate_theta(spec, w, c, num_pairs, rng))
        except ValueError:
            continue
    return max(vals) if vals else 0.0


# --------------------------------------------------------------- dissimilarity


def estimate_zeta(spec: ModelSpec, client_datasets, weights, probe_points) -> tuple[float, float]:
    """``(zeta1, zeta2)`` such that at every probe

    ``sum_k a_k ||grad F_k||^2 <= zeta1 * ||sum_k a_k grad F_k||^2 + zeta2``.

    ``zeta1`` is the largest ratio of the two sides (at least 1) and
    ``zeta2`` the largest remaining gap (at least 0).
    """
    a = np.asarray(weights, dtype=np.float64)
    if len(probe_points) < 1:
        raise ValueError("need probe points")
    if a.size != len(client_datasets) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative, one per client, and sum to 1")
    batches = [_as_batch(c) for c in client_datasets]
    sides = []
    for w in probe_points:
        grads = np.stack([models.loss_and_grad(spec, np.asarray(w, dtype=np.float64), b)[1] for b in batches])
        lhs = float(np.sum(a * np.sum(grads * grads, axis=1)))
        mean = a @ grads
        sides.append((lhs, float(mean @ mean)))
    zeta1 = 1.0
    for lhs, m2 in sides:
        # mean-gradient norms at rounding level would blow the ratio up
        if m2 > 1e-12 * lhs and m2 > 0:
            zeta1 = max(zeta1, lhs / m2)
    zeta2 = max(0.0, max(lhs - zeta1 * m2 for lhs, m2 in sides))
    return zeta1, zeta2


# ------------------------------------------------------------ step-size rule


def lr_condition(beta: float, e_min: int, e_max: int, lambda_g: float, zeta1: float):
    """Largest admissible learning rate, or ``"unsatisfiable"``.

    ``min{(0.5 - (1/e_min - 1)^2) / beta,
    sqrt(L) / (2 beta sqrt((zeta1 + L) e_max (e_max - 1)))}``; the second
    term is dropped when ``e_max == 1``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if e_min < 1 or e_max < e_min:
        raise ValueError("need 1 <= e_min <= e_max")
    if not 0 < lambda_g < 1:
        raise ValueError("Lambda must lie in (0, 1)")
    if zeta1 < 1:
        raise ValueError("zeta1 must be >= 1")
    term1 = (0.5 - (1.0 / e_min - 1.0) ** 2) / beta
    if term1 <= 0:
        return UNSATISFIABLE
    if e_max == 1:
        return term1
    term2 = math.sqrt(lambda_g) / (2.0 * beta * math.sqrt((zeta1 + lambda_g) * e_max * (e_max - 1)))
    return min(term1, term2)


# ------------------------------------------------------------------ bound


@dataclass
class BoundConstants:
    beta: float
    zeta1: float = 1.0
    zeta2: float = 0.0
    theta_g: float | Sequence[float] = 0.0
    lambda_g: float | Sequence[float] = 0.5
    sigma_tilde_k: dict[int, float] | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.zeta1 < 1 or self.zeta2 < 0:
            raise ValueError("need zeta1 >= 1 and zeta2 >= 0")
        lam = np.atleast_1d(np.asarray(self.lambda_g, dtype=np.float64))
        if np.any(lam <= 0) or np.any(lam >= 1):
            raise ValueError("Lambda must lie in (0, 1)")
        if np.any(np.asarray(self.theta_g, dtype=np.float64) < 0):
            raise ValueError("theta must be non-negative")

    def per_round(self, value, g: int) -> float:
        if np.ndim(value) == 0:
            return float(value)
        return float(value[g])


def bound_terms(run_log, constants: BoundConstants, schedule: SessionSchedule | None = None,
                phases: Sequence[str] = ("train",)) -> dict:
    """Evaluate both sides of the gradient-norm bound on a logged run.

    Returns ``{a, b, c, d, rhs_total, lhs_mean_grad_sq, rounds, flagged_rounds}``.
    Rounds where the step size breaks the admissible range, or where
    Lambda is incompatible with zeta1, are listed in ``flagged_rounds``
    rather than rejected.
    """
    records = [r for r in run_log.records if r.phase in phases]
    if not records:
        raise ValueError("run log has no rounds in the requested phases")
    beta, z1, z2 = constants.beta, constants.zeta1, constants.zeta2
    a = b = c = d = lhs = 0.0
    flagged = []
    for g, r in enumerate(records):
        if not r.clients:
            raise ValueError(f"round {g} lacks per-client inputs (e_k, B_k, D_k)")
        eta = r.eta
        if not eta > 0:
            raise ValueError(f"round {g}: learning rate must be positive to evaluate the bound")
        lam = constants.per_round(constants.lambda_g, g)
        theta = constants.per_round(constants.theta_g, g)
        D = sum(ci.num_samples for ci in r.clients)
        e_vals = [ci.epochs for ci in r.clients]
        e_max, e_min = max(e_vals), min(e_vals)
        sig = {
            ci.client_id: (constants.sigma_tilde_k or {}).get(ci.client_id, ci.sigma_tilde) for ci in r.clients
        }
        a += 2.0 * (r.loss_start - r.train_loss) / (eta * (1.0 - lam))
        sb = sum(
            sig[ci.client_id] ** 2 * ci.epochs / ci.batch_size * (ci.num_samples - ci.batch_size) / ci.num_samples**2
            for ci in r.clients
        )
        b += 4.0 * beta * theta**2 * eta / (1.0 - lam) * sb
        sc = sum(
            (ci.epochs - 1) * (1.0 - ci.batch_size / ci.num_samples) * theta * sig[ci.client_id] ** 2 / ci.batch_size
            for ci in r.clients
        )
        c += 4.0 * beta**2 * eta**2 / (D * (1.0 - lam)) * sc
        d += 8.0 * beta**2 * eta**2 * e_max * (e_max - 1) * z2 / (1.0 - lam)
        lhs += r.grad_norm_sq
        eta_max = lr_condition(beta, e_min, e_max, lam, z1)
        reasons = []
        if eta_max == UNSATISFIABLE:
            reasons.append("step-size condition unsatisfiable")
        elif eta >= eta_max:
            reasons.append(f"eta={eta:g} >= eta_max={eta_max:g}")
        if not lam < z1:
            reasons.append("Lambda must be below zeta1")
        if reasons:
            flagged.append({"round": g, "session": r.session, "round_in_session": r.round_in_session,
                            "reasons": reasons})
    G = len(records)
    out = {"a": a / G, "b": b / G, "c": c / G, "d": d / G}
    out["rhs_total"] = out["a"] + out["b"] + out["c"] + out["d"]
    out["lhs_mean_grad_sq"] = lhs / G
    out["rounds"] = G
    out["flagged_rounds"] = flagged
    return out


def bound_report(run_log, constants: BoundConstants, schedule=None, phases=("train",), extra: dict | None = None) -> dict:
    terms = bound_terms(run_log, constants, schedule, phases)
    verdict = "holds" if terms["lhs_mean_grad_sq"] <= terms["rhs_total"] else "violated"
    const = asdict(constants)
    for key in ("theta_g", "lambda_g"):
        if np.ndim(const[key]):
            const[key] = [float(v) for v in const[key]]
    if const["sigma_tilde_k"] is not None:
        const["sigma_tilde_k"] = {str(k): v for k, v in const["sigma_tilde_k"].items()}
    return {
        "schema": 1,
        "variant": run_log.variant,
        "constants": const,
        "terms": {k: terms[k] for k in ("a", "b", "c", "d")},
        "rhs_total": terms["rhs_total"],
        "lhs": terms["lhs_mean_grad_sq"],
        "rounds": terms["rounds"],
        "verdict": verdict,
        "flagged_rounds": terms["flagged_rounds"],
        "caveats": list(CAVEATS),
        **(extra or {}),
    }


def write_bound_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- costs


@dataclass
class CostReport:
    local_epochs_total: int
    client_uploads: int
    server_broadcasts: int
    stored_vectors: int
    storage_growth_per_session: int  # in parameters (2W per post-pilot session for warm starts)
    breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


WARM_VARIANTS = ("proposed", "random_pilot")


def cost_account(schedule: SessionSchedule, settings, variant: str = "proposed", param_count: int = 0) -> CostReport:
    """Closed-form epoch, message and storage counts for a schedule.

    Per phase: pilot sessions cost ``T * sum_k e_k`` local steps, ``T * |K|``
    uploads and ``T`` broadcasts; each post-pilot session adds the same for
    its own training and, for warm-start variants, ``V * sum_k e_k`` steps,
    ``V * |K|`` uploads and ``V`` broadcasts of gradient computation.
    """
    steps, gsteps = tuple(settings.local_steps), tuple(settings.grad_steps)
    frac = settings.participation
    P, S = schedule.pilot_sessions, schedule.num_sessions
    warm = variant in WARM_VARIANTS
    phases = {k: {"local_epochs": 0, "uploads": 0, "broadcasts": 0} for k in ("pilot", "grad_compute", "train")}

    def per_round(K: int, st: tuple[int, ...]) -> tuple[int, int]:
        m = K if frac >= 1 else max(1, int(round(frac * K)))
        if m != K and len(set(st)) > 1:
            raise ValueError("closed-form epochs need full participation or a uniform e_k")
        if m == K:
            return sum(st[i % len(st)] for i in range(K)), m
        return m * st[0], m

    for s, plan in enumerate(schedule.sessions):
        K = len(plan.client_ids)
        T = schedule.rounds_in(s)
        ep, up = per_round(K, steps)
        ph = phases["pilot" if s < P else "train"]
        ph["local_epochs"] += T * ep
        ph["uploads"] += T * up
        ph["broadcasts"] += T
        if s >= P and warm:
            gep, gup = per_round(K, gsteps)
            gc = phases["grad_compute"]
            gc["local_epochs"] += settings.V * gep
            gc["uploads"] += settings.V * gup
            gc["broadcasts"] += settings.V
    post = S - P
    stored = (2 if warm else 1) * post
    growth = (2 if warm else 1) * param_count if post > 0 else 0
    return CostReport(
        local_epochs_total=sum(p["local_epochs"] for p in phases.values()),
        client_uploads=sum(p["uploads"] for p in phases.values()),
        server_broadcasts=sum(p["broadcasts"] for p in phases.values()),
        stored_vectors=stored,
        storage_growth_per_session=growth,
        breakdown=phases,
    )


def simulated_costs(run_log) -> dict:
    """Counters accumulated by the simulator, for comparison with ``cost_account``."""
    return {
        "local_epochs_total": run_log.epochs_total,
        "client_uploads": run_log.uploads_total,
        "server_broadcasts": run_log.broadcasts_total,
        "stored_vectors": len(run_log.store.q1) + len(run_log.store.q2),
    }
