"""Session/round orchestration with similarity-weighted warm starts.

The first ``P`` sessions train from a random model and their final models are
averaged into a pilot model. Every later session starts by running ``V``
rounds from the pilot. The resulting displacement ``G_s`` fingerprints the
session's data. The session's initial model is then a softmax-weighted blend of
earlier post-pilot final models, with weights ``exp(-R * ||G_s - G_z||)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .datahub import ClientDataset, LabeledDataset
from .localtrain import ClientState, LocalCost, LocalHyper, LRSchedule, ServerCtx, local_train
from .models import Batch, ModelSpec
from .numkit import check_finite, derive_stream, mean_vectors, weighted_mean

log = logging.getLogger(__name__)

VARIANTS = ("proposed", "previous", "average", "continuous", "random_pilot")


# ------------------------------------------------------------ artifact store


@dataclass
class ArtifactStore:
    """Q1 holds end-of-session models, Q2 computed gradients."""

    q1: list[tuple[int, np.ndarray]] = field(default_factory=list)
    q2: list[tuple[int, np.ndarray]] = field(default_factory=list)
    pilot: np.ndarray | None = None

    def save(self, directory) -> Path:
        """Write each vector as raw little-endian float64 plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, items in (("q1", self.q1), ("q2", self.q2)):
            for session, vec in items:
                fname = f"{name}_s{session}.bin"
                vec.astype("<f8").tofile(directory / fname)
                entries.append({"list": name, "session": session, "file": fname, "length": int(vec.size)})
        if self.pilot is not None:
            self.pilot.astype("<f8").tofile(directory / "pilot.bin")
        manifest = {
            "format": "float64-le",
            "entries": entries,
            "pilot": None if self.pilot is None else {"file": "pilot.bin", "length": int(self.pilot.size)},
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, directory) -> "ArtifactStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        store = cls()
        for e in manifest["entries"]:
            vec = np.fromfile(directory / e["file"], dtype="<f8")
            if vec.size != e["length"]:
                raise ValueError(f"{e['file']}: expected {e['length']} values, found {vec.size}")
            getattr(store, e["list"]).append((e["session"], vec.astype(np.float64)))
        if manifest["pilot"] is not None:
            store.pilot = np.fromfile(directory / manifest["pilot"]["file"], dtype="<f8").astype(np.float64)
        return store


# -------------------------------------------------------- vector operations


def aggregate(updates) -> np.ndarray:
    """Weighted mean ``sum_k D_k w_k / sum_k D_k``.

    ``updates`` holds ``(w_k, D_k)`` pairs or ``(client_id, w_k, D_k)``
    triples. Triples are accumulated in client-id order, so the result does
    not depend on the order clients finished.
    """
    updates = list(updates)
    if not updates:
        raise ValueError("cannot aggregate an empty list of updates")
    if len(updates[0]) == 3:
        updates = [(w, d) for _, w, d in sorted(updates, key=lambda u: u[0])]
    dim = np.shape(updates[0][0])
    for w, d in updates:
        if np.shape(w) != dim:
            raise ValueError(f"update dimension {np.shape(w)} differs from {dim}")
        if not d > 0:
            raise ValueError(f"aggregation weights must be positive, got {d}")
    return weighted_mean([np.asarray(w, dtype=np.float64) for w, _ in updates], [d for _, d in updates])


def compute_pilot(last_models) -> np.ndarray:
    """Arithmetic mean of the first ``P`` end-of-session models."""
    last_models = list(last_models)
    if not last_models:
        raise ValueError("pilot model needs at least one saved model")
    if len(last_models) == 1:
        return np.array(last_models[0], dtype=np.float64, copy=True)
    return mean_vectors(last_models)


def similarity_weights(distances, R: float) -> np.ndarray:
    """Softmax of ``-R * d``, shifted by the minimum distance for stability."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("need at least one distance")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and non-negative")
    if not np.isfinite(R):
        raise ValueError("R must be finite")
    if R == 0:
        return np.full(d.size, 1.0 / d.size)
    e = np.exp(-R * (d - d.min()))
    return e / e.sum()


def construct_initial_model(store: ArtifactStore, G_s: np.ndarray, R: float) -> tuple[np.ndarray, np.ndarray]:
    """Blend the saved post-pilot final models by gradient similarity.

    Returns ``(w_init, alphas)`` where ``alphas`` follow the order of
    ``store.q1``. Gradients are matched to models by session id.
    """
    if not store.q1:
        raise ValueError("no post-pilot models saved; start from the pilot model instead")
    grads = dict(store.q2)
    missing = [s for s, _ in store.q1 if s not in grads]
    if missing:
        raise ValueError(f"no computed gradient stored for sessions {missing}")
    dists = [float(np.linalg.norm(G_s - grads[s])) for s, _ in store.q1]
    alphas = similarity_weights(dists, R)
    if len(store.q1) == 1:
        return store.q1[0][1].copy(), alphas
    acc = np.zeros_like(store.q1[0][1])
    for a, (_, w) in zip(alphas, store.q1):
        acc += a * w
    return acc, alphas


@dataclass
class InitContext:
    session: int
    history: list[np.ndarray]  # end-of-session models available to the baseline
    spec: ModelSpec | None = None
    rng: np.random.Generator | None = None
    pilot: np.ndarray | None = None


def baseline_init(kind: str, context: InitContext) -> np.ndarray:
    """Starting model for the comparison baselines."""
    if kind == "previous":
        if context.session < 1 or not context.history:
            raise ValueError("the previous baseline needs a completed earlier session")
        return context.history[-1].copy()
    if kind == "average":
        if not context.history:
            raise ValueError("the average baseline needs at least one saved model")
        return mean_vectors(context.history)
    if kind == "pilot":
        if context.pilot is None:
            raise ValueError("no pilot model has been computed yet")
        return context.pilot.copy()
    if kind == "random":
        if context.spec is None or context.rng is None:
            raise ValueError("random init needs a model spec and a random stream")
        return models.init_params(context.spec, context.rng)
    raise ValueError(f"unknown baseline {kind!r}")


# ----------------------------------------------------------------- run log


@dataclass
class ClientRoundInfo:
    client_id: int
    epochs: int
    batch_size: int
    num_samples: int
    sigma_tilde: float


@dataclass
class RoundRecord:
    session: int
    round_in_session: int
    global_round: int
    phase: str
    variant: str
    loss_start: float
    train_loss: float
    test_accuracy: float
    grad_norm_sq: float
    eta: float
    comm_up: int
    comm_down: int
    epochs_this_round: int
    wall_ms: int
    clients: list[ClientRoundInfo] = field(default_factory=list, repr=False)


@dataclass
class RunLog:
    variant: str
    records: list[RoundRecord] = field(default_factory=list)
    store: ArtifactStore = field(default_factory=ArtifactStore)
    session_models: list[np.ndarray] = field(default_factory=list, repr=False)
    alphas: dict[int, list[float]] = field(default_factory=dict)
    initial_models: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    epochs_total: int = 0
    uploads_total: int = 0
    broadcasts_total: int = 0

    def train_records(self) -> list[RoundRecord]:
        return [r for r in self.records if r.phase == "train"]


# -------------------------------------------------------- simulation inputs


@dataclass
class SessionData:
    session: int
    clients: list[ClientDataset]
    test: LabeledDataset | None = None


@dataclass(frozen=True)
class TrainSettings:
    algorithm: str = "fedavg"
    lr: LRSchedule = LRSchedule(0.05)
    local_steps: tuple[int, ...] = (5,)
    batch_size: int = 16
    grad_steps: tuple[int, ...] = (5,)
    grad_batch_size: int = 16
    V: int = 1
    R: float = 10.0
    prox_mu: float = 0.0
    acg_beta: float = 0.0
    acg_lambda: float = 0.0
    kl_coefficient: float = 0.0
    participation: float = 1.0
    seed: int = 0
    workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.V < 1:
            raise ValueError("V (gradient computation rounds) must be >= 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation fraction must lie in (0, 1]")
        if not self.local_steps or min(self.local_steps) < 1:
            raise ValueError("local steps must be positive")
        if not self.grad_steps or min(self.grad_steps) < 1:
            raise ValueError("gradient-computation steps must be positive")


def sigma_tilde(features: np.ndarray) -> float:
    """Root mean squared distance of feature vectors to their mean (1/D normalization)."""
    X = np.asarray(features, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))))


def _pooled(clients: list[ClientDataset]) -> Batch:
    idx = np.sort(np.concatenate([c.indices for c in clients]))
    parent = clients[0].parent
    return Batch(parent.features[idx], parent.labels[idx], idx)


def participants_for(clients: list[ClientDataset], fraction: float, seed: int, path) -> list[ClientDataset]:
    if fraction >= 1.0:
        return clients
    m = max(1, int(round(fraction * len(clients))))
    pick = np.sort(derive_stream(seed, path).choice(len(clients), size=m, replace=False))
    return [clients[i] for i in pick]


class _Session:
    """Mutable per-session optimizer state (control variates, momentum)."""

    def __init__(self, dim: int):
        self.c = np.zeros(dim)
        self.c_i: dict[int, np.ndarray] = {}
        self.m = np.zeros(dim)


class Simulator:
    """Runs global rounds for one model and one optimizer configuration."""

    def __init__(self, spec: ModelSpec, settings: TrainSettings, variant: str = "proposed"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.spec = spec
        self.cfg = settings
        self.variant = variant
        self._pool = ThreadPoolExecutor(settings.workers) if settings.workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    # one broadcast -> local training -> aggregation cycle
    def global_round(
        self,
        w: np.ndarray,
        clients: list[ClientDataset],
        state: _Session,
        eta: float,
        steps: tuple[int, ...],
        batch_size: int,
        path: tuple,
        all_clients: list[ClientDataset],
        distill_anchor: np.ndarray | None = None,
    ):
        cfg = self.cfg
        alg = cfg.algorithm
        if alg == "fedacg":
            start = w + cfg.acg_lambda * state.m
            ctx = ServerCtx(anchor=start)
        elif alg == "scaffold":
            start = w
            ctx = ServerCtx(control_variate=state.c)
        else:
            start = w
            ctx = None
        position = {c.client_id: i for i, c in enumerate(all_clients)}
        kl = cfg.kl_coefficient if distill_anchor is not None else 0.0

        def work(client: ClientDataset):
            e_k = steps[position[client.client_id] % len(steps)]
            hyper = LocalHyper(
                eta=eta, epochs=e_k, batch_size=batch_size, algorithm=alg, prox_mu=cfg.prox_mu,
                acg_beta=cfg.acg_beta, acg_lambda=cfg.acg_lambda, kl_coefficient=kl,
                distill_anchor=distill_anchor,
            )
            st = ClientState(state.c_i.get(client.client_id))
            rng = derive_stream(cfg.seed, path + (client.client_id,))
            w_k, st2, cost = local_train(self.spec, start, ctx, client, hyper, st, rng)
            return client, e_k, w_k, st2, cost

        results = list(self._pool.map(work, clients)) if self._pool else [work(c) for c in clients]
        results.sort(key=lambda r: r[0].client_id)
        w_new = check_finite(
            aggregate([(c.client_id, w_k, len(c)) for c, _, w_k, _, _ in results]), "aggregated model"
        )
        if alg == "scaffold":
            delta = np.zeros_like(state.c)
            for c, _, _, st2, _ in results:
                old = state.c_i.get(c.client_id)
                delta += st2.control_variate - (old if old is not None else 0.0)
                state.c_i[c.client_id] = st2.control_variate
            state.c = state.c + delta / len(all_clients)
        elif alg == "fedacg":
            state.m = cfg.acg_lambda * state.m + (w_new - start)
        costs: list[LocalCost] = [r[4] for r in results]
        info = [(c, e_k) for c, e_k, _, _, _ in results]
        return start, w_new, info, costs


def run_sessions(
    spec: ModelSpec,
    sessions: list[SessionData],
    pilot_sessions: int,
    rounds: list[int],
    settings: TrainSettings,
    variant: str = "proposed",
    w0: np.ndarray | None = None,
) -> RunLog:
    """Train through every session, building warm starts as the variant asks.

    ``rounds[s]`` is the number of global rounds in session ``s``. ``w0``
    overrides the random initial model.
    """
    S, P = len(sessions), pilot_sessions
    if P < 1 or S < P:
        raise ValueError(f"need S >= P >= 1, got S={S}, P={P}")
    if len(rounds) != S or min(rounds) < 1:
        raise ValueError("need one positive round count per session")
    cfg = settings
    sim = Simulator(spec, cfg, variant)
    runlog = RunLog(variant)
    store = runlog.store
    M = spec.param_count
    w = (
        np.array(w0, dtype=np.float64, copy=True)
        if w0 is not None
        else models.init_params(spec, derive_stream(cfg.seed, ("init",)))
    )
    if w.shape != (M,):
        raise ValueError(f"initial model has shape {w.shape}, expected ({M},)")
    grad_origin = None  # start point of gradient computation; differs from the pilot only for random_pilot
    global_offset = 0

    def evaluate(w_eval, pooled, test):
        f, g = models.loss_and_grad(spec, w_eval, pooled)
        acc = models.accuracy(spec, w_eval, test) if (test is not None and spec.is_classifier) else float("nan")
        return f, g, acc

    try:
        for s, sd in enumerate(sessions):
            T = rounds[s]
            clients = sd.clients
            if not clients or any(len(c) == 0 for c in clients):
                raise ValueError(f"session {s}: every active client needs at least one sample")
            small = [c.client_id for c in clients if len(c) < cfg.batch_size]
            if small:
                log.warning("session %d: clients %s hold fewer than %d samples; their batches are clamped",
                            s, small, cfg.batch_size)
            sigmas = {c.client_id: sigma_tilde(c.features) for c in clients}
            pooled_all = _pooled(clients)
            state = _Session(M)
            warm = s >= P and variant in ("proposed", "random_pilot")
            distill = runlog.session_models[-1] if (variant == "continuous" and s >= P) else None

            for t in range(T):
                eta = cfg.lr.at(t, T)
                if t == 0 and s >= P:
                    if warm:
                        G_s = _gradient_phase(sim, runlog, s, grad_origin, sd, cfg, global_offset, M, evaluate)
                        if s > P:
                            w_init, alphas = construct_initial_model(store, G_s, cfg.R)
                            runlog.alphas[s] = [float(a) for a in alphas]
                        else:
                            w_init = store.pilot.copy()
                        store.q2.append((s, G_s))
                        w = w_init
                    elif variant == "average":
                        # same pool the R=0 blend would average: the pilot sessions'
                        # models when s == P, the post-pilot saved models after that
                        pool = [m for _, m in store.q1] if s > P else runlog.session_models[:P]
                        w = baseline_init("average", InitContext(s, pool))
                    runlog.initial_models[s] = w.copy()

                part = participants_for(clients, cfg.participation, cfg.seed, (s, t, "participation"))
                pooled = pooled_all if part is clients else _pooled(part)
                tic = time.perf_counter()
                start, w_new, info, costs = sim.global_round(
                    w, part, state, eta, cfg.local_steps, cfg.batch_size, (s, t), clients, distill
                )
                f0, g0, _ = evaluate(start, pooled, None)
                f1, _, acc = evaluate(w_new, pooled, sd.test)
                wall = int(round((time.perf_counter() - tic) * 1000)) if cfg.record_wall_time else 0
                epochs = sum(c.epochs for c in costs)
                runlog.records.append(
                    RoundRecord(
                        session=s, round_in_session=t, global_round=global_offset + t, phase="train",
                        variant=variant, loss_start=f0, train_loss=f1, test_accuracy=acc,
                        grad_norm_sq=float(g0 @ g0), eta=eta, comm_up=len(part), comm_down=1,
                        epochs_this_round=epochs, wall_ms=wall,
                        clients=[
                            ClientRoundInfo(c.client_id, e_k, min(cfg.batch_size, len(c)), len(c), sigmas[c.client_id])
                            for c, e_k in info
                        ],
                    )
                )
                runlog.epochs_total += epochs
                runlog.uploads_total += len(part)
                runlog.broadcasts_total += 1
                w = w_new

                if t == T - 1:
                    runlog.session_models.append(w.copy())
                    store.q1.append((s, w.copy()))
                    if store.pilot is None and len(store.q1) == P:
                        store.pilot = compute_pilot([m for _, m in store.q1])
                        del store.q1[:P]
                        if variant == "random_pilot":
                            grad_origin = models.init_params(spec, derive_stream(cfg.seed, ("random_pilot",)))
                        else:
                            grad_origin = store.pilot
            global_offset += T
    finally:
        sim.close()
    return runlog


def _gradient_phase(sim, runlog, s, origin, sd, cfg, global_offset, M, evaluate):
    """Run ``V`` rounds from ``origin`` and log them; returns ``G_s``."""
    scratch = _Session(M)
    w = origin.copy()
    clients = sd.clients
    pooled_all = _pooled(clients)
    sigmas = {c.client_id: sigma_tilde(c.features) for c in clients}
    eta = cfg.lr.at(0, 1)
    for v in range(cfg.V):
        part = participants_for(clients, cfg.participation, cfg.seed, (s, "grad", v, "participation"))
        pooled = pooled_all if part is clients else _pooled(part)
        tic = time.perf_counter()
        start, w_new, info, costs = sim.global_round(
            w, part, scratch, eta, cfg.grad_steps, cfg.grad_batch_size, (s, "grad", v), clients
        )
        f0, g0, _ = evaluate(start, pooled, None)
        f1, _, acc = evaluate(w_new, pooled, sd.test)
        wall = int(round((time.perf_counter() - tic) * 1000)) if cfg.record_wall_time else 0
        epochs = sum(c.epochs for c in costs)
        runlog.records.append(
            RoundRecord(
                session=s, round_in_session=v, global_round=global_offset, phase="grad_compute",
                variant=runlog.variant, loss_start=f0, train_loss=f1, test_accuracy=acc,
                grad_norm_sq=float(g0 @ g0), eta=eta, comm_up=len(part), comm_down=1,
                epochs_this_round=epochs, wall_ms=wall,
                clients=[
                    ClientRoundInfo(c.client_id, e_k, min(cfg.grad_batch_size, len(c)), len(c), sigmas[c.client_id])
                    for c, e_k in info
                ],
            )
        )
        runlog.epochs_total += epochs
        runlog.uploads_total += len(part)
        runlog.broadcasts_total += 1
        w = w_new
    return w - origin


def compute_session_gradient(
    spec: ModelSpec,
    pilot: np.ndarray | None,
    session: SessionData,
    V: int,
    settings: TrainSettings,
) -> np.ndarray:
    """``G_s``: model displacement after ``V`` aggregations started at the pilot."""
    if pilot is None:
        raise ValueError("no pilot model yet; computed gradients exist only for sessions s >= P")
    cfg = dataclasses.replace(settings, V=V)
    sim = Simulator(spec, cfg)
    scratch_log = RunLog("proposed")
    M = spec.param_count

    def evaluate(w_eval, pooled, test):
        f, g = models.loss_and_grad(spec, w_eval, pooled)
        return f, g, float("nan")

    try:
        return _gradient_phase(sim, scratch_log, session.session, np.asarray(pilot, dtype=np.float64),
                               session, cfg, 0, M, evaluate)
    finally:
        sim.close()


def run_training(config, variant: str | None = None) -> RunLog:
    """Build data from a ``RunConfig`` and run one variant end to end."""
    from .config import prepare_run

    spec, sessions, schedule, settings = prepare_run(config)
    v = variant or config.variants[0]
    rounds = [schedule.rounds_in(s) for s in range(schedule.num_sessions)]
    return run_sessions(spec, sessions, schedule.pilot_sessions, rounds, settings, v)
