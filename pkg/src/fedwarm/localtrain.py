"""One client's local training for one global round."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .datahub import ClientDataset
from .models import Batch, ModelSpec

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fedacg")


@dataclass(frozen=True)
class LocalHyper:
    eta: float
    epochs: int
    batch_size: int
    algorithm: str = "fedavg"
    prox_mu: float = 0.0
    acg_beta: float = 0.0
    acg_lambda: float = 0.0
    kl_coefficient: float = 0.0
    distill_anchor: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.eta}")
        if self.epochs < 1:
            raise ValueError("local steps e_k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.prox_mu < 0 or self.acg_beta < 0 or self.kl_coefficient < 0:
            raise ValueError("prox_mu, acg_beta and kl_coefficient must be non-negative")
        if not 0 <= self.acg_lambda < 1:
            raise ValueError("acg_lambda must lie in [0, 1)")


@dataclass
class ClientState:
    """Per-client state carried across rounds of one session (SCAFFOLD's c_i)."""

    control_variate: np.ndarray | None = None


@dataclass
class ServerCtx:
    """What the server broadcasts along with the model."""

    control_variate: np.ndarray | None = None  # SCAFFOLD global c
    anchor: np.ndarray | None = None  # FedACG lookahead w~


@dataclass
class LocalCost:
    epochs: int = 0
    grad_evals: int = 0
    samples: int = 0


def sample_epoch_batches(
    dataset: ClientDataset, B: int, rng: np.random.Generator, steps: int = 1
) -> list[Batch]:
    """One batch per local step, each ``min(B, D_k)`` distinct samples.

    Every step draws a fresh permutation of the client's indices and keeps
    the first ``min(B, D_k)``; rows are then put in ascending index order.
    """
    if B < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError(f"client {dataset.client_id} has no samples")
    b = min(B, n)
    X, y, idx = dataset.parent.features, dataset.parent.labels, dataset.indices
    batches = []
    for _ in range(steps):
        pick = np.sort(idx[rng.permutation(n)[:b]])
        batches.append(Batch(X[pick], y[pick], pick))
    return batches


def local_train(
    spec: ModelSpec,
    w_start: np.ndarray,
    server_ctx: ServerCtx | None,
    dataset: ClientDataset,
    hyper: LocalHyper,
    state: ClientState | None,
    rng: np.random.Generator,
) -> tuple[np.ndarray, ClientState, LocalCost]:
    """Run ``hyper.epochs`` SGD steps from ``w_start``.

    For FedACG, ``w_start`` is the server's lookahead anchor. SCAFFOLD reads
    the global control variate from ``server_ctx`` and returns the updated
    client variate (option II).
    """
    M = spec.param_count
    w_start = np.asarray(w_start, dtype=np.float64)
    if w_start.shape != (M,):
        raise ValueError(f"start model has shape {w_start.shape}, model expects ({M},)")
    state = state if state is not None else ClientState()
    alg = hyper.algorithm
    c_glob = c_i = anchor = None
    if alg == "scaffold":
        if server_ctx is None or server_ctx.control_variate is None:
            raise ValueError("scaffold needs the global control variate in server_ctx")
        c_glob = server_ctx.control_variate
        c_i = state.control_variate if state.control_variate is not None else np.zeros(M)
        if c_glob.shape != (M,) or c_i.shape != (M,):
            raise ValueError("control variate dimension does not match the model")
    elif alg == "fedacg":
        if server_ctx is None or server_ctx.anchor is None:
            raise ValueError("fedacg needs the lookahead anchor in server_ctx")
        anchor = server_ctx.anchor
        if anchor.shape != (M,):
            raise ValueError("fedacg anchor dimension does not match the model")

    if hyper.batch_size > len(dataset):
        log.debug(
            "client %s: batch size %d exceeds its %d samples; clamping",
            dataset.client_id, hyper.batch_size, len(dataset),
        )
    distill = hyper.kl_coefficient > 0 and hyper.distill_anchor is not None

    cost = LocalCost()
    w = w_start.copy()
    for batch in sample_epoch_batches(dataset, hyper.batch_size, rng, hyper.epochs):
        q = models.softmax(models.logits(spec, hyper.distill_anchor, batch.features)) if distill else None
        _, g = models.loss_and_grad(spec, w, batch, q, hyper.kl_coefficient if distill else 0.0)
        if alg == "fedprox":
            g = g + hyper.prox_mu * (w - w_start)
        elif alg == "scaffold":
            g = g - c_i + c_glob
        elif alg == "fedacg":
            g = g + hyper.acg_beta * (w - anchor)
        w = w - hyper.eta * g
        cost.epochs += 1
        cost.grad_evals += 1
        cost.samples += len(batch)

    new_state = state
    if alg == "scaffold":
        if hyper.eta > 0:
            c_new = c_i - c_glob + (w_start - w) / (hyper.epochs * hyper.eta)
        else:
            c_new = c_i.copy()
        new_state = ClientState(c_new)
    return w, new_state, cost


@dataclass(frozen=True)
class LRSchedule:
    """Per-round learning rate within a session.

    ``eta(t) = (eta0 - end) * (1 - t / T) ** power + end``; ``power = 0``
    keeps the rate constant.
    """

    eta0: float
    power: float = 0.0
    end: float = 0.0

    def at(self, t: int, T: int) -> float:
        if self.power == 0.0:
            return self.eta0
        frac = 1.0 - t / max(T, 1)
        return (self.eta0 - self.end) * frac**self.power + self.end

    @classmethod
    def from_json(cls, path, default_eta: float) -> "LRSchedule":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {"eta0", "power", "end"}
        if unknown:
            raise ValueError(f"{path}: unknown learning-rate keys {sorted(unknown)}")
        return cls(float(data.get("eta0", default_eta)), float(data.get("power", 0.0)), float(data.get("end", 0.0)))
