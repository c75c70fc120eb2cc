"""Datasets, session schedules and client partitions.

A session is described by its label set and a partition descriptor. The
session's sample pool is every sample whose label is in the set. A held-out
test slice is cut from that pool, and the rest is split across the session's
clients.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import DTYPE

log = logging.getLogger(__name__)

NAMED_SCHEMES = ("two_shard", "half", "partial_overlap", "distinct")


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=DTYPE)
        y = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise DataError("features must be a 2-d array")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.name)

    def indices_of(self, label_set) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, np.asarray(sorted(label_set), dtype=np.int64)))


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's share of a parent dataset within one session."""

    client_id: int
    indices: np.ndarray
    session: int
    parent: LabeledDataset = field(repr=False)

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size != np.asarray(self.indices).size:
            raise DataError(f"client {self.client_id} has duplicate sample indices")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def features(self) -> np.ndarray:
        return self.parent.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.parent.labels[self.indices]


# ---------------------------------------------------------------- generation


def gen_gaussian_mixture(
    num_classes: int,
    per_class: int,
    input_dim: int,
    spread: float,
    rng: np.random.Generator,
    radius: float = 3.0,
) -> LabeledDataset:
    """Isotropic Gaussian blobs with class centers on a circle.

    Centers sit at angle ``2*pi*c/C`` in the first two coordinates, scaled by
    ``radius``; for ``input_dim == 1`` they are evenly spaced on a line. The
    remaining coordinates are pure noise.
    """
    if num_classes < 1 or per_class < 1 or input_dim < 1:
        raise DataError("num_classes, per_class and input_dim must be positive")
    if spread < 0:
        raise DataError("spread must be non-negative")
    centers = np.zeros((num_classes, input_dim))
    if input_dim == 1:
        centers[:, 0] = radius * (np.arange(num_classes) - (num_classes - 1) / 2)
    else:
        angle = 2 * np.pi * np.arange(num_classes) / num_classes
        centers[:, 0] = radius * np.cos(angle)
        centers[:, 1] = radius * np.sin(angle)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(size=(labels.size, input_dim))
    features = centers[labels] + spread * noise
    return LabeledDataset(features, labels, num_classes, name="gaussian")


def standardize(dataset: LabeledDataset) -> LabeledDataset:
    """Zero mean, unit variance per coordinate over the whole dataset."""
    X = dataset.features
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return LabeledDataset((X - mu) / sd, dataset.labels, dataset.num_classes, dataset.name)


# ----------------------------------------------------------------- CSV files


def load_csv(path) -> LabeledDataset:
    """Read ``label,f0,f1,...`` rows. Labels must be non-negative integers."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label" or len(header) < 2:
        raise DataError(f"{path}: line 1: header must be 'label,f0,f1,...'")
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
        try:
            label = int(row[0])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: label {row[0]!r} is not an integer") from None
        if label < 0:
            raise DataError(f"{path}: line {lineno}: negative label {label}")
        try:
            values = [float(c) for c in row[1:]]
        except ValueError:
            raise DataError(f"{path}: line {lineno}: non-numeric feature") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{path}: line {lineno}: non-finite feature")
        labels.append(label)
        feats.append(values)
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    return LabeledDataset(np.array(feats, dtype=DTYPE), y, int(y.max()) + 1, name=path.stem)


def write_csv(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


# ---------------------------------------------------------------- schedules


@dataclass
class SessionPlan:
    session: int
    labels: tuple[int, ...]
    client_ids: tuple[int, ...]
    partition: dict
    # sessions that recur use the data split and partition streams of their source
    data_source: int


@dataclass
class SessionSchedule:
    num_sessions: int
    pilot_sessions: int
    rounds_per_session: int
    sessions: list[SessionPlan]
    pilot_rounds: int | None = None

    def __post_init__(self):
        if self.pilot_sessions < 1:
            raise DataError("need at least one pilot session (P >= 1)")
        if self.num_sessions < self.pilot_sessions:
            raise DataError(f"S={self.num_sessions} must be >= P={self.pilot_sessions}")
        if self.rounds_per_session < 1:
            raise DataError("rounds per session T must be >= 1")
        if self.pilot_rounds is None:
            self.pilot_rounds = self.rounds_per_session

    def rounds_in(self, session: int) -> int:
        return self.pilot_rounds if session < self.pilot_sessions else self.rounds_per_session

    def to_dict(self) -> dict:
        return {
            "num_sessions": self.num_sessions,
            "pilot_sessions": self.pilot_sessions,
            "rounds_per_session": self.rounds_per_session,
            "pilot_rounds": self.pilot_rounds,
            "sessions": [
                {
                    "session": p.session,
                    "labels": list(p.labels),
                    "client_ids": list(p.client_ids),
                    "partition": p.partition,
                    "data_source": p.data_source,
                }
                for p in self.sessions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSchedule":
        plans = [
            SessionPlan(
                p["session"], tuple(p["labels"]), tuple(p["client_ids"]), dict(p["partition"]), p["data_source"]
            )
            for p in d["sessions"]
        ]
        return cls(d["num_sessions"], d["pilot_sessions"], d["rounds_per_session"], plans, d.get("pilot_rounds"))


def build_session_schedule(
    num_labels: int,
    S: int,
    P: int,
    T: int,
    overlap: float,
    labels_per_session: int,
    recurrence: dict[int, int] | None,
    rng: np.random.Generator,
    *,
    num_clients: int = 1,
    partition: dict | None = None,
    unseen_final: int = 0,
    pilot_rounds: int | None = None,
) -> SessionSchedule:
    """Label sets per session with a fixed overlap between neighbours.

    Consecutive sessions share ``round(overlap * labels_per_session)`` labels.
    ``recurrence`` maps a session to an earlier one whose label set, client
    ids and data split it reuses verbatim (e.g. ``{2: 0}`` for A/B/A).
    ``unseen_final`` reserves that many labels so only the last session sees
    them.
    """
    if not 0 <= overlap < 1:
        raise DataError(f"overlap must lie in [0, 1), got {overlap}")
    if not 1 <= labels_per_session <= num_labels:
        raise DataError(f"labels_per_session must lie in [1, {num_labels}]")
    recurrence = dict(recurrence or {})
    for dst, src in recurrence.items():
        if not 0 <= src < dst < S:
            raise DataError(f"recurrence {dst}->{src} must point to an earlier session within [0, {S})")
    shared = int(round(overlap * labels_per_session))
    fresh = labels_per_session - shared
    if not 0 <= unseen_final <= fresh:
        raise DataError(f"unseen_final={unseen_final} must be at most the {fresh} new labels per transition")
    all_labels = np.arange(num_labels)
    reserved = np.sort(rng.choice(all_labels, size=unseen_final, replace=False)) if unseen_final else np.array([], int)
    usable = np.setdiff1d(all_labels, reserved)
    if S > 1 and usable.size < labels_per_session + fresh - unseen_final:
        raise DataError(
            f"overlap {overlap} with {labels_per_session} labels per session needs at least "
            f"{labels_per_session + fresh} labels outside the unseen reserve, have {usable.size}"
        )
    partition = dict(partition or {"kind": "dirichlet", "alpha": 0.5})
    plans: list[SessionPlan] = []
    prev: np.ndarray | None = None
    for s in range(S):
        if s in recurrence:
            src = plans[recurrence[s]]
            plans.append(SessionPlan(s, src.labels, src.client_ids, dict(src.partition), src.data_source))
            prev = np.array(src.labels)
            continue
        last = s == S - 1 and unseen_final > 0
        if prev is None:
            if last:
                rest = rng.choice(usable, size=labels_per_session - unseen_final, replace=False)
                labels = np.concatenate([reserved, rest])
            else:
                labels = rng.choice(usable, size=labels_per_session, replace=False)
        else:
            keep = rng.choice(prev, size=shared, replace=False) if shared else np.array([], int)
            candidates = np.setdiff1d(usable, prev)
            need = fresh - unseen_final if last else fresh
            if candidates.size < need:
                raise DataError(f"session {s}: only {candidates.size} labels outside the previous set, need {need}")
            picked = rng.choice(candidates, size=need, replace=False)
            labels = np.concatenate([keep, reserved, picked]) if last else np.concatenate([keep, picked])
        labels = tuple(int(v) for v in np.sort(labels))
        ids = tuple(range(s * num_clients, (s + 1) * num_clients))
        plans.append(SessionPlan(s, labels, ids, dict(partition), s))
        prev = np.array(labels)
    return SessionSchedule(S, P, T, plans, pilot_rounds)


# --------------------------------------------------------------- partitions


def _client_sets(pieces: list[list[np.ndarray]], session: int, parent, client_ids) -> list[ClientDataset]:
    out = []
    for cid, parts in zip(client_ids, pieces):
        idx = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
        out.append(ClientDataset(int(cid), np.sort(idx), session, parent))
    return out


def _resolve_pool(dataset: LabeledDataset, label_set, pool) -> np.ndarray:
    pool = np.arange(len(dataset)) if pool is None else np.asarray(pool, dtype=np.int64)
    if label_set is not None:
        pool = pool[np.isin(dataset.labels[pool], np.asarray(list(label_set), dtype=np.int64))]
    return np.sort(pool)


def partition_dirichlet(
    dataset: LabeledDataset,
    label_set,
    alpha: float,
    K: int,
    rng: np.random.Generator,
    *,
    pool=None,
    session: int = 0,
    client_ids=None,
) -> list[ClientDataset]:
    """Split each label's samples across ``K`` clients with Dirichlet(alpha) shares.

    A client left empty takes one sample from the currently largest client,
    repeated until every client holds at least one sample.
    """
    if not alpha > 0:
        raise DataError(f"dirichlet alpha must be positive, got {alpha}")
    if K < 1:
        raise DataError("need at least one client")
    labels = sorted(int(v) for v in label_set)
    if not labels:
        raise DataError("label set is empty")
    idx = _resolve_pool(dataset, labels, pool)
    if idx.size < K:
        raise DataError(f"{idx.size} samples cannot cover {K} clients")
    pieces: list[list[np.ndarray]] = [[] for _ in range(K)]
    for lab in labels:
        members = idx[dataset.labels[idx] == lab]
        if members.size == 0:
            continue
        members = rng.permutation(members)
        shares = rng.dirichlet(np.full(K, float(alpha)))
        cuts = (np.cumsum(shares)[:-1] * members.size).astype(np.int64)
        for k, part in enumerate(np.split(members, cuts)):
            if part.size:
                pieces[k].append(part)
    flat = [np.concatenate(p) if p else np.array([], dtype=np.int64) for p in pieces]
    for k in range(K):
        if flat[k].size == 0:
            donor = int(np.argmax([f.size for f in flat]))
            flat[k] = flat[donor][-1:]
            flat[donor] = flat[donor][:-1]
    ids = list(range(K)) if client_ids is None else list(client_ids)
    return _client_sets([[f] for f in flat], session, dataset, ids)


def partition_named(
    dataset: LabeledDataset,
    scheme: str,
    K: int,
    rng: np.random.Generator,
    *,
    label_set=None,
    pool=None,
    session: int = 0,
    client_ids=None,
    set_fraction: float = 0.6,
    overlap_fraction: float = 0.2,
) -> list[ClientDataset]:
    """Structured label splits: ``two_shard``, ``half``, ``partial_overlap``, ``distinct``."""
    idx = _resolve_pool(dataset, label_set, pool)
    labels = np.unique(dataset.labels[idx]) if label_set is None else np.array(sorted(label_set), dtype=np.int64)
    n = labels.size
    by_label = {int(l): rng.permutation(idx[dataset.labels[idx] == l]) for l in labels}
    ids = list(range(K)) if client_ids is None else list(client_ids)
    pieces: list[list[np.ndarray]] = [[] for _ in range(K)]

    if scheme == "distinct":
        if n < K or n % K:
            raise DataError(f"distinct needs the {n} labels to split into {K} equal groups (num_labels % K == 0)")
        per = n // K
        for k in range(K):
            for l in labels[k * per : (k + 1) * per]:
                pieces[k].append(by_label[int(l)])
    elif scheme == "half":
        if K < 2 or K % 2:
            raise DataError(f"half needs an even number of clients >= 2, got {K}")
        if n < 2:
            raise DataError("half needs at least 2 labels")
        groups = [(labels[: n // 2], range(K // 2)), (labels[n // 2 :], range(K // 2, K))]
        for group_labels, owners in groups:
            owners = list(owners)
            for l in group_labels:
                for k, part in zip(owners, np.array_split(by_label[int(l)], len(owners))):
                    pieces[k].append(part)
    elif scheme == "two_shard":
        if K < 2:
            raise DataError("two_shard needs at least 2 clients")
        per_label = max(2, math.ceil(2 * K / n))
        order = rng.permutation(labels)
        shards = []
        for l in order:
            shards.extend(np.array_split(by_label[int(l)], per_label))
        if per_label > K:
            raise DataError(f"two_shard with {n} labels and K={K} cannot give each client two different labels")
        # shard k and k+K come from different labels because each label spans per_label <= K slots
        for k in range(K):
            pieces[k].append(shards[k])
            pieces[k].append(shards[k + K])
        for j, shard in enumerate(shards[2 * K :]):
            pieces[j % K].append(shard)
    elif scheme == "partial_overlap":
        if K < 2:
            raise DataError("partial_overlap needs at least 2 clients")
        m = int(round(set_fraction * n))
        o = int(round(overlap_fraction * n))
        if m < 1 or o > m or 2 * m - o > n:
            raise DataError(
                f"partial_overlap with set_fraction={set_fraction}, overlap_fraction={overlap_fraction} "
                f"does not fit {n} labels"
            )
        first = labels[:m]
        second = labels[m - o : 2 * m - o]
        shared = set(int(l) for l in first) & set(int(l) for l in second)
        groups = [(first, list(range(K // 2))), (second, list(range(K // 2, K)))]
        for gi, (group_labels, owners) in enumerate(groups):
            for l in group_labels:
                data = by_label[int(l)]
                if int(l) in shared:
                    data = np.array_split(data, 2)[gi]
                for k, part in zip(owners, np.array_split(data, len(owners))):
                    pieces[k].append(part)
    else:
        raise DataError(f"unknown partition scheme {scheme!r}; expected one of {NAMED_SCHEMES}")

    clients = _client_sets(pieces, session, dataset, ids)
    empty = [c.client_id for c in clients if len(c) == 0]
    if empty:
        raise DataError(f"{scheme}: clients {empty} received no samples; too few samples per label for K={K}")
    return clients


def partition_session(
    dataset: LabeledDataset,
    label_set,
    descriptor: dict,
    K: int,
    rng: np.random.Generator,
    *,
    pool=None,
    session: int = 0,
    client_ids=None,
) -> list[ClientDataset]:
    kind = descriptor.get("kind", "dirichlet")
    if kind == "dirichlet":
        return partition_dirichlet(
            dataset, label_set, descriptor["alpha"], K, rng, pool=pool, session=session, client_ids=client_ids
        )
    extra = {k: descriptor[k] for k in ("set_fraction", "overlap_fraction") if k in descriptor}
    return partition_named(
        dataset, kind, K, rng, label_set=label_set, pool=pool, session=session, client_ids=client_ids, **extra
    )


def split_holdout(indices: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``(train, test)`` split of ``indices``; test gets ``round(fraction*n)``."""
    indices = np.asarray(indices, dtype=np.int64)
    n_test = int(round(fraction * indices.size))
    if fraction > 0 and n_test == 0 and indices.size > 1:
        n_test = 1
    perm = rng.permutation(indices)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def label_histograms(clients: list[ClientDataset], num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(c.labels, minlength=num_classes) for c in clients])
