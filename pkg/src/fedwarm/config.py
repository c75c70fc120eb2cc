"""Run configuration: flags, flat ``key=value`` files, and data preparation.

Every ``RunConfig`` field is also a command-line flag of the same name, and
a config-file key of the same name. Flags override file values, which
override defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import datahub
from .datahub import LabeledDataset, SessionSchedule
from .localtrain import ALGORITHMS, LRSchedule
from .models import ModelSpec
from .numkit import derive_stream
from .server import VARIANTS, SessionData, TrainSettings


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    if isinstance(text, int):
        return (text,)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _str_list(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(v for v in str(text).replace(" ", "").split(",") if v)


def _recurrence(text) -> dict[int, int]:
    if isinstance(text, dict):
        return {int(k): int(v) for k, v in text.items()}
    out = {}
    for item in str(text).replace(" ", "").split(","):
        if not item:
            continue
        dst, sep, src = item.partition(":")
        if not sep:
            raise ConfigError(f"session_recurrence item {item!r} must look like 'dst:src'")
        out[int(dst)] = int(src)
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


def _opt_str(text):
    return None if text in (None, "", "none", "None") else str(text)


@dataclass(frozen=True)
class RunConfig:
    dataset_name: str | None = None
    model: str = "softmax_linear"
    hidden_dim: int = 16
    num_classes: int = 6
    per_class: int = 200
    input_dim: int = 2
    spread: float = 0.8
    standardize: bool = True
    algorithm: str = "fedavg"
    variant: tuple[str, ...] = ("proposed",)
    num_clients: int = 20
    num_sessions: int = 6
    num_sessions_pilot: int = 1
    num_rounds_actual: int = 30
    num_rounds_pilot: int | None = None
    num_round_grad_cal: int = 1
    cross_session_label_overlap: float = 0.0
    labels_per_session: int | None = None
    session_recurrence: dict = dataclasses.field(default_factory=dict)
    unseen_final_labels: int = 0
    in_session_label_dist: str = "dirichlet"
    dirichlet_alpha: float = 0.3
    test_fraction: float = 0.2
    lr: float = 0.05
    lr_config_path: str | None = None
    num_SGD_training: tuple[int, ...] = (5,)
    batch_size_training: int = 16
    num_SGD_grad_cal: tuple[int, ...] = (5,)
    batch_size_grad_cal: int = 16
    similarity: str = "two_norm"
    similarity_scale: float = 10.0
    prox_alpha: float = 1.0
    acg_beta: float = 0.01
    acg_lambda: float = 0.85
    kl_coefficient: float = 1.0
    participation_fraction: float = 1.0
    seed: int = 0
    output_dir: str = "runs/latest"
    transition_window: int = 10
    workers: int = 1
    record_wall_time: bool = False
    bound_lambda: float = 0.5
    bound_probes: int = 4

    @property
    def variants(self) -> tuple[str, ...]:
        return self.variant


HELP = {
    "dataset_name": "'gaussian' for the synthetic mixture or 'csv:PATH' (required)",
    "model": "softmax_linear | mlp1 | quadratic",
    "hidden_dim": "hidden units of mlp1",
    "num_classes": "classes of the synthetic mixture",
    "per_class": "samples per class of the synthetic mixture",
    "input_dim": "feature dimension of the synthetic mixture",
    "spread": "within-class standard deviation of the synthetic mixture",
    "standardize": "standardize features to zero mean and unit variance",
    "algorithm": "fedavg | fedprox | scaffold | fedacg",
    "variant": "comma list of proposed, previous, average, continuous, random_pilot",
    "num_clients": "active clients per session",
    "num_sessions": "total sessions S",
    "num_sessions_pilot": "pilot sessions P",
    "num_rounds_actual": "global rounds T per post-pilot session",
    "num_rounds_pilot": "global rounds per pilot session (default: num_rounds_actual)",
    "num_round_grad_cal": "gradient-computation rounds V",
    "cross_session_label_overlap": "fraction of labels shared by consecutive sessions, in [0, 1)",
    "labels_per_session": "labels active per session (default: half the classes)",
    "session_recurrence": "comma list dst:src making session dst reuse session src's data, e.g. '3:1'",
    "unseen_final_labels": "labels reserved for the final session only",
    "in_session_label_dist": "dirichlet | two_shard | half | partial_overlap | distinct",
    "dirichlet_alpha": "Dirichlet concentration for in-session label splits",
    "test_fraction": "share of each session's pool held out for testing",
    "lr": "learning rate eta",
    "lr_config_path": "JSON file with eta0/power/end for polynomial decay within a session",
    "num_SGD_training": "local SGD steps e_k; a comma list is cycled over clients",
    "batch_size_training": "mini-batch size B_k",
    "num_SGD_grad_cal": "local steps during gradient computation",
    "batch_size_grad_cal": "mini-batch size during gradient computation",
    "similarity": "distance between computed gradients (two_norm)",
    "similarity_scale": "similarity scaling factor R",
    "prox_alpha": "FedProx proximal coefficient mu",
    "acg_beta": "FedACG regularizer strength",
    "acg_lambda": "FedACG server momentum",
    "kl_coefficient": "distillation weight of the continuous baseline",
    "participation_fraction": "share of active clients sampled each round, in (0, 1]",
    "seed": "master random seed",
    "output_dir": "directory for metrics.csv, summary.json, bound_report.json",
    "transition_window": "rounds N averaged after each session transition",
    "workers": "threads for client training within a round",
    "record_wall_time": "write real wall_ms values (breaks byte-identical reruns)",
    "bound_lambda": "Lambda used by the bound diagnostics, in (0, 1)",
    "bound_probes": "probe count for the constant estimators",
}

_PARSERS = {
    "variant": _str_list,
    "num_SGD_training": _int_list,
    "num_SGD_grad_cal": _int_list,
    "session_recurrence": _recurrence,
    "standardize": _bool,
    "record_wall_time": _bool,
    "num_rounds_pilot": _opt_int,
    "labels_per_session": _opt_int,
    "lr_config_path": _opt_str,
    "dataset_name": _opt_str,
}


def _coerce(name: str, value):
    if name in _PARSERS:
        return _PARSERS[name](value)
    default = next(f.default for f in fields(RunConfig) if f.name == name)
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}: line {lineno}: expected key=value")
        if key not in known:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def add_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file; flags override it")
    for f in fields(RunConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        parser.add_argument(f"--{f.name}", dest=f.name, default=None, metavar=f.name.upper(),
                            help=f"{HELP[f.name]} (default: {shown})")


def parse_config(args: argparse.Namespace | dict | None = None, file=None) -> RunConfig:
    """Merge defaults, an optional config file and explicit flags into a RunConfig."""
    values: dict = {}
    if isinstance(args, argparse.Namespace):
        args = vars(args)
    args = dict(args or {})
    file = file or args.pop("config", None)
    args.pop("config", None)
    if file:
        values.update(read_config_file(file))
    known = {f.name for f in fields(RunConfig)}
    for key, value in args.items():
        if key not in known:
            if key in ("command", "func"):
                continue
            raise ConfigError(f"unknown option {key!r}")
        if value is not None:
            values[key] = value
    try:
        cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not cfg.dataset_name:
        raise ConfigError("missing required key 'dataset_name' (use 'gaussian' or 'csv:PATH')")
    if cfg.dataset_name != "gaussian" and not cfg.dataset_name.startswith("csv:"):
        raise ConfigError(f"dataset_name must be 'gaussian' or 'csv:PATH', got {cfg.dataset_name!r}")
    if cfg.num_sessions_pilot < 1:
        raise ConfigError("num_sessions_pilot (P) must be >= 1")
    if cfg.num_sessions < cfg.num_sessions_pilot:
        raise ConfigError(
            f"num_sessions (S={cfg.num_sessions}) must be >= num_sessions_pilot (P={cfg.num_sessions_pilot})"
        )
    if not 0 <= cfg.cross_session_label_overlap < 1:
        raise ConfigError("cross_session_label_overlap must lie in [0, 1)")
    if cfg.num_rounds_actual < 1 or (cfg.num_rounds_pilot is not None and cfg.num_rounds_pilot < 1):
        raise ConfigError("round counts must be >= 1")
    if cfg.num_round_grad_cal < 1:
        raise ConfigError("num_round_grad_cal (V) must be >= 1")
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
    bad = [v for v in cfg.variant if v not in VARIANTS]
    if bad or not cfg.variant:
        raise ConfigError(f"variant must be a comma list drawn from {VARIANTS}; got {bad or 'nothing'}")
    if cfg.similarity != "two_norm":
        raise ConfigError("only the 'two_norm' similarity is supported")
    if not 0 < cfg.participation_fraction <= 1:
        raise ConfigError("participation_fraction must lie in (0, 1]")
    if not 0 <= cfg.test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    if cfg.in_session_label_dist not in ("dirichlet",) + datahub.NAMED_SCHEMES:
        raise ConfigError(f"in_session_label_dist must be dirichlet or one of {datahub.NAMED_SCHEMES}")
    if cfg.dirichlet_alpha <= 0:
        raise ConfigError("dirichlet_alpha must be positive")
    if cfg.transition_window < 1:
        raise ConfigError("transition_window must be >= 1")
    if not 0 < cfg.bound_lambda < 1:
        raise ConfigError("bound_lambda must lie in (0, 1)")
    if not 0 <= cfg.acg_lambda < 1:
        raise ConfigError("acg_lambda must lie in [0, 1)")
    if min(cfg.num_SGD_training) < 1 or min(cfg.num_SGD_grad_cal) < 1:
        raise ConfigError("local step counts must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    if cfg.dataset_name == "gaussian":
        data = datahub.gen_gaussian_mixture(
            cfg.num_classes, cfg.per_class, cfg.input_dim, cfg.spread, derive_stream(cfg.seed, ("data",))
        )
    else:
        data = datahub.load_csv(cfg.dataset_name[4:])
    return datahub.standardize(data) if cfg.standardize else data


def settings_from(cfg: RunConfig) -> TrainSettings:
    lr = LRSchedule.from_json(cfg.lr_config_path, cfg.lr) if cfg.lr_config_path else LRSchedule(cfg.lr)
    return TrainSettings(
        algorithm=cfg.algorithm, lr=lr, local_steps=cfg.num_SGD_training, batch_size=cfg.batch_size_training,
        grad_steps=cfg.num_SGD_grad_cal, grad_batch_size=cfg.batch_size_grad_cal, V=cfg.num_round_grad_cal,
        R=cfg.similarity_scale, prox_mu=cfg.prox_alpha, acg_beta=cfg.acg_beta, acg_lambda=cfg.acg_lambda,
        kl_coefficient=cfg.kl_coefficient, participation=cfg.participation_fraction, seed=cfg.seed,
        workers=cfg.workers, record_wall_time=cfg.record_wall_time,
    )


def build_schedule(cfg: RunConfig, num_labels: int) -> SessionSchedule:
    lps = cfg.labels_per_session or max(1, num_labels // 2)
    if cfg.in_session_label_dist == "dirichlet":
        desc = {"kind": "dirichlet", "alpha": cfg.dirichlet_alpha}
    else:
        desc = {"kind": cfg.in_session_label_dist}
    return datahub.build_session_schedule(
        num_labels, cfg.num_sessions, cfg.num_sessions_pilot, cfg.num_rounds_actual,
        cfg.cross_session_label_overlap, lps, cfg.session_recurrence, derive_stream(cfg.seed, ("schedule",)),
        num_clients=cfg.num_clients, partition=desc, unseen_final=cfg.unseen_final_labels,
        pilot_rounds=cfg.num_rounds_pilot,
    )


def build_sessions(dataset: LabeledDataset, schedule: SessionSchedule, test_fraction: float, seed: int) -> list[SessionData]:
    """Hold out a test slice from each session's pool and partition the rest.

    A recurring session reuses its source's random streams, hence the same
    split and the same client shards.
    """
    out = []
    for plan in schedule.sessions:
        src = plan.data_source
        pool = dataset.indices_of(plan.labels)
        train, test = datahub.split_holdout(pool, test_fraction, derive_stream(seed, (src, "split")))
        clients = datahub.partition_session(
            dataset, plan.labels, plan.partition, len(plan.client_ids), derive_stream(seed, (src, "partition")),
            pool=train, session=plan.session, client_ids=plan.client_ids,
        )
        out.append(SessionData(plan.session, clients, dataset.subset(test) if test.size else None))
    return out


def prepare_run(cfg: RunConfig):
    """``(spec, sessions, schedule, settings)`` ready for ``run_sessions``."""
    dataset = load_dataset(cfg)
    schedule = build_schedule(cfg, dataset.num_classes)
    sessions = build_sessions(dataset, schedule, cfg.test_fraction, cfg.seed)
    spec = ModelSpec(cfg.model, dataset.dim, dataset.num_classes, cfg.hidden_dim if cfg.model == "mlp1" else 0)
    return spec, sessions, schedule, settings_from(cfg)
