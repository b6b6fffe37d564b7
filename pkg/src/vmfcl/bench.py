"""Metrics, experiment orchestration and machine-readable run reports.

``run_experiment`` drives the full incremental protocol: train a session,
evaluate on everything seen so far, rebuild the replay memory, repeat. The
``replay_baseline`` method pins every class to a single component and turns
off expansion, reduction and the intra-class/distillation/regularization
terms, leaving plain replay fine-tuning of the same architecture, so the
delta against ``domain_aware`` isolates the mixture machinery.

Report JSON is fully deterministic for a fixed config and seed: volatile
metadata (wall clock) goes to the text log instead.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfgfile
from .backbone import BackboneParams, forward_batch, init_params
from .errors import ConfigError, PurityUnavailable
from .memory import MemoryBuffer, select_memory
from .mixture import ModelBank, predict_batch, save_snapshot
from .streams import (
    FeatureRecords,
    SynthConfig,
    concat_records,
    generate_synthetic,
    make_splits,
    read_stream,
)
from .structure import ReductionConfig
from .trainer import LossConfig, ModelState, TrainConfig, train_session

METHODS = ("domain_aware", "replay_baseline")
SPLITS = ("NC", "ND", "NCD")


def accuracy(bank: ModelBank, params: BackboneParams, records: FeatureRecords) -> float:
    """Percentage of records whose predicted class matches the label."""
    if len(records) == 0:
        raise ValueError("cannot score an empty pool")
    pred = predict_batch(bank, forward_batch(params, records.x))
    return 100.0 * float(np.mean(pred == records.y))


def forgetting(acc_matrix: list[list[float]]) -> float | None:
    """Mean drop on the previous session's test set after one more session.

    ``acc_matrix[i][j]`` is the accuracy of the model after session i on the
    test data introduced at session j (j <= i). Undefined (None) with fewer
    than two sessions.
    """
    n = len(acc_matrix)
    if n < 2:
        return None
    return float(
        np.mean([acc_matrix[i][i - 1] - acc_matrix[i - 1][i - 1] for i in range(1, n)])
    )


def purity(y: np.ndarray, z: np.ndarray, domains: np.ndarray) -> float:
    """Majority-domain fraction per component, size-weighted within each class,
    averaged over classes."""
    y = np.asarray(y)
    z = np.asarray(z)
    domains = np.asarray(domains)
    if np.any(domains < 0):
        raise PurityUnavailable("hidden domain labels are not available for every example")
    values = []
    for c in sorted(np.unique(y).tolist()):
        rows = np.flatnonzero(y == c)
        majority = 0
        for k in sorted(np.unique(z[rows]).tolist()):
            comp_domains = domains[rows[z[rows] == k]]
            majority += int(np.max(np.bincount(comp_domains)))
        values.append(majority / rows.size)
    return float(np.mean(values))


@dataclass
class RunConfig:
    """Everything a benchmark run depends on; echoed verbatim into the report."""

    method: str = "domain_aware"
    split: str = "ND"
    sessions: int | None = None  # ND defaults to the grid's domain count
    memory_budget: int = 120
    kappa: float = 16.0
    seed: int = 1993
    hidden_dim: int = 64
    embed_dim: int | None = None  # None -> input dimension
    loss: LossConfig = field(default_factory=LossConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    m: int = 30
    synth: SynthConfig | None = None
    train_path: str | None = None
    test_path: str | None = None

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.memory_budget < 1:
            raise ConfigError("memory_budget must be positive")
        if self.m < 1:
            raise ConfigError("m must be at least 1")
        file_source = self.train_path is not None or self.test_path is not None
        if (self.synth is None) == (not file_source):
            raise ConfigError("exactly one data source required: [synth] or [data]")
        if file_source:
            if self.train_path is None or self.test_path is None:
                raise ConfigError("[data] needs both train and test paths")
            for p in (self.train_path, self.test_path):
                if not os.path.isfile(p):
                    raise ConfigError(f"referenced file does not exist: {p}")
        if self.split != "ND" and self.sessions is None:
            raise ConfigError(f"{self.split} split requires an explicit session count")

    def echo(self) -> dict:
        out = {
            "run": {
                "method": self.method,
                "split": self.split,
                "sessions": self.sessions,
                "memory_budget": self.memory_budget,
                "kappa": self.kappa,
                "seed": self.seed,
                "hidden_dim": self.hidden_dim,
                "embed_dim": self.embed_dim,
            },
            "train": {
                "epochs": self.loss.epochs,
                "batch_size": self.loss.batch_size,
                "lr": self.loss.lr,
                "weight_decay": self.loss.weight_decay,
                "lambda_max": self.loss.lambda_max,
                "lambda_warmup_epochs": self.loss.lambda_warmup_epochs,
                "beta": self.loss.beta,
                "eta": self.loss.eta,
                "backbone_lr": self.loss.backbone_lr,
            },
            "structure": {
                "m": self.m,
                "delta": self.reduction.delta,
                "min_components": self.reduction.min_components,
                "min_count": self.reduction.min_count,
            },
        }
        if self.synth is not None:
            out["synth"] = {
                "classes": self.synth.num_classes,
                "domains_per_class": self.synth.domains_per_class,
                "dim": self.synth.dim,
                "kappa_true": self.synth.kappa_true,
                "train_per_pair": self.synth.train_per_pair,
                "test_per_pair": self.synth.test_per_pair,
                "min_angle_deg": self.synth.min_angle_deg,
                "max_angle_deg": self.synth.max_angle_deg,
                "seed": self.synth.seed,
            }
        else:
            out["data"] = {"train": self.train_path, "test": self.test_path}
        return out


_SCHEMA = {
    "run": {"method", "split", "sessions", "memory_budget", "kappa", "seed", "hidden_dim", "embed_dim"},
    "synth": {"classes", "domains_per_class", "dim", "kappa_true", "train_per_pair",
              "test_per_pair", "min_angle_deg", "max_angle_deg", "seed"},
    "data": {"train", "test"},
    "train": {"epochs", "batch_size", "lr", "weight_decay", "lambda_max",
              "lambda_warmup_epochs", "beta", "eta", "backbone_lr"},
    "structure": {"m", "delta", "min_components", "min_count"},
}

_TYPES = {
    ("run", "method"): str, ("run", "split"): str, ("run", "sessions"): int,
    ("run", "memory_budget"): int, ("run", "kappa"): float, ("run", "seed"): int,
    ("run", "hidden_dim"): int, ("run", "embed_dim"): int,
    ("synth", "classes"): int, ("synth", "domains_per_class"): int, ("synth", "dim"): int,
    ("synth", "kappa_true"): float, ("synth", "train_per_pair"): int,
    ("synth", "max_angle_deg"): float,
    ("synth", "test_per_pair"): int, ("synth", "min_angle_deg"): float, ("synth", "seed"): int,
    ("data", "train"): str, ("data", "test"): str,
    ("train", "epochs"): int, ("train", "batch_size"): int, ("train", "lr"): float,
    ("train", "weight_decay"): float, ("train", "lambda_max"): float,
    ("train", "lambda_warmup_epochs"): int, ("train", "beta"): float, ("train", "eta"): float,
    ("train", "backbone_lr"): float,
    ("structure", "m"): int, ("structure", "delta"): float, ("structure", "min_components"): int,
    ("structure", "min_count"): int,
}


def load_run_config(path) -> RunConfig:
    """Build a RunConfig from a config file; unknown keys are errors."""
    sections = cfgfile.parse_sections(path)
    cfgfile.check_schema(sections, _SCHEMA, path)
    values: dict[str, dict] = {}
    for section, entries in sections.items():
        values[section] = {
            k: cfgfile.coerce(section, k, v, _TYPES[(section, k)], path) for k, v in entries.items()
        }

    cfg = RunConfig()
    run = values.get("run", {})
    for key in ("method", "split", "sessions", "memory_budget", "kappa", "seed", "hidden_dim", "embed_dim"):
        if key in run:
            setattr(cfg, key, run[key])
    if "train" in values:
        cfg.loss = replace(cfg.loss, **values["train"])
    if "structure" in values:
        s = values["structure"]
        cfg.m = s.get("m", cfg.m)
        cfg.reduction = ReductionConfig(
            delta=s.get("delta", cfg.reduction.delta),
            min_components=s.get("min_components", cfg.reduction.min_components),
            min_count=s.get("min_count", cfg.reduction.min_count),
        )
    if "synth" in values and "data" in values:
        raise ConfigError(f"{path}: [synth] and [data] are mutually exclusive")
    if "synth" in values:
        s = values["synth"]
        try:
            cfg.synth = SynthConfig(
                num_classes=s["classes"],
                domains_per_class=s["domains_per_class"],
                dim=s["dim"],
                kappa_true=s["kappa_true"],
                train_per_pair=s["train_per_pair"],
                test_per_pair=s["test_per_pair"],
                min_angle_deg=s.get("min_angle_deg", 0.0),
                max_angle_deg=s.get("max_angle_deg"),
                seed=s.get("seed", 0),
            )
        except KeyError as e:
            raise ConfigError(f"{path}: [synth] is missing required key {e.args[0]!r}") from None
    elif "data" in values:
        cfg.train_path = values["data"].get("train")
        cfg.test_path = values["data"].get("test")
    cfg.validate()
    return cfg


@dataclass
class SessionReport:
    """Deterministic per-run metrics; ``to_dict`` is the JSON contract."""

    per_session_acc: list[float]
    avg_inc_acc: float
    final_acc: float
    forgetting: float | None
    purity_per_session: list[float | None]
    components_per_class: dict[int, int]
    components_per_class_history: list[dict[int, int]]
    per_class_domain_acc: dict[int, dict[int, float]]
    acc_matrix: list[list[float]]
    memory_class_counts: list[dict[int, int]]
    memory_component_counts: list[dict[int, list[int]]]
    seed: int
    session_seeds: list[int]
    config_echo: dict
    incomplete: bool = False

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}

        return {
            "per_session_acc": self.per_session_acc,
            "avg_inc_acc": self.avg_inc_acc,
            "final_acc": self.final_acc,
            "forgetting": self.forgetting,
            "purity_per_session": self.purity_per_session,
            "components_per_class": keyed(self.components_per_class),
            "components_per_class_history": [keyed(h) for h in self.components_per_class_history],
            "per_class_domain_acc": {str(c): keyed(v) for c, v in self.per_class_domain_acc.items()},
            "acc_matrix": self.acc_matrix,
            "memory_class_counts": [keyed(h) for h in self.memory_class_counts],
            "memory_component_counts": [keyed(h) for h in self.memory_component_counts],
            "seed": self.seed,
            "session_seeds": self.session_seeds,
            "config_echo": self.config_echo,
            "incomplete": self.incomplete,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class RunResult:
    """Report plus the live objects a caller may want to inspect or export."""

    report: SessionReport
    state: ModelState
    plan: object
    train_pool: FeatureRecords
    test_pool: FeatureRecords
    memory: MemoryBuffer


def _test_slice(test_pool: FeatureRecords, pairs) -> FeatureRecords:
    mask = np.zeros(len(test_pool), dtype=bool)
    for c, z in pairs:
        mask |= (test_pool.y == c) & (test_pool.domain == z)
    return test_pool.subset(mask)


def run_experiment_full(cfg: RunConfig, out_dir=None) -> RunResult:
    """Execute all sessions of a run; optionally write report/log/model files.

    On an error mid-run a partial report flagged ``incomplete`` is written
    (when ``out_dir`` is given) before the error propagates.
    """
    cfg.validate()
    t_start = time.perf_counter()
    if cfg.synth is not None:
        train_pool, test_pool, _ = generate_synthetic(cfg.synth)
    else:
        train_pool = read_stream(cfg.train_path)
        test_pool = read_stream(cfg.test_path)
        if train_pool.dim != test_pool.dim:
            raise ConfigError("train and test streams disagree on dimension")
    input_dim = train_pool.dim
    embed_dim = cfg.embed_dim or input_dim

    if cfg.sessions is not None:
        n_sessions = cfg.sessions
    else:  # ND: one new domain per class per session
        first_class = int(np.min(train_pool.y))
        n_sessions = int(np.unique(train_pool.domain[train_pool.y == first_class]).size)

    master = np.random.default_rng(cfg.seed)
    seeds = master.integers(0, 2**63, size=2 + 2 * n_sessions).tolist()
    split_seed, init_seed = seeds[0], seeds[1]
    session_seeds = seeds[2 : 2 + n_sessions]
    memory_seeds = seeds[2 + n_sessions :]

    plan, sessions = make_splits(train_pool, cfg.split, n_sessions, split_seed)

    baseline = cfg.method == "replay_baseline"
    loss_cfg = replace(cfg.loss, lambda_max=0.0, beta=0.0, eta=0.0) if baseline else cfg.loss

    state = ModelState(
        init_params(input_dim, embed_dim, cfg.hidden_dim, np.random.default_rng(init_seed)),
        ModelBank(embed_dim, cfg.kappa),
    )
    memory = MemoryBuffer.empty(cfg.memory_budget, input_dim)

    log = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log = open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8")

    per_session_acc: list[float] = []
    purity_per_session: list[float | None] = []
    acc_matrix: list[list[float]] = []
    comp_history: list[dict[int, int]] = []
    mem_class_counts: list[dict[int, int]] = []
    mem_comp_counts: list[dict[int, list[int]]] = []
    incomplete = True
    try:
        for t, session in enumerate(sessions):
            if log is not None:
                log.write(f"session={t} pairs={plan.sessions[t]} n={len(session)}\n")
            tcfg = TrainConfig(
                loss=loss_cfg,
                reduction=cfg.reduction,
                m=1 if baseline else cfg.m,
                expand_existing=not baseline,
                reduce_enabled=not baseline,
                seed=session_seeds[t],
            )
            state, table = train_session(state, session, memory, tcfg, log=log)

            data = session.records
            if len(memory) > 0:
                data = concat_records(session.records, memory.records)

            acc_matrix.append(
                [accuracy(state.bank, state.params, _test_slice(test_pool, plan.sessions[j]))
                 for j in range(t + 1)]
            )
            seen_pairs = [p for j in range(t + 1) for p in plan.sessions[j]]
            per_session_acc.append(accuracy(state.bank, state.params, _test_slice(test_pool, seen_pairs)))

            if np.any(data.domain < 0):
                purity_per_session.append(None)
            else:
                z = np.asarray([table[int(i)] for i in data.ids], dtype=np.int64)
                purity_per_session.append(purity(data.y, z, data.domain))

            memory = select_memory(
                state.bank, data, table, cfg.memory_budget, np.random.default_rng(memory_seeds[t])
            )
            comp_history.append({c: state.bank.mixtures[c].num_components for c in state.bank.class_ids})
            mem_class_counts.append(memory.class_counts())
            mem_comp_counts.append(memory.component_counts())
        incomplete = False
    finally:
        # final-session per-(class, domain) accuracy table
        per_class_domain_acc: dict[int, dict[int, float]] = {}
        if not incomplete:
            seen_pairs = [p for s in plan.sessions for p in s]
            for c, z in sorted(seen_pairs):
                part = _test_slice(test_pool, [(c, z)])
                if len(part):
                    per_class_domain_acc.setdefault(c, {})[z] = accuracy(state.bank, state.params, part)

        report = SessionReport(
            per_session_acc=per_session_acc,
            avg_inc_acc=float(np.mean(per_session_acc)) if per_session_acc else 0.0,
            final_acc=per_session_acc[-1] if per_session_acc else 0.0,
            forgetting=forgetting(acc_matrix),
            purity_per_session=purity_per_session,
            components_per_class=comp_history[-1] if comp_history else {},
            components_per_class_history=comp_history,
            per_class_domain_acc=per_class_domain_acc,
            acc_matrix=acc_matrix,
            memory_class_counts=mem_class_counts,
            memory_component_counts=mem_comp_counts,
            seed=cfg.seed,
            session_seeds=session_seeds,
            config_echo=cfg.echo(),
            incomplete=incomplete,
        )
        if log is not None:
            log.write(f"wall_clock_sec={time.perf_counter() - t_start:.3f}\n")
            log.close()
        if out_dir is not None:
            with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
                fh.write(report.to_json())
            if not incomplete:
                save_snapshot(os.path.join(out_dir, "model.vmfb"), state.bank, state.params.layers)

    return RunResult(report, state, plan, train_pool, test_pool, memory)


def run_experiment(cfg: RunConfig, out_dir=None) -> SessionReport:
    """Convenience wrapper returning only the report."""
    return run_experiment_full(cfg, out_dir=out_dir).report
