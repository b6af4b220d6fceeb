"""Optimizers, supervised and SSL training loops, and the experiment grid runner."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment as A
from . import evaluate as E
from . import model as M
from . import objectives as O
from . import tensor as T
from .data import Dataset, subset_labels

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "momentum", "sgd_cyclic")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    lr_min: float = 7e-3
    lr_max: float = 5e-2
    cycle_epochs: int = 10

    def __post_init__(self):
        if self.name not in OPTIMIZERS:
            raise ConfigError(f"optimizer.name must be one of {OPTIMIZERS}, got {self.name!r}")
        if self.name == "sgd_cyclic":
            if not 0 < self.lr_min < self.lr_max:
                raise ConfigError(f"optimizer.lr_min/lr_max need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
            if self.cycle_epochs < 1:
                raise ConfigError("optimizer.cycle_epochs must be positive")
        elif not self.lr > 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        if self.name == "sgd_cyclic":
            return {"name": self.name, "lr_min": self.lr_min, "lr_max": self.lr_max, "cycle_epochs": self.cycle_epochs}
        return {"name": self.name, "lr": self.lr}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    # runs with a single label per class are short
    one_per_class_epochs: int = 5
    batch_size: int = 32
    # None: one pass over the pacing pool (see _train)
    steps_per_epoch: int | None = None
    labelled_per_class: int = 20
    include_background: bool = True
    ssl: O.SslConfig = field(default_factory=O.SslConfig)
    augment: A.AugmentPolicy = field(default_factory=A.AugmentPolicy)
    model_preset: str = "sononet_mini"
    model_width: int = 8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.mode not in ("supervised", "ssl"):
            raise ConfigError(f"mode must be 'supervised' or 'ssl', got {self.mode!r}")
        for name in ("epochs", "batch_size", "labelled_per_class", "eval_every", "one_per_class_epochs", "model_width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be positive, got {self.steps_per_epoch}")
        if self.model_preset not in M.PRESETS:
            raise ConfigError(f"model_preset must be one of {sorted(M.PRESETS)}, got {self.model_preset!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @property
    def effective_epochs(self) -> int:
        return min(self.epochs, self.one_per_class_epochs) if self.labelled_per_class == 1 else self.epochs

    def model_config(self, num_classes: int, input_shape) -> M.ModelConfig:
        if self.model_preset == "sononet_mini":
            return M.sononet_mini(num_classes, tuple(input_shape), width=self.model_width)
        return M.sononet_full(num_classes, tuple(input_shape))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "optimizer": self.optimizer.to_dict(),
            "epochs": self.epochs,
            "one_per_class_epochs": self.one_per_class_epochs,
            "batch_size": self.batch_size,
            "steps_per_epoch": self.steps_per_epoch,
            "labelled_per_class": self.labelled_per_class,
            "include_background": self.include_background,
            "ssl": self.ssl.to_dict(),
            "augment": self.augment.to_dict(),
            "model_preset": self.model_preset,
            "model_width": self.model_width,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            if "optimizer" in d:
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            if "ssl" in d:
                d["ssl"] = O.SslConfig.from_dict(d["ssl"])
            if "augment" in d:
                d["augment"] = A.AugmentPolicy.from_dict(d["augment"])
        except ConfigError:
            raise
        except TypeError as exc:
            raise ConfigError(f"bad nested config field: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("eval_every")
        if self.mode == "supervised":
            # SSL settings cannot influence a supervised run
            d.pop("ssl")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------
def _grads(params: M.ModelParams):
    for name, t in params.trainable():
        if t.grad is None:
            raise RuntimeError(f"no gradient for parameter {name!r}")
        yield name, t, t.grad


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: M.ModelParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p, g in _grads(params):
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class Momentum:
    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: M.ModelParams) -> None:
        for name, p, g in _grads(params):
            vel = self.velocity.setdefault(name, np.zeros_like(p.data))
            vel *= self.momentum
            vel += g
            p.data -= (self.lr * vel).astype(p.dtype)


def triangular_lr(step: int, lr_min: float, lr_max: float, cycle_steps: int) -> float:
    """lr_min at the start of each cycle, lr_max half way through."""
    pos = (step % cycle_steps) / cycle_steps
    return lr_min + (lr_max - lr_min) * (1.0 - abs(2.0 * pos - 1.0))


class CyclicSGD:
    def __init__(self, lr_min, lr_max, cycle_steps):
        self.lr_min, self.lr_max, self.cycle_steps = lr_min, lr_max, max(1, cycle_steps)
        self.t = 0

    @property
    def lr(self) -> float:
        return triangular_lr(self.t, self.lr_min, self.lr_max, self.cycle_steps)

    def step(self, params: M.ModelParams) -> None:
        lr = self.lr
        for _, p, g in _grads(params):
            p.data -= (lr * g).astype(p.dtype)
        self.t += 1


def make_optimizer(cfg: OptimizerConfig, steps_per_epoch: int):
    if cfg.name == "adam":
        return Adam(cfg.lr)
    if cfg.name == "momentum":
        return Momentum(cfg.lr)
    return CyclicSGD(cfg.lr_min, cfg.lr_max, cfg.cycle_epochs * steps_per_epoch)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------
class BatchStream:
    """Endless shuffled passes over ``n`` items, cut into full batches.

    Yields ``(positions, passes)``: dataset positions and, per position, the
    index of the pass it was drawn in (used to key augmentation streams).
    """

    def __init__(self, n: int, batch_size: int, seed: int, tag: int):
        if n < 1:
            raise ValueError("cannot stream batches from an empty dataset")
        self.n, self.batch_size, self.seed, self.tag = n, batch_size, seed, tag
        self._pass = -1
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def _next_pass(self):
        self._pass += 1
        rng = np.random.default_rng([self.seed, self.tag, self._pass])
        self._order = rng.permutation(self.n)
        self._cursor = 0

    def next(self):
        pos, passes = [], []
        while len(pos) < self.batch_size:
            if self._cursor >= len(self._order):
                self._next_pass()
            take = min(self.batch_size - len(pos), len(self._order) - self._cursor)
            pos.extend(self._order[self._cursor:self._cursor + take])
            passes.extend([self._pass] * take)
            self._cursor += take
        return np.asarray(pos), np.asarray(passes)


def _augmented(ds: Dataset, positions, passes, seed: int, policy: A.AugmentPolicy) -> np.ndarray:
    out = np.empty((len(positions), *ds.images.shape[1:]), dtype=np.float32)
    for k, (i, p) in enumerate(zip(positions, passes)):
        out[k] = A.augment(ds.images[i], policy, A.derive_stream(seed, int(ds.ids[i]), int(p)))
    return out[:, None]


def _derived(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------
EPOCH_COLUMNS = (
    "epoch", "steps", "sup_loss", "consistency_loss", "entropy", "eta_tsa",
    "tsa_kept", "cbm_kept", "test_overall", "test_grouped",
)


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    cbm_kept_by_class: list[list] = field(default_factory=list)
    report: E.MetricsReport | None = None
    status: str = "running"
    error: str = ""
    wall_clock: float = 0.0
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "epochs": self.epochs,
            "cbm_kept_by_class": self.cbm_kept_by_class,
            "report": self.report.to_dict() if self.report else None,
            "status": self.status,
            "error": self.error,
            "wall_clock": self.wall_clock,
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["report"] = E.MetricsReport.from_dict(d["report"]) if d.get("report") else None
        return cls(**d)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)
        for row in self.epochs:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) for c in EPOCH_COLUMNS])
        return buf.getvalue()

    def save(self, out_dir, params: M.ModelParams | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        if params is not None:
            M.save_checkpoint(params, out / "checkpoint.bin")
        if self.report is not None:
            E.export(self.report, self, out)
        # written last: its presence marks a finished run
        (out / "record.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        return cls.from_dict(json.loads((Path(run_dir) / "record.json").read_text()))


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------
def train_supervised(cfg: TrainConfig, labelled: Dataset, test: Dataset, **kw):
    return _train(cfg.replace(mode="supervised"), labelled, None, test, **kw)


def train_ssl(cfg: TrainConfig, labelled: Dataset, unlabelled: Dataset, test: Dataset, **kw):
    if unlabelled is None or len(unlabelled) == 0:
        raise ValueError("SSL training needs a non-empty unlabelled pool")
    return _train(cfg.replace(mode="ssl"), labelled, unlabelled, test, **kw)


def _train(
    cfg: TrainConfig,
    labelled: Dataset,
    unlabelled: Dataset | None,
    test: Dataset,
    *,
    test_hash: str | None = None,
    progress: Callable[[str], None] | None = None,
    step_hook: Callable[[int, dict], None] | None = None,
):
    """Returns ``(RunRecord, ModelParams)``.

    A non-finite loss aborts the run; the record is marked ``failed`` and the
    parameters reached so far are returned.
    """
    if len(labelled) == 0:
        raise ValueError("labelled dataset is empty")
    if len(test) == 0:
        raise ValueError("test dataset is empty")
    started = time.perf_counter()
    class_names = list(test.class_names)
    num_classes = len(class_names)
    ssl_cfg = cfg.ssl if cfg.mode == "ssl" else None
    use_unlabelled = ssl_cfg is not None and ssl_cfg.unsupervised_active
    thresholds = ssl_cfg.thresholds(class_names) if ssl_cfg is not None else None
    schedule = ssl_cfg.tsa_schedule if ssl_cfg is not None else "disabled"

    params = M.build(cfg.model_config(num_classes, labelled.images.shape[1:]), seed=_derived(cfg.seed, 1))
    # an epoch is one pass over the stream that paces training: D_U when the
    # unlabelled branch is active (D_L is cycled), D_L otherwise
    paced_by = len(unlabelled) if use_unlabelled else len(labelled)
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(paced_by / cfg.batch_size)
    epochs = cfg.effective_epochs
    total_steps = epochs * steps_per_epoch
    optimizer = make_optimizer(cfg.optimizer, steps_per_epoch)
    aug_seed = _derived(cfg.seed, 2)
    l_stream = BatchStream(len(labelled), cfg.batch_size, _derived(cfg.seed, 3), tag=0)
    u_stream = BatchStream(len(unlabelled), cfg.batch_size, _derived(cfg.seed, 4), tag=1) if use_unlabelled else None
    test_hash = test_hash if test_hash is not None else test.content_hash()

    record = RunRecord(cfg.to_dict(), cfg.config_hash(), class_names=class_names)
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            acc = {"sup": 0.0, "cons": 0.0, "ent": 0.0, "tsa": 0, "cbm": 0, "rows_l": 0, "rows_u": 0}
            cbm_class_kept = np.zeros(num_classes)
            cbm_class_seen = np.zeros(num_classes)
            eta = 1.0
            for _ in range(steps_per_epoch):
                pos, passes = l_stream.next()
                x_l = _augmented(labelled, pos, passes, aug_seed, cfg.augment)
                y_l = labelled.labels[pos]
                n_l = len(pos)
                # the labelled pass is exactly the supervised one; unlabelled
                # images never enter its batch statistics
                logits_l = M.forward(params, x_l, mode="train")
                if use_unlabelled:
                    upos, upasses = u_stream.next()
                    x_u_aug = _augmented(unlabelled, upos, upasses, aug_seed, cfg.augment)
                    n_u = len(upos)
                    # clean batch, normalised by its own statistics: running
                    # buffers track augmented images and misjudge clean ones
                    with T.no_grad():
                        logits_orig = M.forward(params, unlabelled.images[upos][:, None], mode="train",
                                                update_stats=False)
                    logits_aug = M.forward(params, x_u_aug, mode="train", update_stats=False)

                probs_l = T.softmax(logits_l)
                if schedule != "disabled":
                    eta = O.tsa_threshold(O.StepContext(step, total_steps, num_classes), schedule)
                    keep_l = O.tsa_mask(probs_l, y_l, eta, literal=ssl_cfg.tsa_literal)
                else:
                    eta = 1.0
                    keep_l = np.ones(n_l, dtype=bool)
                sup = T.cross_entropy(probs_l, y_l, mask=keep_l)

                cons = ent = None
                if use_unlabelled:
                    p_orig = T.softmax(logits_orig)
                    keep_u = O.cbm_mask(p_orig, ssl_cfg, thresholds)
                    cons = O.consistency_loss(logits_orig, logits_aug, ssl_cfg, thresholds)
                    ent = T.entropy(T.softmax(logits_aug))
                    top = p_orig.data.argmax(axis=1)
                    np.add.at(cbm_class_seen, top, 1)
                    np.add.at(cbm_class_kept, top[keep_u], 1)
                    acc["cbm"] += int(keep_u.sum())
                    acc["rows_u"] += n_u
                    acc["cons"] += cons.item()
                    acc["ent"] += ent.item()
                loss = O.total_loss(sup, cons, ent, ssl_cfg)
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                params.zero_grad()
                loss.backward()
                optimizer.step(params)

                acc["sup"] += sup.item()
                acc["tsa"] += int(keep_l.sum())
                acc["rows_l"] += n_l
                if step_hook is not None:
                    step_hook(step, {"eta_tsa": eta, "tsa_kept": keep_l, "loss": loss.item()})
                step += 1

            row = {
                "epoch": epoch,
                "steps": step,
                "sup_loss": acc["sup"] / steps_per_epoch,
                "consistency_loss": acc["cons"] / steps_per_epoch if use_unlabelled else None,
                "entropy": acc["ent"] / steps_per_epoch if use_unlabelled else None,
                "eta_tsa": eta,
                "tsa_kept": acc["tsa"] / acc["rows_l"],
                "cbm_kept": acc["cbm"] / acc["rows_u"] if use_unlabelled else None,
                "test_overall": None,
                "test_grouped": None,
            }
            if epoch % cfg.eval_every == 0 or epoch == epochs:
                # evaluated on a copy so that training never depends on eval_every
                calibrated = M.recalibrate_bn(params, labelled.images)
                rep = E.evaluate(calibrated, test, test_hash=test_hash)
                row["test_overall"] = rep.overall_accuracy_anatomical
                row["test_grouped"] = rep.grouped_cluster_accuracy
                record.report = rep
            record.epochs.append(row)
            record.cbm_kept_by_class.append(
                [float(k / s) if s else None for k, s in zip(cbm_class_kept, cbm_class_seen)] if use_unlabelled else []
            )
            if progress is not None:
                progress(_progress_line(row, epochs))
        record.status = "ok"
        params = calibrated
    except (FloatingPointError, TrainingDiverged) as exc:
        record.status = "failed"
        record.error = str(exc)
        logger.error("run %s aborted: %s", record.config_hash, exc)
    record.wall_clock = time.perf_counter() - started
    return record, params


def _progress_line(row: dict, epochs: int) -> str:
    parts = [f"epoch {row['epoch']:>3}/{epochs}", f"sup {row['sup_loss']:.4f}"]
    if row["consistency_loss"] is not None:
        parts += [f"cons {row['consistency_loss']:.4f}", f"ent {row['entropy']:.4f}", f"cbm {row['cbm_kept']:.2f}"]
    parts += [f"tsa {row['tsa_kept']:.2f}"]
    if row["test_overall"] is not None:
        parts += [f"acc {row['test_overall']:.3f}", f"grouped {row['test_grouped']:.3f}"]
    return "  ".join(parts)


# ---------------------------------------------------------------------------
# single runs from a dataset and the grid
# ---------------------------------------------------------------------------
def prepare_data(cfg: TrainConfig, dataset: Dataset):
    """Labelled pool, unlabelled pool, test split and the dataset's test hash."""
    test_hash = dataset.test.content_hash()
    ds = dataset if cfg.include_background else dataset.without_background()
    labelled, unlabelled = subset_labels(ds, cfg.labelled_per_class, seed=_derived(cfg.seed, 5))
    return labelled, unlabelled, ds.test, test_hash


def run(cfg: TrainConfig, dataset: Dataset, out_dir=None, progress=None):
    labelled, unlabelled, test, test_hash = prepare_data(cfg, dataset)
    if cfg.mode == "ssl":
        record, params = train_ssl(cfg, labelled, unlabelled, test, test_hash=test_hash, progress=progress)
    else:
        record, params = train_supervised(cfg, labelled, test, test_hash=test_hash, progress=progress)
    if out_dir is not None:
        record.save(out_dir, params)
    return record, params


GRID_AXES = ("labelled_per_class", "include_background", "mode", "tsa_schedule", "optimizer", "cardiac_threshold")


def apply_axis(cfg: TrainConfig, name: str, value) -> TrainConfig:
    if name in ("labelled_per_class", "include_background", "mode"):
        return cfg.replace(**{name: value})
    if name == "tsa_schedule":
        return cfg.replace(ssl=dataclasses.replace(cfg.ssl, tsa_schedule=value))
    if name == "optimizer":
        opt = value if isinstance(value, OptimizerConfig) else OptimizerConfig(**value) if isinstance(value, dict) else OptimizerConfig(name=value)
        return cfg.replace(optimizer=opt)
    if name == "cardiac_threshold":
        per_class = dict(cfg.ssl.eta_cbm_per_class)
        # "disabled" pushes the threshold above any probability
        per_class["cardiac_*"] = O.DISABLED_THRESHOLD if value == "disabled" else float(value)
        return cfg.replace(ssl=dataclasses.replace(cfg.ssl, eta_cbm_per_class=per_class))
    raise ConfigError(f"unknown grid axis {name!r}; choose from {GRID_AXES}")


def expand_grid(base: TrainConfig, axes: dict, replicates: int = 1) -> list[TrainConfig]:
    """Cartesian product of axis values; replicate r gets a seed derived from (base seed, r).

    Seeds depend only on the replicate, so runs in one replicate share the
    initialisation and labelled subset across every axis.
    """
    names = list(axes)
    configs, seen = [], set()
    for r in range(replicates):
        seed = base.seed if replicates == 1 else _derived(base.seed, 1000 + r) % (2 ** 31)
        for combo in itertools.product(*(axes[n] for n in names)):
            cfg = base.replace(seed=seed)
            for n, v in zip(names, combo):
                cfg = apply_axis(cfg, n, v)
            h = cfg.config_hash()
            if h not in seen:
                seen.add(h)
                configs.append(cfg)
    return configs


def _grid_worker(args):
    cfg, dataset, run_dir = args
    return _run_one(cfg, dataset, run_dir, None)


def _run_one(cfg, dataset, run_dir, progress):
    try:
        record, _ = run(cfg, dataset, run_dir, progress=progress)
    except Exception as exc:  # a failing run must not abort the grid
        logger.exception("run %s failed", cfg.config_hash())
        record = RunRecord(cfg.to_dict(), cfg.config_hash(), status="failed", error=f"{type(exc).__name__}: {exc}")
        record.save(run_dir)
    return record


def run_grid(base: TrainConfig, axes: dict, dataset: Dataset, out_dir, replicates: int = 1, jobs: int = 1,
             progress: Callable[[str], None] | None = None) -> list[RunRecord]:
    """Execute every grid point into ``out_dir/runs/<config_hash>``; finished runs are skipped."""
    runs_dir = Path(out_dir) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    configs = expand_grid(base, axes, replicates)
    records: dict[str, RunRecord] = {}
    pending = []
    for cfg in configs:
        run_dir = runs_dir / cfg.config_hash()
        if (run_dir / "record.json").exists():
            rec = RunRecord.load(run_dir)
            if rec.status == "ok":
                records[cfg.config_hash()] = rec
                if progress:
                    progress(f"skip {cfg.config_hash()} (done)")
                continue
        pending.append((cfg, run_dir))

    if jobs > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (cfg, _), rec in zip(pending, pool.map(_grid_worker, [(c, dataset, d) for c, d in pending])):
                records[cfg.config_hash()] = rec
                if progress:
                    progress(f"done {cfg.config_hash()} status={rec.status}")
    else:
        for k, (cfg, run_dir) in enumerate(pending, 1):
            if progress:
                progress(f"[{k}/{len(pending)}] {cfg.config_hash()} mode={cfg.mode} "
                         f"budget={cfg.labelled_per_class} bg={cfg.include_background} seed={cfg.seed}")
            records[cfg.config_hash()] = _run_one(cfg, dataset, run_dir, None)
    return [records[c.config_hash()] for c in configs]
