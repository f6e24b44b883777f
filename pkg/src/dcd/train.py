"""Teacher pretraining and student training under every supported regime.

Regimes
  finetune            contrastive task loss on random negatives, no teacher
  vanilla_kd          alpha*MSE + (1-alpha)*task on random negatives, raw teacher logits
  dcd                 mined hard negatives, adjusted teacher logits, weighted task and distill terms
  ablation            dcd loss graph with ``ds_ka``/``hw``/``sw`` toggled independently
  student_uncertainty dcd, but the weights come from the student's own entropy

Batch losses are normalised per query: unweighted regimes divide the summed
loss by K, weighted regimes use weight vectors that sum to one. With uniform
weights the two coincide.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from dcd import losses as L
from dcd.data import Dataset, batch_iterator
from dcd.errors import ConfigError, DivergenceError, ShapeError
from dcd.evaluate import RetrievalMetrics, evaluate_retrieval
from dcd.mining import (
    MiningConfig,
    build_candidate_lists,
    candidate_features,
    dump_candidates,
    make_batch,
    random_candidate_lists,
)
from dcd.model import (
    STUDENT_HIDDEN,
    TEACHER_HIDDEN,
    ScorerConfig,
    ScorerParams,
    backward,
    flatten_grads,
    forward,
    init_scorer,
    load_checkpoint,
    save_checkpoint,
)
from dcd.numeric import GradTape

log = logging.getLogger(__name__)

REGIMES = ("teacher", "finetune", "vanilla_kd", "dcd", "ablation", "student_uncertainty")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "dcd"
    ds_ka: bool = True
    hw: bool = True
    sw: bool = True
    alpha: float = 0.01
    tau: float = 1.0
    distill: str = "mse"
    M: int = 63
    M_prime: int = 7
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    seed: int = 0
    hidden: tuple[int, ...] = STUDENT_HIDDEN
    direction: str = "mixed"
    val_images: int = 0
    divergence_threshold: float = 1e6
    save_every_epoch: bool = False
    dump_candidates: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if not 1 <= self.M_prime <= self.M:
            raise ConfigError(f"need 1 <= M' <= M, got M={self.M}, M'={self.M_prime}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0 or self.tau <= 0 or self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("lr and tau must be positive, epochs >= 0, batch_size >= 2")
        if self.regime == "ablation" and (self.hw or self.sw) and not self.ds_ka:
            raise ConfigError("hw and sw require ds_ka")
        if self.distill not in ("mse", "kl"):
            raise ConfigError(f"distill must be 'mse' or 'kl', got {self.distill!r}")

    @property
    def flags(self) -> dict:
        """Resolved switches: use_teacher, select (and adjust), hw, sw, graph."""
        r = self.regime
        if r in ("teacher", "finetune"):
            return dict(use_teacher=False, select=False, hw=False, sw=False, graph="task")
        if r == "vanilla_kd":
            return dict(use_teacher=True, select=False, hw=False, sw=False, graph="vanilla")
        if r in ("dcd", "student_uncertainty"):
            return dict(use_teacher=True, select=True, hw=True, sw=True, graph="dcd")
        return dict(use_teacher=True, select=self.ds_ka, hw=self.hw, sw=self.sw, graph="dcd")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> TrainConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            try:
                kwargs[f.name] = _coerce(f.type, raw)
            except ValueError:
                raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
        return cls(**kwargs)


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    t = str(type_name)
    if t == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    if t.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def teacher_config(**overrides) -> TrainConfig:
    base = dict(regime="teacher", hidden=TEACHER_HIDDEN, epochs=30)
    base.update(overrides)
    return TrainConfig(**base)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: AdamState | None = None,
                   lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment update on a flat parameter vector."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} vs grads {grads.shape}")
    if state is None:
        state = AdamState.zeros(params.size)
    if state.m.shape != params.reshape(-1).shape:
        raise ShapeError(f"optimizer state has {state.m.size} entries, params have {params.size}")
    g = grads.reshape(-1)
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new = params.reshape(-1) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.reshape(params.shape), AdamState(m, v, t)


# -- run records -----------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "running"
    diagnostic: str = ""
    checkpoint: str = ""
    best_epoch: int = -1
    best_val: dict = field(default_factory=dict)

    def add_epoch(self, row: dict):
        if self.epochs and row["epoch"] < self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must not decrease")
        self.epochs.append(row)

    def loss_trace(self) -> list[float]:
        return [x for row in self.epochs for x in row.get("batch_losses", [])]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        return cls(**json.loads(text))


# -- loss graph ------------------------------------------------------------


@dataclass
class BatchLoss:
    combined: L.LossValue
    task: float
    distill: float
    hard_weights: np.ndarray | None = None
    soft_weights: np.ndarray | None = None


def batch_loss(config: TrainConfig, student_scores: np.ndarray, teacher_scores: np.ndarray | None,
               uniform_override: bool = False) -> BatchLoss:
    """Per-batch objective for the configured regime, normalised per query."""
    k = student_scores.shape[0]
    f = config.flags
    if f["graph"] == "task":
        task = L.itm_hard_loss(student_scores)
        combined = L.LossValue(task.value / k, task.per_query_terms / k, task.grad / k)
        return BatchLoss(combined, combined.value, 0.0)
    if f["graph"] == "vanilla":
        task = L.itm_hard_loss(student_scores)
        if config.distill == "kl":
            dist = L.kl_distill_loss(student_scores, teacher_scores, config.tau)
        else:
            dist = L.mse_distill_loss(student_scores, teacher_scores)
        obj = L.vanilla_kd_objective(dist, task, config.alpha)
        combined = L.LossValue(obj.value / k, obj.per_query_terms / k, obj.grad / k)
        return BatchLoss(combined, task.value / k, dist.value / k)
    if uniform_override or not f["hw"]:
        w = L.WeightVector.uniform(k, "hard")
    else:
        source = student_scores if config.regime == "student_uncertainty" else teacher_scores
        w = L.hard_label_weights(L.teacher_uncertainty(source))
    if uniform_override or not f["sw"]:
        c = L.WeightVector.uniform(k, "soft")
    else:
        c = L.soft_label_weights(w)
    witm = L.witm_loss(student_scores, w)
    wds = L.wds_loss(student_scores, teacher_scores, c)
    combined = L.dcd_objective(wds, witm, config.alpha)
    return BatchLoss(combined, witm.value, wds.value, w.weights, c.weights)


# -- training loops ----------------------------------------------------------


def _epoch_batches(dataset: Dataset, config: TrainConfig, teacher: ScorerParams | None, epoch: int):
    """Yield (batch, candidate lists, teacher scores or None) for one epoch."""
    train = dataset["train"]
    f = config.flags
    mining = MiningConfig(config.M, config.M_prime, config.seed)
    for b, pairs in enumerate(batch_iterator(train, config.batch_size, config.seed, epoch)):
        key = [config.seed, epoch, b]
        batch = make_batch(train, pairs, key, config.direction)
        if f["select"]:
            cands = build_candidate_lists(teacher, batch, mining, key)
        else:
            cands = random_candidate_lists(batch, config.M_prime, key, teacher if f["use_teacher"] else None)
        t_scores = np.vstack([c.teacher_logits_adjusted for c in cands]) if f["use_teacher"] else None
        yield b, batch, cands, t_scores


def _validate(params: ScorerParams, dataset: Dataset, config: TrainConfig) -> RetrievalMetrics:
    val = dataset["val"]
    if config.val_images:
        val = val.subset(config.val_images)
    return evaluate_retrieval(params, val)


def _save_state(run_dir: Path, params: ScorerParams, opt: AdamState, record: RunRecord, epoch: int):
    state = run_dir / "state"
    save_checkpoint(params, state / "params")
    np.savez(state / "optimizer.npz", m=opt.m, v=opt.v, t=opt.t, epoch=epoch)
    (state / "record.json").write_text(record.to_json(), encoding="utf-8")


def _load_state(run_dir: Path):
    state = run_dir / "state"
    if not (state / "optimizer.npz").exists():
        return None
    z = np.load(state / "optimizer.npz")
    record = RunRecord.from_json((state / "record.json").read_text(encoding="utf-8"))
    best = run_dir / "checkpoints" / "best"
    best_params = load_checkpoint(best) if best.exists() else None
    return (load_checkpoint(state / "params"), AdamState(z["m"], z["v"], int(z["t"])),
            record, int(z["epoch"]) + 1, best_params)


def fit(dataset: Dataset, config: TrainConfig, teacher: ScorerParams | None = None,
        run_dir=None, resume: bool = False, init: ScorerParams | None = None,
        uniform_override: bool = False) -> tuple[ScorerParams, RunRecord]:
    """Shared loop behind :func:`train_teacher` and :func:`train_student`.

    Returns the best-validation parameters and the run record. Divergence
    raises :class:`DivergenceError` carrying the partial record.
    """
    f = config.flags
    if f["use_teacher"] and teacher is None:
        raise ConfigError(f"regime {config.regime!r} needs a teacher")
    train = dataset["train"]
    role = "teacher" if config.regime == "teacher" else "student"
    teacher_bytes = teacher.tobytes() if teacher is not None else None
    run_dir = Path(run_dir) if run_dir is not None else None

    start_epoch = 0
    resumed = _load_state(run_dir) if (run_dir is not None and resume) else None
    if resumed is not None:
        params, opt, record, start_epoch, best_params = resumed
        record.status = "running"
    else:
        if init is not None and tuple(init.hidden) != tuple(config.hidden):
            raise ConfigError(f"initial checkpoint has hidden widths {init.hidden}, config asks for {config.hidden}")
        params = init.copy() if init is not None else init_scorer(ScorerConfig(
            train.images.shape[1], train.texts.shape[1], tuple(config.hidden), config.seed, role))
        opt = AdamState.zeros(params.n_parameters())
        record = RunRecord(config=asdict(config))
        best_params = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
        if start_epoch == 0:
            (run_dir / "metrics.jsonl").write_text("", encoding="utf-8")

    best_val = record.best_val.get("mean_r1", -1.0)
    t0 = time.perf_counter() - record.wall_time
    for epoch in range(start_epoch, config.epochs):
        sums = {"task": 0.0, "distill": 0.0, "combined": 0.0}
        batch_losses = []
        n = 0
        for b, batch, cands, t_scores in _epoch_batches(dataset, config, teacher, epoch):
            if config.dump_candidates and run_dir is not None:
                dump_candidates(cands, run_dir / f"candidates_epoch{epoch:03d}.jsonl", b)
            tape = GradTape()
            s = forward(params, *candidate_features(batch, cands), tape=tape).reshape(len(batch), -1)
            loss = batch_loss(config, s, t_scores, uniform_override)
            value = loss.combined.value
            if not np.isfinite(value) or abs(value) > config.divergence_threshold:
                record.status = "diverged"
                record.diagnostic = f"loss {value!r} at epoch {epoch} batch {b}"
                record.wall_time = time.perf_counter() - t0
                _finish(run_dir, record)
                raise DivergenceError(record.diagnostic, record)
            grads = flatten_grads(backward(params, tape, loss.combined.grad))
            theta, opt = optimizer_step(params.flat(), grads, opt, config.lr, config.beta1, config.beta2, config.eps)
            params = params.with_flat(theta)
            batch_losses.append(value)
            sums["task"] += loss.task
            sums["distill"] += loss.distill
            sums["combined"] += value
            n += 1
        metrics = _validate(params, dataset, config)
        row = {"epoch": epoch, **{k: v / max(n, 1) for k, v in sums.items()},
               "val": metrics.as_dict(), "val_mean_r1": metrics.mean_r1,
               "batch_losses": batch_losses}
        record.add_epoch(row)
        log.info("%s epoch %d loss %.5f val R@1 t=%.1f i=%.1f", config.regime, epoch,
                 row["combined"], metrics.text_r1, metrics.image_r1)
        if metrics.mean_r1 > best_val:
            best_val = metrics.mean_r1
            best_params = params.copy()
            record.best_epoch = epoch
            record.best_val = {**metrics.as_dict(), "mean_r1": metrics.mean_r1}
            if run_dir is not None:
                record.checkpoint = str(save_checkpoint(best_params, run_dir / "checkpoints" / "best"))
        record.wall_time = time.perf_counter() - t0
        if run_dir is not None:
            with (run_dir / "metrics.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({k: v for k, v in row.items() if k != "batch_losses"}, sort_keys=True) + "\n")
            if config.save_every_epoch:
                save_checkpoint(params, run_dir / "checkpoints" / f"epoch_{epoch:03d}")
            _save_state(run_dir, params, opt, record, epoch)

    if teacher is not None and teacher.tobytes() != teacher_bytes:
        raise RuntimeError("teacher parameters changed during student training")
    record.status = "completed"
    record.wall_time = time.perf_counter() - t0
    _finish(run_dir, record)
    return (best_params if best_params is not None else params), record


def _finish(run_dir, record: RunRecord):
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "record.json").write_text(record.to_json(), encoding="utf-8")


def train_teacher(dataset: Dataset, config: TrainConfig | None = None, run_dir=None,
                  resume: bool = False) -> tuple[ScorerParams, RunRecord]:
    config = config or teacher_config()
    if config.regime != "teacher":
        config = replace(config, regime="teacher")
    return fit(dataset, config, None, run_dir, resume)


def train_student(dataset: Dataset, teacher: ScorerParams | None, config: TrainConfig, run_dir=None,
                  resume: bool = False, init: ScorerParams | None = None) -> tuple[ScorerParams, RunRecord]:
    """``init`` starts the student from existing parameters (e.g. a short fine-tuned warm-up)."""
    if config.regime == "teacher":
        raise ConfigError("use train_teacher for the teacher regime")
    return fit(dataset, config, teacher, run_dir, resume, init=init)


def student_uncertainty_variant(dataset: Dataset, teacher: ScorerParams, config: TrainConfig,
                                run_dir=None, init: ScorerParams | None = None) -> RunRecord:
    """Train with student-entropy weights; divergence is recorded, not raised."""
    config = replace(config, regime="student_uncertainty")
    try:
        _, record = fit(dataset, config, teacher, run_dir, init=init)
    except DivergenceError as e:
        record = e.record
    return record
