"""Training loop, evaluation metrics, and model-comparison reporting.

``train`` runs seeded mini-batch Adam with early stopping on validation
error and restores the best-validation parameters. ``evaluate`` scores a
predictor in meters (average and 95th-percentile Euclidean error) and
refuses any test sample whose group id was seen in training.
``sweep_sequence_lengths`` re-windows the same trajectories for a range of
observed lengths and emits one report row per (model, profile, length),
including a persistence baseline that repeats the last observed position.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, kv_digest
from .ioutil import atomic_write_text
from .optim import Adam, TrainingError
from .recurrent import RecurrentConfig, RecurrentModel
from .trajectory import make_sequences, split_groups
from .transformer import ModelConfig, TransformerModel

MODEL_KINDS = ("transformer", "lstm", "rnn", "persistence")
REPORT_COLUMNS = (
    "model,profile,t_obs,avg_error_m,p95_error_m,n_eval,param_count,train_s,predict_s"
)
RAW_COLUMNS = "model,profile,t_obs,sample_id,error_m"


@dataclass
class TrainConfig:
    epochs_max: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout: float = 0.01
    patience: int = 10
    master_seed: int = 0

    def __post_init__(self):
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")

    def digest(self):
        return kv_digest({f"train.{k}": v for k, v in self.__dict__.items()})


class PersistenceModel:
    """Baseline that predicts the next position as the last observed one."""

    input_mode = "position"

    def predict_next(self, observed):
        return persistence_baseline(observed)

    def count_params(self):
        return 0


def persistence_baseline(observed):
    """Last observed 2-D position, for one window or a batch of windows."""
    obs = np.asarray(observed, dtype=np.float64)
    if obs.shape[-2] < 1:
        raise ValueError("observed window must be nonempty")
    return obs[..., -1, :]


def _input_mode(model):
    mode = getattr(model, "input_mode", None)
    return mode if mode is not None else model.config.input_mode


def _model_name(model):
    if isinstance(model, TransformerModel):
        return "transformer"
    if isinstance(model, RecurrentModel):
        return model.kind
    if isinstance(model, PersistenceModel):
        return "persistence"
    return type(model).__name__.lower()


def stack_sequences(samples, input_mode):
    """Stack samples into (windows, targets, group_ids) arrays."""
    if not samples:
        raise ConfigError("no sequence samples to stack")
    if input_mode == "fingerprint":
        if any(s.features is None for s in samples):
            raise ConfigError("fingerprint input requested but samples carry no features")
        x = np.stack([s.features for s in samples]).astype(np.float64)
    else:
        x = np.stack([s.observed for s in samples]).astype(np.float64)
    y = np.stack([s.target for s in samples]).astype(np.float64)
    groups = np.asarray([s.group_id for s in samples])
    return x, y, groups


def predict_in_chunks(model, windows, chunk=512):
    """Batched prediction that bounds peak memory for large test sets."""
    outs = []
    for lo in range(0, windows.shape[0], chunk):
        pred = model.predict_next(windows[lo : lo + chunk])
        outs.append(np.atleast_2d(np.asarray(pred, dtype=np.float64)))
    return np.concatenate(outs, axis=0)


@dataclass
class TrainResult:
    train_losses: list
    val_errors: list
    best_epoch: int
    train_seconds: float
    train_group_ids: frozenset
    stopped_early: bool


def train(model, train_samples, val_samples, cfg):
    """Fit ``model`` in place; returns loss history and the best epoch.

    Mini-batches are reshuffled each epoch from a generator seeded by the
    master seed, so identical seeds give identical loss histories. The
    parameters from the epoch with the lowest validation error are restored
    at the end; training stops early after ``cfg.patience`` epochs without
    a validation improvement. ``val_samples=None`` skips validation
    entirely (no early stop, final parameters kept), for pure fitting runs.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    if val_samples is not None and not val_samples:
        raise ConfigError("empty validation set")
    mode = _input_mode(model)
    x_tr, y_tr, g_tr = stack_sequences(train_samples, mode)
    if val_samples is not None:
        x_va, y_va, g_va = stack_sequences(val_samples, mode)
        overlap = sorted(set(g_tr.tolist()) & set(g_va.tolist()))
        if overlap:
            raise ConfigError(f"train and validation share group ids {overlap}")

    opt = Adam(model.params(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.master_seed), 101)))
    dropout_rng = np.random.default_rng(np.random.SeedSequence((int(cfg.master_seed), 202)))
    n = x_tr.shape[0]
    train_losses, val_errors = [], []
    best_err, best_epoch, best_values = np.inf, -1, None
    epochs_since_best = 0
    stopped_early = False
    start = time.perf_counter()
    for epoch in range(cfg.epochs_max):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            opt.zero_grad()
            loss = model.loss_batch(x_tr[idx], y_tr[idx], train=True, rng=dropout_rng)
            value = loss.values.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at step {opt.t + 1}")
            loss.backward()
            opt.step()
            total += value * idx.size
        train_losses.append(total / n)
        if val_samples is None:
            best_epoch = epoch
            continue
        preds = predict_in_chunks(model, x_va)
        val_err = float(np.linalg.norm(preds - y_va, axis=-1).mean())
        val_errors.append(val_err)
        if val_err < best_err:
            best_err, best_epoch = val_err, epoch
            best_values = [p.values.copy() for _, p in model.params()]
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stopped_early = True
                break
    if best_values is not None:
        for (_, p), values in zip(model.params(), best_values):
            p.values = values
    return TrainResult(
        train_losses=train_losses,
        val_errors=val_errors,
        best_epoch=best_epoch,
        train_seconds=time.perf_counter() - start,
        train_group_ids=frozenset(g_tr.tolist()),
        stopped_early=stopped_early,
    )


def percentile(errors, q):
    """Linear-interpolation percentile at zero-based rank (n-1)*q/100."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ConfigError("percentile of an empty error set")
    if not 0 < q < 100:
        raise ValueError("q must be in (0, 100)")
    return float(np.percentile(e, q))


@dataclass
class ReportRow:
    model: str
    profile: str
    t_obs: int
    avg_error_m: float
    p95_error_m: float
    n_eval: int
    param_count: int
    train_s: float
    predict_s: float

    def key(self):
        return (self.model, self.profile, self.t_obs)


def evaluate(model, samples, forbidden_group_ids=(), model_name=None, profile="", t_obs=0,
             train_s=0.0):
    """Score a predictor; returns (ReportRow, per-sample errors in meters)."""
    if not samples:
        raise ConfigError("empty evaluation set")
    forbidden = set(forbidden_group_ids)
    reused = sorted({s.group_id for s in samples} & forbidden)
    if reused:
        raise ConfigError(f"evaluation samples reuse training groups {reused}")
    x, y, _ = stack_sequences(samples, _input_mode(model))
    start = time.perf_counter()
    preds = predict_in_chunks(model, x)
    predict_s = time.perf_counter() - start
    errors = np.linalg.norm(preds - y, axis=-1)
    row = ReportRow(
        model=model_name if model_name is not None else _model_name(model),
        profile=profile,
        t_obs=int(t_obs),
        avg_error_m=float(errors.mean()),
        p95_error_m=percentile(errors, 95.0),
        n_eval=int(errors.size),
        param_count=int(model.count_params()),
        train_s=float(train_s),
        predict_s=float(predict_s),
    )
    return row, errors


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    raw_errors: dict = field(default_factory=dict)

    def add(self, row, errors=None):
        self.rows.append(row)
        if errors is not None:
            self.raw_errors[row.key()] = np.asarray(errors, dtype=np.float64)

    def row_for(self, model, profile, t_obs):
        for row in self.rows:
            if row.key() == (model, profile, int(t_obs)):
                return row
        raise KeyError(f"no report row for {(model, profile, t_obs)}")

    def to_csv(self, path):
        lines = [REPORT_COLUMNS]
        for r in self.rows:
            lines.append(
                f"{r.model},{r.profile},{r.t_obs},{r.avg_error_m!r},{r.p95_error_m!r},"
                f"{r.n_eval},{r.param_count},{r.train_s!r},{r.predict_s!r}"
            )
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = REPORT_COLUMNS.split(",")
            if reader.fieldnames != expected:
                raise ConfigError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
            for row in reader:
                report.rows.append(
                    ReportRow(
                        model=row["model"],
                        profile=row["profile"],
                        t_obs=int(row["t_obs"]),
                        avg_error_m=float(row["avg_error_m"]),
                        p95_error_m=float(row["p95_error_m"]),
                        n_eval=int(row["n_eval"]),
                        param_count=int(row["param_count"]),
                        train_s=float(row["train_s"]),
                        predict_s=float(row["predict_s"]),
                    )
                )
        return report

    def raw_to_csv(self, path):
        lines = [RAW_COLUMNS]
        for (model, profile, t_obs), errors in self.raw_errors.items():
            for sample_id, err in enumerate(errors):
                lines.append(f"{model},{profile},{t_obs},{sample_id},{float(err)!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @staticmethod
    def raw_from_csv(path):
        raw = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = RAW_COLUMNS.split(",")
            if reader.fieldnames != expected:
                raise ConfigError(f"{path}: expected columns {expected}, got {reader.fieldnames}")
            for row in reader:
                key = (row["model"], row["profile"], int(row["t_obs"]))
                raw.setdefault(key, []).append((int(row["sample_id"]), float(row["error_m"])))
        return {k: np.asarray([e for _, e in sorted(v)]) for k, v in raw.items()}

    def max_metric_deviation(self):
        """Largest |reported - recomputed| metric over rows with raw errors."""
        worst = 0.0
        for row in self.rows:
            errors = self.raw_errors.get(row.key())
            if errors is None:
                continue
            worst = max(worst, abs(row.avg_error_m - float(errors.mean())))
            worst = max(worst, abs(row.p95_error_m - percentile(errors, 95.0)))
            if row.n_eval != errors.size:
                worst = max(worst, float("inf"))
        return worst

    def digest(self):
        """Digest of all metric fields; wall-clock timings are excluded."""
        entries = {}
        for r in self.rows:
            prefix = f"{r.model}.{r.profile}.{r.t_obs}"
            entries[f"{prefix}.avg_error_m"] = r.avg_error_m
            entries[f"{prefix}.p95_error_m"] = r.p95_error_m
            entries[f"{prefix}.n_eval"] = r.n_eval
            entries[f"{prefix}.param_count"] = r.param_count
        return kv_digest(entries)


def build_model(kind, t_obs, input_mode="position", input_dim=2, seed=0, dropout=0.01,
                overrides=None):
    """Construct one predictor by kind with harness-default sizes."""
    over = dict(overrides or {})
    if kind == "transformer":
        cfg = ModelConfig(
            t_obs=t_obs,
            input_mode=input_mode,
            input_dim=input_dim,
            dropout_p=dropout,
            **over,
        )
        return TransformerModel(cfg, seed=seed)
    if kind in ("rnn", "lstm"):
        hidden = over.pop("hidden_dim", 96 if kind == "lstm" else 224)
        cfg = RecurrentConfig(
            kind=kind,
            hidden_dim=hidden,
            t_obs=t_obs,
            input_mode=input_mode,
            input_dim=input_dim,
            dropout_p=dropout,
            **over,
        )
        return RecurrentModel(cfg, seed=seed)
    if kind == "persistence":
        return PersistenceModel()
    raise ValueError(f"unknown model kind '{kind}', expected one of {MODEL_KINDS}")


def _cell_seed(master_seed, cell_index):
    return int(np.random.SeedSequence((int(master_seed), 7000 + cell_index)).generate_state(1)[0])


def sweep_sequence_lengths(trajectories_by_profile, t_obs_list, cfg,
                           model_kinds=MODEL_KINDS, input_mode="position", dataset=None,
                           ratios=(0.8, 0.1, 0.1), model_overrides=None):
    """Train and score every (model, profile, observed-length) combination.

    The same group split is reused across observed lengths so that a model
    is never tested on groups any sweep cell trained on.
    """
    report = MetricsReport()
    cell = 0
    for profile_name in sorted(trajectories_by_profile):
        train_traj, val_traj, test_traj = split_groups(
            trajectories_by_profile[profile_name], ratios
        )
        for t_obs in t_obs_list:
            train_seq, _ = make_sequences(train_traj, t_obs, mode=input_mode, dataset=dataset)
            val_seq, _ = make_sequences(val_traj, t_obs, mode=input_mode, dataset=dataset)
            test_seq, _ = make_sequences(test_traj, t_obs, mode=input_mode, dataset=dataset)
            off_limits = {s.group_id for s in train_seq} | {s.group_id for s in val_seq}
            for kind in model_kinds:
                model = build_model(
                    kind,
                    t_obs,
                    input_mode=input_mode,
                    input_dim=2 if input_mode == "position" else dataset.feature_dim,
                    seed=_cell_seed(cfg.master_seed, cell),
                    dropout=cfg.dropout,
                    overrides=(model_overrides or {}).get(kind),
                )
                cell += 1
                train_s = 0.0
                if kind != "persistence":
                    result = train(model, train_seq, val_seq, cfg)
                    train_s = result.train_seconds
                row, errors = evaluate(
                    model,
                    test_seq,
                    forbidden_group_ids=off_limits,
                    model_name=kind,
                    profile=profile_name,
                    t_obs=t_obs,
                    train_s=train_s,
                )
                report.add(row, errors)
    return report
