"""Orchestration: source pretraining, the online adaptation loop,
baselines, experiment artifacts, and ablation sweeps.

The adaptation loop is strictly batch-wise and online: the error
attributed to a batch comes from the model state left by the previous
batch, the per-layer trace state carries across domain boundaries with
no reset, and a single update is taken per batch.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fisher, losses, scheduler
from .model import Model, predict, record_source_stats
from .stream import Dataset, DomainSchedule, ScheduleStream, SourceSpec

logger = logging.getLogger(__name__)

METHODS = ("layerwise", "naive_eq6", "uniform_tent", "bn1", "source")


@dataclass
class AdaptConfig:
    method: str = "layerwise"
    eta: float = 5e-3  # 1e-3 is too timid for the desk-scale classifier
    tau: float = 1.0
    lam: float = 0.1
    gamma: float = 1.0
    epsilon: float = scheduler.DEFAULT_EPSILON
    optimizer: str = "adam"  # adam | sgd
    consistency: str = "sigmoid"  # sigmoid | softmax
    noise_scale: float = 0.1
    feature_scaling: bool = True
    seed: int = 0
    track_diagonal: bool = False
    error_post_update: bool = False  # diagnostics only; online protocol is pre-update

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(
            lam=self.lam,
            noise_scale=self.noise_scale,
            feature_scaling=self.feature_scaling,
            consistency_kind=self.consistency,
        )


@dataclass
class MetricsRecord:
    step: int
    domain: str
    severity: int
    error: float
    entropy: float
    consistency: float
    w_bar: list[float]
    w_raw: list[float] = field(default_factory=list)
    diag: dict[str, np.ndarray] | None = None
    wall_seconds: float = 0.0


@dataclass
class PretrainResult:
    model: Model
    accuracy: float
    final_loss: float


class PretrainDiverged(RuntimeError):
    pass


def pretrain(
    model: Model,
    source: Dataset,
    epochs: int,
    eta_pre: float = 1e-2,
    seed: int = 0,
    batch_size: int = 64,
) -> PretrainResult:
    """Minimize NLL on the labeled source set with uniform-rate Adam.

    Freezes each norm layer's source statistics afterwards and reports
    train accuracy on the frozen-source prediction path. ``epochs=0``
    records statistics on the untrained initialization and returns it.
    """
    rng = np.random.default_rng(seed)
    opt = scheduler.AdamState()
    n = source.inputs.shape[0]
    layers = model.weight_layers()
    uniform = np.full(len(layers), eta_pre)
    last_loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            pick = order[start : start + batch_size]
            logits = model.forward(source.inputs[pick], batch_stats=True)
            loss = losses.nll_loss(logits, source.labels[pick])
            last_loss = loss.item()
            if not np.isfinite(last_loss):
                raise PretrainDiverged(
                    f"pretraining loss became {last_loss} at epoch step; aborting"
                )
            grads = collect_grads(model, loss)
            scheduler.weighted_step(model, grads, uniform, optimizer=opt)
    record_source_stats(model, source.inputs)
    logits = model.forward(source.inputs, batch_stats=False)
    accuracy = float((logits.data.argmax(axis=1) == source.labels).mean())
    return PretrainResult(model=model, accuracy=accuracy, final_loss=last_loss)


def collect_grads(model: Model, loss: ad.Tensor) -> dict[str, list[np.ndarray]]:
    """Backward pass and per-layer gradient harvest, in layer order."""
    params = [p for layer in model.weight_layers() for p in layer.params]
    ad.grads_of(loss, params)
    return {
        layer.name: [
            p.grad if p.grad is not None else np.zeros(p.data.shape)
            for p in layer.params
        ]
        for layer in model.weight_layers()
    }


def adapt_stream(
    model: Model, stream: ScheduleStream, config: AdaptConfig
) -> list[MetricsRecord]:
    """Run the online loop over a single-pass stream, one update per batch.

    Per batch: predict and record the online error, estimate per-layer
    score second moments, fold them into the running trace state, turn
    traces into bounded per-layer rates, then descend the total loss.
    Non-updating methods (source, bn1) skip everything after the
    prediction. A rejected update leaves the model at its pre-step state
    and the loop continues.
    """
    cfg = config
    loss_cfg = cfg.loss_config()
    layer_names = model.weight_layer_names()
    n_layers = len(layer_names)
    state = fisher.FisherState.for_model(
        model, decay=cfg.gamma, track_diagonal=cfg.track_diagonal
    )
    opt = scheduler.AdamState() if cfg.optimizer == "adam" else None
    aug_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xA06)))
    updating = cfg.method in ("layerwise", "naive_eq6", "uniform_tent")
    records: list[MetricsRecord] = []
    for batch in stream:
        started = time.perf_counter()
        batch_stats = cfg.method != "source"
        logits = predict(model, batch.inputs, batch_stats=batch_stats)
        labels = stream.labels_for(batch.step)
        error = float((logits.data.argmax(axis=1) != labels).mean())
        ent = losses.entropy_loss(logits)
        entropy_val = float(ent.data)
        consistency_val = 0.0
        w_raw: list[float] = []
        w_bar = [0.0] * n_layers
        diag_snapshot = None

        if updating:
            if cfg.method in ("layerwise", "naive_eq6"):
                sample_scores = fisher.per_sample_scores(
                    model, batch.inputs, batch_stats=True
                )
                traces = fisher.layer_fim_trace(sample_scores)
                diag = (
                    fisher.fim_diagonal(sample_scores)
                    if cfg.track_diagonal
                    else None
                )
                fisher.accumulate(state, traces, current_diagonal=diag)
                if state.diagonals is not None:
                    diag_snapshot = {k: v.copy() for k, v in state.diagonals.items()}
                weights = fisher.learning_weights(state)
                w_raw = [weights[name] for name in layer_names]
                if cfg.method == "layerwise":
                    w_bar_arr = scheduler.exp_minmax_scale(
                        w_raw, tau=cfg.tau, eps=cfg.epsilon
                    )
                else:
                    w_bar_arr = np.asarray(w_raw)  # unbounded naive weighting
                w_bar = [float(v) for v in w_bar_arr]
            else:  # uniform_tent
                w_bar_arr = np.ones(n_layers)
                w_bar = [1.0] * n_layers
            rates = scheduler.layer_rates(w_bar_arr, cfg.eta)

            if cfg.lam > 0.0:
                augmented = losses.augment(batch.inputs, aug_rng, loss_cfg)
                aug_logits = model.forward(augmented, batch_stats=True)
                cons = losses.consistency_loss(
                    logits, aug_logits, kind=cfg.consistency
                )
                consistency_val = float(cons.data)
                total = ad.add(ent, cons * cfg.lam)
            else:
                total = ent
            grads = collect_grads(model, total)
            applied = scheduler.weighted_step(model, grads, rates, optimizer=opt)
            if not applied:
                logger.warning(
                    "adapt_stream: step %d rejected, model unchanged", batch.step
                )

        if cfg.error_post_update:
            post = predict(model, batch.inputs, batch_stats=batch_stats)
            error = float((post.data.argmax(axis=1) != labels).mean())
        records.append(
            MetricsRecord(
                step=batch.step,
                domain=batch.domain,
                severity=batch.severity,
                error=error,
                entropy=entropy_val,
                consistency=consistency_val,
                w_bar=w_bar,
                w_raw=w_raw,
                diag=diag_snapshot,
                wall_seconds=time.perf_counter() - started,
            )
        )
    return records


# ---------------------------------------------------------------------------
# artifacts


def metrics_csv(records: list[MetricsRecord], layer_names: list[str]) -> str:
    """Fixed-schema CSV: step,domain,severity,error,entropy,consistency,
    then one scaled-weight column per layer."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["step", "domain", "severity", "error", "entropy", "consistency"]
    header += [f"wbar_{i}" for i in range(1, len(layer_names) + 1)]
    writer.writerow(header)
    for rec in records:
        row = [
            rec.step,
            rec.domain,
            rec.severity,
            repr(rec.error),
            repr(rec.entropy),
            repr(rec.consistency),
        ]
        row += [repr(v) for v in rec.w_bar]
        writer.writerow(row)
    return buf.getvalue()


def summarize(records: list[MetricsRecord], config: AdaptConfig) -> dict:
    """Mean error overall and per domain, in stream order."""
    per_domain: dict[str, list[float]] = {}
    for rec in records:
        per_domain.setdefault(rec.domain, []).append(rec.error)
    return {
        "method": config.method,
        "eta": config.eta,
        "tau": config.tau,
        "lambda": config.lam,
        "gamma": config.gamma,
        "seed": config.seed,
        "per_domain_error": {k: float(np.mean(v)) for k, v in per_domain.items()},
        "mean_error": float(np.mean([rec.error for rec in records])),
        "mean_entropy": float(np.mean([rec.entropy for rec in records])),
        "batches": len(records),
    }


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    summary: dict
    csv_path: Path | None = None
    weights_path: Path | None = None
    summary_path: Path | None = None


def run_experiment(
    model: Model,
    source: SourceSpec,
    schedule: DomainSchedule,
    config: AdaptConfig,
    out_dir,
    tag: str = "run",
) -> ExperimentResult:
    """One adaptation run with CSV metrics, JSON-lines weight dumps and a
    summary block written under ``out_dir``. Output paths are probed
    before any adaptation starts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{tag}_metrics.csv"
    weights_path = out / f"{tag}_weights.jsonl"
    summary_path = out / f"{tag}_summary.json"
    for path in (csv_path, weights_path, summary_path):
        with open(path, "w", encoding="utf-8"):
            pass  # fail now, not after the run

    work = model.clone()
    layer_names = work.weight_layer_names()
    records = adapt_stream(work, ScheduleStream(source, schedule), config)

    csv_path.write_text(metrics_csv(records, layer_names), encoding="utf-8")
    with open(weights_path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = fisher.dump_record(
                step=rec.step,
                domain=rec.domain,
                severity=rec.severity,
                w=dict(zip(layer_names, rec.w_raw)) if rec.w_raw else {},
                w_bar=dict(zip(layer_names, rec.w_bar)),
                diag=rec.diag,
            )
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    summary = summarize(records, config)
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return ExperimentResult(records, summary, csv_path, weights_path, summary_path)


def ablate(
    model: Model,
    source: SourceSpec,
    schedule_factory,
    base: AdaptConfig,
    taus: list[float],
    lams: list[float],
    gammas: list[float],
) -> list[dict]:
    """Full factorial sweep; one adaptation run per grid point, seeds held
    fixed, rows sorted by mean error. ``schedule_factory()`` must return
    a fresh schedule so every point consumes an identical stream."""
    if not taus or not lams or not gammas:
        raise ValueError("ablate: every grid axis needs at least one value")
    rows = []
    for tau in taus:
        for lam in lams:
            for gamma in gammas:
                cfg = replace(base, tau=tau, lam=lam, gamma=gamma)
                work = model.clone()
                records = adapt_stream(
                    work, ScheduleStream(source, schedule_factory()), cfg
                )
                rows.append(summarize(records, cfg))
    rows.sort(key=lambda r: r["mean_error"])
    return rows
