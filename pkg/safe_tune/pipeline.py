"""
Training, profiling, analysis and comparison flows behind the CLI.

One epoch: probe importance -> scheduler decision -> training steps under the
resulting cut -> validation -> snapshot -> metrics line. Freezing happens at the
epoch boundary only, before any gradient step of that epoch.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from safe_tune.analysis import (
    ModelObjective,
    adapter_penalty_contributions,
    landscape,
    masked_delta_for,
    reg_penalty,
    top_k_eigs,
)
from safe_tune.checkpoint import load_checkpoint, restore_params, save_checkpoint, snapshot_names
from safe_tune.data_tasks import Dataset, Example, gen_task, load_jsonl, make_batches, probe_batches
from safe_tune.exceptions import CheckpointError, ConfigError, ContractError, DatasetError, EngineError, SafeTuneError
from safe_tune.importance import ImportanceRecord, epoch_importances, trajectory_similarity
from safe_tune.models import (
    EpochMetrics,
    FreezeEventRecord,
    FreezePolicy,
    RunConfig,
    RunSummary,
)
from safe_tune.resource_model import ResourceReport, epoch_report, modeled_activation_bytes, summarize_reports
from safe_tune.run_log import INITIAL_EPOCH, RunLog, read_json, write_csv, write_json
from safe_tune.scheduler import FreezeScheduler
from safe_tune.tensor_engine import OptimizerState, adamw_step
from safe_tune.transformer import AdapterStatus, Batch, ModelParams, forward, init_model

logger = logging.getLogger(__name__)

ANALYSES = ("landscape", "spectrum", "penalty", "trajectory")
REPORT_COLUMNS = [
    "run", "policy", "val_accuracy", "activation_bytes", "optimizer_bytes", "backward_flops",
    "frozen_fraction", "lambda_max", "d_val_accuracy", "d_activation_bytes", "d_optimizer_bytes",
    "d_backward_flops",
]
PROFILE_COLUMNS = ["layer", "val_accuracy", "activation_bytes", "backward_flops"]


@dataclass
class TrainResult:
    run_dir: Path
    params: ModelParams
    metrics: List[EpochMetrics]
    summary: RunSummary
    reports: List[ResourceReport] = field(default_factory=list)


# --- data ---

def build_dataset(config: RunConfig) -> Dataset:
    task, model = config.task, config.model
    if task.path:
        dataset = load_jsonl(task.path, model.vocab_size, model.n_classes, seed=config.task_seed,
                             max_len=model.max_seq)
    else:
        dataset = gen_task(task.kind, task.n, task.seq_len, model.vocab_size, config.task_seed,
                           marker_rate=task.marker_rate, n_classes=model.n_classes)
    for name in ("train", "valid", "probe"):
        if not dataset.split(name):
            raise DatasetError(f"dataset has no {name} examples")
    return dataset


def epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def evaluate(params: ModelParams, examples: Sequence[Example], batch_size: int, seq_len: int) -> Tuple[float, float]:
    """Mean loss and accuracy without dropout or tape recording."""
    total_loss, correct, count = 0.0, 0, 0
    for batch in make_batches(examples, batch_size, seq_len):
        result = forward(params, batch, params.frozen_mask(), training=False, track_grad=False)
        total_loss += result.loss.item() * batch.batch_size
        correct += int((result.logits.data.argmax(axis=-1) == batch.labels).sum())
        count += batch.batch_size
    return total_loss / count, correct / count


# --- training ---

def _train_step(params: ModelParams, optimizer: OptimizerState, batch: Batch, config: RunConfig,
                seq_len: int, step: int) -> Tuple[float, int]:
    mask = params.frozen_mask()
    result = forward(params, batch, mask, seed=config.seed, step=step, training=True)
    measured = result.tape.retained_bytes
    modeled = modeled_activation_bytes(config.model, mask, batch.batch_size, seq_len)
    if measured != modeled:
        raise EngineError(f"step {step}: tape retained {measured} bytes, resource model says {modeled}")
    grads = result.tape.backward(result.loss, cut_layer=result.tape.cut_layer)
    frozen = {n for a in params.adapters if a.frozen for n in a.names}
    leaked = sorted(frozen.intersection(grads))
    if leaked:
        raise ContractError(f"step {step}: gradients reached frozen parameters {leaked}")
    adamw_step(optimizer, params.arrays, grads)
    correct = int((result.logits.data.argmax(axis=-1) == batch.labels).sum())
    return result.loss.item() * batch.batch_size, correct


def _summarize(config: RunConfig, metrics: List[EpochMetrics], reports: List[ResourceReport],
               scheduler: FreezeScheduler, params: ModelParams) -> RunSummary:
    last = metrics[-1]
    reductions = summarize_reports(reports, scheduler.warmup_epoch)
    frozen = [a.layer for a in params.adapters if a.frozen]
    return RunSummary(
        policy=config.schedule.policy,
        task=config.task.kind if not config.task.path else config.task.path,
        seed=config.seed,
        epochs=len(metrics),
        warmup_epoch=scheduler.warmup_epoch,
        final_val_accuracy=last.val_accuracy,
        final_val_loss=last.val_loss,
        final_train_loss=last.train_loss,
        frozen_fraction=len(frozen) / config.model.n_layers,
        frozen_adapters=frozen,
        activation_bytes_total=sum(r.activation_bytes for r in reports),
        optimizer_bytes_total=sum(r.optimizer_bytes for r in reports),
        backward_flops_total=sum(r.backward_flops for r in reports),
        forward_flops_total=sum(r.forward_flops for r in reports),
        activation_reduction=reductions["activation"],
        optimizer_reduction=reductions["optimizer"],
        backward_flops_reduction=reductions["backward_flops"],
    )


def train_run(config: RunConfig, run_dir: Optional[Union[str, Path]] = None,
              only_adapter: Optional[int] = None) -> TrainResult:
    """
    Trains one run and writes its artifacts.

    Args:
        config: validated run configuration
        run_dir: output directory (defaults to config.out_dir)
        only_adapter: keep a single adapter trainable; every other adapter stays frozen
            at its zero-initialized state for the whole run (profiling variants)

    Returns:
        TrainResult with the final parameters, metrics and summary
    """
    log = RunLog(run_dir if run_dir is not None else config.out_dir)
    log.prepare(config)
    try:
        result = _train(config, log, only_adapter)
    except (SafeTuneError, OSError) as e:
        logger.error(f"Run {log.run_dir} failed: {e}")
        log.write_status("incomplete", error=str(e))
        raise
    except Exception as e:
        logger.exception(f"Run {log.run_dir} failed unexpectedly")
        log.write_status("incomplete", error=f"{type(e).__name__}: {e}")
        raise
    log.write_status("complete")
    return result


def _train(config: RunConfig, log: RunLog, only_adapter: Optional[int]) -> TrainResult:
    dataset = build_dataset(config)
    seq_len = dataset.max_len
    batch_size = config.optimizer.batch_size
    n_layers = config.model.n_layers

    params = init_model(config.model, config.seed)
    if only_adapter is not None:
        if not 0 <= only_adapter < n_layers:
            raise ConfigError(f"only_adapter must lie in [0, {n_layers})")
        if config.schedule.policy != FreezePolicy.NONE:
            raise ConfigError("schedule.policy: single-adapter runs need policy 'none'")
        for adapter in params.adapters:
            if adapter.layer != only_adapter:
                adapter.status = AdapterStatus.FROZEN
    scheduler = FreezeScheduler(config.schedule, n_layers)
    opt = config.optimizer
    optimizer = OptimizerState(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                               weight_decay=opt.weight_decay)
    save_checkpoint(log.initial_checkpoint, params, names=snapshot_names(params))
    probes = probe_batches(dataset.probe, config.probe_rows, batch_size, seq_len)
    train_examples, valid_examples = dataset.train, dataset.valid

    history: List[ImportanceRecord] = []
    metrics: List[EpochMetrics] = []
    reports: List[ResourceReport] = []
    step = 0
    logger.info(f"Training {config.schedule.policy.value} run: {n_layers} layers, {len(train_examples)} train "
                f"examples, {config.schedule.total_epochs} epochs")

    for epoch in range(config.schedule.total_epochs):
        record = epoch_importances(params, probes, epoch, history[-1] if history else None,
                                   centered=config.centered_cka)
        history.append(record)
        decision = scheduler.step(epoch, history)
        for layer in decision.newly_frozen:
            params.freeze(layer, epoch)

        optimizer.sync({n: params.shapes[n] for n in params.trainable_names()})
        report = epoch_report(params.frozen_mask(), config.model, batch_size, seq_len, epoch)
        reports.append(report)

        loss_sum, correct, seen = 0.0, 0, 0
        for batch in make_batches(train_examples, batch_size, seq_len, epoch_shuffle_seed(config.seed, epoch)):
            batch_loss, batch_correct = _train_step(params, optimizer, batch, config, seq_len, step)
            loss_sum += batch_loss
            correct += batch_correct
            seen += batch.batch_size
            step += 1

        val_loss, val_acc = evaluate(params, valid_examples, batch_size, seq_len)
        save_checkpoint(log.epoch_checkpoint(epoch), params, names=snapshot_names(params), epoch=epoch)

        events = [FreezeEventRecord(epoch=e.epoch, adapter=e.adapter, importance=e.importance, tau=e.tau)
                  for e in scheduler.state.events if e.epoch == epoch]
        line = EpochMetrics(
            epoch=epoch,
            steps=step,
            train_loss=loss_sum / seen,
            train_accuracy=correct / seen,
            val_loss=val_loss,
            val_accuracy=val_acc,
            importance=list(record.scores),
            cka=list(record.cka),
            undefined=list(record.undefined),
            relative_change=list(record.relative_change),
            tau=decision.tau,
            warmup_epoch=scheduler.warmup_epoch,
            candidates=sorted(scheduler.state.candidates or ()),
            frozen=list(params.frozen_mask()),
            freeze_events=events,
            resource=report.to_record(),
        )
        log.append_epoch(line)
        metrics.append(line)
        logger.info(f"Epoch {epoch}: train_loss={line.train_loss:.4f} val_acc={val_acc:.4f} "
                    f"cut={report.cut_layer} activation_bytes={report.activation_bytes}",
                    extra={"epoch": epoch, "cut_layer": report.cut_layer,
                           "activation_bytes": report.activation_bytes})

    save_checkpoint(log.final_checkpoint, params, epoch=config.schedule.total_epochs - 1)
    log.write_freeze_pattern(metrics)
    log.write_resources(metrics)
    summary = _summarize(config, metrics, reports, scheduler, params)
    log.write_summary(summary)
    logger.info(f"Run complete: val_acc={summary.final_val_accuracy:.4f}, frozen={summary.frozen_adapters}, "
                f"activation reduction {summary.activation_reduction.integrated} (integrated)")
    return TrainResult(run_dir=log.run_dir, params=params, metrics=metrics, summary=summary, reports=reports)


# --- profiling ---

def profile_adapters(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """
    Trains one variant per layer with only that layer's adapter, all from the same
    initialization, plus a run with every adapter whose snapshots feed the
    representation trajectory grid.
    """
    out_dir = Path(out_dir)
    variant_config = config.model_copy(update={
        "schedule": config.schedule.model_copy(update={"policy": FreezePolicy.NONE}),
    })
    rows = []
    for layer in range(config.model.n_layers):
        result = train_run(variant_config, out_dir / f"layer_{layer}", only_adapter=layer)
        report = result.reports[-1]
        rows.append({
            "layer": layer,
            "val_accuracy": result.summary.final_val_accuracy,
            "activation_bytes": report.activation_bytes,
            "backward_flops": report.backward_flops,
        })
        logger.info(f"Profile layer {layer}: val_acc={result.summary.final_val_accuracy:.4f} "
                    f"activation_bytes={report.activation_bytes}")
    write_csv(rows, out_dir / "profile.csv", PROFILE_COLUMNS)

    train_run(variant_config, out_dir / "all_adapters")
    analyze_run(out_dir / "all_adapters", "trajectory")
    return out_dir / "profile.csv"


# --- analysis ---

def _load_final(log: RunLog) -> ModelParams:
    if not log.final_checkpoint.exists():
        raise CheckpointError(f"{log.run_dir} has no final checkpoint; finish the run first")
    return restore_params(load_checkpoint(log.final_checkpoint))


def _eval_batches(config: RunConfig, dataset: Dataset) -> List[Batch]:
    examples = dataset.valid[:config.analysis.eval_examples]
    return list(make_batches(examples, config.optimizer.batch_size, dataset.max_len))


def _snapshots(log: RunLog, final: ModelParams) -> List[Tuple[int, ModelParams]]:
    """The untrained state (labelled INITIAL_EPOCH) followed by every per-epoch snapshot."""
    out = []
    if log.initial_checkpoint.exists():
        out.append((INITIAL_EPOCH, restore_params(load_checkpoint(log.initial_checkpoint), base=final)))
    for path in log.epoch_checkpoints():
        ckpt = load_checkpoint(path)
        out.append((ckpt.manifest.epoch, restore_params(ckpt, base=final)))
    if not out:
        raise CheckpointError(f"{log.run_dir} has no epoch snapshots")
    return out


def analyze_run(run_dir: Union[str, Path], which: str) -> Dict[str, object]:
    """Runs one post-hoc analysis (or "all") on a finished run and writes its files."""
    if which != "all" and which not in ANALYSES:
        raise ConfigError(f"unknown analysis '{which}', expected one of {', '.join(ANALYSES)} or all")
    log = RunLog(run_dir)
    config = log.read_config()
    final = _load_final(log)
    results: Dict[str, object] = {}
    selected = ANALYSES if which == "all" else (which,)

    if "landscape" in selected or "spectrum" in selected:
        dataset = build_dataset(config)
        objective = ModelObjective(final, _eval_batches(config, dataset))
        theta = objective.flatten()
        if "landscape" in selected:
            grid = landscape(objective, theta, config.analysis.landscape_radius, config.analysis.landscape_steps,
                             seed=config.seed)
            write_csv(grid.rows(), log.path("landscape.csv"), ["alpha", "beta", "loss"])
            results["landscape_center"] = grid.center
        if "spectrum" in selected:
            spectrum = top_k_eigs(objective, theta, config.analysis.spectrum_k, config.analysis.spectrum_tol,
                                  config.analysis.spectrum_max_iter, seed=config.seed)
            write_json(spectrum.to_dict(), log.path("spectrum.json"))
            results["spectrum"] = spectrum.to_dict()

    if "penalty" in selected:
        initial = init_model(config.model, config.seed)
        delta = masked_delta_for(final, initial)
        penalty = reg_penalty(delta)
        rows = []
        for epoch, snap in _snapshots(log, final):
            for layer, value in enumerate(adapter_penalty_contributions(snap, initial)):
                rows.append({"epoch": epoch, "layer": layer, "contribution": value})
        write_csv(rows, log.path("penalty_trajectory.csv"), ["epoch", "layer", "contribution"])
        write_json({"penalty": penalty, "active_coordinates": delta.rank, "dim": int(delta.theta.size),
                    "per_adapter": adapter_penalty_contributions(final, initial)}, log.path("penalty.json"))
        results["penalty"] = penalty

    if "trajectory" in selected:
        dataset = build_dataset(config)
        probes = probe_batches(dataset.probe, config.probe_rows, config.optimizer.batch_size, dataset.max_len)
        snapshots = _snapshots(log, final)
        grid = trajectory_similarity([s for _, s in snapshots], final, probes, centered=config.centered_cka)
        rows = [{"epoch": epoch, "layer": layer, "cka": None if math.isnan(grid[e, layer]) else float(grid[e, layer])}
                for e, (epoch, _) in enumerate(snapshots) for layer in range(grid.shape[1])]
        write_csv(rows, log.path("trajectory.csv"), ["epoch", "layer", "cka"])
        results["trajectory"] = grid

    logger.info(f"Analysis '{which}' written to {log.run_dir}")
    return results


# --- comparison ---

def _delta(value: float, baseline: float) -> str:
    change = 0.0 if baseline == 0 else 100.0 * (value - baseline) / baseline
    return f"{change:.2f}%"


def compare_runs(run_dirs: Sequence[Union[str, Path]], out: Union[str, Path]) -> Path:
    """Side-by-side CSV of finished runs with percentage deltas against the first one."""
    if len(run_dirs) < 2:
        raise ConfigError("report needs at least two run directories")
    logs = [RunLog(d) for d in run_dirs]
    configs = [log.read_config() for log in logs]
    for log, config in zip(logs[1:], configs[1:]):
        if config.task != configs[0].task:
            raise ConfigError(f"{log.run_dir} was trained on a different task than {logs[0].run_dir}")

    rows = []
    for log in logs:
        summary = log.read_summary()
        spectrum_path = log.path("spectrum.json")
        lambda_max = read_json(spectrum_path)["lambda_max"] if spectrum_path.exists() else None
        rows.append({
            "run": log.run_dir.name,
            "policy": summary.policy.value,
            "val_accuracy": summary.final_val_accuracy,
            "activation_bytes": summary.activation_bytes_total,
            "optimizer_bytes": summary.optimizer_bytes_total,
            "backward_flops": summary.backward_flops_total,
            "frozen_fraction": summary.frozen_fraction,
            "lambda_max": lambda_max,
        })
    base = rows[0]
    for row in rows:
        for column in ("val_accuracy", "activation_bytes", "optimizer_bytes", "backward_flops"):
            row[f"d_{column}"] = _delta(row[column], base[column])
    path = write_csv(rows, out, REPORT_COLUMNS)
    logger.info(f"Compared {len(rows)} runs into {path}")
    return path
