"""Training runs, evaluation metrics and the baseline-vs-CPTR comparison."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from cptr.errors import DomainError, TrainingDivergedError
from cptr.harness.tasks import RecallDataset, RecallTaskSpec, gen_recall_suite
from cptr.model import (
    Batch,
    ModelConfig,
    TrainState,
    forward,
    generate_batch,
    grad_stability_stats,
    init_params,
    perplexity,
    refresh_all,
    train_step,
)

log = logging.getLogger(__name__)

# Fields that depend on the host clock and are excluded from determinism checks.
TIMING_FIELDS = ("tokens_per_second", "ms_per_token", "wall_clock_seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a ``compare`` run needs besides the two model configs.

    ``distances`` are desk-scale stand-ins for long-context recall buckets and
    must fit ``model.max_seq_len``.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    cptr_ranks: tuple[int, int, int] | None = None
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 16
    n_pairs: int = 4
    distances: tuple[int, ...] = (64, 112)
    n_eval_per_distance: int = 256
    latency_batch_sizes: tuple[int, ...] = (1, 16)
    latency_tokens: int = 8
    latency_prompt_len: int = 8
    latency_repeats: int = 5
    seed: int = 0

    def model_pair(self) -> tuple[ModelConfig, ModelConfig]:
        base = replace(self.model, cptr_enabled=False, seed=self.seed)
        ranks = self.cptr_ranks if self.cptr_ranks is not None else self.model.cptr_ranks
        return base, replace(base, cptr_enabled=True, cptr_ranks=ranks)

    def task_spec(self, seed: int, n_sequences: int) -> RecallTaskSpec:
        return RecallTaskSpec(
            vocab_size=self.model.vocab_size, n_pairs=self.n_pairs, distance=self.distances[0],
            seq_len=self.model.max_seq_len, n_sequences=n_sequences, seed=seed,
        )

    def train_data(self) -> RecallDataset:
        per_distance = -(-max(self.steps, 1) * self.batch_size // len(self.distances))
        return gen_recall_suite(self.task_spec(self.seed, per_distance), self.distances, shuffle=True)

    def eval_data(self) -> RecallDataset:
        return gen_recall_suite(self.task_spec(self.seed + 1, self.n_eval_per_distance), self.distances)


@dataclass
class MetricsReport:
    run_id: str
    model: str
    config_fingerprint: str
    seed: int
    status: str = "ok"
    failed_step: int | None = None
    train_steps: int = 0
    initial_loss: float | None = None
    final_loss: float | None = None
    perplexity: float | None = None
    recall: dict[str, float] = field(default_factory=dict)
    recall_overall: float | None = None
    tokens_per_second: float | None = None
    ms_per_token: dict[str, float] = field(default_factory=dict)
    grad_norm_mean: float | None = None
    grad_norm_variance: float | None = None
    grad_norm_max_ratio: float | None = None
    wall_clock_seconds: float | None = None
    stream_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def without_timing(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in TIMING_FIELDS}


def config_fingerprint(*parts) -> str:
    """Stable hash of JSON-serialisable configuration pieces."""
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def evaluate_recall(params, config: ModelConfig, dataset: RecallDataset, batch_size: int = 64) -> dict[int, float]:
    """Greedy recall accuracy grouped by definition-to-query distance.

    The prediction at the query position is the argmax over the value
    alphabet; ties go to the lowest token id. Distances without sequences
    are simply absent from the result.
    """
    if len(dataset) == 0:
        raise DomainError("recall evaluation on an empty dataset")
    decomp = refresh_all(params, config)
    vlo, vhi = dataset.value_range
    hits = np.zeros(len(dataset), dtype=bool)
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        seqs = dataset.sequences[start:stop]
        logits, _ = forward(params, config, seqs[:, :-1], decomp)
        rows = np.arange(stop - start)
        pos = dataset.answer_pos[start:stop] - 1
        guess = vlo + np.argmax(logits[rows, pos, vlo:vhi], axis=-1)
        hits[start:stop] = guess == seqs[rows, pos + 1]
    return {int(d): float(hits[dataset.distances == d].mean()) for d in np.unique(dataset.distances)}


def measure_latency(params, config: ModelConfig, batch_sizes=(1, 16), n_tokens: int = 8, n_repeats: int = 5,
                    prompt_len: int = 8, seed: int = 0, return_readings: bool = False):
    """Median wall-clock milliseconds per generated token for each batch size.

    Per-token time is the elapsed time of one greedy generation divided by
    ``batch_size * n_tokens``. One untimed warm-up run precedes the timed
    repeats.
    """
    rng = np.random.default_rng(seed)
    decomp = refresh_all(params, config)
    result, readings = {}, {}
    for bs in batch_sizes:
        if bs < 1:
            raise DomainError("batch sizes must be >= 1")
        prompts = rng.integers(0, config.vocab_size, size=(bs, prompt_len))
        generate_batch(params, config, prompts, n_tokens, decomp)
        times = []
        for _ in range(n_repeats):
            t0 = time.perf_counter()
            generate_batch(params, config, prompts, n_tokens, decomp)
            times.append((time.perf_counter() - t0) * 1000.0 / (bs * n_tokens))
        readings[int(bs)] = times
        result[int(bs)] = statistics.median(times)
    return (result, readings) if return_readings else result


def _eval_throughput(params, config, dataset: RecallDataset, batch_size: int = 64) -> float:
    t0 = time.perf_counter()
    decomp = refresh_all(params, config)
    n = 0
    for batch in dataset.batches(batch_size):
        forward(params, config, batch, decomp)
        n += batch.token_ids.size
    return n / max(time.perf_counter() - t0, 1e-9)


def train(params, config: ModelConfig, data: RecallDataset, steps: int, lr: float, batch_size: int,
          state: TrainState | None = None):
    """SGD over consecutive batches of ``data`` (wrapping around).

    Returns ``(params, state, stream_hash)`` where the hash covers every
    token actually fed to the model.
    """
    state = TrainState() if state is None else state
    h = hashlib.sha256()
    n = len(data)
    for s in range(steps):
        idx = (np.arange(batch_size) + s * batch_size) % n
        seqs = data.sequences[idx]
        h.update(seqs.astype("<i8").tobytes())
        params, _ = train_step(params, config, Batch.from_sequences(seqs), lr, state)
        if s % 100 == 0:
            log.debug("step %d loss %.4f", s, state.losses[-1])
    return params, state, h.hexdigest()


def evaluate_run(params, config: ModelConfig, exp: ExperimentConfig, report: MetricsReport,
                 eval_data: RecallDataset | None = None) -> MetricsReport:
    eval_data = exp.eval_data() if eval_data is None else eval_data
    report.perplexity = perplexity(params, config, eval_data.batches(64))
    recall = evaluate_recall(params, config, eval_data)
    report.recall = {str(d): a for d, a in recall.items()}
    counts = {int(d): int(np.sum(eval_data.distances == d)) for d in recall}
    report.recall_overall = sum(recall[d] * counts[d] for d in recall) / sum(counts.values())
    report.tokens_per_second = _eval_throughput(params, config, eval_data)
    latency = measure_latency(params, config, exp.latency_batch_sizes, exp.latency_tokens,
                              exp.latency_repeats, exp.latency_prompt_len, seed=exp.seed)
    report.ms_per_token = {str(bs): ms for bs, ms in latency.items()}
    return report


def run_single(config: ModelConfig, exp: ExperimentConfig, label: str, train_data: RecallDataset | None = None,
               eval_data: RecallDataset | None = None):
    """Train and evaluate one model; returns ``(report, params, state)``.

    A diverging run yields a report with ``status == "failed"`` and the
    offending step instead of raising.
    """
    t0 = time.perf_counter()
    fp = config_fingerprint(config.to_dict(), _training_settings(exp))
    report = MetricsReport(run_id=f"{label}-{fp[:8]}-s{exp.seed}", model=label, config_fingerprint=fp,
                           seed=exp.seed, train_steps=exp.steps)
    train_data = exp.train_data() if train_data is None else train_data
    params = init_params(config)
    state = TrainState()
    try:
        params, state, report.stream_hash = train(params, config, train_data, exp.steps, exp.lr,
                                                  exp.batch_size, state)
    except TrainingDivergedError as exc:
        report.status, report.failed_step = "failed", exc.step
        report.wall_clock_seconds = time.perf_counter() - t0
        return report, params, state
    if state.losses:
        report.initial_loss, report.final_loss = state.losses[0], state.losses[-1]
        report.grad_norm_mean, report.grad_norm_variance, report.grad_norm_max_ratio = (
            grad_stability_stats(state.grad_norms)
        )
    evaluate_run(params, config, exp, report, eval_data)
    report.wall_clock_seconds = time.perf_counter() - t0
    return report, params, state


def _training_settings(exp: ExperimentConfig) -> dict:
    return {
        "steps": exp.steps, "lr": exp.lr, "batch_size": exp.batch_size, "n_pairs": exp.n_pairs,
        "distances": list(exp.distances), "n_eval_per_distance": exp.n_eval_per_distance, "seed": exp.seed,
    }


def run_experiment(exp: ExperimentConfig) -> tuple[MetricsReport, MetricsReport]:
    """Baseline and CPTR models trained on the identical token stream."""
    base_cfg, cptr_cfg = exp.model_pair()
    train_data, eval_data = exp.train_data(), exp.eval_data()
    base, *_ = run_single(base_cfg, exp, "baseline", train_data, eval_data)
    cptr, *_ = run_single(cptr_cfg, exp, "cptr", train_data, eval_data)
    return base, cptr


def trends(baseline: MetricsReport, cptr: MetricsReport) -> dict[str, str]:
    """Direction of each headline metric, CPTR relative to baseline (informational)."""

    def direction(a, b, lower_is_better):
        if a is None or b is None:
            return "n/a"
        if a == b:
            return "equal"
        better = b < a if lower_is_better else b > a
        return "cptr better" if better else "baseline better"

    out = {
        "perplexity": direction(baseline.perplexity, cptr.perplexity, True),
        "recall_overall": direction(baseline.recall_overall, cptr.recall_overall, False),
        "grad_norm_variance": direction(baseline.grad_norm_variance, cptr.grad_norm_variance, True),
        "tokens_per_second": direction(baseline.tokens_per_second, cptr.tokens_per_second, False),
    }
    for d in sorted(set(baseline.recall) & set(cptr.recall), key=int):
        out[f"recall_d{d}"] = direction(baseline.recall[d], cptr.recall[d], False)
    for bs in sorted(set(baseline.ms_per_token) & set(cptr.ms_per_token), key=int):
        out[f"ms_per_token_b{bs}"] = direction(baseline.ms_per_token[bs], cptr.ms_per_token[bs], True)
    return out
