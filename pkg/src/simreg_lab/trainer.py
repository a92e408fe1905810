"""AdamW training loop, schedule, clipping, metrics and grid sweeps."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import resource
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import data as data_mod
from . import losses
from . import model as model_mod
from . import tensorcore as tc
from .config import OptimConfig, TrainConfig, dumps

log = logging.getLogger(__name__)

RECORD_FIELDS = ("step", "lr", "ce_loss", "sr_loss", "softplus_sr", "combined_loss", "grad_norm",
                 "mean_pairwise_cosine", "wall_ms_per_step", "peak_mem_bytes")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_record: "MetricRecord | None", cause: str = "non-finite loss"):
        self.step = step
        self.last_record = last_record
        super().__init__(f"{cause} at step {step}")


@dataclass
class MetricRecord:
    step: int
    lr: float
    ce_loss: float
    sr_loss: float
    softplus_sr: float
    combined_loss: float
    grad_norm: float
    mean_pairwise_cosine: float
    wall_ms_per_step: float
    peak_mem_bytes: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=False)


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               step: int, lr: float, beta1: float = 0.9, beta2: float = 0.95,
               weight_decay: float = 0.1, eps: float = 1e-8,
               decay_mask: Mapping[str, bool] | None = None) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with bias correction and decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``; parameters
    whose ``decay_mask`` entry is false skip the decay term.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        new_params[name] = p - lr * (update + wd * p)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, step)


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``peak * final_lr_fraction``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    peak = cfg.peak_lr
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    floor = peak * cfg.final_lr_fraction
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return peak
    progress = (step - cfg.warmup_steps) / span
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / global_norm`` when the norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def lambda_for_dim(d: int) -> float:
    """Regularizer weight scaled with embedding width: ``10 * sqrt(d / 1024)``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return 10.0 * math.sqrt(d / 1024.0)


def decay_mask_for(params: Mapping[str, np.ndarray]) -> dict[str, bool]:
    return {k: not (model_mod.is_norm_gain(k) or k == "tok_emb") for k in params}


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def mean_pairwise_cosine(E: np.ndarray) -> float:
    """Mean off-diagonal cosine per sequence, averaged over the batch."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 2:
        E = E[None]
    n = E.shape[1]
    if n < 2:
        return 0.0
    norms = np.linalg.norm(E, axis=-1, keepdims=True)
    A = np.where(norms > 0, E / np.where(norms > 0, norms, 1.0), 0.0)
    C = A @ np.swapaxes(A, -1, -2)
    off = ~np.eye(n, dtype=bool)
    return float(np.mean(C[:, off]))


def peak_memory_bytes() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def load_corpus(cfg: TrainConfig) -> tuple[np.ndarray, int]:
    """Corpus ids and the vocabulary size they need."""
    d = cfg.data
    if d.source == "zipf":
        return data_mod.zipf_corpus(d.zipf_vocab, d.zipf_exponent, d.length, d.corpus_seed), d.zipf_vocab
    if d.source == "file":
        if not d.path:
            raise ValueError("data.path is required for data.source = file")
        ids, tok = data_mod.read_corpus(d.path, d.mode, d.vocab_path or None)
        return ids, tok.vocab_size
    raise ValueError(f"unknown data.source {d.source!r}")


@dataclass
class StepOutput:
    loss: float
    ce: float
    sr: float
    softplus_sr: float
    grads: dict[str, np.ndarray]
    embeddings: np.ndarray
    pair_evals: int


def objective(params: Mapping[str, np.ndarray], batch: data_mod.TokenBatch, cfg: TrainConfig,
              with_grad: bool = True) -> StepOutput:
    """Mean of ``ce_i + lam * softplus(sr_i)`` (chunk-weighted when chunks > 1)."""
    p = model_mod.param_inputs(cfg.model)
    E, logits = model_mod.build_forward(batch.sequences, p, cfg.model, cfg.simreg.capture_layer)
    ce = tc.mean(losses.cross_entropy_expr(logits, batch.labels))
    terms = losses.simreg_terms(E, batch.labels, cfg.simreg)
    lam = cfg.simreg.lam
    root = ce + lam * terms.penalty if lam > 0 else ce
    if with_grad:
        grads = tc.gradient(root, params, list(params))
    else:
        tc.evaluate(root, params)
        grads = {}
    # reported terms are re-evaluated on the captured values (cheap, no model pass)
    sub = losses.simreg_terms(tc.constant(E.value), batch.labels, cfg.simreg)
    value = tc.evaluate(sub.value)
    penalty = tc.evaluate(sub.penalty)
    return StepOutput(float(root.value), float(ce.value), float(value), float(penalty), grads,
                      E.value, terms.pair_evals)


def final_embeddings(params, tokens, cfg: TrainConfig) -> np.ndarray:
    E, _ = model_mod.model_forward(tokens, params, cfg.model, cfg.model.n_layers)
    return E


@dataclass
class TrainResult:
    records: list[MetricRecord]
    params: dict[str, np.ndarray]
    state: AdamState
    final: dict[str, float]
    pair_evals_per_step: int


class Trainer:
    def __init__(self, cfg: TrainConfig, corpus: np.ndarray | None = None):
        self.cfg = cfg
        if corpus is None:
            corpus, vocab = load_corpus(cfg)
            if vocab > cfg.model.vocab_size:
                raise ValueError(f"corpus needs vocab {vocab} but model.vocab_size = {cfg.model.vocab_size}")
        self.train_ids, self.val_ids = data_mod.split_corpus(np.asarray(corpus), cfg.data.holdout)
        self.params = model_mod.init_params(cfg.model, cfg.train.seed)
        self.state = AdamState.zeros_like(self.params)
        self.decay_mask = decay_mask_for(self.params)
        self.pair_evals_per_step = 0

    def batches(self) -> Iterator[data_mod.TokenBatch]:
        d = self.cfg.data
        return data_mod.batch_iterator(self.train_ids, d.batch_size, d.seq_len, self.cfg.train.seed)

    def run(self) -> Iterator[MetricRecord]:
        """Execute ``total_steps`` updates, yielding a record every ``log_interval`` steps."""
        cfg, oc = self.cfg, self.cfg.optim
        interval = max(1, cfg.train.log_interval)
        last: MetricRecord | None = None
        stream = self.batches()
        for step in range(oc.total_steps):
            t0 = time.perf_counter()
            batch = next(stream)
            try:
                out = objective(self.params, batch, cfg)
            except tc.NonFiniteError as exc:
                raise TrainingDiverged(step, last, str(exc)) from exc
            if not math.isfinite(out.loss):
                raise TrainingDiverged(step, last)
            self.pair_evals_per_step = out.pair_evals
            grads, gnorm = clip_gradients(out.grads, oc.clip_norm)
            lr = lr_schedule(step + 1, oc)
            self.params, self.state = adamw_step(self.params, grads, self.state, step + 1, lr, oc.beta1,
                                                 oc.beta2, oc.weight_decay, oc.eps, self.decay_mask)
            wall = (time.perf_counter() - t0) * 1000.0
            if step % interval == 0:
                if cfg.simreg.capture_layer in (None, cfg.model.n_layers):
                    emb = out.embeddings
                else:
                    emb = final_embeddings(self.params, batch.sequences, cfg)
                last = MetricRecord(step, lr, out.ce, out.sr, out.softplus_sr, out.loss, gnorm,
                                    mean_pairwise_cosine(emb), wall, peak_memory_bytes())
                yield last

    def evaluate(self, n_batches: int | None = None) -> dict[str, float]:
        """Held-out CE, regularizer and mean cosine over the first validation windows."""
        d = self.cfg.data
        n_batches = n_batches or self.cfg.train.eval_batches
        wins = data_mod.windows(self.val_ids, d.seq_len)
        if len(wins) == 0:
            raise ValueError("validation split holds no full window")
        ce, sr, sp, cos, count = 0.0, 0.0, 0.0, 0.0, 0
        for i in range(0, min(len(wins), n_batches * d.batch_size), d.batch_size):
            chunk = wins[i:i + d.batch_size]
            batch = data_mod.TokenBatch(chunk[:, :-1], chunk[:, 1:], np.arange(i, i + len(chunk)))
            out = objective(self.params, batch, self.cfg, with_grad=False)
            emb = (out.embeddings if self.cfg.simreg.capture_layer in (None, self.cfg.model.n_layers)
                   else final_embeddings(self.params, batch.sequences, self.cfg))
            ce += out.ce
            sr += out.sr
            sp += out.softplus_sr
            cos += mean_pairwise_cosine(emb)
            count += 1
        res = {"ce": ce / count, "sr": sr / count, "softplus_sr": sp / count, "mean_pairwise_cosine": cos / count}
        res["ppl"] = math.exp(res["ce"])
        return res

    def save(self, path, extra: Mapping[str, object] | None = None) -> None:
        tensors = dict(self.params)
        for k in self.params:
            tensors[f"optim.m.{k}"] = self.state.m[k]
            tensors[f"optim.v.{k}"] = self.state.v[k]
        header = {"optim.step": self.state.step}
        for line in dumps(self.cfg).splitlines():
            key, _, value = line.partition(" = ")
            if not key.startswith("model."):
                header[f"config.{key}"] = value
        header.update(extra or {})
        model_mod.save_checkpoint(path, self.cfg.model, tensors, header)


def train_run(cfg: TrainConfig, out_dir=None, corpus: np.ndarray | None = None,
              on_record: Callable[[MetricRecord], None] | None = None) -> TrainResult:
    """Train, write ``metrics.jsonl`` / ``checkpoint.bin`` / ``final.json`` under ``out_dir``."""
    trainer = Trainer(cfg, corpus)
    out = Path(out_dir) if out_dir is not None else None
    records = []
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dumps(cfg))
        fh = open(out / "metrics.jsonl", "w")
    try:
        for rec in trainer.run():
            records.append(rec)
            if fh is not None:
                fh.write(rec.to_json() + "\n")
            if on_record is not None:
                on_record(rec)
            ci = cfg.train.checkpoint_interval
            if out is not None and ci and rec.step and rec.step % ci == 0:
                trainer.save(out / f"checkpoint_{rec.step}.bin")
    finally:
        if fh is not None:
            fh.close()
    final = trainer.evaluate()
    if out is not None:
        trainer.save(out / "checkpoint.bin")
        (out / "final.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    return TrainResult(records, trainer.params, trainer.state, final, trainer.pair_evals_per_step)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_FIELDS = ("tau", "lambda", "final_ce", "final_sr", "val_ppl")


def sweep(grid: Sequence[tuple[float, float]], base: TrainConfig, out_dir=None,
          corpus: np.ndarray | None = None) -> list[dict[str, float]]:
    """One seeded run per ``(tau, lambda)`` cell; failed cells are reported as NaN."""
    if not grid:
        raise ValueError("empty sweep grid")
    if corpus is None:
        corpus, _ = load_corpus(base)
    rows = []
    for tau, lam in grid:
        cfg = copy.deepcopy(base)
        cfg.simreg = dataclasses.replace(cfg.simreg, tau=float(tau), lam=float(lam))
        cell_dir = None if out_dir is None else Path(out_dir) / f"tau{tau:g}_lambda{lam:g}"
        try:
            res = train_run(cfg, cell_dir, corpus)
            last = res.records[-1]
            rows.append({"tau": tau, "lambda": lam, "final_ce": last.ce_loss, "final_sr": last.sr_loss,
                         "val_ppl": res.final["ppl"]})
        except Exception as exc:  # a failed cell must not stop the sweep
            log.warning("sweep cell tau=%g lambda=%g failed: %s", tau, lam, exc)
            rows.append({"tau": tau, "lambda": lam, "final_ce": math.nan, "final_sr": math.nan,
                         "val_ppl": math.nan})
    if out_dir is not None:
        write_sweep_csv(rows, Path(out_dir) / "sweep.csv")
    return rows


def write_sweep_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_FIELDS)
        for r in rows:
            writer.writerow([repr(float(r[k])) for k in SWEEP_FIELDS])
