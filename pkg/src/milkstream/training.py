"""Training loop, evaluation and checkpoint selection."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .data import make_batches
from .errors import NumericFailure
from .latency import delays_from_trace, latency_report
from .model import (StreamingModel, batch_loss, greedy_simultaneous_decode, sentence_losses,
                    sequence_accuracy)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 5e-3
    clip_norm: float = 5.0
    latency_weight: float = 0.0
    # latency weight is 0 for `latency_delay` steps, then ramps linearly over `latency_ramp`
    latency_delay: int = 1750
    latency_ramp: int = 500
    # streaming heads are pinned to the source end for this many initial steps
    full_read_steps: int = 1500
    eval_every: int = 250
    seed: int = 0

    def weight_at(self, step: int) -> float:
        if step < self.latency_delay:
            return 0.0
        if self.latency_ramp <= 0:
            return self.latency_weight
        return self.latency_weight * min(1.0, (step - self.latency_delay + 1) / self.latency_ramp)


@dataclass
class TrainResult:
    model: StreamingModel
    best_step: int
    best_valid_loss: float
    history: list = field(default_factory=list)
    diverged: bool = False


def validation_loss(model: StreamingModel, pairs, lam: float, batch_size: int = 256) -> float:
    """Noise-free expected loss, averaged per sentence."""
    total, n = 0.0, 0
    with torch.no_grad():
        for batch in make_batches(pairs, batch_size, seed=None):
            loss, _ = batch_loss(model, batch, lam, None)
            total += float(loss) * batch.size
            n += batch.size
    return total / n


def expected_dals(model: StreamingModel, pairs, batch_size: int = 256) -> np.ndarray:
    """Per-sentence DAL of noise-free expected delays under teacher forcing (reference lengths)."""
    vals = []
    with torch.no_grad():
        for batch in make_batches(pairs, batch_size, seed=None):
            _, dal, _ = sentence_losses(model, batch, 0.0, None)
            vals.append(dal)
    return torch.cat(vals).numpy()


def expected_dal(model: StreamingModel, pairs, batch_size: int = 256) -> float:
    return float(expected_dals(model, pairs, batch_size).mean())


def fit(model: StreamingModel, train_pairs, valid_pairs, cfg: TrainConfig,
        callback=None) -> TrainResult:
    """Adam with gradient clipping; keeps the parameters with the best validation loss.

    Validation loss is measured with the final latency weight so that
    snapshots taken during the warm-up are comparable with later ones.
    """
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = nx.SeededRng(cfg.seed)
    best_state = copy.deepcopy(model.state_dict())
    best_loss, best_step = math.inf, 0
    history = []
    step, epoch = 0, 0
    lam_final = cfg.latency_weight
    eligible_from = max(cfg.full_read_steps,
                        cfg.latency_delay + cfg.latency_ramp if lam_final > 0 else 0)
    diverged = False
    while step < cfg.steps and not diverged:
        for batch in make_batches(train_pairs, cfg.batch_size, seed=cfg.seed * 100003 + epoch):
            lam = cfg.weight_at(step)
            try:
                loss, stats = batch_loss(model, batch, lam, rng, full_read=step < cfg.full_read_steps)
            except NumericFailure as exc:
                log.error("step %d: %s; keeping last good parameters", step, exc)
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            step += 1
            if step % cfg.eval_every == 0 or step == cfg.steps:
                vl = validation_loss(model, valid_pairs, lam_final)
                rec = {"step": step, "train_loss": float(loss.detach()), "latency_weight": lam,
                       "valid_loss": vl, **stats}
                history.append(rec)
                log.info("step %d loss %.4f valid %.4f dal %.3f", step, float(loss.detach()), vl, stats["dal"])
                if callback is not None:
                    callback(rec)
                if math.isfinite(vl) and vl < best_loss and step >= eligible_from:
                    best_loss, best_step = vl, step
                    best_state = copy.deepcopy(model.state_dict())
            if step >= cfg.steps:
                break
        epoch += 1
    model.load_state_dict(best_state)
    return TrainResult(model, best_step, best_loss, history, diverged)


@dataclass
class Evaluation:
    quality: float
    token_accuracy: float
    ap: float
    al: float
    dal: float
    expected_dal: float
    initial_delays: list
    hypotheses: list
    traces: list
    reports: list


def evaluate(model: StreamingModel, pairs, vocab=None) -> Evaluation:
    """Greedy streaming decode of every source; latency uses hypothesis lengths."""
    hyps, traces, reports, init = [], [], [], []
    for src, _ in pairs:
        res = greedy_simultaneous_decode(model, src, vocab=vocab)
        hyps.append(res.tokens)
        traces.append(res.trace)
        reports.append(latency_report(delays_from_trace(res.trace)))
        init.append(res.trace.initial_delay())
    exact, tok = sequence_accuracy(hyps, [t for _, t in pairs])
    return Evaluation(
        quality=exact, token_accuracy=tok,
        ap=float(np.mean([r.ap for r in reports])),
        al=float(np.mean([r.al for r in reports])),
        dal=float(np.mean([r.dal for r in reports])),
        expected_dal=expected_dal(model, pairs),
        initial_delays=init, hypotheses=hyps, traces=traces, reports=reports)
