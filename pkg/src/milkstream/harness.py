"""Experiment orchestration: run configs, training runs, sweeps and their artifacts.

Every command writes into one output directory and echoes the effective
configuration there as ``effective_config.ini``.  Sweeps share one pretrained
base per seed: a few thousand steps with the heads pinned to the source end
(plain soft attention), then a short free-head phase at zero latency weight.
Each grid point fine-tunes a copy of that base.
"""

from __future__ import annotations

import configparser
import copy
import csv
import dataclasses
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .attention import AttentionConfig
from .data import TaskSpec, Vocabulary, generate_corpus, load_parallel_corpus
from .errors import FormatError, InvalidArgument, MilkstreamError, NumericFailure
from .latency import Action, DecodeTrace, delays_from_trace, latency_report
from .model import (ModelConfig, StreamingModel, WaitKSchedule, greedy_simultaneous_decode,
                    load_checkpoint, save_checkpoint)
from .training import TrainConfig, evaluate, expected_dal, fit

log = logging.getLogger(__name__)

CSV_HEADER = ["method", "param", "seed", "quality", "AP", "AL", "DAL"]
LAMBDA_GRID = (0.75, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01, 0.0)
CHUNK_GRID = (1, 2, 4, 8, 16)
FULL_ATTENTION_K = 300


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 10000
    valid_size: int = 300
    test_size: int = 1000
    # optional whitespace-tokenised parallel files; synthetic task data when empty
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    vocab: str = ""


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple = ("milk", "wait_k")
    lambdas: tuple = LAMBDA_GRID
    ks: tuple = (1, 2, 3, 4, 5, 6, 7, 8, 10, FULL_ATTENTION_K)
    chunk_sizes: tuple = CHUNK_GRID
    seeds: tuple = (0,)
    pretrain_steps: int = 1750
    pretrain_full_read_steps: int = 1500
    finetune_steps: int = 1250
    finetune_ramp: int = 500


def _default_model():
    return ModelConfig(attention=AttentionConfig(kind="milk", noise_n=1.0))


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=_default_model)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs/milkstream"


# ------------------------------------------------------------------ config io

_SECTIONS = ("task", "model", "attention", "train", "data", "sweep")


def _section_objects(cfg: RunConfig) -> dict:
    return {"task": cfg.task, "model": cfg.model, "attention": cfg.model.attention,
            "train": cfg.train, "data": cfg.data, "sweep": cfg.sweep}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            proto = default[0] if default else ""
            if isinstance(proto, str):
                return tuple(parts)
            if all(isinstance(x, int) for x in default):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
    except ValueError:
        raise FormatError(f"bad value {text!r} for {key}") from None
    return text


def config_to_text(cfg: RunConfig) -> str:
    lines = ["[output]", f"out = {cfg.out}", ""]
    for name, obj in _section_objects(cfg).items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if name == "model" and f.name == "attention":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``key = value`` entries (grouped under section headers) onto ``base``."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FormatError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    cfg = base or RunConfig()
    objs = _section_objects(cfg)
    for section in parser.sections():
        if section == "output":
            for key, value in parser.items(section):
                if key != "out":
                    raise FormatError(f"unknown key [output] {key}")
                cfg = replace(cfg, out=value.strip())
            continue
        if section not in _SECTIONS:
            raise FormatError(f"unknown section [{section}]")
        obj = objs[section]
        known = {f.name: f for f in dataclasses.fields(obj)}
        updates = {}
        for key, value in parser.items(section):
            if key not in known or (section == "model" and key == "attention"):
                raise FormatError(f"unknown key [{section}] {key}")
            updates[key] = _parse_value(value, getattr(obj, key), f"[{section}] {key}")
        objs[section] = replace(obj, **updates)
    model = replace(objs["model"], attention=objs["attention"])
    return replace(cfg, task=objs["task"], model=model, train=objs["train"],
                   data=objs["data"], sweep=objs["sweep"])


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def apply_overrides(cfg: RunConfig, *, attention=None, latency_weight=None, k=None,
                    chunk_size=None, noise=None, emission_rate=None, seed=None,
                    out=None) -> RunConfig:
    """Command-line flags win over the config file; grid flags pin the grid to one value."""
    att, train, sweep, model = cfg.model.attention, cfg.train, cfg.sweep, cfg.model
    if attention is not None:
        att = att.with_(kind=attention)
        sweep = replace(sweep, methods=(attention,))
    if latency_weight is not None:
        train = replace(train, latency_weight=latency_weight)
        sweep = replace(sweep, lambdas=(latency_weight,))
    if k is not None:
        att = att.with_(wait_k=k)
        sweep = replace(sweep, ks=(k,))
    if chunk_size is not None:
        att = att.with_(chunk_size=chunk_size)
        sweep = replace(sweep, chunk_sizes=(chunk_size,))
    if noise is not None:
        att = att.with_(noise_n=noise)
    if emission_rate is not None:
        att = att.with_(emission_rate=emission_rate)
    if seed is not None:
        train = replace(train, seed=seed)
        model = replace(model, init_seed=seed)
        sweep = replace(sweep, seeds=(seed,))
    model = replace(model, attention=att)
    return replace(cfg, model=model, train=train, sweep=sweep,
                   out=out if out is not None else cfg.out)


# ----------------------------------------------------------------------- data


@dataclass
class Dataset:
    train: list
    valid: list
    test: list
    vocab: Vocabulary


def build_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if not d.train_src:
        vocab = cfg.task.vocabulary()
        return Dataset(generate_corpus(cfg.task, d.train_size),
                       generate_corpus(cfg.task, d.valid_size, start=500_000),
                       generate_corpus(cfg.task, d.test_size, start=1_000_000), vocab)
    if d.vocab:
        vocab = Vocabulary.load(d.vocab)
    else:
        toks = set()
        for name in (d.train_src, d.train_tgt):
            toks.update(Path(name).read_text(encoding="utf-8").split())
        vocab = Vocabulary(sorted(toks))
    train = load_parallel_corpus(d.train_src, d.train_tgt, vocab)
    valid = load_parallel_corpus(d.valid_src, d.valid_tgt, vocab) if d.valid_src else train[:d.valid_size]
    test = load_parallel_corpus(d.test_src, d.test_tgt, vocab) if d.test_src else valid
    return Dataset(train, valid, test, vocab)


def _model_config(cfg: RunConfig, data: Dataset, **attention) -> ModelConfig:
    return replace(cfg.model, vocab_size=len(data.vocab),
                   attention=cfg.model.attention.with_(**attention))


# ------------------------------------------------------------------- records


@dataclass
class ExperimentRecord:
    method: str
    param: float
    seed: int
    quality: float
    ap: float
    al: float
    dal: float
    wall_time_s: float = 0.0

    @property
    def failed(self) -> bool:
        return math.isnan(self.quality)

    def csv_row(self) -> list[str]:
        return [self.method, _num(self.param), str(self.seed),
                *(_num(v) for v in (self.quality, self.ap, self.al, self.dal))]


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return format(x, ".10g")


def sort_records(records):
    return sorted(records, key=lambda r: (r.method, math.isnan(r.dal),
                                          0.0 if math.isnan(r.dal) else r.dal, r.param, r.seed))


def write_curves(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sort_records(records):
        w.writerow(r.csv_row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_curves(path) -> list[ExperimentRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}", line=1)
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise FormatError(f"{path}: expected {len(CSV_HEADER)} fields, got {len(row)}", line=n)
        try:
            out.append(ExperimentRecord(row[0], float(row[1]), int(row[2]),
                                        *(float(v) for v in row[3:])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}", line=n) from None
    return out


# --------------------------------------------------------------------- traces


def trace_records(trace: DecodeTrace, index: int) -> list[dict]:
    rep = latency_report(delays_from_trace(trace))
    recs = [{"a": a.kind, "tok": a.token, "pos": a.pos} for a in trace.actions]
    recs.append({"sentence": index, "src_len": trace.source_len, "tgt_len": trace.writes,
                 "AP": rep.ap, "AL": rep.al, "DAL": rep.dal})
    return recs


def write_traces(traces, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, tr in enumerate(traces):
            for rec in trace_records(tr, i):
                f.write(json.dumps(rec) + "\n")


@dataclass
class TraceEntry:
    trace: DecodeTrace
    summary: dict


def read_traces(path) -> list[TraceEntry]:
    """Parse a JSONL trace file; each sentence ends with its summary record."""
    entries, actions = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read traces {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc.msg}", line=n) from None
        if not isinstance(rec, dict):
            raise FormatError(f"{path}: expected an object", line=n)
        if "a" in rec:
            if rec["a"] not in ("r", "w") or not isinstance(rec.get("pos"), int):
                raise FormatError(f"{path}: malformed action {rec}", line=n)
            actions.append(Action(rec["a"], str(rec.get("tok", "")), rec["pos"]))
        elif "AP" in rec:
            try:
                trace = DecodeTrace(actions, source_len=rec.get("src_len")).validate()
            except InvalidArgument as exc:
                raise FormatError(f"{path}: {exc}", line=n) from None
            entries.append(TraceEntry(trace, rec))
            actions = []
        else:
            raise FormatError(f"{path}: record is neither an action nor a summary", line=n)
    if actions:
        raise FormatError(f"{path}: trailing actions without a summary record", line=len(lines))
    return entries


def latency_table(paths) -> list[dict]:
    """Recompute AP/AL/DAL from the actions of each trace file."""
    rows = []
    for p in paths:
        entries = read_traces(p)
        if not entries:
            raise InvalidArgument(f"{p}: no traces")
        reps = [latency_report(delays_from_trace(e.trace)) for e in entries]
        diff = max(max(abs(r.ap - e.summary["AP"]), abs(r.al - e.summary["AL"]),
                       abs(r.dal - e.summary["DAL"])) for r, e in zip(reps, entries))
        rows.append({"system": Path(p).stem, "sentences": len(entries),
                     "AP": float(np.mean([r.ap for r in reps])),
                     "AL": float(np.mean([r.al for r in reps])),
                     "DAL": float(np.mean([r.dal for r in reps])),
                     "max_summary_diff": diff})
    return rows


def initial_delay_histogram(paths) -> dict[str, Counter]:
    if not paths:
        raise InvalidArgument("need at least one trace file")
    hist = {}
    for p in paths:
        entries = read_traces(p)
        if not entries:
            raise InvalidArgument(f"{p}: no traces")
        name = Path(p).stem if Path(p).stem not in hist else str(p)
        hist[name] = Counter(e.trace.initial_delay() for e in entries)
    return hist


def histogram_variance(counts: Counter) -> float:
    vals = np.repeat(np.array(list(counts.keys()), dtype=float), list(counts.values()))
    return float(np.var(vals))


def write_histogram(hist: dict, csv_path, svg_path) -> None:
    bins = sorted(set().union(*(c.keys() for c in hist.values())))
    names = list(hist)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["initial_delay", *names])
    for b in bins:
        w.writerow([b, *(hist[n].get(b, 0) for n in names)])
    Path(csv_path).write_text(buf.getvalue(), encoding="utf-8")
    Path(svg_path).write_text(bar_chart_svg(bins, {n: [hist[n].get(b, 0) for b in bins] for n in names},
                                            "initial delay (tokens read before first write)"),
                              encoding="utf-8")


# ------------------------------------------------------------------------ svg

PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f")


def _svg(width, height, body) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def _text(x, y, s, size=11, anchor="middle", extra=""):
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')


def heatmap_svg(beta, heads, src_labels, tgt_labels, cell=22) -> str:
    """Grey-scale attention matrix; outlined cells mark the hard head of each row."""
    beta = np.asarray(beta, dtype=float)
    ny, nx_ = beta.shape
    left, top = 60, 60
    body = []
    for j, s in enumerate(src_labels):
        x = left + j * cell + cell / 2
        body.append(_text(x, top - 8, s, extra=f' transform="rotate(-60 {x:.1f} {top - 8})"'))
    for i, t in enumerate(tgt_labels):
        body.append(_text(left - 6, top + i * cell + cell * 0.7, t, anchor="end"))
    for i in range(ny):
        for j in range(nx_):
            g = int(round(255 * (1.0 - min(max(beta[i, j], 0.0), 1.0))))
            body.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                        f'height="{cell}" fill="rgb({g},{g},{g})" stroke="#ddd" stroke-width="0.5"/>')
    for i, h in enumerate(heads):
        body.append(f'<rect x="{left + (h - 1) * cell + 1}" y="{top + i * cell + 1}" '
                    f'width="{cell - 2}" height="{cell - 2}" fill="none" stroke="{PALETTE[1]}" '
                    f'stroke-width="2.5"/>')
    return _svg(left + nx_ * cell + 20, top + ny * cell + 20, body)


def bar_chart_svg(bins, series: dict, xlabel: str) -> str:
    width, height, left, bottom, top = 640, 360, 50, 50, 30
    plot_w, plot_h = width - left - 20, height - bottom - top
    ymax = max(max(v) for v in series.values()) or 1
    group = plot_w / max(len(bins), 1)
    bar = group * 0.8 / max(len(series), 1)
    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
            _text(left + plot_w / 2, height - 10, xlabel),
            _text(left - 30, top + 4, ymax, anchor="start", size=10)]
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        for b, v in enumerate(vals):
            h = plot_h * v / ymax
            x = left + b * group + group * 0.1 + k * bar
            body.append(f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{bar:.1f}" '
                        f'height="{h:.1f}" fill="{color}"/>')
        body.append(f'<rect x="{left + plot_w - 150}" y="{top + 14 * k}" width="10" height="10" fill="{color}"/>')
        body.append(_text(left + plot_w - 135, top + 14 * k + 9, name, anchor="start", size=10))
    for b, label in enumerate(bins):
        body.append(_text(left + b * group + group / 2, top + plot_h + 14, label, size=10))
    return _svg(width, height, body)


def curve_svg(records) -> str:
    """Quality against DAL, one polyline per method."""
    ok = [r for r in records if not r.failed]
    width, height, left, bottom, top = 640, 400, 60, 50, 30
    plot_w, plot_h = width - left - 20, height - bottom - top
    xmax = max([r.dal for r in ok], default=1.0) * 1.05 or 1.0
    body = [f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
            _text(left + plot_w / 2, height - 10, "DAL"),
            _text(15, top + plot_h / 2, "quality", extra=f' transform="rotate(-90 15 {top + plot_h / 2})"'),
            _text(left + plot_w, top + plot_h + 14, _num(round(xmax, 2)), size=10),
            _text(left - 6, top + 4, "1", anchor="end", size=10)]
    methods = sorted({r.method for r in ok})
    for k, m in enumerate(methods):
        color = PALETTE[k % len(PALETTE)]
        pts = sorted((r.dal, r.quality) for r in ok if r.method == m)
        xy = [(left + plot_w * x / xmax, top + plot_h * (1 - y)) for x, y in pts]
        body.append('<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>'.format(
            color, " ".join(f"{x:.1f},{y:.1f}" for x, y in xy)))
        body.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>' for x, y in xy)
        body.append(_text(left + 10, top + 14 * k + 10, m, anchor="start", size=10,
                          extra=f' fill="{color}"'))
    return _svg(width, height, body)


# ------------------------------------------------------------------- commands


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out}: {exc.strerror}") from None
    write_config(cfg, out / "effective_config.ini")
    return out


def run_train(cfg: RunConfig) -> dict:
    """Train one model; writes checkpoint, vocabulary, training log and test metrics."""
    out = _prepare_out(cfg)
    data = build_data(cfg)
    model = StreamingModel(_model_config(cfg, data))
    data.vocab.save(out / "vocab.txt")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as logf:
        def record(rec):
            rec = dict(rec, expected_dal=expected_dal(model, data.valid))
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
        result = fit(model, data.train, data.valid, cfg.train, callback=record)
    save_checkpoint(model, out / "model.ckpt", data.vocab,
                    {"best_step": result.best_step, "diverged": result.diverged})
    if result.diverged:
        raise NumericFailure(f"training diverged; last good checkpoint kept in {out / 'model.ckpt'}")
    ev = evaluate(model, data.test, data.vocab)
    metrics = {"best_step": result.best_step, "best_valid_loss": result.best_valid_loss,
               "quality": ev.quality, "token_accuracy": ev.token_accuracy, "AP": ev.ap,
               "AL": ev.al, "DAL": ev.dal, "expected_dal": ev.expected_dal,
               "initial_delay_variance": float(np.var(ev.initial_delays))}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    write_traces(ev.traces, out / "test_traces.jsonl")
    return metrics


def grid_points(cfg: RunConfig) -> list[tuple[str, float]]:
    pts = []
    for m in cfg.sweep.methods:
        if m in ("milk", "monotonic"):
            pts += [(m, float(lam)) for lam in cfg.sweep.lambdas]
        elif m == "mocha":
            pts += [(m, float(cs)) for cs in cfg.sweep.chunk_sizes]
        elif m == "wait_k":
            pts += [(m, float(k)) for k in cfg.sweep.ks]
        elif m == "soft":
            pts.append((m, 0.0))
        else:
            raise InvalidArgument(f"unknown sweep method {m!r}")
    return pts


def pretrain(cfg: RunConfig, data: Dataset, seed: int) -> dict:
    """Shared starting point for every grid point of one seed."""
    s = cfg.sweep
    model = StreamingModel(replace(_model_config(cfg, data, kind="milk"), init_seed=seed))
    tc = replace(cfg.train, steps=s.pretrain_steps, full_read_steps=s.pretrain_full_read_steps,
                 latency_weight=0.0, seed=seed)
    result = fit(model, data.train, data.valid, tc)
    if result.diverged:
        raise NumericFailure(f"pretraining diverged for seed {seed}")
    return copy.deepcopy(model.state_dict())


def point_name(method: str, param: float, seed: int) -> str:
    return f"{method}_{_num(param)}_s{seed}"


def run_point(cfg: RunConfig, data: Dataset, base: dict, method: str, param: float, seed: int):
    """Fine-tune the base for one grid point and evaluate; returns ``(record, evaluation, model)``."""
    t0 = time.perf_counter()
    lam = cfg.train.latency_weight
    att = {"kind": method}
    if method in ("milk", "monotonic"):
        lam = param
    elif method == "mocha":
        att["chunk_size"] = int(param)
    elif method == "wait_k":
        att["wait_k"] = int(param)
    model = StreamingModel(replace(_model_config(cfg, data, **att), init_seed=seed))
    model.load_state_dict(base, strict=False)
    s = cfg.sweep
    tc = replace(cfg.train, steps=s.finetune_steps, latency_weight=lam, latency_delay=0,
                 latency_ramp=s.finetune_ramp, full_read_steps=0, seed=seed)
    nan = float("nan")
    try:
        result = fit(model, data.train, data.valid, tc)
        if result.diverged:
            raise NumericFailure("training diverged")
        ev = evaluate(model, data.test, data.vocab)
    except MilkstreamError as exc:
        log.error("%s failed: %s", point_name(method, param, seed), exc)
        return ExperimentRecord(method, param, seed, nan, nan, nan, nan,
                                time.perf_counter() - t0), None, model
    rec = ExperimentRecord(method, param, seed, ev.quality, ev.ap, ev.al, ev.dal,
                           time.perf_counter() - t0)
    return rec, ev, model


def run_sweep(cfg: RunConfig, progress=None) -> list[ExperimentRecord]:
    """Train and evaluate every grid point; writes curves.csv, curves.svg, traces and checkpoints."""
    out = _prepare_out(cfg)
    (out / "traces").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    data = build_data(cfg)
    points = grid_points(cfg)
    records = []
    with open(out / "sweep_log.jsonl", "w", encoding="utf-8") as logf:
        for seed in cfg.sweep.seeds:
            base = pretrain(cfg, data, seed)
            for method, param in points:
                rec, ev, model = run_point(cfg, data, base, method, param, seed)
                name = point_name(method, param, seed)
                if ev is not None:
                    write_traces(ev.traces, out / "traces" / f"{name}.jsonl")
                    save_checkpoint(model, out / "checkpoints" / f"{name}.ckpt", data.vocab,
                                    {"method": method, "param": param, "seed": seed})
                entry = {"point": name, "failed": rec.failed, "wall_time_s": round(rec.wall_time_s, 3)}
                if ev is not None:
                    entry.update(expected_dal=ev.expected_dal,
                                 initial_delay_variance=float(np.var(ev.initial_delays)))
                logf.write(json.dumps(entry) + "\n")
                logf.flush()
                records.append(rec)
                if progress is not None:
                    progress(rec)
    write_curves(records, out / "curves.csv")
    (out / "curves.svg").write_text(curve_svg(records), encoding="utf-8")
    return sort_records(records)


def encode_lines(lines, vocab: Vocabulary) -> list[list[int]]:
    out = []
    for n, line in enumerate(lines, start=1):
        toks = line.split()
        if not toks:
            raise FormatError("empty input sentence", line=n)
        out.append(vocab.encode(toks))
    return out


def _schedule_for(model: StreamingModel, k=None, emission_rate=None):
    if k is None and emission_rate is None:
        return None
    a = model.cfg.attention
    return WaitKSchedule(k if k is not None else a.wait_k,
                         emission_rate if emission_rate is not None else a.emission_rate)


def run_decode(checkpoint, input_path, out_dir, k=None, emission_rate=None) -> list[dict]:
    """Stream-decode every input line; writes hypotheses.txt and traces.jsonl."""
    model, vocab, _ = load_checkpoint(checkpoint)
    if vocab is None:
        raise FormatError(f"{checkpoint} carries no vocabulary")
    try:
        lines = Path(input_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {input_path}: {exc.strerror}") from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = _schedule_for(model, k, emission_rate)
    hyps, traces = [], []
    for src in encode_lines(lines, vocab):
        res = greedy_simultaneous_decode(model, src, vocab=vocab, schedule=schedule)
        hyps.append(" ".join(vocab.decode(res.tokens)))
        traces.append(res.trace)
    (out / "hypotheses.txt").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    write_traces(traces, out / "traces.jsonl")
    return [trace_records(t, i)[-1] for i, t in enumerate(traces)]


def dump_attention(checkpoint, sentence: str, out_dir, k=None, emission_rate=None):
    """Hard-decode one sentence; writes attention.csv (beta rows plus head) and attention.svg."""
    model, vocab, _ = load_checkpoint(checkpoint)
    if vocab is None:
        raise FormatError(f"{checkpoint} carries no vocabulary")
    src = encode_lines([sentence], vocab)[0]
    res = greedy_simultaneous_decode(model, src, vocab=vocab,
                                     schedule=_schedule_for(model, k, emission_rate))
    src_labels = [vocab.itos[i] for i in src]
    tgt_labels = [vocab.itos[i] for i in res.tokens]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "head", *src_labels])
    for tok, head, row in zip(tgt_labels, res.heads, res.beta):
        w.writerow([tok, head, *(format(float(v), ".10g") for v in row)])
    (out / "attention.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "attention.svg").write_text(heatmap_svg(res.beta, res.heads, src_labels, tgt_labels),
                                       encoding="utf-8")
    return res
