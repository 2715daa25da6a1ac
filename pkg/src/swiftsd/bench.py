"""Benchmark harness: dataset ingestion, streams, metrics and report files."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .config import SwiftConfig
from .errors import DatasetError, DivZero, MalformedRecord
from .model_io import ModelBundle, Tokenizer
from .orchestrator import CallRecord, GenerationRequest, SwiftSession, generate_vanilla
from .sampling import session_rng


def expected_speedup(M: float, alpha: float, c: float) -> float:
    """Expected wall-time speedup from mean generated length, acceptance and cost ratio."""
    if M < 1 or not 0 <= alpha <= 1 or not 0 < c <= 1:
        raise ValueError(f"bad arguments M={M}, alpha={alpha}, c={c}")
    denom = (M - 1) * c + alpha
    if denom == 0:
        raise DivZero("M == 1 and alpha == 0")
    return M * alpha / denom


@dataclass
class MetricsReport:
    n_instances: int
    n_tokens: int
    n_target_forwards: int
    n_draft_steps: int
    n_accepted: int
    n_opt_steps: int
    M: float
    alpha: float
    r: float
    c: float
    expected_speedup: float | None
    wall_time: float
    tokens_per_sec: float
    stage_shares: dict[str, float]
    vanilla_time: float | None = None
    wall_speedup: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_records(records, n_sublayers: int, wall_time: float, n_instances: int, vanilla_time=None) -> MetricsReport:
    records = list(records)
    n_fwd = len(records)
    n_tok = sum(r.emitted for r in records)
    steps = sum(r.spine_len for r in records)
    acc = sum(r.accepted_draft for r in records)
    M = n_tok / n_fwd if n_fwd else 1.0
    alpha = acc / steps if steps else 0.0
    # skip ratio actually drafted with, weighted by draft steps
    r = sum(r_.spine_len * r_.mask.count("1") for r_ in records) / (steps * n_sublayers) if steps else 0.0
    c = 1.0 - r
    try:
        e_spd = expected_speedup(M, alpha, c)
    except DivZero:
        e_spd = None
    t_draft = sum(x.t_draft for x in records)
    t_verify = sum(x.t_verify for x in records)
    t_opt = sum(x.t_optimize for x in records)
    total = wall_time if wall_time > 0 else 1.0
    shares = {"draft": t_draft / total, "verify": t_verify / total, "optimize": t_opt / total}
    shares["other"] = 1.0 - sum(shares.values())
    return MetricsReport(
        n_instances=n_instances,
        n_tokens=n_tok,
        n_target_forwards=n_fwd,
        n_draft_steps=steps,
        n_accepted=acc,
        n_opt_steps=sum(1 for x in records if x.opt_step is not None),
        M=M,
        alpha=alpha,
        r=r,
        c=c,
        expected_speedup=e_spd,
        wall_time=wall_time,
        tokens_per_sec=n_tok / total,
        stage_shares=shares,
        vanilla_time=vanilla_time,
        wall_speedup=None if vanilla_time is None or wall_time <= 0 else vanilla_time / wall_time,
    )


# ---- datasets -------------------------------------------------------------


def render(template: str, prompt: str) -> str:
    return template.replace("{prompt}", prompt)


def ingest_jsonl(path, template: str = "{prompt}", tokenizer: Tokenizer | None = None, config: SwiftConfig | None = None):
    """Read ``{"prompt": ...}`` lines into tokenized requests, in file order.

    Prompts are prefixed with BOS. An optional per-record ``max_new_tokens``
    overrides the config value. EOS stops generation.
    """
    config = config or SwiftConfig()
    tokenizer = tokenizer or Tokenizer.byte_level()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from None
    requests = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            raise MalformedRecord(no, "invalid JSON") from None
        if not isinstance(rec, dict) or not isinstance(rec.get("prompt"), str):
            raise MalformedRecord(no)
        ids = [tokenizer.bos_id] + tokenizer.encode(render(template, rec["prompt"]))
        extra = {"request_id": str(rec.get("id", f"{Path(path).name}:{no}")), "stop_tokens": frozenset({tokenizer.eos_id})}
        if "max_new_tokens" in rec:
            extra["max_new_tokens"] = int(rec["max_new_tokens"])
        requests.append(GenerationRequest.from_config(ids, config, **extra))
    return requests


@dataclass
class Segment:
    path: str
    count: int | None = None
    template: str = "{prompt}"
    name: str | None = None


@dataclass
class StreamSpec:
    segments: list[Segment] = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> StreamSpec:
        segs = raw.get("segments") if isinstance(raw, dict) else None
        if not segs:
            raise DatasetError("stream needs at least one segment")
        out = []
        known = {f.name for f in fields(Segment)}
        for s in segs:
            if not isinstance(s, dict) or "path" not in s or set(s) - known:
                raise DatasetError(f"bad segment entry {s!r}")
            seg = Segment(**s)
            if base_dir is not None and not Path(seg.path).is_absolute():
                seg.path = str(base_dir / seg.path)
            out.append(seg)
        return cls(out)


def load_stream(path) -> StreamSpec:
    try:
        text = Path(path).read_text()
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        raise DatasetError(f"cannot load stream {path}: {exc}") from None
    return StreamSpec.from_dict(raw, Path(path).parent)


# ---- running --------------------------------------------------------------


@dataclass
class BenchmarkResult:
    report: MetricsReport
    segments: list[dict]
    session: SwiftSession
    outputs: list[list[int]]
    vanilla_outputs: list[list[int]] | None

    def to_dict(self) -> dict:
        state = self.session.state
        return {
            "global": self.report.to_dict(),
            "segments": self.segments,
            "events": self.session.export_trace()["events"],
            "final_state": {
                "phase": state.phase.value,
                "skip_ratio": state.skip_ratio,
                "best_mask": list(state.best_mask.bits),
                "best_score": state.best_score,
                "opt_steps": state.step,
                "termination_reason": state.termination_reason,
            },
            "config": self.session.config.to_dict(),
        }


def run_requests(bundle: ModelBundle, groups, config: SwiftConfig, vanilla: bool = True) -> BenchmarkResult:
    """Run ``[(segment_name, [requests...]), ...]`` through one shared session."""
    session = SwiftSession(bundle, config)
    outputs, segments = [], []
    all_requests = []
    t_total = 0.0
    for name, requests in groups:
        rec_start = len(session.trace.records)
        ev_start = len(session.trace.events)
        t0 = time.perf_counter()
        for req in requests:
            outputs.append(session.run(req))
        dt = time.perf_counter() - t0
        t_total += dt
        all_requests.extend(requests)
        seg_records = session.trace.records[rec_start:]
        rep = metrics_from_records(seg_records, bundle.n_sublayers, dt, len(requests))
        segments.append(
            {
                "name": name,
                "report": rep.to_dict(),
                "events": [asdict(e) for e in session.trace.events[ev_start:]],
                "skip_ratio_end": session.state.skip_ratio,
            }
        )

    vanilla_outputs = vanilla_time = None
    if vanilla:
        rng = session_rng(config.seed, "sample")
        t0 = time.perf_counter()
        vanilla_outputs = [generate_vanilla(bundle, req, rng) for req in all_requests]
        vanilla_time = time.perf_counter() - t0

    report = metrics_from_records(session.trace.records, bundle.n_sublayers, t_total, len(all_requests), vanilla_time)
    return BenchmarkResult(report, segments, session, outputs, vanilla_outputs)


def run_benchmark(bundle: ModelBundle, stream: StreamSpec, config: SwiftConfig, vanilla: bool = True) -> BenchmarkResult:
    groups = []
    for i, seg in enumerate(stream.segments):
        reqs = ingest_jsonl(seg.path, seg.template, bundle.tokenizer, config)
        if seg.count is not None:
            reqs = reqs[: seg.count]
        groups.append((seg.name or f"segment{i}:{Path(seg.path).stem}", reqs))
    return run_requests(bundle, groups, config, vanilla)


CSV_FIELDS = [f.name for f in fields(CallRecord)]


def write_report(result: BenchmarkResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))


def write_csv(result: BenchmarkResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for rec in result.session.trace.records:
            w.writerow(asdict(rec))
