"""Command-line driver: pretrain, adapt, ablate, sweep, report.

Every command reads a JSON run config; flags override config keys, which
override built-in defaults.  Each output directory receives the resolved
config that produced it.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .adaptloop import (BATCH_LOG_FIELDS, VARIANTS, AdaptationConfig, AdaptationDiverged,
                        ablation_markdown, adapt_stream, run_ablation)
from .datastream import (PROTOCOLS, SourceSpec, StreamConfig, build_stream, make_source,
                         random_orders)
from .model import Arch, SourceCheckpoint, init_model, pretrain_source

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 64
    init_seed: int = 0
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64


@dataclass
class StreamSection:
    protocol: str = "standard"
    seed: int = 0
    stages: StreamConfig = field(default_factory=StreamConfig)


@dataclass
class RunConfig:
    source: SourceSpec = field(default_factory=SourceSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamSection = field(default_factory=StreamSection)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs/default"
    report_formats: tuple[str, ...] = ("csv", "json")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        def build(kind, data):
            names = {f.name for f in fields(kind)}
            unknown = set(data) - names
            if unknown:
                raise UsageError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
            return kind(**data)

        stream = dict(d.get("stream", {}))
        section = StreamSection(stream.pop("protocol", "standard"), stream.pop("seed", 0),
                                build(StreamConfig, stream))
        model = build(ModelConfig, d.get("model", {}))
        model.hidden = tuple(model.hidden)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        return cls(build(SourceSpec, d.get("source", {})), model, section,
                   build(AdaptationConfig, d.get("adapt", {})),
                   tuple(d.get("seeds", (0, 1, 2, 3, 4))), d.get("out", "runs/default"),
                   tuple(d.get("report_formats", ("csv", "json"))))

    def to_dict(self) -> dict:
        stream = {"protocol": self.stream.protocol, "seed": self.stream.seed,
                  **asdict(self.stream.stages)}
        stream["kinds"] = list(stream["kinds"])
        model = asdict(self.model)
        model["hidden"] = list(model["hidden"])
        return {"source": asdict(self.source), "model": model, "stream": stream,
                "adapt": self.adapt.to_dict(), "seeds": list(self.seeds), "out": self.out,
                "report_formats": list(self.report_formats)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def arch(self) -> Arch:
        return Arch(self.source.input_dim, self.model.hidden, self.model.feature_dim,
                    self.source.num_classes)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--protocol", choices=PROTOCOLS)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--lambda1", type=float)
    common.add_argument("--lambda2", type=float)
    common.add_argument("--entropy-factor", type=float)
    common.add_argument("--checkpoint", help="source checkpoint JSON (pretrained in memory if omitted)")

    p = _Parser(prog="ccotta", description="Continual test-time adaptation with shift control.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="train the source model and prototypes")
    sub.add_parser("adapt", parents=[common], help="adapt along one protocol stream")
    ab = sub.add_parser("ablate", parents=[common], help="CCS/CDS ablation table over seeds")
    ab.add_argument("--seeds", type=_ints)
    sw = sub.add_parser("sweep", parents=[common], help="grid over lambda1, lambda2, entropy factor")
    sw.add_argument("--lambda1-grid", type=_floats, default=[0.1, 1.0, 10.0])
    sw.add_argument("--lambda2-grid", type=_floats, default=[0.1, 1.0, 10.0])
    sw.add_argument("--factor-grid", type=_floats, default=[0.4])
    rp = sub.add_parser("report", help="summarize a finished run directory")
    rp.add_argument("run_dir")
    return p


def load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = RunConfig.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    adapt = {}
    if args.variant is not None:
        adapt["variant"] = args.variant
    if args.lambda1 is not None:
        adapt["lambda1"] = args.lambda1
    if args.lambda2 is not None:
        adapt["lambda2"] = args.lambda2
    if args.entropy_factor is not None:
        adapt["entropy_factor"] = args.entropy_factor
    if args.seed is not None:
        if args.command == "pretrain":
            cfg.model.init_seed = args.seed
        else:
            adapt["seed"] = args.seed
            cfg.stream.seed = args.seed
    if adapt:
        cfg.adapt = replace(cfg.adapt, **adapt)
    if args.protocol is not None:
        cfg.stream.protocol = args.protocol
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CTTA_THREADS", "1")))
    except ValueError:
        return 1


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def pretrain(cfg: RunConfig) -> SourceCheckpoint:
    x, y = make_source(cfg.source)
    m = cfg.model
    return pretrain_source(init_model(cfg.arch(), m.init_seed), x, y, m.epochs, m.lr,
                           m.batch_size, m.init_seed)


def _checkpoint(cfg: RunConfig, path: str | None) -> SourceCheckpoint:
    if path is None:
        return pretrain(cfg)
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return SourceCheckpoint.load(path)


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ck = pretrain(cfg)
    ck.save(out / "checkpoint.json")
    print(json.dumps(ck.metadata, sort_keys=True))
    return EXIT_OK


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def cmd_adapt(cfg: RunConfig, args) -> int:
    ck = _checkpoint(cfg, args.checkpoint)
    out = _prepare_out(cfg)
    scfg = cfg.stream.stages
    if cfg.stream.protocol == "random":
        streams = random_orders(cfg.stream.seed, scfg)
    else:
        streams = [build_stream(cfg.stream.protocol, cfg.stream.seed, scfg)]
    stage_csv, batch_rows, records_all, stream_docs = [], [], [], []
    for k, stream in enumerate(streams):
        res = adapt_stream(ck, stream, cfg.adapt, cfg.source,
                           keep_features="embedding" in cfg.report_formats)
        if res.stage_features:
            coords, labels = metrics.export_embedding(
                np.vstack([f for f, _ in res.stage_features]),
                np.concatenate([y for _, y in res.stage_features]))
            stages = np.concatenate([np.full(len(y), i) for i, (_, y) in enumerate(res.stage_features)])
            (out / f"embedding_{k}.csv").write_text(metrics.embedding_csv(coords, labels, stages))
        stage_csv.append(metrics.records_csv(res.records, {"sequence": k}))
        for r in res.records:
            records_all.append({"sequence": k, **asdict(r)})
        batch_rows += [[k, *(row[f] for f in BATCH_LOG_FIELDS)] for row in res.batch_log]
        stream_docs.append(stream.to_dict())
    header, *_ = stage_csv[0].splitlines()
    body = [line for chunk in stage_csv for line in chunk.splitlines()[1:]]
    if "csv" in cfg.report_formats:
        (out / "stages.csv").write_text("\n".join([header, *body]) + "\n")
        (out / "batches.csv").write_text(_rows_csv(["sequence", *BATCH_LOG_FIELDS], batch_rows))
    if "json" in cfg.report_formats:
        (out / "stages.json").write_text(json.dumps(records_all, indent=1) + "\n")
    (out / "stream.json").write_text(json.dumps(stream_docs, indent=1) + "\n")
    mean = sum(r["error"] for r in records_all) / max(len(records_all), 1)
    print(f"{cfg.adapt.variant} {cfg.stream.protocol}: {len(records_all)} stages, "
          f"mean error {100 * mean:.2f}%")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    ck = _checkpoint(cfg, args.checkpoint)
    seeds = tuple(args.seeds) if args.seeds else cfg.seeds
    cfg.seeds = seeds
    out = _prepare_out(cfg)
    rows = run_ablation(ck, cfg.source, cfg.stream.stages, cfg.adapt, seeds,
                        cfg.stream.protocol, workers=_workers())
    md = ablation_markdown(rows)
    (out / "ablation.md").write_text(md)
    (out / "ablation.csv").write_text(_rows_csv(
        ["method", "ccs", "cds", "mean_error", "std_error", "seeds"],
        [[r.label, int(r.ccs), int(r.cds), r.mean, r.std, " ".join(map(str, seeds))] for r in rows]))
    print(md, end="")
    return EXIT_OK


def _sweep_job(job):
    ck, cfg, l1, l2, factor = job
    adapt = replace(cfg.adapt, lambda1=l1, lambda2=l2, entropy_factor=factor)
    stream = build_stream(cfg.stream.protocol, cfg.stream.seed, cfg.stream.stages)
    res = adapt_stream(ck, stream, adapt, cfg.source)
    return metrics.mean_error(res.records), res.records[-1].kept_fraction


def cmd_sweep(cfg: RunConfig, args) -> int:
    ck = _checkpoint(cfg, args.checkpoint)
    out = _prepare_out(cfg)
    grid = list(itertools.product(args.lambda1_grid, args.lambda2_grid, args.factor_grid))
    jobs = [(ck, cfg, l1, l2, f) for l1, l2, f in grid]
    if _workers() > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = [[l1, l2, f, cfg.adapt.variant, cfg.stream.seed, err, kept]
            for (l1, l2, f), (err, kept) in zip(grid, results)]
    (out / "sweep.csv").write_text(_rows_csv(
        ["lambda1", "lambda2", "entropy_factor", "variant", "seed", "mean_error",
         "final_kept_fraction"], rows))
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(run_dir: str) -> int:
    path = Path(run_dir) / "stages.json"
    if not path.is_file():
        raise UsageError(f"no stages.json in {run_dir}")
    records = json.loads(path.read_text())
    print("| seq | stage | corruption | severity | error (%) | d_ic | d_id | kept |")
    print("|---|---|---|---|---|---|---|---|")
    for r in records:
        print(f"| {r['sequence']} | {r['stage_index']} | {r['corruption']} | {r['severity']} | "
              f"{100 * r['error']:.2f} | {r['d_ic']:.4g} | {r['d_id']:.4g} | {r['kept_fraction']:.3f} |")
    if records:
        mean = sum(r["error"] for r in records) / len(records)
        print(f"\nmean error: {100 * mean:.2f}%")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "ablate": cmd_ablate,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            return cmd_report(args.run_dir)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdaptationDiverged as exc:
        print(f"run failed: {exc} {json.dumps(exc.record)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
