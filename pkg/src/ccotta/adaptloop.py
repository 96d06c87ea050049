"""Continual test-time adaptation with shift control.

Per batch: the teacher labels the clean batch, unreliable (high-entropy)
samples are set aside for class prototypes, the student sees a perturbed copy,
and one optimizer step minimizes ``sce + lambda1 * cds + lambda2 * ccs``
before the teacher tracks the student by EMA.  Ground-truth labels never enter
this module's adaptation path; :func:`adapt_stream` only joins them to
predictions when building metrics.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .datastream import Batch, DomainStream, SourceSpec, StreamConfig, build_stream, iter_batches
from .model import Adam, SourceCheckpoint, TeacherStudent, ema_update, features, perturb, predict
from .shift import (PrototypeBank, TargetPrototypeEMA, class_relative, class_shifts, domain_shift,
                    pseudo_labels, reliable_mask, target_prototypes)

VARIANTS = ("source_only", "bn_stats", "mt_only", "mt_ccs", "mt_cds", "full")
FROZEN_VARIANTS = ("source_only", "bn_stats")
# (label, uses CCS, uses CDS) in ablation-table order
ABLATION_ROWS = (("mt_only", False, False), ("mt_ccs", True, False),
                 ("mt_cds", False, True), ("full", True, True))


class AdaptationDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class AdaptationConfig:
    lambda1: float = 0.3
    lambda2: float = 1.0
    ema_alpha: float = 0.99
    entropy_factor: float = 0.4
    lr: float = 1e-2
    perturb_strength: float = 0.1
    variant: str = "full"
    seed: int = 0
    cds_reduction: str = "l1"
    cds_epsilon: float | None = None
    prototype_momentum: float = 0.0
    adapt_norm: str = "batch"
    cds_detach_direction: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")

    def effective_lambdas(self) -> tuple[float, float]:
        l1 = 0.0 if self.variant in ("mt_only", "mt_ccs") else self.lambda1
        l2 = 0.0 if self.variant in ("mt_only", "mt_cds") else self.lambda2
        return l1, l2

    @property
    def norm_mode(self) -> str:
        if self.variant == "source_only":
            return "source"
        return "batch" if self.variant == "bn_stats" else self.adapt_norm

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunState:
    pair: TeacherStudent
    optimizer: Adam
    bank: PrototypeBank
    relative: np.ndarray
    config: AdaptationConfig
    batch_counter: int = 0
    smoother: TargetPrototypeEMA | None = None


def init_state(checkpoint: SourceCheckpoint, config: AdaptationConfig) -> RunState:
    bank = PrototypeBank(checkpoint.class_prototypes, checkpoint.domain_prototype)
    smoother = TargetPrototypeEMA(config.prototype_momentum) if config.prototype_momentum > 0 else None
    return RunState(TeacherStudent.from_model(checkpoint.model, config.ema_alpha),
                    Adam(lr=config.lr), bank, class_relative(checkpoint.class_prototypes),
                    config, 0, smoother)


def _student_objective(state: RunState, x: np.ndarray, teacher_probs: np.ndarray, mask, pseudo,
                       params: dict, batch_index: int) -> tuple[losses.LossBreakdown, PrototypeBank]:
    cfg = state.config
    student = state.pair.student
    xs = perturb(x, [cfg.seed, batch_index], cfg.perturb_strength)
    z = features(student, xs, params, norm=cfg.norm_mode)
    q = ad.softmax(predict(student, z, params))
    bank = target_prototypes(z, pseudo, mask, state.bank)
    if state.smoother is not None:
        bank = state.smoother(bank)
    direction = domain_shift(bank, attached=not cfg.cds_detach_direction)
    cds = losses.cds_loss(lambda f: predict(student, f, params), z, direction,
                          cfg.cds_epsilon, cfg.cds_reduction)
    ccs = losses.ccs_loss(class_shifts(bank), state.relative)
    sce = losses.sce_loss(q, teacher_probs)
    l1, l2 = cfg.effective_lambdas()
    return losses.total_loss(sce, cds, ccs, l1, l2), bank


def adapt_batch(state: RunState, inputs: np.ndarray):
    """Adapt on one unlabeled batch.

    Returns ``(predictions, LossBreakdown, diagnostics)``; predictions are the
    teacher's argmax on the clean batch before this batch's update.
    """
    if isinstance(inputs, Batch):
        raise TypeError("adapt_batch takes raw inputs; labels must not reach adaptation")
    x = np.asarray(inputs, dtype=np.float64)
    cfg = state.config
    teacher = state.pair.teacher
    idx = state.batch_counter
    try:
        t_feat = features(teacher, x, norm=cfg.norm_mode).values
        t_probs = ad.softmax(predict(teacher, t_feat)).values
    except ad.NonFiniteError as exc:
        raise AdaptationDiverged(f"teacher produced non-finite values at batch {idx}: {exc}",
                                 {"batch_index": idx, "error": str(exc)}) from exc
    preds = pseudo_labels(t_probs)
    mask = reliable_mask(t_probs, cfg.entropy_factor)
    diag = {"kept_fraction": mask.kept_fraction, "teacher_features": t_feat}
    state.batch_counter += 1
    if cfg.variant in FROZEN_VARIANTS:
        return preds, losses.LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), diag

    student = state.pair.student
    params = student.on_tape(ad.Tape())
    try:
        breakdown, bank = _student_objective(state, x, t_probs, mask, preds, params, idx)
        grads = ad.backward(breakdown.tensor, params.values())
    except ad.NonFiniteError as exc:
        raise AdaptationDiverged(f"non-finite value at batch {idx}: {exc}",
                                 {"batch_index": idx, "error": str(exc)}) from exc
    state.optimizer.step(student.params, {n: grads[t] for n, t in params.items()})
    if not all(np.all(np.isfinite(v)) for v in student.params.values()):
        raise AdaptationDiverged(f"student parameters diverged at batch {idx}",
                                 {"batch_index": idx, "loss": breakdown.total})
    ema_update(state.pair)
    diag["present_classes"] = int(bank.present.sum())
    d_ic, pairs = metrics.inter_class_distance(bank.target_class_values())
    diag["batch_d_ic"], diag["batch_d_ic_pairs"] = d_ic, pairs
    diag["batch_d_id"] = metrics.inter_domain_distance(bank.source_domain, bank.target_domain.values)
    return preds, breakdown, diag


BATCH_LOG_FIELDS = ("batch_index", "stage_index", "corruption", "severity", "sce", "cds", "ccs",
                    "total", "kept_fraction", "error_so_far")


@dataclass
class StreamResult:
    records: list[metrics.MetricsRecord]
    batch_log: list[dict] = field(default_factory=list)
    final_state: RunState | None = None
    # (teacher features, labels) per stage, filled only when requested
    stage_features: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def adapt_stream(checkpoint: SourceCheckpoint, stream: DomainStream, config: AdaptationConfig,
                 spec: SourceSpec, state: RunState | None = None,
                 keep_features: bool = False) -> StreamResult:
    """Run the whole stream without resets; one metrics record per stage."""
    if checkpoint.model.arch.input_dim != spec.input_dim:
        raise ValueError(f"checkpoint expects inputs of width {checkpoint.model.arch.input_dim}, "
                         f"stream produces {spec.input_dim}")
    if checkpoint.model.arch.num_classes != spec.num_classes:
        raise ValueError("checkpoint and source spec disagree on the number of classes")
    state = state or init_state(checkpoint, config)
    num_classes = spec.num_classes
    records, log, kept_feats = [], [], []
    wrong = seen = 0
    buf: dict[str, list] = {"pred": [], "label": [], "feat": [], "kept": []}

    def close_stage(si):
        st = stream.stages[si]
        records.append(metrics.stage_record(
            si, st.corruption, st.severity, np.concatenate(buf["pred"]),
            np.concatenate(buf["label"]), np.vstack(buf["feat"]), state.bank.source_domain,
            num_classes, float(np.mean(buf["kept"]))))
        if keep_features:
            kept_feats.append((np.vstack(buf["feat"]), np.concatenate(buf["label"])))
        for v in buf.values():
            v.clear()

    current = None
    for batch in iter_batches(spec, stream):
        if current is not None and batch.stage_index != current:
            close_stage(current)
        current = batch.stage_index
        preds, br, diag = adapt_batch(state, batch.inputs)
        # labels are joined to predictions only after adaptation has consumed the batch
        wrong += int(np.sum(preds != batch.labels))
        seen += len(preds)
        buf["pred"].append(preds)
        buf["label"].append(batch.labels)
        buf["feat"].append(diag["teacher_features"])
        buf["kept"].append(diag["kept_fraction"])
        st = stream.stages[batch.stage_index]
        log.append({"batch_index": state.batch_counter - 1, "stage_index": batch.stage_index,
                    "corruption": st.corruption, "severity": st.severity, "sce": br.sce,
                    "cds": br.cds, "ccs": br.ccs, "total": br.total,
                    "kept_fraction": diag["kept_fraction"], "error_so_far": wrong / seen})
    if current is not None:
        close_stage(current)
    return StreamResult(records, log, state, kept_feats)


@dataclass
class AblationRow:
    label: str
    variant: str
    ccs: bool
    cds: bool
    errors: list[float]
    final_d_ic: list[float]
    final_d_id: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


def _ablation_job(args):
    checkpoint, spec, stream_cfg, config, protocol = args
    stream = build_stream(protocol, config.seed, stream_cfg)
    res = adapt_stream(checkpoint, stream, config, spec)
    last = res.records[-1]
    return metrics.mean_error(res.records), last.d_ic, last.d_id


def run_ablation(checkpoint: SourceCheckpoint, spec: SourceSpec, stream_cfg: StreamConfig,
                 base: AdaptationConfig, seeds, protocol: str = "standard",
                 workers: int = 1, baselines: bool = True) -> list[AblationRow]:
    """Four-row CCS/CDS ablation plus frozen baselines, one run per seed.

    Runs are independent; with ``workers > 1`` they execute in a process pool
    and results are gathered in submission order, so output does not depend
    on scheduling.
    """
    rows = [(label, label, ccs, cds) for label, ccs, cds in ABLATION_ROWS]
    if baselines:
        rows += [("source_only", "source_only", False, False), ("bn_stats", "bn_stats", False, False)]
    jobs = [(checkpoint, spec, stream_cfg, replace(base, variant=variant, seed=s), protocol)
            for _, variant, _, _ in rows for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    n = len(seeds)
    out = []
    for k, (label, variant, ccs, cds) in enumerate(rows):
        chunk = results[k * n:(k + 1) * n]
        out.append(AblationRow(label, variant, ccs, cds, [c[0] for c in chunk],
                               [c[1] for c in chunk], [c[2] for c in chunk]))
    return out


def ablation_markdown(rows: list[AblationRow]) -> str:
    lines = ["| No. | Method | CCS | CDS | Error (%) mean | Error (%) std |",
             "|---|---|---|---|---|---|"]
    for i, r in enumerate(rows, 1):
        mark = lambda b: "x" if b else ""  # noqa: E731
        lines.append(f"| {i} | {r.label} | {mark(r.ccs)} | {mark(r.cds)} | "
                     f"{100 * r.mean:.2f} | {100 * r.std:.2f} |")
    return "\n".join(lines) + "\n"

