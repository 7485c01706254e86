"""Teacher-student training harness for measuring quantized-training recipes.

A small ReLU MLP regresses onto a frozen teacher of the same shape.  Inputs
are Gaussian with heavy-tailed per-sample and per-feature scales (lognormal),
so every GEMM contracts blocks that mix very different magnitudes.  Master
weights and optimizer state stay in binary64; validation runs the network at
its configured precision (quantized layers stay quantized, exempt layers run
wide), which is the loss of the model you would actually deploy.

Runs are bit-deterministic: data, init, and rounding streams are all keyed
by (seed, purpose, step), so rerunning a config reproduces the record
byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blockquant import FORMATS, MXFP4, NVFP4, rows1d, square2d
from .codecs import QuantizationError
from .hadamard import HadamardSpec
from .linear import (
    GemmKind,
    LinearLayerState,
    PrecisionPolicy,
    backward,
    forward,
)
from .rng import normals, stream_key


@dataclass(frozen=True)
class LRSchedule:
    """Constant or warmup-stable-decay; decay is exponential down to
    base * floor_ratio across the final decay_fraction of steps."""

    kind: str = "wsd"
    base: float = 0.003
    warmup_fraction: float = 0.0
    decay_fraction: float = 0.6
    floor_ratio: float = 0.05

    def __post_init__(self):
        if self.kind not in ("constant", "wsd"):
            raise ValueError("schedule kind must be constant or wsd")
        if not (0.0 <= self.decay_fraction <= 1.0):
            raise ValueError("decay_fraction must lie in [0, 1]")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.base <= 0 or self.floor_ratio <= 0:
            raise ValueError("base and floor_ratio must be positive")

    def lr_at(self, step: int, total: int) -> float:
        if self.kind == "constant":
            return self.base
        warm = int(self.warmup_fraction * total)
        if warm and step < warm:
            return self.base * (step + 1) / warm
        decay_start = total - int(self.decay_fraction * total)
        if step < decay_start or total <= decay_start:
            return self.base
        u = (step - decay_start + 1) / (total - decay_start)
        return self.base * self.floor_ratio ** u


@dataclass(frozen=True)
class TaskSpec:
    """Teacher-student regression with lognormal per-sample input scales.

    tail controls the per-sample magnitude spread (0 disables it); the GEMMs
    that contract the batch then mix very different sample scales inside one
    scale block.  With init_near_teacher the student starts at the teacher
    plus init_spread times a fresh init, which puts the run in a fine-tuning
    regime whose loss floor is set by arithmetic precision rather than by
    optimization difficulty.
    """

    kind: str = "teacher_student"
    tail: float = 1.0          # sigma of the per-sample lognormal magnitude
    feature_tail: float = 1.0  # sigma of fixed per-input-feature scales
    noise: float = 0.0         # additive label noise
    loss_weighting: str = "per_sample"  # weight each sample by 1/scale**2
    init_near_teacher: bool = True
    init_spread: float = 0.3

    def __post_init__(self):
        if self.kind != "teacher_student":
            raise ValueError("unknown task kind")
        if self.tail < 0 or self.noise < 0 or self.feature_tail < 0:
            raise ValueError("tail, feature_tail, noise must be non-negative")
        if self.loss_weighting not in ("uniform", "per_sample"):
            raise ValueError("loss_weighting must be uniform or per_sample")
        if self.init_spread < 0:
            raise ValueError("init_spread must be non-negative")


@dataclass(frozen=True)
class ExemptionRule:
    """Which layers keep wide precision (the usual choice: the last ones)."""

    fraction: float = 0.15
    placement: str = "last"

    def __post_init__(self):
        if not (0.0 <= self.fraction <= 1.0):
            raise ValueError("fraction must lie in [0, 1]")
        if self.placement not in ("last", "first", "none"):
            raise ValueError("placement must be last, first, or none")

    def exempt_indices(self, n_layers: int) -> frozenset:
        if self.placement == "none" or self.fraction == 0.0:
            return frozenset()
        count = min(n_layers, math.ceil(self.fraction * n_layers))
        if self.placement == "last":
            return frozenset(range(n_layers - count, n_layers))
        return frozenset(range(count))


@dataclass(frozen=True)
class SwitchSpec:
    """Drop one or both training directions back to wide precision at a
    given step (a fraction of steps when 0 < step < 1)."""

    step: float
    scope: str = "forward"

    def __post_init__(self):
        if self.scope not in ("forward", "backward", "both"):
            raise ValueError("scope must be forward, backward, or both")
        if self.step < 0:
            raise ValueError("switch step must be non-negative")

    def resolve_step(self, total: int) -> int:
        if 0 < self.step < 1:
            return int(self.step * total)
        return int(self.step)


@dataclass(frozen=True)
class ExperimentConfig:
    widths: tuple = (32, 64, 64, 64, 16)
    steps: int = 1500
    batch_size: int = 64
    seed: int = 0
    lr: LRSchedule = LRSchedule()
    task: TaskSpec = TaskSpec()
    policy: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    exempt: ExemptionRule = ExemptionRule()
    switch: SwitchSpec | None = None
    val_every: int = 250
    val_batch: int = 512
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError("widths needs at least input and output sizes")
        if self.steps < 1 or self.batch_size < 1 or self.val_batch < 1:
            raise ValueError("steps and batch sizes must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.switch is not None and self.switch.resolve_step(self.steps) > self.steps:
            raise ValueError("switch step exceeds the run length")


def reference_config(seed: int = 0) -> ExperimentConfig:
    """The calibrated base configuration used by the recipe comparisons.

    Calibrated so the interesting effects are measurable at desk scale:
    a fine-tuning regime (init near the teacher, low peak lr, long decay)
    whose final loss is set by arithmetic precision rather than by
    optimization, heavy-tailed per-sample and per-feature input scales so
    block quantizers face mixed-magnitude operands, and validation through
    the network at its configured precision so exempting or un-exempting
    layers shows up in the number being compared."""
    return ExperimentConfig(seed=seed)


# --- config (de)serialization ------------------------------------------------

def _layout_to_dict(layout) -> dict:
    return {"kind": layout.kind, "block_len": layout.block_len}


def _layout_from_dict(d):
    from .blockquant import cols1d, rows1d as _rows
    kind, n = d["kind"], int(d["block_len"])
    if kind == "rows":
        return _rows(n)
    if kind == "cols":
        return cols1d(n)
    return square2d()


def policy_to_dict(p: PrecisionPolicy) -> dict:
    return {
        "quantize": p.quantize,
        "fmt": p.fmt.name,
        "weight_layout": _layout_to_dict(p.weight_layout),
        "act_grad_layout": _layout_to_dict(p.act_grad_layout),
        "rht_gemms": sorted(k.value for k in p.rht_gemms),
        "rht_spec": {"d": p.rht_spec.d, "sign_seed": p.rht_spec.sign_seed,
                     "randomized": p.rht_spec.randomized},
        "sr_roles": sorted(p.sr_roles),
        "sign_strategy": p.sign_strategy,
        "quantize_forward": p.quantize_forward,
        "quantize_backward": p.quantize_backward,
        "seed": p.seed,
        "collect_stats": p.collect_stats,
    }


def policy_from_dict(d: dict) -> PrecisionPolicy:
    rs = d.get("rht_spec", {})
    return PrecisionPolicy(
        quantize=d.get("quantize", True),
        fmt=FORMATS[d.get("fmt", "nvfp4")],
        weight_layout=_layout_from_dict(d.get("weight_layout",
                                              {"kind": "square", "block_len": 16})),
        act_grad_layout=_layout_from_dict(d.get("act_grad_layout",
                                                {"kind": "rows", "block_len": 16})),
        rht_gemms=frozenset(GemmKind(v) for v in d.get("rht_gemms", ["wgrad"])),
        rht_spec=HadamardSpec(d=rs.get("d", 16), sign_seed=rs.get("sign_seed", 0),
                              randomized=rs.get("randomized", True)),
        sr_roles=frozenset(d.get("sr_roles", ["gradients"])),
        sign_strategy=d.get("sign_strategy", "fixed"),
        quantize_forward=d.get("quantize_forward", True),
        quantize_backward=d.get("quantize_backward", True),
        seed=d.get("seed", 0),
        collect_stats=d.get("collect_stats", True),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "widths": list(cfg.widths),
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "lr": dataclasses.asdict(cfg.lr),
        "task": dataclasses.asdict(cfg.task),
        "policy": policy_to_dict(cfg.policy),
        "exempt": dataclasses.asdict(cfg.exempt),
        "switch": None if cfg.switch is None else dataclasses.asdict(cfg.switch),
        "val_every": cfg.val_every,
        "val_batch": cfg.val_batch,
        "adam_beta1": cfg.adam_beta1,
        "adam_beta2": cfg.adam_beta2,
        "adam_eps": cfg.adam_eps,
        "weight_decay": cfg.weight_decay,
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    return ExperimentConfig(
        widths=tuple(d.get("widths", (32, 64, 64, 64, 16))),
        steps=d.get("steps", 1500),
        batch_size=d.get("batch_size", 64),
        seed=d.get("seed", 0),
        lr=LRSchedule(**d.get("lr", {})),
        task=TaskSpec(**d.get("task", {})),
        policy=policy_from_dict(d.get("policy", {})),
        exempt=ExemptionRule(**d.get("exempt", {})),
        switch=None if d.get("switch") is None else SwitchSpec(**d["switch"]),
        val_every=d.get("val_every", 250),
        val_batch=d.get("val_batch", 512),
        adam_beta1=d.get("adam_beta1", 0.9),
        adam_beta2=d.get("adam_beta2", 0.95),
        adam_eps=d.get("adam_eps", 1e-8),
        weight_decay=d.get("weight_decay", 0.0),
    )


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- model -------------------------------------------------------------------

def _init_layers(widths, seed, who: str) -> list[LinearLayerState]:
    layers = []
    for i, (m, n) in enumerate(zip(widths[:-1], widths[1:])):
        w = normals(stream_key("init", who, seed, i), (n, m)) / math.sqrt(m)
        layers.append(LinearLayerState(w, layer_index=i))
    return layers


def _wide_forward(layers, x):
    a = x
    for i, layer in enumerate(layers):
        z = a @ layer.weights.T
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a


def _policy_forward(layers, x, policies, step):
    """Evaluation pass through the network as configured: quantized layers
    stay quantized (their deployed behavior), exempt layers run wide."""
    a = x
    for i, layer in enumerate(layers):
        z, _ = forward(layer, a, policies[i], step=step)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a


def _batch(cfg: ExperimentConfig, teacher, purpose: str, index: int, size: int):
    """One batch: inputs, teacher targets, and per-sample loss weights.

    Per-sample scales make the batch dimension heavy-tailed; per-feature
    scales (fixed for the whole run) give the input columns persistent
    magnitude structure.  With per_sample weighting the loss divides each
    sample by its squared scale, so every sample matters equally even
    though the operand magnitudes span decades.
    """
    task = cfg.task
    kx = stream_key("data", purpose, cfg.seed, index)
    x = normals(kx, (size, cfg.widths[0]))
    weights = np.ones((size, 1))
    if task.feature_tail > 0:
        logf = normals(stream_key("features", cfg.seed), (1, cfg.widths[0]))
        x = x * np.exp(task.feature_tail * logf - task.feature_tail ** 2 / 2)
    if task.tail > 0:
        logs = normals(stream_key("scale", purpose, cfg.seed, index), (size, 1))
        scale = np.exp(task.tail * logs - task.tail ** 2 / 2)
        x = x * scale
        if task.loss_weighting == "per_sample":
            weights = 1.0 / scale ** 2
    t = _wide_forward(teacher, x)
    if task.noise > 0:
        t = t + task.noise * normals(
            stream_key("noise", purpose, cfg.seed, index), t.shape)
    return x, t, weights


@dataclass
class RunRecord:
    """Everything one run produced, in a canonically serializable form."""

    config_digest: str
    seed: int
    final_loss: float
    train_losses: list
    val_curve: list          # [step, wide-precision val loss] pairs
    diverged_at: int | None
    switch_step: int | None
    trace_summary: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))


def _layer_policies(cfg: ExperimentConfig) -> list[PrecisionPolicy]:
    n = len(cfg.widths) - 1
    exempt = cfg.exempt.exempt_indices(n)
    base = replace(cfg.policy, seed=cfg.seed)
    return [replace(base, quantize=False) if i in exempt else base
            for i in range(n)]


def _apply_switch(policies, cfg, step):
    if cfg.switch is None or step < cfg.switch.resolve_step(cfg.steps):
        return policies
    scope = cfg.switch.scope
    fwd = scope in ("forward", "both")
    bwd = scope in ("backward", "both")
    return [replace(p, quantize_forward=p.quantize_forward and not fwd,
                    quantize_backward=p.quantize_backward and not bwd)
            for p in policies]


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Train the student and report wide-precision validation losses.

    Divergence (non-finite or exploding loss, or a non-finite tensor
    reaching a quantizer) stops the run and is recorded, never raised.
    """
    teacher = _init_layers(cfg.widths, cfg.seed, "teacher")
    student = _init_layers(cfg.widths, cfg.seed + 1, "student")
    if cfg.task.init_near_teacher:
        for s_layer, t_layer in zip(student, teacher):
            s_layer.weights = (t_layer.weights
                               + cfg.task.init_spread * s_layer.weights)
    n_layers = len(student)
    policies = _layer_policies(cfg)
    switch_step = (None if cfg.switch is None
                   else cfg.switch.resolve_step(cfg.steps))

    xv, tv, wv = _batch(cfg, teacher, "val", 0, cfg.val_batch)

    adam_m = [np.zeros_like(l.weights) for l in student]
    adam_v = [np.zeros_like(l.weights) for l in student]
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps

    train_losses: list[float] = []
    val_curve: list[list] = []
    diverged_at: int | None = None
    agg = {k.value: {"quant_error_sum": 0.0, "n": 0, "saturated": 0,
                     "underflow_to_zero": 0} for k in GemmKind}
    inconsistent_dgrads = 0

    def validate(step):
        live = _apply_switch(policies, cfg, step)
        yv = _policy_forward(student, xv, live, step)
        loss = float(np.mean(wv * (yv - tv) ** 2))
        val_curve.append([step, loss])
        return loss

    for step in range(cfg.steps):
        live = _apply_switch(policies, cfg, step)
        x, t, wts = _batch(cfg, teacher, "train", step, cfg.batch_size)
        try:
            ctxs = []
            zs = []
            a = x
            for i, layer in enumerate(student):
                z, ctx = forward(layer, a, live[i], step=step)
                ctxs.append(ctx)
                zs.append(z)
                a = np.maximum(z, 0.0) if i < n_layers - 1 else z
            y = a
            loss = float(np.mean(wts * (y - t) ** 2))
            train_losses.append(loss)
            if not math.isfinite(loss) or loss > 1e30:
                diverged_at = step
                break
            g = 2.0 * wts * (y - t) / y.size
            grads = [None] * n_layers
            for i in range(n_layers - 1, -1, -1):
                dx, dw, traces = backward(ctxs[i], g)
                grads[i] = dw
                for tr in traces:
                    slot = agg[tr.kind.value]
                    slot["quant_error_sum"] += sum(tr.quant_error.values())
                    slot["n"] += len(tr.quant_error)
                    slot["saturated"] += tr.saturated
                    slot["underflow_to_zero"] += tr.underflow_to_zero
                    if tr.kind == GemmKind.DGRAD and tr.consistent_weights is False:
                        inconsistent_dgrads += 1
                if ctxs[i].trace is not None:
                    slot = agg[GemmKind.FPROP.value]
                    slot["quant_error_sum"] += sum(ctxs[i].trace.quant_error.values())
                    slot["n"] += len(ctxs[i].trace.quant_error)
                    slot["saturated"] += ctxs[i].trace.saturated
                    slot["underflow_to_zero"] += ctxs[i].trace.underflow_to_zero
                if i:
                    g = dx * (zs[i - 1] > 0)
            if any(not np.isfinite(gr).all() for gr in grads):
                diverged_at = step
                break
        except QuantizationError:
            diverged_at = step
            break
        lr = cfg.lr.lr_at(step, cfg.steps)
        tpow = step + 1
        for i, layer in enumerate(student):
            adam_m[i] = b1 * adam_m[i] + (1 - b1) * grads[i]
            adam_v[i] = b2 * adam_v[i] + (1 - b2) * grads[i] ** 2
            mhat = adam_m[i] / (1 - b1 ** tpow)
            vhat = adam_v[i] / (1 - b2 ** tpow)
            layer.weights = layer.weights - lr * (
                mhat / (np.sqrt(vhat) + eps)
                + cfg.weight_decay * layer.weights)
        if (step + 1) % cfg.val_every == 0 and step + 1 < cfg.steps:
            validate(step + 1)

    if diverged_at is None:
        final = validate(cfg.steps)
    else:
        final = float("inf")

    summary = {}
    for kind, slot in agg.items():
        if slot["n"]:
            summary[kind] = {
                "mean_quant_error": slot["quant_error_sum"] / slot["n"],
                "saturated": slot["saturated"],
                "underflow_to_zero": slot["underflow_to_zero"],
            }
    summary["inconsistent_dgrads"] = inconsistent_dgrads

    return RunRecord(
        config_digest=config_digest(cfg),
        seed=cfg.seed,
        final_loss=final,
        train_losses=train_losses,
        val_curve=val_curve,
        diverged_at=diverged_at,
        switch_step=switch_step,
        trace_summary=summary,
    )


def relative_loss_difference(baseline: float, experiment: float) -> float:
    """(baseline - experiment) / baseline: positive when the experiment
    reaches a lower loss than the baseline."""
    if baseline == 0:
        return 0.0
    return (baseline - experiment) / baseline


# --- ablation suite ----------------------------------------------------------

def _v_wide(cfg):
    return replace(cfg, policy=replace(cfg.policy, quantize=False))


def _v_no_sr(cfg):
    return replace(cfg, policy=replace(cfg.policy, sr_roles=frozenset()))


def _v_no_rht(cfg):
    return replace(cfg, policy=replace(cfg.policy, rht_gemms=frozenset()))


def _v_no_2d(cfg):
    return replace(cfg, policy=replace(
        cfg.policy, weight_layout=rows1d(cfg.policy.fmt.block_len)))


def _v_no_exempt(cfg):
    return replace(cfg, exempt=ExemptionRule(fraction=0.0, placement="none"))


def _v_mxfp4(cfg):
    return replace(cfg, policy=replace(
        cfg.policy, fmt=MXFP4, weight_layout=rows1d(32),
        act_grad_layout=rows1d(32),
        rht_spec=replace(cfg.policy.rht_spec, d=32)))


def _v_rht_d(d):
    def v(cfg):
        return replace(cfg, policy=replace(
            cfg.policy, rht_spec=replace(cfg.policy.rht_spec, d=d)))
    return v


def _v_sign(strategy):
    def v(cfg):
        return replace(cfg, policy=replace(cfg.policy, sign_strategy=strategy))
    return v


def _v_switch_fwd(cfg):
    return replace(cfg, switch=SwitchSpec(step=0.8, scope="forward"))


def _v_stripped(cfg):
    """Every recipe component removed at once: all layers quantized,
    nearest-even everywhere, no outlier spreading, 1D weight scales."""
    return _v_no_exempt(_v_no_2d(_v_no_rht(_v_no_sr(cfg))))


VARIANTS = {
    "wide": _v_wide,
    "no_sr": _v_no_sr,
    "no_rht": _v_no_rht,
    "no_2d": _v_no_2d,
    "no_exempt": _v_no_exempt,
    "stripped": _v_stripped,
    "mxfp4": _v_mxfp4,
    "rht_d4": _v_rht_d(4),
    "rht_d16": _v_rht_d(16),
    "rht_d128": _v_rht_d(128),
    "sign_none": _v_sign("none"),
    "sign_fixed": _v_sign("fixed"),
    "sign_per_instance": _v_sign("per_instance"),
    "switch_fwd_80": _v_switch_fwd,
}


@dataclass
class SuiteRow:
    name: str
    final_losses: list
    mean_final_loss: float
    rel_diff_vs_base: float   # positive: variant better than the base run
    diverged: int
    records: list


def run_ablation_suite(base: ExperimentConfig, variant_names=None,
                       seeds=(0,)) -> list[SuiteRow]:
    """Run the base config and each named variant over the seeds.

    Every variant reuses the base config with one axis changed; the first
    row is the base itself (rel diff 0 by construction).  Divergence shows
    up as an infinite mean loss, not an exception.
    """
    if variant_names is None:
        variant_names = ["no_sr", "no_rht", "no_2d", "mxfp4"]
    unknown = [n for n in variant_names if n not in VARIANTS]
    if unknown:
        raise KeyError(f"unknown ablation axes: {unknown}")

    def run_all(cfg):
        return [run_experiment(replace(cfg, seed=s)) for s in seeds]

    rows = []
    base_records = run_all(base)
    base_mean = float(np.mean([r.final_loss for r in base_records]))
    rows.append(SuiteRow("base", [r.final_loss for r in base_records],
                         base_mean, 0.0,
                         sum(r.diverged_at is not None for r in base_records),
                         base_records))
    for name in variant_names:
        recs = run_all(VARIANTS[name](base))
        losses = [r.final_loss for r in recs]
        mean = float(np.mean(losses))
        rows.append(SuiteRow(name, losses, mean,
                             relative_loss_difference(base_mean, mean),
                             sum(r.diverged_at is not None for r in recs),
                             recs))
    return rows


def paired_wins(records_a, records_b) -> int:
    """How many seed-paired comparisons records_a wins (lower final loss)."""
    return sum(ra.final_loss < rb.final_loss
               for ra, rb in zip(records_a, records_b, strict=True))


def format_suite_table(rows: list[SuiteRow]) -> str:
    header = ["variant", "mean_final_loss", "rel_diff_vs_base", "diverged"]
    table = [header]
    for r in rows:
        table.append([r.name, f"{r.mean_final_loss:.6g}",
                      f"{r.rel_diff_vs_base:+.4f}", str(r.diverged)])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
