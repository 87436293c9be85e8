"""Joint training loop: detection plus the three auxiliary objectives.

Per step, one source batch and one target batch flow through the shared
backbone. The supervised detection loss, the multi-label presence loss,
the focal domain-adversarial loss (via gradient reversal scaled by the
adversary weight), and the prediction-consistency loss are combined into
one backward pass followed by an SGD update. Every ablation variant is a
configuration: masked terms are skipped entirely, so they contribute
neither gradients nor log values.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .adversary import condition, discriminator_accuracy, focal_adversarial_loss, gradient_reversal
from .backbone import batch_to_tensor
from .checkpoint import save_checkpoint
from .consistency import consistency_loss
from .data import AnnotatedImage, Dataset, paired_batches
from .errors import ConfigurationError, NumericError, TrainingDiverged
from .model import AdaptiveDetector, ModelConfig
from .multilabel import multihot_from_boxes, multilabel_loss

VARIANTS = ("full", "w/o-PR", "uadv", "uadv-w/o-PR", "uadv-w/o-MP-PR", "w/o-adv")
CONDITIONING_CHOICES = ("p", "p_plus_q")
DIVERGENCE_BOUND = 1e6

METRIC_COLUMNS = ("step", "det", "multi", "adv_s", "adv_t", "kl", "total", "disc_acc")


@dataclass
class TrainConfig:
    adv_weight: float = 0.5  # weight on the combined (source+target)/2 adversarial term
    multi_weight: float = 0.01
    kl_weight: float = 0.1
    focal_gamma: float = 5.0
    lr: float = 0.01
    lr_decay_factor: float = 0.1  # multiplier applied late in training; 1.0 = constant rate
    lr_decay_at: float = 0.8  # fraction of epochs after which the decay applies
    disc_lr_scale: float = 1.0  # relative rate for the discriminator side (reducer + classifier)
    disc_weight_decay: float = 0.0005  # decay for the discriminator side; keeps the minimax alive
    multilabel_lr_scale: float = 50.0  # compensates the small multi_weight so the head trains at desk scale
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 25
    batch_size: int = 8
    seed: int = 0
    variant: str = "full"
    conditioning: str = "p"
    detach_condition: bool = True
    append_gt_rois: bool = True
    eval_every: int = 0  # epochs between target-mAP evaluations; 0 = final only
    checkpoint_every: int = 1  # epochs between saved checkpoints; 0 = final only
    model: ModelConfig = field(default_factory=lambda: ModelConfig(num_classes=0))

    def __post_init__(self):
        for name in ("adv_weight", "multi_weight", "kl_weight", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.conditioning not in CONDITIONING_CHOICES:
            raise ConfigurationError(
                f"conditioning must be one of {CONDITIONING_CHOICES}, got {self.conditioning!r}"
            )


@dataclass
class VariantFlags:
    """Which loss terms participate, after variant masking and zero-weight pruning."""

    adv: bool
    multi: bool
    kl: bool
    conditioning: str  # "p" | "p_plus_q" | "unconditional"
    multilabel_in_graph: bool


def resolve_variant(config: TrainConfig) -> VariantFlags:
    variant = config.variant
    adv = variant != "w/o-adv" and config.adv_weight > 0
    kl = variant not in ("w/o-PR", "uadv-w/o-PR", "uadv-w/o-MP-PR") and config.kl_weight > 0
    multi = variant != "uadv-w/o-MP-PR" and config.multi_weight > 0
    conditioning = "unconditional" if variant.startswith("uadv") else config.conditioning
    # the multi-label head leaves the graph entirely when nothing consumes p
    need_p = multi or kl or (adv and conditioning != "unconditional")
    return VariantFlags(
        adv=adv, multi=multi, kl=kl, conditioning=conditioning, multilabel_in_graph=need_p
    )


@dataclass
class LossBundle:
    det: float
    multi: float
    adv_s: float
    adv_t: float
    kl: float
    total: float

    @property
    def adv(self) -> float:
        return 0.5 * (self.adv_s + self.adv_t)


def total_loss(det, adv, multi, kl, config: TrainConfig):
    """Weighted sum of the loss components (detection + weighted auxiliaries).

    Works on tensors or floats. The adversarial component is the combined
    (source + target)/2 value. Raises NumericError naming the first
    non-finite component.
    """
    flags = resolve_variant(config)
    components = {"det": det, "adv": adv, "multi": multi, "kl": kl}
    for name, value in components.items():
        v = float(value) if not isinstance(value, torch.Tensor) else float(value.detach())
        if not math.isfinite(v):
            raise NumericError(f"loss component {name!r} is not finite: {v}")
    total = det
    if flags.adv:
        total = total + config.adv_weight * adv
    if flags.multi:
        total = total + config.multi_weight * multi
    if flags.kl:
        total = total + config.kl_weight * kl
    return total


def build_model(config: TrainConfig, num_classes: int) -> AdaptiveDetector:
    flags = resolve_variant(config)
    model_cfg = config.model
    if model_cfg.num_classes == 0:
        model_cfg = replace(model_cfg, num_classes=num_classes)
    elif model_cfg.num_classes != num_classes:
        raise ConfigurationError(
            f"model config has {model_cfg.num_classes} classes, dataset has {num_classes}"
        )
    return AdaptiveDetector(model_cfg, conditioning=flags.conditioning, seed=config.seed)


def _gt_tensors(records: list[AnnotatedImage], dtype: torch.dtype):
    boxes = [torch.as_tensor(r.boxes, dtype=dtype).reshape(-1, 4) for r in records]
    classes = [torch.as_tensor(r.class_ids, dtype=torch.int64) for r in records]
    return boxes, classes


def _condition_batch(
    p: torch.Tensor | None,
    q_vectors: list[torch.Tensor | None] | None,
    flags: VariantFlags,
    detach: bool,
) -> torch.Tensor | None:
    """Assemble the discriminator conditioning vector per image."""
    if flags.conditioning == "unconditional":
        return None
    if flags.conditioning == "p":
        cond = p
    else:  # p_plus_q; images lacking q fall back to softmax(p)
        rows = []
        for i in range(p.shape[0]):
            q = q_vectors[i] if q_vectors is not None else None
            rows.append(p[i] + q if q is not None else p[i])
        cond = torch.softmax(torch.stack(rows), dim=1)
    return cond.detach() if detach else cond


def train_step(
    model: AdaptiveDetector,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    flags: VariantFlags,
    source_records: list[AnnotatedImage],
    target_records: list,
) -> tuple[LossBundle, float]:
    """One paired-batch update. Returns the logged bundle and discriminator accuracy."""
    dtype = next(model.parameters()).dtype
    needs_target = flags.adv or flags.kl
    need_q_source = flags.kl or flags.conditioning == "p_plus_q"
    need_q_target = needs_target and (flags.kl or flags.conditioning == "p_plus_q")

    src_images = batch_to_tensor([r.image for r in source_records], dtype)
    gt_boxes, gt_classes = _gt_tensors(source_records, dtype)

    feats_s = model.features(src_images)
    det_out = model.detector_forward(
        feats_s, gt_boxes=gt_boxes, gt_classes=gt_classes, append_gt=config.append_gt_rois
    )
    det = (
        det_out.losses["rpn_cls"]
        + det_out.losses["rpn_reg"]
        + det_out.losses["roi_cls"]
        + det_out.losses["roi_reg"]
    )

    p_s = model.multilabel(feats_s) if flags.multilabel_in_graph else None

    multi = None
    if flags.multi:
        y = torch.as_tensor(
            np.stack([multihot_from_boxes(r.class_ids, model.config.num_classes) for r in source_records]),
            dtype=dtype,
        )
        multi = multilabel_loss(p_s, y)

    feats_t = None
    p_t = None
    det_out_t = None
    if needs_target:
        tgt_images = batch_to_tensor([r.image for r in target_records], dtype)
        feats_t = model.features(tgt_images)
        if flags.multilabel_in_graph:
            p_t = model.multilabel(feats_t)
        if need_q_target:
            det_out_t = model.detector_forward(feats_t, gt_boxes=None)

    adv_s = adv_t = None
    disc_acc = float("nan")
    if flags.adv:
        cond_s = _condition_batch(
            p_s, det_out.q_vectors if need_q_source else None, flags, config.detach_condition
        )
        cond_t = _condition_batch(
            p_t, det_out_t.q_vectors if det_out_t is not None else None, flags, config.detach_condition
        )
        g_s = model.reducer(gradient_reversal(feats_s, config.adv_weight))
        g_t = model.reducer(gradient_reversal(feats_t, config.adv_weight))
        d_s = model.discriminator(condition(g_s, cond_s))
        d_t = model.discriminator(condition(g_t, cond_t))
        adv_s, adv_t = focal_adversarial_loss(d_s, d_t, config.focal_gamma)
        disc_acc = discriminator_accuracy(d_s.detach(), d_t.detach())

    kl = None
    if flags.kl:
        kl = consistency_loss(p_s, det_out.q_vectors, p_t, det_out_t.q_vectors)

    # backward objective: the adversarial term enters unweighted because the
    # reversal layer already carries the adversary weight on the backbone path,
    # while the discriminator itself always trains at unit rate
    backward = det
    if flags.adv:
        backward = backward + 0.5 * (adv_s + adv_t)
    if flags.multi:
        backward = backward + config.multi_weight * multi
    if flags.kl:
        backward = backward + config.kl_weight * kl

    optimizer.zero_grad(set_to_none=True)
    backward.backward()
    optimizer.step()

    det_v = float(det.detach())
    multi_v = float(multi.detach()) if multi is not None else 0.0
    adv_s_v = float(adv_s.detach()) if adv_s is not None else 0.0
    adv_t_v = float(adv_t.detach()) if adv_t is not None else 0.0
    kl_v = float(kl.detach()) if kl is not None else 0.0
    total_v = float(
        total_loss(det_v, 0.5 * (adv_s_v + adv_t_v), multi_v, kl_v, config)
    )
    bundle = LossBundle(det=det_v, multi=multi_v, adv_s=adv_s_v, adv_t=adv_t_v, kl=kl_v, total=total_v)
    return bundle, disc_acc


@dataclass
class TrainResult:
    model: AdaptiveDetector
    metrics: list[dict]
    eval_history: list[dict]
    out_dir: Path | None
    best_target_map: float | None
    final_checkpoint: Path | None
    best_checkpoint: Path | None


def write_metrics_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
    return path


def config_to_dict(config: TrainConfig) -> dict:
    payload = asdict(config)
    payload["model"] = asdict(config.model)
    return payload


def config_from_dict(payload: dict) -> TrainConfig:
    """Strict construction: unknown keys rejected, values type-coerced."""
    payload = dict(payload)
    model_payload = payload.pop("model", {})
    known = {f.name: f for f in fields(TrainConfig) if f.name != "model"}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    defaults = TrainConfig()
    for name, value in payload.items():
        coerced[name] = _coerce_like(getattr(defaults, name), value, name)
    model_known = {f.name for f in fields(ModelConfig)}
    unknown_model = set(model_payload) - model_known
    if unknown_model:
        raise ConfigurationError(f"unknown model config keys: {sorted(unknown_model)}")
    model_defaults = ModelConfig(num_classes=0)
    model_coerced = {
        name: _coerce_like(getattr(model_defaults, name), value, f"model.{name}")
        for name, value in model_payload.items()
    }
    coerced["model"] = replace(model_defaults, **model_coerced)
    return TrainConfig(**coerced)


def _coerce_like(default, value, name: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigurationError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            if isinstance(value, float) and value != int(value):
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{name}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{name}: expected a number, got {value!r}") from None
    if isinstance(default, tuple):
        if isinstance(value, str):
            parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
            value = [float(p) if "." in p else int(p) for p in parts]
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{name}: expected a sequence, got {value!r}")
        elem = default[0] if default else 0
        return tuple(type(elem)(v) for v in value) if default else tuple(value)
    if isinstance(default, str):
        return str(value)
    return value


def train(
    config: TrainConfig,
    source: Dataset,
    target: Dataset,
    out_dir: str | Path | None = None,
    eval_target: Dataset | None = None,
) -> TrainResult:
    """Run the full paired-batch training loop. Deterministic given config.seed."""
    if not source.annotated:
        raise ConfigurationError("source dataset must be annotated")
    K = source.manifest.K
    torch.manual_seed(config.seed)
    model = build_model(config, K)
    model.train()
    flags = resolve_variant(config)
    disc_params = [
        p for n, p in model.named_parameters() if n.startswith(("reducer", "discriminator"))
    ]
    head_params = [p for n, p in model.named_parameters() if n.startswith("multilabel")]
    main_params = [
        p
        for n, p in model.named_parameters()
        if not n.startswith(("reducer", "discriminator", "multilabel"))
    ]
    optimizer = torch.optim.SGD(
        [
            {"params": main_params, "lr": config.lr, "weight_decay": config.weight_decay},
            {
                "params": head_params,
                "lr": config.lr * config.multilabel_lr_scale,
                "weight_decay": config.weight_decay,
            },
            {
                "params": disc_params,
                "lr": config.lr * config.disc_lr_scale,
                "weight_decay": config.disc_weight_decay,
            },
        ],
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "resolved_config.json").write_text(json.dumps(config_to_dict(config), indent=2))

    metrics: list[dict] = []
    epoch_stats: list[dict] = []
    eval_history: list[dict] = []
    best_map: float | None = None
    best_path: Path | None = None
    last_good = copy.deepcopy(model.state_dict())

    decay_from = math.ceil(config.lr_decay_at * config.epochs)
    step = 0
    for epoch in range(config.epochs):
        if config.lr_decay_factor != 1.0 and epoch == decay_from:
            for group in optimizer.param_groups:
                group["lr"] *= config.lr_decay_factor
        epoch_start = step
        for batch in paired_batches(source, target, config.batch_size, config.seed, epoch):
            bundle, disc_acc = train_step(
                model, optimizer, config, flags, batch.source, batch.target
            )
            if not math.isfinite(bundle.total) or bundle.total > DIVERGENCE_BOUND:
                ckpt = None
                if out_path is not None:
                    model.load_state_dict(last_good)
                    ckpt = save_checkpoint(out_path / "last_good.pt", model, {"step": step})
                raise TrainingDiverged(
                    f"total loss {bundle.total} exceeded {DIVERGENCE_BOUND} at step {step}",
                    checkpoint_path=ckpt,
                )
            metrics.append(
                {
                    "step": step,
                    "det": bundle.det,
                    "multi": bundle.multi,
                    "adv_s": bundle.adv_s,
                    "adv_t": bundle.adv_t,
                    "kl": bundle.kl,
                    "total": bundle.total,
                    "disc_acc": disc_acc,
                }
            )
            step += 1
        last_good = copy.deepcopy(model.state_dict())

        epoch_rows = metrics[epoch_start:step]
        # the logged kl value already carries the 1/(2m) prefactor per domain;
        # doubling recovers the mean per-image symmetric-KL gap
        epoch_stats.append(
            {
                "epoch": epoch + 1,
                "mean_consistency_gap": 2.0 * sum(r["kl"] for r in epoch_rows) / len(epoch_rows),
                "mean_disc_acc": (
                    sum(r["disc_acc"] for r in epoch_rows) / len(epoch_rows)
                    if not math.isnan(epoch_rows[0]["disc_acc"])
                    else float("nan")
                ),
            }
        )

        if out_path is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_path / f"epoch_{epoch + 1:03d}.pt", model, {"epoch": epoch + 1})

        due_eval = (
            eval_target is not None
            and config.eval_every
            and (epoch + 1) % config.eval_every == 0
        )
        if due_eval:
            from .evaluation import evaluate

            result = evaluate(model, eval_target)
            eval_history.append({"epoch": epoch + 1, "target_map50": result.map50})
            if best_map is None or result.map50 > best_map:
                best_map = result.map50
                if out_path is not None:
                    best_path = save_checkpoint(
                        out_path / "best.pt", model, {"epoch": epoch + 1, "target_map50": result.map50}
                    )

    if eval_target is not None:
        from .evaluation import evaluate

        result = evaluate(model, eval_target)
        eval_history.append({"epoch": config.epochs, "target_map50": result.map50, "final": True})
        if best_map is None or result.map50 > best_map:
            best_map = result.map50
            if out_path is not None:
                best_path = save_checkpoint(
                    out_path / "best.pt", model, {"epoch": config.epochs, "target_map50": result.map50}
                )

    final_path = None
    if out_path is not None:
        final_path = save_checkpoint(out_path / "final.pt", model, {"epochs": config.epochs})
        write_metrics_csv(out_path / "metrics.csv", metrics)
        with open(out_path / "epoch_stats.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "mean_consistency_gap", "mean_disc_acc"]
            )
            writer.writeheader()
            writer.writerows(epoch_stats)
        if eval_history:
            (out_path / "eval_history.json").write_text(json.dumps(eval_history, indent=2))

    return TrainResult(
        model=model,
        metrics=metrics,
        eval_history=eval_history,
        out_dir=out_path,
        best_target_map=best_map,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
    )


def source_only_config(config: TrainConfig) -> TrainConfig:
    """Lower reference: supervised detection on source only (no adaptation)."""
    return replace(config, variant="w/o-adv", adv_weight=0.0, multi_weight=0.0, kl_weight=0.0)


def train_on_target_config(config: TrainConfig) -> TrainConfig:
    """Upper reference: plain detection training, to be run with an annotated
    target dataset passed as the source."""
    return source_only_config(config)


DEFAULT_GAMMA_GRID = (1.0, 3.0, 5.0, 7.0, 9.0)
DEFAULT_LAMBDA_GRID = (0.1, 0.25, 0.5, 0.75, 1.0)


def sensitivity_sweep(
    config: TrainConfig,
    source: Dataset,
    target: Dataset,
    eval_target: Dataset,
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID,
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID,
    fixed_adv_weight: float = 0.5,
    fixed_gamma: float = 5.0,
    out_csv: str | Path | None = None,
) -> list[dict]:
    """Grid protocol: vary gamma at fixed adversary weight, then vice versa.

    One training + evaluation per grid point; returns (and optionally writes)
    one row per point with the resulting target mAP@0.5.
    """
    if not gamma_grid and not lambda_grid:
        raise ConfigurationError("at least one grid must be non-empty")
    rows = []
    for gamma in gamma_grid:
        cfg = replace(config, focal_gamma=gamma, adv_weight=fixed_adv_weight)
        result = train(cfg, source, target, eval_target=eval_target)
        rows.append(
            {
                "fixed": "adv_weight",
                "fixed_value": fixed_adv_weight,
                "varied": "focal_gamma",
                "value": gamma,
                "target_map50": result.eval_history[-1]["target_map50"],
            }
        )
    for lam in lambda_grid:
        cfg = replace(config, adv_weight=lam, focal_gamma=fixed_gamma)
        result = train(cfg, source, target, eval_target=eval_target)
        rows.append(
            {
                "fixed": "focal_gamma",
                "fixed_value": fixed_gamma,
                "varied": "adv_weight",
                "value": lam,
                "target_map50": result.eval_history[-1]["target_map50"],
            }
        )
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["fixed", "fixed_value", "varied", "value", "target_map50"]
            )
            writer.writeheader()
            writer.writerows(rows)
    return rows
