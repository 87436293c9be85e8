"""Acceptance suite: every release criterion with its stated tolerance.

Each criterion prints one PASS/FAIL line (bypassing pytest capture) so a
full run gives a one-screen verdict. Criteria 7 and 8 train the desk-scale
benchmark models once in a session-scoped fixture and share the results.
"""

import math
import statistics
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch

from adaptdet.adversary import focal_adversarial_loss, gradient_reversal
from adaptdet.backbone import FeatureExtractor, batch_to_tensor
from adaptdet.consistency import consistency_loss, renormalize, symmetric_kl
from adaptdet.data import ShiftConfig, generate_benchmark
from adaptdet.detector import detection_loss
from adaptdet.evaluation import (
    domain_probe_accuracy,
    evaluate,
    evaluate_detections,
    export_embeddings,
)
from adaptdet.model import AdaptiveDetector, ModelConfig
from adaptdet.multilabel import multilabel_loss
from adaptdet.training import TrainConfig, total_loss, train

from gradutils import central_difference, check_parameter_gradients, sample_indices


def report(criterion: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, file=sys.__stdout__, flush=True)


# --------------------------------------------------------------------------
# 1. Loss-value oracles (hand-derived values, 1e-6 absolute)
# --------------------------------------------------------------------------


def test_criterion_1_loss_value_oracles():
    checks = []

    p = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    checks.append(abs(float(multilabel_loss(p, y)) - 1.3862943611198906) < 1e-6)

    p2 = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
    checks.append(abs(float(multilabel_loss(p2, y)) - 0.21072103131565256) < 1e-6)

    d5 = torch.tensor([0.5], dtype=torch.float64)
    ls, _ = focal_adversarial_loss(d5, d5, gamma=0.0)
    checks.append(abs(float(ls) - math.log(2.0)) < 1e-6)

    d8 = torch.tensor([0.8], dtype=torch.float64)
    ls, _ = focal_adversarial_loss(d8, d5, gamma=5.0)
    checks.append(abs(float(ls) - 7.140593642054713e-05) < 1e-6)

    a = renormalize(torch.tensor([1.0, 0.0], dtype=torch.float64))
    checks.append(
        abs(float(a[0]) - 0.7310585786300049) < 1e-6 and abs(float(a[1]) - 0.2689414213699951) < 1e-6
    )
    b = renormalize(torch.tensor([0.0, 1.0], dtype=torch.float64))
    # closed-form symmetric KL: 2 (e-1)/(e+1)
    checks.append(abs(float(symmetric_kl(a, b)) - 0.9242343145200195) < 1e-6)

    cfg = TrainConfig()  # paper defaults: 0.5 / 0.01 / 0.1
    checks.append(abs(total_loss(1.0, 0.2, 0.4, 0.3, cfg) - 1.134) < 1e-6)

    passed = all(checks)
    report("1 loss-value oracles", passed, f"{sum(checks)}/{len(checks)} values match")
    assert passed


# --------------------------------------------------------------------------
# 2. Gradient suite (central differences, rel err < 1e-3, float64)
# --------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    torch.manual_seed(0)
    failures = []

    # L_multi through backbone + head
    net = FeatureExtractor(channels=(4, 6), seed=1).double()
    from adaptdet.multilabel import MultiLabelHead

    head = MultiLabelHead(in_channels=6, num_classes=3, conv_channels=6, seed=2).double()
    image = torch.rand(2, 3, 48, 48, dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    failures += check_parameter_gradients(
        lambda: multilabel_loss(head(net(image)), y),
        list(head.named_parameters()) + list(net.named_parameters()),
        per_tensor=3,
    )

    # L_adv through the reversal layer into the backbone
    from adaptdet.adversary import DomainDiscriminator, FeatureReducer

    red = FeatureReducer(in_channels=6, out_channels=4, seed=3).double()
    disc = DomainDiscriminator(in_features=4, seed=4).double()
    img_t = torch.rand(2, 3, 48, 48, dtype=torch.float64)

    def adv_probe():
        ls, lt = focal_adversarial_loss(
            disc(red(gradient_reversal(net(image), 0.5))),
            disc(red(gradient_reversal(net(img_t), 0.5))),
            gamma=2.0,
        )
        return 0.5 * (ls + lt)

    failures += check_parameter_gradients(
        adv_probe,
        list(red.named_parameters()) + list(disc.named_parameters()) + list(net.named_parameters()),
        per_tensor=3,
    )

    # L_kl through the row-wise max over Q
    p_param = torch.nn.Parameter(torch.rand(2, 3, dtype=torch.float64) * 0.8 + 0.1)
    Q_param = torch.nn.Parameter(torch.rand(3, 6, dtype=torch.float64) * 0.8 + 0.1)
    p_t = torch.rand(1, 3, dtype=torch.float64) * 0.8 + 0.1
    q_t = torch.rand(3, dtype=torch.float64) * 0.8 + 0.1

    def kl_probe():
        q0 = Q_param.max(dim=1).values
        q1 = (0.5 * Q_param).max(dim=1).values
        return consistency_loss(p_param, [q0, q1], p_t, [q_t])

    failures += check_parameter_gradients(kl_probe, [("p", p_param), ("Q", Q_param)], per_tensor=5)

    # L_det through RPN + ROI heads on a small instance
    src, _ = generate_benchmark(1, 1, 2, ShiftConfig("fog", 0.0, seed=0), seed=6)
    rec = src.records[0]
    cfg = ModelConfig(
        num_classes=2,
        image_size=64,
        backbone_channels=(4, 6),
        rpn_channels=6,
        multilabel_channels=4,
        reduce_channels=4,
        rpn_post_nms=6,
        roi_hidden=16,
        anchor_scales=(1.25, 2.5),
        anchor_ratios=(1.0,),
    )
    model = AdaptiveDetector(cfg, seed=3).double()
    images = batch_to_tensor([rec.image[:64, :64]], torch.float64)
    gt_b = [torch.as_tensor(np.clip(rec.boxes[:1], 2, 60), dtype=torch.float64)]
    gt_c = [torch.as_tensor(rec.class_ids[:1] % 2)]

    def det_probe():
        out = model.detector_forward(model.features(images), gt_boxes=gt_b, gt_classes=gt_c)
        return detection_loss(
            out.losses["rpn_cls"], out.losses["rpn_reg"], out.losses["roi_cls"], out.losses["roi_reg"]
        )

    failures += check_parameter_gradients(
        det_probe,
        [(n, p) for n, p in model.named_parameters() if n.startswith(("backbone", "rpn", "roi_head"))],
        per_tensor=2,
    )

    passed = not failures
    report("2 gradient suite", passed, f"{len(failures)} mismatches")
    assert passed, "\n".join(failures)


# --------------------------------------------------------------------------
# 3. GRL contract
# --------------------------------------------------------------------------


def test_criterion_3_grl_contract():
    torch.manual_seed(0)
    lam = 0.5
    net = FeatureExtractor(channels=(4, 6), seed=1).double()
    from adaptdet.adversary import DomainDiscriminator, FeatureReducer

    red = FeatureReducer(in_channels=6, out_channels=4, seed=2).double()
    disc = DomainDiscriminator(in_features=4, seed=3).double()
    img_s = torch.rand(1, 3, 48, 48, dtype=torch.float64)
    img_t = torch.rand(1, 3, 48, 48, dtype=torch.float64)

    def adv(reversal_scale):
        fs, ft = net(img_s), net(img_t)
        if reversal_scale is not None:
            fs = gradient_reversal(fs, reversal_scale)
            ft = gradient_reversal(ft, reversal_scale)
        ls, lt = focal_adversarial_loss(disc(red(fs)), disc(red(ft)), gamma=5.0)
        return 0.5 * (ls + lt)

    weight = net.blocks[0].weight
    for p in net.parameters():
        p.grad = None
    adv(lam).backward()
    grad_reversed = weight.grad.detach().clone()

    ok = True
    for idx in sample_indices(weight, 6, seed=11):
        fd_plain = central_difference(lambda: adv(None), weight, idx)
        analytic = float(grad_reversed.view(-1)[idx])
        expected = -lam * fd_plain
        if abs(analytic - expected) > 1e-3 * max(abs(expected), 1e-9):
            ok = False

    # lambda = 0 silences the backbone completely
    for p in net.parameters():
        p.grad = None
    adv(0.0).backward()
    zero_ok = all(
        float(p.grad.abs().max()) == 0.0 for p in net.parameters() if p.grad is not None
    )

    passed = ok and zero_ok
    report("3 GRL contract", passed, f"-lambda match={ok}, lambda=0 zero grad={zero_ok}")
    assert passed


# --------------------------------------------------------------------------
# 4. Reduction identities
# --------------------------------------------------------------------------


def test_criterion_4_reduction_identities(tiny_benchmark):
    rng = torch.Generator().manual_seed(0)
    d_src = torch.rand(32, generator=rng, dtype=torch.float64).clamp(1e-6, 1 - 1e-6)
    d_tgt = torch.rand(32, generator=rng, dtype=torch.float64).clamp(1e-6, 1 - 1e-6)
    ls, lt = focal_adversarial_loss(d_src, d_tgt, gamma=0.0)
    ce_s = -torch.log(d_src).mean()
    ce_t = -torch.log(1.0 - d_tgt).mean()
    focal_ok = abs(float(ls - ce_s)) < 1e-9 and abs(float(lt - ce_t)) < 1e-9

    source, target = tiny_benchmark
    base = TrainConfig(
        epochs=2,
        batch_size=4,
        seed=0,
        checkpoint_every=0,
        model=ModelConfig(backbone_channels=(8, 16, 32, 32), rpn_channels=32,
                          multilabel_channels=16, reduce_channels=16),
    )
    run_a = train(replace(base, variant="w/o-PR"), source, target)
    run_b = train(replace(base, variant="full", kl_weight=0.0), source, target)
    state_a = run_a.model.state_dict()
    state_b = run_b.model.state_dict()
    stepwise_ok = all(torch.equal(state_a[k], state_b[k]) for k in state_a)
    metrics_ok = run_a.metrics == run_b.metrics

    passed = focal_ok and stepwise_ok and metrics_ok
    report(
        "4 reduction identities",
        passed,
        f"gamma0==CE {focal_ok}, w/o-PR==full@eps0 params {stepwise_ok} metrics {metrics_ok}",
    )
    assert passed


# --------------------------------------------------------------------------
# 5. Total-loss recomposition at every step (paper defaults)
# --------------------------------------------------------------------------


def test_criterion_5_recomposition(tiny_benchmark):
    source, target = tiny_benchmark
    cfg = TrainConfig(
        epochs=2,
        batch_size=4,
        seed=1,
        checkpoint_every=0,
        model=ModelConfig(backbone_channels=(8, 16, 32, 32), rpn_channels=32,
                          multilabel_channels=16, reduce_channels=16),
    )
    assert (cfg.adv_weight, cfg.multi_weight, cfg.kl_weight, cfg.focal_gamma) == (0.5, 0.01, 0.1, 5.0)
    result = train(cfg, source, target)
    worst = 0.0
    for row in result.metrics:
        recomposed = (
            row["det"]
            + cfg.adv_weight * 0.5 * (row["adv_s"] + row["adv_t"])
            + cfg.multi_weight * row["multi"]
            + cfg.kl_weight * row["kl"]
        )
        worst = max(worst, abs(recomposed - row["total"]))
    passed = worst < 1e-9
    report("5 Eq-recomposition", passed, f"max |total - weighted sum| = {worst:.2e} over {len(result.metrics)} steps")
    assert passed


# --------------------------------------------------------------------------
# 6. mAP oracle
# --------------------------------------------------------------------------


def test_criterion_6_map_oracle():
    from test_evaluation import FIXTURE_AP0, FIXTURE_AP1, FIXTURE_DETECTIONS, _fixture_dataset
    from adaptdet.detector import Detection

    dataset = _fixture_dataset()
    result = evaluate_detections(FIXTURE_DETECTIONS, dataset)
    fixture_ok = (
        abs(result.per_class_ap[0] - FIXTURE_AP0) < 1e-9
        and abs(result.per_class_ap[1] - FIXTURE_AP1) < 1e-9
    )

    identity = {
        r.image_id: [
            Detection(box=tuple(b), class_id=int(c), score=1.0)
            for b, c in zip(r.boxes, r.class_ids)
        ]
        for r in dataset
    }
    identity_ok = evaluate_detections(identity, dataset).map50 == 1.0

    passed = fixture_ok and identity_ok
    report("6 mAP oracle", passed, f"fixture match {fixture_ok}, identity mAP=1 {identity_ok}")
    assert passed


# --------------------------------------------------------------------------
# 7 & 8. Desk-scale adaptation experiment and alignment probe
# --------------------------------------------------------------------------

EXPERIMENT_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def adaptation_experiment():
    """Train the benchmark protocol once: source-only, full, w/o-PR, uadv
    at three seeds each on the 200/200 fog-0.6 benchmark, 30 epochs."""
    torch.set_num_threads(2)
    shift = ShiftConfig("fog", 0.6, seed=0)
    src_train, tgt_train = generate_benchmark(200, 200, 3, shift, seed=0, split="train")
    src_test, tgt_test = generate_benchmark(100, 100, 3, shift, seed=1, split="test")

    def cfg_for(variant_kw, seed):
        return TrainConfig(epochs=30, batch_size=8, seed=seed, checkpoint_every=0, **variant_kw)

    recipes = {
        "source-only": dict(variant="w/o-adv", adv_weight=0.0, multi_weight=0.0, kl_weight=0.0),
        "full": dict(variant="full"),
        "w/o-PR": dict(variant="w/o-PR"),
        "uadv": dict(variant="uadv"),
    }
    target_maps: dict[str, list[float]] = {}
    kept_models = {}
    for name, kw in recipes.items():
        values = []
        for seed in EXPERIMENT_SEEDS:
            result = train(cfg_for(kw, seed), src_train, tgt_train)
            values.append(evaluate(result.model, tgt_test).map50)
            if seed == EXPERIMENT_SEEDS[0] and name in ("source-only", "full"):
                kept_models[name] = result.model
        target_maps[name] = values
        print(
            f"  [experiment] {name}: median={statistics.median(values):.3f} runs={[round(v, 3) for v in values]}",
            file=sys.__stdout__,
            flush=True,
        )
    return {
        "target_maps": target_maps,
        "models": kept_models,
        "datasets": (src_test, tgt_test),
    }


def test_criterion_7_desk_scale_adaptation(adaptation_experiment):
    maps = adaptation_experiment["target_maps"]
    med = {k: statistics.median(v) for k, v in maps.items()}
    improvement = med["full"] - med["source-only"]
    improvement_ok = improvement >= 0.05

    # ordering with < 1 point inversion tolerance between adjacent variants
    ordering_ok = (med["full"] >= med["w/o-PR"] - 0.01) and (med["w/o-PR"] >= med["uadv"] - 0.01)

    passed = improvement_ok and ordering_ok
    report(
        "7 desk-scale adaptation",
        passed,
        f"median target mAP: full={med['full']:.3f} w/o-PR={med['w/o-PR']:.3f} "
        f"uadv={med['uadv']:.3f} source-only={med['source-only']:.3f}; "
        f"improvement={improvement * 100:.1f}pts (need >= 5)",
    )
    assert passed


def test_criterion_8_alignment_probe(adaptation_experiment):
    src_test, tgt_test = adaptation_experiment["datasets"]
    accuracies = {}
    for name in ("source-only", "full"):
        model = adaptation_experiment["models"][name]
        _, rows = export_embeddings(model, [(src_test, "source"), (tgt_test, "target")])
        feats = np.asarray([r[2:] for r in rows], dtype=np.float64)
        domains = [r[1] for r in rows]
        accuracies[name] = domain_probe_accuracy(feats, domains)
    drop = accuracies["source-only"] - accuracies["full"]
    passed = accuracies["source-only"] > 0.9 and drop >= 0.1
    report(
        "8 alignment probe",
        passed,
        f"probe acc: source-only={accuracies['source-only']:.3f} full={accuracies['full']:.3f} "
        f"drop={drop:.3f} (need >= 0.1)",
    )
    assert passed
