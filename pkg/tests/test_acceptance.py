"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 6, 7 and 10 share one BoxNet training run on the bundled toy stack.
"""
import re
import time

import numpy as np
import pytest
import torch

from boxguide.attn_control import build_plan, register_hooks
from boxguide.evalbench import COLORS, CATEGORIES, SyntheticOracle, format_benchmark, gen_benchmark, min_object_score
from boxguide.matching import MatchProblem, box_cxcywh_to_xyxy, box_loss, box_loss_torch, giou, hungarian_match
from boxguide.prompt_parser import filter_spans, parse_entities, span_from_phrase
from boxguide.toy_diffusion.pipeline import GenerateOptions, Generator
from boxguide.toy_diffusion.shapes import ShapesDataset
from boxguide.toy_diffusion.stack import ToyStack
from boxguide.trainer import BoxNetTrainer, TrainConfig, evaluate_iou
from boxguide.unique_mask import unique_masks

from .conftest import record_acceptance
from .oracles import brute_force_assignment, random_box

TRAIN_SCENES = 5000
TRAIN_STEPS = 2000
HELD_OUT = 200
N_PROMPTS = 20
N_SEEDS = 20


def test_criterion_1_matching_optimality():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    mismatches = 0

    def check(n_pred, n_gt):
        preds = [(random_box(rng), int(rng.integers(0, 3))) for _ in range(n_pred)]
        gts = [(random_box(rng), int(rng.integers(0, 3))) for _ in range(n_gt)]
        problem = MatchProblem(preds, gts)
        got = sorted(hungarian_match(problem).pairs)
        return got == brute_force_assignment(problem.cost_matrix())[0]

    for _ in range(200):
        n = int(rng.integers(1, 7))
        mismatches += not check(n, n)
    for _ in range(100):
        short = int(rng.integers(1, 6))
        long = int(rng.integers(short + 1, short + 4))
        mismatches += not (check(short, long) if rng.random() < 0.5 else check(long, short))
    elapsed = time.time() - t0
    passed = mismatches == 0 and elapsed < 10
    record_acceptance(1, passed, f"{mismatches} mismatches over 300 problems in {elapsed:.2f}s (limit 10s)")
    assert passed


def test_criterion_2_giou_oracle():
    t0 = time.time()
    examples = [
        (giou((0, 0, 1, 1), (0, 0, 1, 1)), 1.0),
        (giou((0, 0, 1, 1), (2, 2, 3, 3)), -7 / 9),
        (giou((0, 0, 2, 2), (1, 1, 3, 3)), -5 / 63),
    ]
    examples_ok = all(abs(a - b) <= 1e-9 for a, b in examples)
    rng = np.random.default_rng(7)
    bad_range = bad_sym = 0
    for _ in range(10000):
        a = box_cxcywh_to_xyxy(random_box(rng, 0.01, 0.9))
        b = box_cxcywh_to_xyxy(random_box(rng, 0.01, 0.9))
        g, g2 = giou(a, b), giou(b, a)
        bad_range += not (-1 < g <= 1)
        bad_sym += g != g2
    elapsed = time.time() - t0
    passed = examples_ok and bad_range == 0 and bad_sym == 0 and elapsed < 5
    record_acceptance(2, passed, f"examples ok={examples_ok}, range violations {bad_range}, "
                                 f"asymmetric {bad_sym} of 10000, {elapsed:.2f}s (limit 5s)")
    assert passed


def test_criterion_3_unique_mask_invariants():
    t0 = time.time()
    rng = np.random.default_rng(3)
    failures = []
    for k in range(1000):
        boxes = [random_box(rng) for _ in range(int(rng.integers(1, 7)))]
        for res in (8, 16, 64):
            ms = unique_masks(boxes, (res, res))
            if (ms.masks.sum(0) > 1).any():
                failures.append((k, res, "overlap"))
            if (ms.masks & ~ms.raw_masks).any():
                failures.append((k, res, "containment"))
            for n in range(len(boxes)):
                if not np.array_equal(ms.masks[n], (ms.argmax_map == n + 1) & ms.raw_masks[n]):
                    failures.append((k, res, "argmax"))
    box = random_box(rng)
    single = unique_masks([box], (16, 16))
    single_ok = np.array_equal(single.masks[0], single.raw_masks[0])
    twin = unique_masks([box, box], (16, 16))
    tie_ok = np.array_equal(twin.masks[0], twin.raw_masks[0]) and not twin.masks[1].any()
    elapsed = time.time() - t0
    passed = not failures and single_ok and tie_ok and elapsed < 30
    record_acceptance(3, passed, f"{len(failures)} invariant failures over 3000 mask sets, single-box identity "
                                 f"{single_ok}, tie-break {tie_ok}, {elapsed:.1f}s (limit 30s)")
    assert passed


@pytest.fixture(scope="module")
def toy_stack():
    return ToyStack.load()


def test_criterion_4_attention_control_exactness(toy_stack):
    t0 = time.time()
    unet = toy_stack.unet
    prompt = "a red square and a blue circle"
    parsed = parse_entities(prompt)
    boxes = [(0.3, 0.35, 0.4, 0.4), (0.65, 0.6, 0.45, 0.5)]
    plan = build_plan(parsed.spans, boxes, unet.attention_resolutions())
    z = torch.randn(1, *toy_stack.latent_shape, generator=torch.Generator().manual_seed(0))
    t = torch.tensor([25])
    ctx = toy_stack.context([prompt])
    pre, mid, post = {}, {}, {}

    def grab(store):
        def fn(probs, layer):
            store[layer.name] = probs.clone()
            return probs
        return fn

    handles = unet.add_attention_hook(grab(pre))
    first = register_hooks(unet, plan, "both")
    handles += unet.add_attention_hook(grab(mid))
    second = register_hooks(unet, plan, "both")
    handles += unet.add_attention_hook(grab(post))
    with torch.no_grad():
        unet(z, t, ctx)
    for h in handles:
        h.remove()
    first.remove()
    second.remove()

    masked_zero = unmasked_identical = idempotent = True
    for layer in unet.attention_layers():
        mult = first._multiplier(layer, pre[layer.name].shape[-1], torch.device("cpu"), torch.float32)
        zero = (mult == 0).expand_as(pre[layer.name])
        masked_zero &= bool((mid[layer.name][zero] == 0).all())
        unmasked_identical &= torch.equal(mid[layer.name][~zero], pre[layer.name][~zero])
        idempotent &= torch.equal(post[layer.name], mid[layer.name])

    gen = Generator(toy_stack, _identity_boxnet(toy_stack))
    off, _ = gen.generate(prompt, [11])
    ones, _ = gen.generate(prompt, [11], GenerateOptions(control="both", mask_override="ones"))
    identity = np.array_equal(off, ones)
    clean = unet.hook_count() == 0
    elapsed = time.time() - t0
    passed = masked_zero and unmasked_identical and idempotent and identity and clean and elapsed < 120
    record_acceptance(4, passed, f"masked zero {masked_zero}, unmasked bit-identical {unmasked_identical}, "
                                 f"idempotent {idempotent}, all-ones run bit-equal {identity}, {elapsed:.1f}s")
    assert passed


def _identity_boxnet(stack):
    from boxguide.boxnet import BoxNet, BoxNetConfig

    torch.manual_seed(0)
    return BoxNet(BoxNetConfig(feature_channels=tuple(stack.unet.feature_channels)))


def test_criterion_5_gradient_check():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        pred = torch.tensor(random_box(rng, 0.05, 0.7), dtype=torch.float64, requires_grad=True)
        gt = torch.tensor(random_box(rng, 0.05, 0.7), dtype=torch.float64)
        box_loss_torch(pred, gt).backward()
        analytic = pred.grad.numpy()
        fd = np.zeros(4)
        eps = 1e-7
        base = pred.detach().numpy()
        for k in range(4):
            up, dn = base.copy(), base.copy()
            up[k] += eps
            dn[k] -= eps
            fd[k] = (box_loss(tuple(up), tuple(gt.numpy())) - box_loss(tuple(dn), tuple(gt.numpy()))) / (2 * eps)
        worst = max(worst, float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)))
    passed = worst < 1e-4
    record_acceptance(5, passed, f"max relative gradient error {worst:.2e} over 100 points (limit 1e-4)")
    assert passed


@pytest.fixture(scope="module")
def training_run(toy_stack):
    t0 = time.time()
    dataset = ShapesDataset.generate(TRAIN_SCENES, seed=0)
    before = toy_stack.parameter_checksum()
    trainer = BoxNetTrainer(toy_stack, dataset, TrainConfig(total_steps=TRAIN_STEPS, seed=0))
    ckpt = trainer.train()
    after = toy_stack.parameter_checksum()
    held_out = ShapesDataset.generate(HELD_OUT, seed=10_000)
    iou = evaluate_iou(trainer, held_out, t_max=toy_stack.scheduler.T // 4)
    return {"trainer": trainer, "ckpt": ckpt, "before": before, "after": after, "iou": iou,
            "seconds": time.time() - t0}


def test_criterion_6_boxnet_training(training_run):
    losses = [h[1] for h in training_run["trainer"].history]
    first, last = float(np.mean(losses[:100])), float(np.mean(losses[-100:]))
    iou, seconds = training_run["iou"], training_run["seconds"]
    passed = len(losses) == TRAIN_STEPS and last < 0.5 * first and iou >= 0.5 and seconds < 1800
    record_acceptance(6, passed, f"loss {first:.3f} -> {last:.3f} (ratio {last / first:.3f}, limit 0.5), "
                                 f"held-out IoU at t<=T/4 {iou:.3f} (limit 0.5), {seconds / 60:.1f} min")
    assert passed


def test_criterion_7_directional_replication(toy_stack, training_run):
    t0 = time.time()
    gen = Generator(toy_stack, training_run["ckpt"])
    oracle = SyntheticOracle()
    prompts = gen_benchmark("toy", seed=0, limit=N_PROMPTS)
    seeds = list(range(N_SEEDS))
    means = {}
    for control in ("off", "cross", "both"):
        scores = []
        for p in prompts:
            images, _ = gen.generate(p.text, seeds, GenerateOptions(control=control))
            scores += [min_object_score(img, p.detection_phrases, oracle) for img in images]
        means[control] = float(np.mean(scores))
    elapsed = time.time() - t0
    gap = means["both"] - means["off"]
    passed = means["both"] > means["cross"] > means["off"] and gap >= 0.05 and elapsed < 3600
    record_acceptance(7, passed, f"min object score off {means['off']:.4f}, cross {means['cross']:.4f}, "
                                 f"both {means['both']:.4f}, both-off {gap:+.4f} (need >= 0.05), "
                                 f"{N_PROMPTS}x{N_SEEDS} samples, {elapsed / 60:.1f} min")
    assert passed


def test_criterion_8_benchmark_generator():
    template = re.compile(r"^a (\w+) (\w+) and a (\w+) (\w+)$")
    problems = []
    for category in ("coco", "noncoco"):
        prompts = gen_benchmark(category, seed=0)
        if len(prompts) != 120:
            problems.append(f"{category}: {len(prompts)} prompts")
        vocab = set(CATEGORIES[prompts[0].category])
        for p in prompts:
            m = template.match(p.text)
            if not m:
                problems.append(f"grammar: {p.text}")
                continue
            ca, ea, cb, eb = m.groups()
            if ca == cb or ea == eb or not {ca, cb} <= set(COLORS) or not {ea, eb} <= vocab:
                problems.append(f"content: {p.text}")
        if format_benchmark(prompts, 0).encode() != format_benchmark(gen_benchmark(category, 0), 0).encode():
            problems.append(f"{category}: regeneration differs")
    passed = not problems
    record_acceptance(8, passed, "120 prompts per category, template, distinct colors, byte-identical"
                      if passed else "; ".join(problems[:3]))
    assert passed


FILTER_TABLE = [
    ("a white clock tower with a clock on each of it 's sides",
     ["a white clock tower", "a clock", "it 's"], ["a white clock tower", "a clock"]),
    ("a man is sitting on the back of an elephant",
     ["a man", "the back", "an elephant"], ["a man", "an elephant"]),
    ("many different fruits are next to each other",
     ["many different fruits", "each other"], ["many different fruits"]),
    ("a large red umbrella with other colors around the center pole",
     ["a large red umbrella", "other colors", "the center pole"], ["a large red umbrella"]),
]


def test_criterion_9_parser_filtering():
    results = []
    for prompt, candidates, expected in FILTER_TABLE:
        start, spans = 0, []
        for phrase in candidates:
            span = span_from_phrase(prompt, phrase, start=start)
            start = span.char_range[1]
            spans.append(span)
        filtered = [s.phrase for s in filter_spans(spans)]
        results.append(filtered == expected and parse_entities(prompt).phrases() == expected)
    passed = all(results)
    record_acceptance(9, passed, f"{sum(results)}/4 filtering examples reproduced")
    assert passed


def test_criterion_10_frozen_denoiser(training_run):
    passed = training_run["before"] == training_run["after"]
    record_acceptance(10, passed, f"denoiser checksum {training_run['before'][:12]} before, "
                                  f"{training_run['after'][:12]} after {TRAIN_STEPS} steps")
    assert passed
