"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL] criterion N`` line (also collected in
the terminal summary) and then asserts.
"""
import csv
import hashlib
import io
import json
import math
import time

import numpy as np
import torch
from torch import nn

from pestlpn.backbone import FEBB, LPN, ReductionBlock, param_count, resnet18_param_count
from pestlpn.cli import run
from pestlpn.dss import (
    KnowledgeBase, NoRuleFound, RecommendationQuery, Rule, load_knowledge_base, query_from_rule,
    recommend, recommend_from_detection,
)
from pestlpn.episodic import (
    Episode, PrototypeSet, classify_query, compute_prototypes, episode_loss,
)
from pestlpn.evaluation import (
    ALPHA, DEFAULT_ASSIGNMENTS, CachedEmbedder, build_nested_supports, paired_t_test,
    run_protocol,
)
from pestlpn.datapipe import scan_dataset

from conftest import MINI_SIZE, mini_config


def test_criterion_1_parameter_budget(acceptance_line):
    start = time.perf_counter()
    count = param_count()
    baseline = resnet18_param_count()
    seconds = time.perf_counter() - start
    ok = 8e6 <= count <= 11e6 and count < baseline and seconds < 1.0
    acceptance_line(1, "parameter budget", ok,
                    f"LPN {count:,} params, 18-layer residual baseline {baseline:,}, {seconds:.3f}s")
    assert ok


def test_criterion_2_architecture(acceptance_line):
    start = time.perf_counter()
    model = LPN(mini_config())
    febbs = sum(isinstance(m, FEBB) for m in model.modules())
    rbs = sum(isinstance(m, ReductionBlock) for m in model.modules())
    layout = tuple(sum(isinstance(m, FEBB) for m in stage) for stage in model.stages)

    # hand-constructed weights: silence TLB2 and TLB3, so FEBB output equals TLB2's input
    febb = FEBB(4, 8)
    for tlb in (febb.tlb2, febb.tlb3):
        for m in tlb.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.weight)
    x = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        residual_ok = torch.equal(febb(x), febb.tlb1(x))

    sizes, h = [100], torch.randn(1, 2, 100, 100)
    rb = ReductionBlock(2)
    for _ in range(4):
        h = rb(h)
        sizes.append(h.shape[-1])
    seconds = time.perf_counter() - start
    ok = (febbs, rbs, layout) == (4, 4, (2, 1, 1)) and residual_ok \
        and sizes == [100, 50, 25, 13, 7] and seconds < 10
    acceptance_line(2, "architecture conformance", ok,
                    f"{febbs} FEBB + {rbs} RB, layout {layout}, residual {residual_ok}, "
                    f"RB sizes {sizes}, {seconds:.2f}s")
    assert ok


def test_criterion_3_prototypical_core(acceptance_line):
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(4, 6))
    brute = [sum(float(v[i]) for v in vecs) / 4 for i in range(6)]
    proto_err = float(np.abs(compute_prototypes({"c": torch.tensor(vecs)}).vectors[0].numpy()
                             - brute).max())

    protos = PrototypeSet(["p1", "p2"], torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64))
    probs = classify_query(torch.zeros(2, dtype=torch.float64), protos).probabilities.tolist()
    softmax_err = max(abs(probs[0] - 0.7311), abs(probs[1] - 0.2689))

    exact = []
    for k in (2, 3, 5, 7, 10):
        support = {c: [torch.zeros(3, dtype=torch.float64)] * 2 for c in range(k)}
        query = [(torch.zeros(3, dtype=torch.float64), c) for c in range(k) for _ in range(4)]
        loss, _ = episode_loss(Episode(k, 2, 4, support, query),
                               lambda x: torch.ones(x.shape[0], 5, dtype=torch.float64))
        # ln k as computed by the same log kernel
        exact.append(loss.item() == -torch.log_softmax(torch.zeros(k, dtype=torch.float64),
                                                       0)[0].item()
                     and math.isclose(loss.item(), math.log(k), rel_tol=1e-15))
    ok = proto_err <= 1e-12 and softmax_err <= 1e-4 and all(exact)
    acceptance_line(3, "prototypical core", ok,
                    f"prototype err {proto_err:.1e}, softmax err {softmax_err:.1e}, "
                    f"ln k exact for k in (2,3,5,7,10): {all(exact)}")
    assert ok


def test_criterion_4_gradient_check(acceptance_line):
    start = time.perf_counter()
    torch.manual_seed(0)
    model = LPN(mini_config()).double().eval()
    x = torch.randn(3, 3, MINI_SIZE, MINI_SIZE, dtype=torch.float64)
    # a random linear read-out keeps |f| small, so roundoff stays well below the gradients
    weights = torch.randn(3, 16, dtype=torch.float64)

    def objective():
        return (model(x) * weights).sum()

    model.zero_grad()
    objective().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    picks = [named[i] for i in rng.choice(len(named), size=32, replace=False)]
    h, errors, nonzero = 1e-6, [], 0
    with torch.no_grad():
        for name, p in picks:
            flat = p.view(-1)
            idx = int(rng.integers(flat.numel()))
            analytic = p.grad.view(-1)[idx].item()
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = objective().item()
            flat[idx] = orig - h
            down = objective().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            nonzero += analytic != 0.0
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    seconds = time.perf_counter() - start
    ok = nonzero >= 20 and max(errors) <= 1e-3 and seconds < 120
    acceptance_line(4, "gradient check", ok,
                    f"{len(errors)} parameters ({nonzero} with nonzero gradient), "
                    f"max relative error {max(errors):.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_5_synthetic_learnability(trained_mini, fixture_test, acceptance_line):
    start = time.perf_counter()
    model, store = trained_mini["result"].model, trained_mini["store"]
    groups = scan_dataset(fixture_test).groups("fixture")
    report = run_protocol({"lpn": CachedEmbedder(model, store.batch)}, groups,
                          assignments=10, seed=0)
    acc = {s: report.mean_accuracy("lpn", s) for s in (1, 3, 5)}
    seconds = trained_mini["seconds"] + time.perf_counter() - start
    ok = acc[5] >= 0.95 and acc[5] >= acc[3] >= acc[1] and seconds < 900
    acceptance_line(5, "synthetic learnability", ok,
                    f"5-way accuracy 1/3/5-shot {acc[1]:.4f}/{acc[3]:.4f}/{acc[5]:.4f}, "
                    f"train+eval {seconds:.0f}s")
    assert ok


def test_criterion_6_protocol_conformance(acceptance_line):
    labels = ["a", "b", "c", "d", "e"]
    data = {c: [(c, i) for i in range(30)] for c in labels}
    nested = True
    for seed in range(20):
        ns = build_nested_supports(data, seed)
        one, three, five = ns.shot(1), ns.shot(3), ns.shot(5)
        nested &= all(one[c][0] in three[c] and set(three[c]) <= set(five[c]) for c in labels)

    def random_embed(items):
        out = []
        for label, i in items:
            g = torch.Generator().manual_seed(labels.index(label) * 1000 + i)
            out.append(torch.randn(16, generator=g, dtype=torch.float64))
        return torch.stack(out)

    report = run_protocol({"random": random_embed}, data, seed=7)
    n_assign = len(report.accuracies("random", 5))
    acc = report.mean_accuracy("random", 5)
    band = 3 * math.sqrt(0.2 * 0.8 / (n_assign * 5 * 25))
    ok = nested and DEFAULT_ASSIGNMENTS == 10 and n_assign == 10 and abs(acc - 0.2) <= band
    acceptance_line(6, "protocol conformance", ok,
                    f"prefix nesting {nested}, {n_assign} assignments, random accuracy "
                    f"{acc:.4f} in 0.2 ± {band:.4f}")
    assert ok


def test_criterion_7_statistics(acceptance_line):
    r = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    same = paired_t_test([0.61, 0.72, 0.55], [0.61, 0.72, 0.55])
    ok = abs(r.t - 4.2426) <= 1e-3 and abs(r.p - 0.0132) <= 1e-3 and r.significant \
        and same.p == 1.0 and not same.significant and ALPHA == 0.05
    acceptance_line(7, "paired t-test", ok,
                    f"t={r.t:.4f}, p={r.p:.4f}, identical inputs p={same.p}, alpha={ALPHA}")
    assert ok


def test_criterion_8_dss_exactness(acceptance_line):
    kb = load_knowledge_base()
    verbatim = {
        ("sugarcane", "Cutting Weevil"): "Mild insecticide (e.g., Chlorpyrifos)",
        ("sugarcane", "Leafcutter Ants"): "Bait-based pesticides (e.g., Hydramethylnon)",
        ("sugarcane", "Red Palm Weevil"): "Pheromone-based lures and traps",
        ("sugarcane", "Sugarcane Woolly Aphid"): "Natural predators (lady beetles) or Imidacloprid",
        ("sugarcane", "Termites"): "Soil treatment (e.g., Fipronil)",
        ("wheat", "Cutworms"): "Biological pesticide (e.g., Bacillus thuringiensis)",
        ("wheat", "Wheat Stem Sawfly"): "Pheromone traps or mild insecticides",
        ("wheat", "Wheat Thrips"): "Sticky traps or Lambda-cyhalothrin",
        ("wheat", "Wheat Leaf Rust"): "Fungicide (e.g., Propiconazole)",
        ("wheat", "Termites"): "Soil-applied insecticides (e.g., Chlorpyrifos)",
    }
    rows = sum(recommend(query_from_rule(r), kb).recommendation == verbatim[(r.crop, r.pest)]
               for r in kb.rules)
    ex1 = recommend(RecommendationQuery("sugarcane", "Cutting Weevil", "early_growth",
                                        "high_humidity"), kb).recommendation
    ex2 = recommend(RecommendationQuery("wheat", "Cutworms", "early_growth", "cool_moist"), kb)
    ex3 = recommend(RecommendationQuery("sugarcane", "Termites", "vegetative", "dry_soil"), kb)
    protos = PrototypeSet(["Cutworms", "Termites"], torch.eye(2, dtype=torch.float64) * 10)
    ex4 = recommend_from_detection(torch.tensor([[0.0, 10.0]]), protos, "wheat", "vegetative",
                                   "dry_soil", kb, lambda t: t.to(torch.float64))
    examples = [
        ex1 == "Mild insecticide (e.g., Chlorpyrifos)",
        ex2.recommendation == "Biological pesticide (e.g., Bacillus thuringiensis)"
        and ex2.eco_class == "biological",
        ex3.recommendation == "Soil treatment (e.g., Fipronil)",
        ex4.recommendation.recommendation == "Soil-applied insecticides (e.g., Chlorpyrifos)",
    ]
    try:
        recommend(RecommendationQuery("wheat", "Rice Bug", "vegetative", "dry"), kb)
        no_rule = False
    except NoRuleFound:
        no_rule = True
    chem = Rule("wheat", "Aphid", "x", "any", frozenset(), "spray", "chemical")
    bio = Rule("wheat", "Aphid", "x", "vegetative", frozenset(), "predators", "biological")
    eco = all(recommend(RecommendationQuery("wheat", "Aphid", "vegetative"),
                        KnowledgeBase(rules)).eco_class == "biological"
              for rules in ([chem, bio], [bio, chem]))
    ok = len(kb) == 10 and rows == 10 and all(examples) and no_rule and eco
    acceptance_line(8, "DSS exactness", ok,
                    f"{rows}/10 rows verbatim, {sum(examples)}/4 examples, NoRuleFound {no_rule}, "
                    f"eco-priority {eco}")
    assert ok


def _pipeline(root):
    """fixture -> train -> eval through the CLI; returns digests of every artifact."""
    root.mkdir()
    data, model_dir, report_dir = root / "data", root / "model", root / "report"
    cfg = root / "run.json"
    cfg.write_text(json.dumps({
        "backbone": mini_config().to_dict(),
        "training": {"meta_episodes": 3, "epochs_per_episode": 2, "k_range": [3, 4],
                     "n_range": [1, 3], "query_count": 3, "seed": 0, "augment": True},
    }))
    codes = [
        run(["fixture", "--out", str(data), "--classes", "4", "--per-class", "10", "--size", "16",
             "--seed", "5"]),
        run(["train", "--config", str(cfg), "--data", str(data), "--out", str(model_dir),
             "--seed", "11"]),
        run(["eval", "--checkpoint", str(model_dir / "checkpoint.pt"), "--data", str(data),
             "--out", str(report_dir), "--seed", "3"]),
    ]
    digests = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        body = path.read_bytes()
        if path.name == "training_log.csv":
            # wall-clock seconds are the only non-seeded column
            rows = list(csv.reader(io.StringIO(body.decode())))
            body = "\n".join(",".join(r[:-1]) for r in rows).encode()
        digests[path.relative_to(root).as_posix()] = hashlib.sha256(body).hexdigest()
    return codes, digests


def test_criterion_9_reproducibility(tmp_path, acceptance_line):
    codes_a, a = _pipeline(tmp_path / "a")
    codes_b, b = _pipeline(tmp_path / "b")
    ok = codes_a == codes_b == [0, 0, 0] and a == b and len(a) > 40
    acceptance_line(9, "CLI reproducibility", ok,
                    f"exit codes {codes_a}/{codes_b}, {len(a)} files, "
                    f"{sum(a[k] == b.get(k) for k in a)} identical")
    assert ok
