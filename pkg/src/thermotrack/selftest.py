"""Oracle suites run by ``thermotrack selftest``.

Each suite checks one family of exact properties against an independent
brute-force recomputation and returns a :class:`SuiteResult`; nothing here
raises on a failed check. The test-suite calls the same functions.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from thermotrack.config import EncoderConfig, LossWeights, TrackerConfig
from thermotrack.harness import metrics
from thermotrack.model.crm import KnowledgeBase, RetrievalResult, refine_search
from thermotrack.model.encoder import build_sequence, encoder_layer
from thermotrack.model.fusion import ExchangePlan, exchange_channels, plan_exchange, select_tokens
from thermotrack.model.head import giou_loss_xywh, total_loss
from thermotrack.numeric import Tape, Tensor, check_gradients, cosine_similarity
from thermotrack.params import ParameterStore


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def reduced_config(**overrides) -> TrackerConfig:
    """A tiny configuration that runs the full pipeline in milliseconds."""
    encoder = EncoderConfig(
        channels=8,
        layers=2,
        heads=2,
        patch=4,
        template_edge=8,
        search_edge=16,
        prefix_len=1,
        mlp_ratio=2,
        vocab_size=64,
        head_stages=1,
    )
    values = {"encoder": encoder, "gamma": 1.0, **overrides}
    return TrackerConfig(**values).validate()


def selection_oracle(scores: np.ndarray, gamma: float) -> set[int]:
    """Full sort by (score descending, index ascending), keep ceil(gamma * n)."""
    n = len(scores)
    ranked = sorted(range(n), key=lambda i: (-scores[i], i))
    keep = max(1, math.ceil(round(gamma * n, 9)))
    return set(ranked[:keep])


def check_selection(cases: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for case in range(cases):
        n = int(rng.integers(4, 257))
        scores = rng.random(n)
        ties = rng.choice(n, size=int(rng.integers(0, n // 2 + 1)), replace=False)
        scores[ties] = scores[rng.integers(n)]
        gamma = float(rng.choice([1.0, 0.85, 0.7, 0.5, rng.uniform(0.01, 1.0)]))
        got = set(select_tokens(scores, gamma).kept_indices.tolist())
        if got != selection_oracle(scores, gamma):
            return SuiteResult("selection", False, f"case {case}: n={n} gamma={gamma}")
    return SuiteResult("selection", True, f"{cases} random score vectors")


def _same(a: Tensor, b: Tensor, x: np.ndarray, y: np.ndarray) -> bool:
    return np.array_equal(a.data, x) and np.array_equal(b.data, y)


def check_exchange(cases: int = 500, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for case in range(cases):
        n, c = int(rng.integers(1, 20)), int(rng.integers(1, 17))
        f_rgb, f_tir = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        chosen = rng.choice(c, size=int(rng.integers(0, c + 1)), replace=False)
        plan = ExchangePlan(np.sort(chosen), sigma=len(chosen) / c)
        a, b = exchange_channels(f_rgb, f_tir, plan)
        before = np.sort(np.concatenate([f_rgb.ravel(), f_tir.ravel()]))
        after = np.sort(np.concatenate([a.data.ravel(), b.data.ravel()]))
        aa, bb = exchange_channels(a, b, plan)
        relevance = rng.normal(size=(c, c))
        none = exchange_channels(f_rgb, f_tir, plan_exchange(relevance, 0.0))
        full = exchange_channels(f_rgb, f_tir, plan_exchange(relevance, 1.0))
        problems = [
            ("multiset", not np.array_equal(before, after)),
            ("involution", not _same(aa, bb, f_rgb, f_tir)),
            ("sigma=0", not _same(*none, f_rgb, f_tir)),
            ("sigma=1", not _same(*full, f_tir, f_rgb)),
        ]
        failed = [name for name, bad in problems if bad]
        if failed:
            return SuiteResult("exchange", False, f"case {case}: {', '.join(failed)}")
    return SuiteResult("exchange", True, f"{cases} random triples")


def check_knowledge_base(ops: int = 10_000, seed: int = 0) -> SuiteResult:
    """Random inserts and retrievals against an exhaustive list-scan oracle."""
    rng = np.random.default_rng(seed)
    pool = rng.normal(size=(12, 6))
    kb = KnowledgeBase(capacity=4, threshold=1.0)
    oracle: list[tuple[int, np.ndarray]] = []
    serial = 0
    for op in range(ops):
        if rng.random() < 0.5:
            vec = pool[rng.integers(len(pool))]
            duplicate = any(np.array_equal(vec, v) for _, v in oracle)
            decision = kb.insert(vec, frame=op)
            if duplicate and decision.inserted:
                return SuiteResult("knowledge_base", False, f"op {op}: duplicate inserted")
            if decision.inserted:
                oracle.append((serial, vec))
                serial += 1
                if len(oracle) > 4:
                    oracle.pop(0)
        else:
            query = rng.normal(size=6)
            k = int(rng.integers(1, 6))
            got = kb.retrieve(query, k)
            ranked = sorted(oracle, key=lambda e: (-cosine_similarity(query, e[1]), -e[0]))[:k]
            same = len(got) == len(ranked) and all(
                np.array_equal(f.data, v) for f, (_, v) in zip(got.features, ranked)
            )
            if not same:
                return SuiteResult("knowledge_base", False, f"op {op}: retrieval differs")
        if len(kb) > 4 or len(kb) != len(oracle):
            return SuiteResult("knowledge_base", False, f"op {op}: size {len(kb)}")
    return SuiteResult("knowledge_base", True, f"{ops} random operations")


def _brute_force(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """PR@20, SR and NPR@0.2 with plain loops."""
    n = len(pred)
    errors, overlaps, normed = [], [], []
    for p, g in zip(pred, gt):
        pcx, pcy = p[0] + p[2] / 2, p[1] + p[3] / 2
        gcx, gcy = g[0] + g[2] / 2, g[1] + g[3] / 2
        errors.append(math.hypot(pcx - gcx, pcy - gcy))
        normed.append(math.hypot((pcx - gcx) / g[2], (pcy - gcy) / g[3]))
        iw = max(0.0, min(p[0] + p[2], g[0] + g[2]) - max(p[0], g[0]))
        ih = max(0.0, min(p[1] + p[3], g[1] + g[3]) - max(p[1], g[1]))
        inter = iw * ih
        overlaps.append(inter / (p[2] * p[3] + g[2] * g[3] - inter))
    pr = sum(e <= 20.0 for e in errors) / n
    thresholds = [i / 20 for i in range(21)]
    sr = sum(sum(o > t for o in overlaps) / n for t in thresholds) / len(thresholds)
    npr = sum(e <= 0.2 for e in normed) / n
    return pr, sr, npr


def check_metrics(cases: int = 1000, seed: int = 0) -> SuiteResult:
    gt = np.array([[10.0, 10.0, 20.0, 20.0], [30.0, 12.0, 20.0, 20.0], [50.0, 14.0, 20.0, 20.0]])
    perfect = metrics.summarize(gt, gt, gt)
    expected = {"PR": 1.0, "SR": 20 / 21, "NPR": 1.0, "MPR": 1.0, "MSR": 20 / 21}
    for key, want in expected.items():
        if abs(getattr(perfect, key) - want) > 1e-12:
            return SuiteResult("metrics", False, f"perfect track {key}={getattr(perfect, key)}")
    far = gt + np.array([100.0, 100.0, 0.0, 0.0])
    zero = metrics.summarize(far, gt)
    if zero.PR != 0.0 or zero.SR != 0.0 or zero.NPR != 0.0:
        return SuiteResult("metrics", False, f"disjoint track {zero}")
    if metrics.max_metrics(gt, [far, gt])[0] != 1.0:
        return SuiteResult("metrics", False, "perfect second stream did not dominate")

    rng = np.random.default_rng(seed)
    for case in range(cases):
        n = int(rng.integers(1, 30))
        g = np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(2, 40, (n, 2))])
        p = np.column_stack([g[:, :2] + rng.normal(0, 15, (n, 2)), rng.uniform(2, 40, (n, 2))])
        alt = g + np.column_stack([rng.normal(0, 3, (n, 2)), np.zeros((n, 2))])
        s = metrics.summarize(p, g, alt)
        pr, sr, npr = _brute_force(p, g)
        pr_alt, sr_alt, _ = _brute_force(p, alt)
        want = (pr, sr, npr, max(pr, pr_alt), max(sr, sr_alt))
        got = (s.PR, s.SR, s.NPR, s.MPR, s.MSR)
        if any(abs(a - b) > 1e-12 for a, b in zip(got, want)):
            return SuiteResult("metrics", False, f"case {case}: {got} != {want}")
    return SuiteResult("metrics", True, f"hand tracks + {cases} random tracks")


def check_identities(seed: int = 0) -> SuiteResult:
    """Exact identities of the degenerate paths."""
    cfg = reduced_config()
    enc = cfg.encoder
    store = ParameterStore.initialize(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    tape = Tape(enabled=False)

    x = Tensor(rng.normal(size=(enc.num_search, enc.channels)))
    if refine_search(x, RetrievalResult(), store, tape) is not x:
        return SuiteResult("identities", False, "refine_search with no retrieval is not identity")

    params = store.copy()
    for name in ("delta1", "delta2", "ln1.b", "ln2.b"):
        params[f"encoder.layer1.{name}"].data[...] = 0.0
    segments = [Tensor(rng.normal(size=(k, enc.channels))) for k in (1, 1, 4, enc.num_search)]
    seq = build_sequence(*segments, tape)
    out, _ = encoder_layer(seq, params, 1, enc, tape)
    if not np.array_equal(out.tokens.data, seq.tokens.data):
        return SuiteResult("identities", False, "zero-scaled encoder layer is not identity")

    f_rgb, f_tir = rng.normal(size=(5, enc.channels)), rng.normal(size=(5, enc.channels))
    a, b = exchange_channels(f_rgb, f_tir, ExchangePlan(np.array([], dtype=int), 0.0))
    if not (np.array_equal(a.data, f_rgb) and np.array_equal(b.data, f_tir)):
        return SuiteResult("identities", False, "empty exchange plan is not identity")
    return SuiteResult("identities", True, "refine, encoder layer, exchange")


def check_losses() -> SuiteResult:
    giou = giou_loss_xywh([0, 0, 2, 2], [1, 1, 2, 2])
    want = 1.0 - (1.0 / 7.0 - 2.0 / 9.0)
    if abs(giou - want) > 1e-12:
        return SuiteResult("losses", False, f"giou loss {giou} != {want}")
    ones = [Tensor(np.array(1.0)) for _ in range(3)]
    total = total_loss(*ones, LossWeights(iou=2.0, l1=5.0)).item()
    if total != 8.0:
        return SuiteResult("losses", False, f"total loss {total} != 8")
    return SuiteResult("losses", True, "giou and weighted total")


def check_pipeline_gradients(
    max_coords: int = 2, seed: int = 0, cfg: TrackerConfig | None = None
) -> SuiteResult:
    """Finite-difference check of every parameter through one training loss.

    Runs on the desk configuration with all search tokens kept unless ``cfg``
    is given; ``max_coords`` coordinates are sampled per parameter.
    """
    from thermotrack.harness.synthetic import TargetSpec, gen_sequence
    from thermotrack.harness.train import build_sample, sample_loss
    from thermotrack.model.network import TrackerNet

    cfg = TrackerConfig(gamma=1.0, seed=seed).validate() if cfg is None else cfg
    crop = cfg.encoder.search_edge
    spec = TargetSpec(color="red", size=crop // 4, speed=1.0)
    seq = gen_sequence(spec, length=4, edge=2 * crop, seed=seed)
    sample = build_sample(seq, np.random.default_rng(seed), cfg, augment=False)
    store = ParameterStore.initialize(cfg)
    net = TrackerNet(store, cfg)
    report = check_gradients(
        lambda tape: sample_loss(net, sample, tape).total,
        dict(store.items()),
        max_coords=max_coords,
        seed=seed,
    )
    detail = f"{report.n_checked} coordinates, max rel error {report.max_rel_error:.2e}"
    if not report.passed(1e-3):
        detail += f" at {report.worst}"
    return SuiteResult("gradients", report.passed(1e-3), detail)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "selection": check_selection,
    "exchange": check_exchange,
    "knowledge_base": check_knowledge_base,
    "metrics": check_metrics,
    "identities": check_identities,
    "losses": check_losses,
    "gradients": check_pipeline_gradients,
}


def _timed(name: str) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        result = SUITES[name]()
    except Exception as exc:  # noqa: BLE001
        result = SuiteResult(name, False, f"{type(exc).__name__}: {exc}")
    result.seconds = time.perf_counter() - t0
    return result


def run_suites(names: list[str] | None = None, jobs: int = 1) -> list[SuiteResult]:
    """Run the named suites (all by default), in order of ``names``."""
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        msg = f"unknown suites {unknown}; choose from {list(SUITES)}"
        raise ValueError(msg)
    if jobs <= 1:
        return [_timed(n) for n in names]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_timed, names))
