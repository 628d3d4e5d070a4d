"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary) before
asserting, so a failing criterion still reports its measured numbers.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st

from acceptance_log import record
from gradcheck import PATHS, analytic, loss_value, toy_episode
from test_split import check_split_invariants
from oogen import autodiff as ad
from oogen.episode import corruption_slot, curriculum_shots
from oogen.evaluation import (
    TIE_RULES, SplitContext, mann_whitney_counts, rank_split, roc_auc_exact,
)
from oogen.graph import Vocabulary, build_graph
from oogen.model import EmbeddedTask, ModelConfig, ModelParams, build_support_index, inductive_embed, score, \
    transductive_embed
from oogen.split import InsufficientEntitiesError, SplitConfig, make_split
from oogen.synthetic import planted_graph, synthetic_benchmark
from oogen import cli
from oogen.estimator import GraphExtrapolationNetwork
from oogen.graph import write_triplet_file

GRAD_TOL = 1e-6
FD_STEP = 1e-5


# --- 1: gradients against central finite differences --------------------------------

def _full_fd(params, ep, seen, kw, name):
    """Elementwise central differences of the loss w.r.t. one tensor."""
    out = np.zeros_like(params[name])
    base = params[name]
    for i in np.ndindex(base.shape):
        if name == "entity_emb" and not seen[i[0]]:
            continue  # unseen rows are held at zero and never read
        keep = base[i]
        base[i] = keep + FD_STEP
        plus = loss_value(params, ep, seen, kw)
        base[i] = keep - FD_STEP
        minus = loss_value(params, ep, seen, kw)
        base[i] = keep
        out[i] = (plus - minus) / (2 * FD_STEP)
    return out


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    worst, worst_where, n_eps = 0.0, "", 0
    for k, path in enumerate(PATHS):
        params, ep, seen, kw = toy_episode(path, seed=k)
        n_eps += 1
        _, grads = analytic(params, ep, seen, kw)
        for name in params.names():
            fd = _full_fd(params, ep, seen, kw, name)
            a = grads[name]
            scale = max(np.linalg.norm(a), np.linalg.norm(fd))
            if scale == 0.0:
                continue
            err = np.linalg.norm(a - fd) / scale
            if err > worst:
                worst, worst_where = err, f"{path}/{name}"
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_TOL and n_eps >= 5 and elapsed < 60
    record(1, ok, f"{n_eps} episodes over {len(PATHS)} paths, worst rel err {worst:.2e} ({worst_where}), "
                  f"{elapsed:.1f}s")
    assert ok


# --- 2: ranking against exhaustive re-scoring ------------------------------------

def test_criterion_02_ranking_oracle():
    start = time.perf_counter()
    vocab, _, split = synthetic_benchmark(seed=4)
    cfg = ModelConfig.for_vocab(vocab, dim=8, n_bases=4, dropout=0.3)
    params = ModelParams.initialize(cfg, np.random.default_rng(4), split.seen_mask())
    for name in params.names():
        if name != "entity_emb":
            params.tensors[name] += np.random.default_rng(5).normal(0.0, 0.2, params[name].shape)
    seed, n_samples = 17, 3
    ctx = SplitContext(split, "test", 3, seed)
    results = rank_split(params, split, "test", transductive=True, stochastic=True, shots=3, n_samples=n_samples,
                         seed=seed, context=ctx)
    pick = np.random.default_rng(0).choice(len(results), size=min(100, len(results)), replace=False)

    # oracle: its own filter set and candidate pool, per-triplet scalar scoring
    known = split.known_triplets()
    pool = sorted(set(np.flatnonzero(split.seen_mask()).tolist()) | set(split.entities("test")))
    emb = EmbeddedTask(params, ctx.task, split.seen_mask(), vocab, transductive=True, stochastic=True)
    queries = ctx.task.open_queries()
    mismatches = 0
    for j in pick.tolist():
        res = results[j]
        e = res.entity
        i = ctx.task.entities.index(e)
        q_list = queries[i].tolist()
        q_idx = q_list.index(list(res.triplet))
        q = list(res.triplet)
        slot = corruption_slot(q, e)
        rng = np.random.default_rng([seed, e, q_idx])
        tables = [emb.sample(rng) for _ in range(n_samples)]

        def f(trip):
            return sum(score(params, emb.vector(trip[0], t, e), trip[1], emb.vector(trip[2], t, e))
                       for t in tables) / n_samples

        true = f(q)
        greater = equal = 0
        for c in pool:
            if c == q[slot]:
                continue
            alt = list(q)
            alt[slot] = c
            if tuple(alt) in known:
                continue
            s = f(alt)
            greater += s > true
            equal += s == true
        want = {"optimistic": 1 + greater, "pessimistic": 1 + greater + equal, "mean": 1 + greater + equal / 2}
        mismatches += any(res.rank(rule) != want[rule] for rule in TIE_RULES)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and len(pick) == 100 and elapsed < 60
    record(2, ok, f"{len(pick)} queries, {mismatches} rank mismatches across {len(TIE_RULES)} tie rules, "
                  f"{elapsed:.1f}s")
    assert ok


# --- 3: curriculum schedule --------------------------------------------------------

def test_criterion_03_curriculum_formula():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        max_it = int(rng.integers(1, 10 ** 6))
        i = int(rng.integers(1, max_it + 1))
        k = int(rng.integers(1, 20))
        direct = math.floor(math.log2(max_it / i)) + k
        exact = max(j for j in range(64) if i * 2 ** j <= max_it) + k
        got = curriculum_shots(i, max_it, k)
        bad += not (got == direct == exact)
    record(3, bad == 0, f"1000 (i, max_iteration, K) combinations, {bad} mismatches")
    assert bad == 0


# --- 4: transductive layer reduces to the inductive one ---------------------------------

def test_criterion_04_layer_consistency():
    rng = np.random.default_rng(4)
    n_ent, n_raw, dim = 30, 3, 5
    vocab = Vocabulary(tuple(f"e{i}" for i in range(n_ent)), tuple(f"r{i}" for i in range(n_raw)), True)
    differ = 0
    for _ in range(1000):
        seen = rng.random(n_ent) < 0.6
        unseen = np.flatnonzero(~seen)
        if len(unseen) < 2:
            seen[:2] = False
            unseen = np.flatnonzero(~seen)
        cfg = ModelConfig(n_ent, 2 * n_raw, n_raw, dim=dim, n_bases=int(rng.integers(1, 4)))
        p = ModelParams.initialize(cfg, rng, seen)
        p.tensors["mu_bases"] = p["ind_bases"].copy()
        p.tensors["mu_coeffs"] = p["ind_coeffs"].copy()
        p.tensors["mu_self"] = np.zeros((dim, dim))
        ents = rng.choice(unseen, size=int(rng.integers(1, min(4, len(unseen)) + 1)), replace=False).tolist()
        supports = []
        for e in ents:
            rows = []
            for _ in range(int(rng.integers(1, 6))):
                other = int(rng.integers(0, n_ent))
                r = int(rng.integers(0, n_raw))
                rows.append([e, r, other] if rng.random() < 0.5 else [other, r, e])
            supports.append(np.array(rows, dtype=np.int64))
        idx = build_support_index(ents, supports, vocab)
        P = p.as_vars()
        ind = inductive_embed(P, idx, seen).value
        zero_phi = ad.Var(np.zeros((len(ents), dim)))
        trans = transductive_embed(P, "mu", idx, seen, zero_phi).value
        differ += not np.array_equal(ind, trans)
    record(4, differ == 0, f"1000 random support sets, {differ} not bit-identical")
    assert differ == 0


# --- 5/6: synthetic benchmark -------------------------------------------------------
#
# 300 entities, 8 relations (plus inverses), 60 clusters of 5; 60 unseen entities
# split 40/5/15 into meta-train/valid/test, evaluated 3-shot. The oracle that
# knows the planted clusters reaches test MRR ~0.47 on this split.

BENCH = dict(dim=32, n_bases=16, n_task_entities=40, num_neg=16, max_iteration=1500, eval_every=250,
             patience=0, pretrain_steps=1000, pretrain_batch=512, lr=1e-3, shots=3, mc_test=10)
MIN_GAIN_OVER_UNTRAINED = 0.15
MIN_UU_H3_GAIN = 0.05
STOCHASTIC_SLACK = 0.02
ABLATION_SLACK = 0.02
ABLATION_SEEDS = (0, 1, 2)


def _fit(split, **changes):
    return GraphExtrapolationNetwork(**{**BENCH, **changes}).fit(split)


def _summary(rep):
    uu = rep.categories["unseen_unseen"]
    return {"mrr": rep.mrr, "h3": rep.hits[3], "uu_mrr": uu.mrr if uu else float("nan"),
            "uu_h3": uu.hits[3] if uu else float("nan")}


@pytest.fixture(scope="module")
def benchmark_runs():
    start = time.perf_counter()
    _, _, split = synthetic_benchmark(seed=0)
    runs, reports = {}, []
    variants = {
        "untrained": dict(mode="inductive", stochastic=False, max_iteration=0, pretrain_steps=0),
        "I-GEN": dict(mode="inductive", stochastic=False),
        "T-GEN det": dict(mode="transductive", stochastic=False),
        "T-GEN": dict(mode="transductive", stochastic=True),
    }
    for name, changes in variants.items():
        est = _fit(split, **changes)
        rep = est.evaluate(split, "test")
        runs[name] = _summary(rep)
        reports.extend(est.evaluate(split, "test", rule).to_dict() for rule in TIE_RULES)
    runs["_seconds"] = time.perf_counter() - start
    runs["_reports"] = reports
    return runs


@pytest.fixture(scope="module")
def benchmark_reports(benchmark_runs):
    return benchmark_runs["_reports"]


def test_criterion_05_directional_reproduction(benchmark_runs):
    r = benchmark_runs
    gain = r["I-GEN"]["mrr"] - r["untrained"]["mrr"]
    uu_gain = r["T-GEN"]["uu_h3"] - r["I-GEN"]["uu_h3"]
    stoch = r["T-GEN"]["uu_mrr"] - r["T-GEN det"]["uu_mrr"]
    checks = {
        "a": gain >= MIN_GAIN_OVER_UNTRAINED,
        "b": uu_gain >= MIN_UU_H3_GAIN,
        "c": stoch >= -STOCHASTIC_SLACK,
        "time": r["_seconds"] < 30 * 60,
    }
    table = "; ".join(f"{k}: MRR {v['mrr']:.3f} U-U MRR {v['uu_mrr']:.3f} U-U H@3 {v['uu_h3']:.3f}"
                      for k, v in r.items() if not k.startswith("_"))
    detail = (f"(a) I-GEN - untrained = {gain:+.3f} [>= {MIN_GAIN_OVER_UNTRAINED}] "
              f"{'ok' if checks['a'] else 'MISSED'}; "
              f"(b) U-U H@3 T-GEN - I-GEN = {uu_gain:+.3f} [>= {MIN_UU_H3_GAIN}] {'ok' if checks['b'] else 'MISSED'}; "
              f"(c) U-U MRR stochastic - deterministic = {stoch:+.3f} [>= -{STOCHASTIC_SLACK}] "
              f"{'ok' if checks['c'] else 'MISSED'}; {r['_seconds']:.0f}s | {table}")
    record(5, all(checks.values()), detail)
    assert all(checks.values()), detail


def test_criterion_06_ablation_direction():
    start = time.perf_counter()
    _, _, split = synthetic_benchmark(seed=0)
    scores = {"full": [], "random init": [], "fixed shots": []}
    for seed in ABLATION_SEEDS:
        for name, changes in (("full", {}), ("random init", dict(pretrain_steps=0)),
                              ("fixed shots", dict(curriculum=False))):
            est = _fit(split, mode="inductive", stochastic=False, seed=seed, **changes)
            scores[name].append(est.evaluate(split, "test").mrr)
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    pre_ok = mean["full"] >= mean["random init"] - ABLATION_SLACK
    cur_ok = mean["full"] >= mean["fixed shots"] - ABLATION_SLACK
    elapsed = time.perf_counter() - start
    record(6, pre_ok and cur_ok,
           f"mean test MRR over seeds {ABLATION_SEEDS}: pretrained {mean['full']:.3f} vs random init "
           f"{mean['random init']:.3f} ({'ok' if pre_ok else 'MISSED'}); curriculum {mean['full']:.3f} vs fixed "
           f"{mean['fixed shots']:.3f} ({'ok' if cur_ok else 'MISSED'}); {elapsed:.0f}s")
    assert pre_ok and cur_ok


# --- 7: byte-identical pipeline ------------------------------------------------------

def _pipeline(root, data):
    root.mkdir(exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text("seed = 21\n[split]\nmin_degree = 4\nmax_degree = 1000000\nn_unseen = 60\nratios = 30,10,20\n"
                   "[model]\ndim = 8\nn_bases = 4\n[pretrain]\nsteps = 50\n"
                   "[train]\nmax_iteration = 40\nn_task_entities = 10\nnum_neg = 4\neval_every = 20\n"
                   "[eval]\nmc_samples = 3\nranks_csv = true\n")
    base = ["--config", str(cfg)]
    man, out = root / "manifest", root / "out"
    steps = [["split", "--data.triplets", str(data), "--out", str(man)],
             ["pretrain", "--data.manifest", str(man), "--out", str(out)],
             ["train", "--data.manifest", str(man), "--data.init", str(out / "pretrain.ckpt"), "--out", str(out)],
             ["eval", "--data.manifest", str(man), "--data.checkpoint", str(out / "model.ckpt"), "--out", str(out)]]
    for argv in steps:
        assert cli.main([argv[0], *base, *argv[1:]]) == 0
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "run.cfg")
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_07_determinism(tmp_path):
    data = tmp_path / "kg.tsv"
    write_triplet_file(data, planted_graph(300, 60, 8, seed=0))
    root = tmp_path / "run"
    first = _pipeline(root, data)
    second = _pipeline(root, data)
    differing = sorted(k for k in first if first[k] != second.get(k))
    key_files = {"out/model.ckpt", "out/report.json"}
    ok = not differing and key_files <= set(first) and set(first) == set(second)
    record(7, ok, f"{len(first)} output files compared byte-for-byte, differing: {differing or 'none'}")
    assert ok


# --- 8: split conservation ---------------------------------------------------------

@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 10 ** 4), st.integers(1, 6), st.booleans())
def _conservation_property(seed, n_rows, n_rel, inverses):
    rng = np.random.default_rng(seed)
    n_ent = int(rng.integers(5, 400))
    rows = rng.integers(0, [n_ent, n_rel, n_ent], size=(n_rows // (2 if inverses else 1) or 1, 3))
    names = [(f"e{h}", f"r{r}", f"e{t}") for h, r, t in rows.tolist()]
    vocab, g = build_graph(names, add_inverses=inverses)
    cfg = SplitConfig(min_degree=int(rng.integers(1, 4)), max_degree=10 ** 6,
                      n_unseen=int(rng.integers(1, max(2, vocab.n_entities // 3))), ratios=(2, 1, 1), seed=seed)
    try:
        split = make_split(g, vocab, cfg)
    except InsufficientEntitiesError:
        assume(False)  # refused up front; nothing to conserve
    check_split_invariants(g, vocab, split)


def test_criterion_08_split_conservation():
    try:
        _conservation_property()
        vocab, g, split = synthetic_benchmark(seed=0)
        check_split_invariants(g, vocab, split)
    except AssertionError as exc:
        record(8, False, f"conservation violated: {exc}")
        raise
    record(8, True, "60 random graphs (<= 10^4 triplets) plus the benchmark split reconstruct exactly")


# --- 9: metric sanity ---------------------------------------------------------------

def _sane(report_dict) -> bool:
    h1, h3, h10, mrr = (report_dict[k] for k in ("hits@1", "hits@3", "hits@10", "mrr"))
    return h1 <= mrr and h1 <= h3 <= h10


def test_criterion_09_metric_sanity(benchmark_reports):
    checked = bad = 0
    for rep in benchmark_reports:
        for sub in [rep, *(v for k, v in rep.items() if isinstance(v, dict))]:
            checked += 1
            bad += not _sane(sub)
    rng = np.random.default_rng(9)
    roc_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 1001))
        s = rng.integers(0, 20, n).astype(float)
        y = rng.random(n) < rng.random()
        if y.all() or not y.any():
            continue
        pos, neg = s[y], s[~y]
        wins = int((pos[:, None] > neg[None, :]).sum())
        ties = int((pos[:, None] == neg[None, :]).sum())
        g, e, npos, nneg = mann_whitney_counts(s, y)
        roc_bad += (g, e) != (wins, ties) or roc_auc_exact(s, y) != (2 * wins + ties) / (2 * len(pos) * len(neg))
    ok = bad == 0 and roc_bad == 0 and checked > 0
    record(9, ok, f"{checked} metric blocks ({bad} inconsistent); ROC vs pairwise count: {roc_bad} mismatches")
    assert ok


def test_criterion_10_optional_real_data():
    record(10, None, "optional overnight real-data run; not part of the automated suite")
    pytest.skip("optional extended check")
