"""Self-contained verification sweeps with independent reference oracles.

Each suite returns a list of named check results; the CLI `verify`
subcommand exits nonzero if any check fails. The reference implementations
here are deliberately naive (brute-force counting, exhaustive subsequence
search, quadratic pair enumeration, Monte Carlo integration) so they share
no code path with the implementations they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .gradcheck import grad_check
from .metrics import (
    adjusted_rand_index,
    bleu_n,
    distinct_n,
    rmse,
    rouge_scores,
)
from .moe import (
    ExpertBank,
    GateRouter,
    decompose_experts,
    expert_weight_count,
    moe_forward,
    top_k_select,
)
from .rng import Rng
from . import tensor as T
from .tensor import Tensor
from .vae import GmmPrior, gmm_posterior_batch, kl_closed_form, mc_kl_estimate


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# --- naive reference implementations ---

def naive_bleu(candidate: List[str], reference: List[str], n: int) -> float:
    """BLEU by explicit lists and loops (no Counter machinery)."""
    if len(candidate) == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand_grams = [tuple(candidate[i:i + order])
                      for i in range(len(candidate) - order + 1)]
        ref_grams = [tuple(reference[i:i + order])
                     for i in range(len(reference) - order + 1)]
        clipped = 0
        for gram in set(cand_grams):
            clipped += min(cand_grams.count(gram), ref_grams.count(gram))
        num = clipped if clipped > 0 else 1e-9
        log_sum += math.log(num / max(len(cand_grams), 1))
    geo = math.exp(log_sum / n)
    bp = 1.0 if len(candidate) >= len(reference) else math.exp(
        1.0 - len(reference) / len(candidate))
    return bp * geo


def lcs_reference(a: List[str], b: List[str]) -> int:
    """Longest common subsequence by exhaustive subsequence enumeration for
    short inputs, falling back to memoized recursion."""
    if len(a) <= 12:
        def is_subseq(sub, seq):
            pos = 0
            for tok in seq:
                if pos < len(sub) and sub[pos] == tok:
                    pos += 1
            return pos == len(sub)

        best = 0
        for bits in range(1 << len(a)):
            sub = [a[i] for i in range(len(a)) if bits >> i & 1]
            if len(sub) > best and is_subseq(sub, b):
                best = len(sub)
        return best

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)


def naive_rouge(candidate: List[str], reference: List[str]) -> tuple:
    if len(candidate) == 0:
        return 0.0, 0.0
    hits = 0
    remaining = list(reference)
    for tok in candidate:
        if tok in remaining:
            remaining.remove(tok)
            hits += 1

    def f1(p, r):
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    r1 = f1(hits / len(candidate), hits / len(reference))
    lcs = lcs_reference(candidate, reference)
    rl = f1(lcs / len(candidate), lcs / len(reference))
    return r1, rl


def naive_distinct(texts: List[List[str]], n: int) -> float:
    seen = []
    total = 0
    for text in texts:
        for i in range(len(text) - n + 1):
            gram = tuple(text[i:i + n])
            total += 1
            if gram not in seen:
                seen.append(gram)
    return len(seen) / total if total else 0.0


def naive_rmse(predicted, truth) -> float:
    total = 0.0
    for p, t in zip(predicted, truth):
        total += (p - t) * (p - t)
    return math.sqrt(total / len(predicted))


def ari_pair_enumeration(pred, truth) -> float:
    """ARI from first principles: count agreeing/disagreeing pairs."""
    n = len(pred)
    a = b = c = d = 0  # same/same, same/diff, diff/same, diff/diff
    for i in range(n):
        for j in range(i + 1, n):
            same_pred = pred[i] == pred[j]
            same_true = truth[i] == truth[j]
            if same_pred and same_true:
                a += 1
            elif same_pred:
                b += 1
            elif same_true:
                c += 1
            else:
                d += 1
    total = a + b + c + d
    if total == 0:
        return 1.0
    expected = (a + b) * (a + c) / total
    maximum = 0.5 * ((a + b) + (a + c))
    if maximum == expected:
        return 1.0
    return (a - expected) / (maximum - expected)


# --- suites ---

def _random_tokens(rng: Rng, min_len=0, max_len=12, alphabet=6) -> List[str]:
    length = int(rng.integers(1, max_len - min_len + 1)[0]) + min_len
    letters = "abcdef"
    return [letters[int(i)] for i in rng.integers(length, alphabet)]


def verify_metrics(cases: int = 50, seed: int = 202) -> List[CheckResult]:
    results = []
    rng = Rng(seed)

    worst = {"bleu1": 0.0, "bleu4": 0.0, "rouge1": 0.0, "rougeL": 0.0,
             "distinct1": 0.0, "distinct2": 0.0, "rmse": 0.0, "ari": 0.0}
    for _ in range(cases):
        cand = _random_tokens(rng)
        ref = _random_tokens(rng, min_len=1)
        worst["bleu1"] = max(worst["bleu1"], abs(bleu_n(cand, ref, 1) - naive_bleu(cand, ref, 1)))
        worst["bleu4"] = max(worst["bleu4"], abs(bleu_n(cand, ref, 4) - naive_bleu(cand, ref, 4)))
        r1, rl = rouge_scores(cand, ref)
        n1, nl = naive_rouge(cand, ref)
        worst["rouge1"] = max(worst["rouge1"], abs(r1 - n1))
        worst["rougeL"] = max(worst["rougeL"], abs(rl - nl))
        texts = [_random_tokens(rng) for _ in range(4)]
        texts = [t if t else ["a"] for t in texts]
        worst["distinct1"] = max(worst["distinct1"],
                                 abs(distinct_n(texts, 1) - naive_distinct(texts, 1)))
        worst["distinct2"] = max(worst["distinct2"],
                                 abs(distinct_n(texts, 2) - naive_distinct(texts, 2)))
        size = int(rng.integers(1, 8)[0]) + 2
        pred_v = rng.uniform(size)
        true_v = rng.uniform(size)
        worst["rmse"] = max(worst["rmse"], abs(rmse(pred_v, true_v) - naive_rmse(pred_v, true_v)))
        labels_a = [int(x) for x in rng.integers(size + 4, 3)]
        labels_b = [int(x) for x in rng.integers(size + 4, 3)]
        worst["ari"] = max(worst["ari"],
                           abs(adjusted_rand_index(labels_a, labels_b)
                               - ari_pair_enumeration(labels_a, labels_b)))
    for name, err in worst.items():
        results.append(CheckResult(f"metrics.{name}.vs_naive", err <= 1e-9,
                                   f"max |diff| {err:.2e} over {cases} cases"))

    # frozen worked examples
    brevity_case = bleu_n("the cat sat".split(), "the cat sat down".split(), 1)
    results.append(CheckResult(
        "metrics.bleu.brevity_case",
        abs(brevity_case - math.exp(1.0 - 4.0 / 3.0)) <= 1e-12,
        f"got {brevity_case:.10f}"))
    r1, rl = rouge_scores("a b c d".split(), "a c b d".split())
    results.append(CheckResult("metrics.rouge.worked_case",
                               abs(r1 - 1.0) <= 1e-12 and abs(rl - 0.75) <= 1e-12,
                               f"got ({r1}, {rl})"))
    pooled = distinct_n(["a b".split(), "a b".split()], 2)
    results.append(CheckResult("metrics.distinct.pooling_case",
                               abs(pooled - 0.5) <= 1e-12, f"got {pooled}"))
    return results


def verify_kl(configs: int = 10, samples: int = 100_000,
              seed: int = 77) -> List[CheckResult]:
    results = []
    layouts = [(1, 2), (2, 2), (3, 4), (5, 8), (3, 8),
               (2, 8), (4, 4), (5, 2), (3, 2), (1, 8)][:configs]
    for case, (clusters, dim) in enumerate(layouts):
        rng = Rng(seed + case)
        prior = GmmPrior(rng.normal(clusters),
                         rng.normal(clusters * dim).reshape(clusters, dim),
                         rng.normal(clusters * dim).reshape(clusters, dim) * 0.3)
        mu = rng.normal(dim) * 0.8
        log_var = rng.normal(dim) * 0.4
        gamma = gmm_posterior_batch(prior, mu[None, :])[0]
        closed = kl_closed_form(Tensor(mu), Tensor(log_var), gamma, prior).item()
        est, se = mc_kl_estimate(mu, log_var, prior, Rng(seed + 500 + case),
                                 samples, gamma=gamma)
        gap = abs(closed - est)
        results.append(CheckResult(
            f"kl.closed_vs_mc.k{clusters}d{dim}", gap <= 3 * se,
            f"closed {closed:.5f} vs mc {est:.5f} (3se {3 * se:.5f})"))
    return results


def verify_grads(seeds: int = 20) -> List[CheckResult]:
    results = []
    worst = 0.0
    for seed in range(seeds):
        rng = Rng(3000 + seed)
        c6 = Tensor(rng.normal(6))
        c32 = Tensor(rng.normal(6).reshape(3, 2))
        cases = {
            "softmax": lambda x: (T.softmax(x) * c6).sum(),
            "log_softmax": lambda x: (T.log_softmax(x) * c6).sum(),
            "matmul": lambda x: (x.reshape(2, 3) @ c32).sum(),
            "exp_log": lambda x: T.log(T.exp(x) + 1.0).sum(),
            "tanh": lambda x: T.tanh(x).sum(),
            "sigmoid": lambda x: T.sigmoid(x).mean(),
            "softplus": lambda x: T.softplus(x).sum(),
            "composite": lambda x: -(T.log_softmax(x.reshape(2, 3) @ c32, axis=-1)
                                     * Tensor(np.array([[1, 0], [0, 1.0]]))).sum(),
        }
        for name, f in cases.items():
            err = grad_check(f, Tensor(Rng(seed).normal(6) * 0.7))
            worst = max(worst, err)
    results.append(CheckResult("grads.op_sweep", worst <= 1e-4,
                               f"max relative error {worst:.2e} over {seeds} seeds"))

    moe_cfg = decompose_experts(2, 4, 2, active=2, gates=1)
    bank = ExpertBank(4, moe_cfg, Rng(11))
    router = GateRouter(4, moe_cfg, Rng(12))
    weights = Tensor(Rng(13).normal(4))

    def moe_loss(x):
        return (moe_forward(bank, router, 0, x, k=2) * weights).sum()

    err = grad_check(moe_loss, Tensor(Rng(14).normal(4)))
    results.append(CheckResult("grads.moe_forward", err <= 1e-4,
                               f"relative error {err:.2e}"))
    return results


def verify_moe(random_configs: int = 5, seed: int = 55) -> List[CheckResult]:
    results = []
    cfg = decompose_experts(6, 4096, 2)
    ok = (cfg.expert_count == 12 and cfg.expert_hidden == 2048
          and expert_weight_count(4096, 6, 4096) == expert_weight_count(4096, 12, 2048))
    results.append(CheckResult("moe.identity.reference", ok,
                               f"{cfg.expert_count} experts of width {cfg.expert_hidden}"))

    rng = Rng(seed)
    all_ok = True
    details = []
    for _ in range(random_configs):
        n = int(rng.integers(1, 8)[0]) + 1
        r = int(rng.integers(1, 4)[0]) + 1
        d = r * (int(rng.integers(1, 64)[0]) + 1)
        c = decompose_experts(n, d, r, active=1)
        same = expert_weight_count(32, n, d) == expert_weight_count(
            32, c.expert_count, c.expert_hidden)
        all_ok &= same and n * d == c.expert_count * c.expert_hidden
        details.append(f"({n},{d},{r})")
    results.append(CheckResult("moe.identity.random", all_ok, " ".join(details)))

    # exactly-k evaluation counter
    mcfg = decompose_experts(3, 8, 2, active=2, gates=1)
    bank = ExpertBank(5, mcfg, Rng(1))
    router = GateRouter(5, mcfg, Rng(2))
    bank.eval_count = 0
    for case in range(10):
        moe_forward(bank, router, 0, Tensor(Rng(case).normal(5)), k=2)
    results.append(CheckResult("moe.exactly_k_evaluations", bank.eval_count == 20,
                               f"{bank.eval_count} evaluations over 10 calls, k=2"))

    logits = Rng(9).normal(12)
    shift_ok = np.array_equal(top_k_select(logits, 4), top_k_select(logits + 1e6, 4))
    results.append(CheckResult("moe.topk_shift_invariance", shift_ok, "shift 1e6"))
    return results


SUITES = {
    "grads": verify_grads,
    "kl": verify_kl,
    "moe": verify_moe,
    "metrics": verify_metrics,
}


def run_suites(names: List[str]) -> List[CheckResult]:
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results
