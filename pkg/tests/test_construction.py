"""Trainable masked architecture: gradients, anchoring, and training dynamics.

Every analytic gradient is checked against central finite differences of the
implemented objective (same truncation, same units), so agreement is exact
up to difference-quotient error.
"""

import math

import numpy as np
import pytest

from canonbpe import NGramLM, train_ngram
from canonbpe.conditioning import LocalModel, exact_Z, local_next_distribution
from canonbpe.construction import (
    CanonicalizedArchitecture,
    InfiniteLossError,
    TabularLogitLM,
    constrained_next_distribution,
    finetune,
    finetune_objective,
    grad_log_loss,
    kl_to_base,
    log_loss,
)
from canonbpe.lm import sequence_log_prob


ALL_CTX = [(-1,)] + [(t,) for t in range(6)]  # order-2 contexts over the toy alphabet


def random_arch(toy3, oracle, rng, scale=1.0, eos_bias=2.0):
    base = TabularLogitLM(toy3, order=2)
    for ctx in ALL_CTX:
        row = rng.normal(0, scale, 7)
        row[-1] += eos_bias  # keep string lengths short so tails are negligible
        base.logits_for(ctx)[:] = row
    return CanonicalizedArchitecture(base, oracle)


def fd_grad(objective, model, h=1e-5):
    """Central finite differences over every materialized logit entry."""
    out = {}
    for ctx in list(model.logits):
        row = model.logits[ctx]
        g = np.zeros_like(row)
        for j in range(len(row)):
            orig = row[j]
            row[j] = orig + h
            up = objective()
            row[j] = orig - h
            down = objective()
            row[j] = orig
            g[j] = (up - down) / (2 * h)
        out[ctx] = g
    return out


def grad_distance(analytic, numeric):
    keys = set(analytic) | set(numeric)
    diff = 0.0
    norm = 0.0
    for ctx in keys:
        a = analytic.get(ctx, np.zeros(7))
        b = numeric.get(ctx, np.zeros(7))
        diff += float(np.sum((a - b) ** 2))
        norm += float(np.sum(a**2))
    return math.sqrt(diff) / max(1.0, math.sqrt(norm))


def directional_fd_check(objective, model, analytic, rng, n_directions=5, h=1e-5, tol=1e-4):
    """Central finite differences along random directions versus the
    analytic directional derivative, relative to the gradient scale."""
    scale = max(1.0, math.sqrt(sum(float(np.sum(g**2)) for g in analytic.values())))
    contexts = list(model.logits)
    for _ in range(n_directions):
        direction = {ctx: rng.normal(0, 1, 7) for ctx in contexts}
        norm = math.sqrt(sum(float(np.sum(d**2)) for d in direction.values()))
        for d in direction.values():
            d /= norm
        for ctx, d in direction.items():
            model.logits[ctx] += h * d
        up = objective()
        for ctx, d in direction.items():
            model.logits[ctx] -= 2 * h * d
        down = objective()
        for ctx, d in direction.items():
            model.logits[ctx] += h * d
        numeric = (up - down) / (2 * h)
        expected = sum(
            float(np.dot(analytic.get(ctx, np.zeros(7)), d)) for ctx, d in direction.items()
        )
        assert abs(numeric - expected) <= tol * scale


@pytest.fixture(scope="module")
def frozen_base(toy3, toy3_corpus):
    return train_ngram(toy3_corpus, order=2, alpha=0.5, vocab=toy3)


class TestConstrainedNextDistribution:
    def test_zero_logits_match_uniform_conditioning_numbers(self, toy3, toy3_oracle):
        arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
        dist, normalizer = constrained_next_distribution(arch, [3])
        assert normalizer == pytest.approx(6.0 / 7.0, rel=1e-12)
        assert dist.probs[2] == 0.0
        assert dist.probs[0] == pytest.approx(1.0 / 6.0, rel=1e-12)

    def test_masked_outcomes_zero_for_any_theta(self, toy3, toy3_oracle):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(10):
            arch = random_arch(toy3, toy3_oracle, rng)
            dist, _ = constrained_next_distribution(arch, [2])
            assert dist.probs[2] == 0.0 and dist.probs[4] == 0.0

    def test_wrapper_equals_local_model_at_init(self, toy3, toy3_oracle, toy3_ngram):
        # starting parameters reproduce the plain masked view of the base
        arch = CanonicalizedArchitecture(TabularLogitLM.from_ngram(toy3_ngram), toy3_oracle)
        local = LocalModel(toy3_ngram, toy3_oracle)
        for prefix in ([], [3], [2], [1, 0], [5, 4]):
            a, na = constrained_next_distribution(arch, prefix)
            b, nb = local_next_distribution(local, prefix)
            assert np.allclose(a.probs, b.probs, atol=1e-12)
            assert na == pytest.approx(nb, abs=1e-12)


class TestLogLoss:
    def test_half_probability_is_one_bit(self, single):
        model = NGramLM(single, order=1, alpha=1.0)  # uniform over {a, end}
        assert log_loss(model, [[]]) == pytest.approx(1.0)

    def test_noncanonical_string_infinite(self, toy3, toy3_oracle):
        arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
        with pytest.raises(InfiniteLossError) as err:
            log_loss(arch, [[0], [3, 2]])
        assert err.value.index == 1

    def test_masking_never_hurts_canonical_corpus(self, toy3, toy3_oracle, toy3_corpus):
        rng = np.random.Generator(np.random.PCG64(1))
        corpus = toy3_corpus[:50]
        for _ in range(100):
            arch = random_arch(toy3, toy3_oracle, rng)
            assert log_loss(arch, corpus) <= log_loss(arch.base, corpus) + 1e-12


class TestGradLogLoss:
    def test_matches_finite_differences(self, toy3, toy3_oracle, toy3_corpus):
        rng = np.random.Generator(np.random.PCG64(2))
        for _ in range(20):
            arch = random_arch(toy3, toy3_oracle, rng)
            picks = rng.integers(0, len(toy3_corpus), size=5)
            corpus = [toy3_corpus[int(i)] for i in picks]
            analytic = grad_log_loss(arch, corpus)
            numeric = fd_grad(lambda: log_loss(arch, corpus), arch.base)
            assert grad_distance(analytic, numeric) <= 1e-4

    def test_masked_entries_exactly_zero(self, toy3, toy3_oracle, toy3_corpus):
        # for an order-2 model the mask is constant per context
        rng = np.random.Generator(np.random.PCG64(3))
        arch = random_arch(toy3, toy3_oracle, rng)
        grad = grad_log_loss(arch, toy3_corpus[:50])
        for ctx, row in grad.items():
            if ctx == (-1,):
                continue  # start context masks nothing
            mask = arch.oracle.allowed_next([ctx[0]])
            assert np.all(row[~mask] == 0.0)

    def test_zero_gradient_at_empirical_optimum(self, single):
        # order-1 unmasked model with logits = log empirical conditionals
        corpus = [[0], [], [0, 0], [0]]
        counts = np.zeros(2)
        for tokens in corpus:
            counts[0] += len(tokens)
            counts[1] += 1
        model = TabularLogitLM(single, order=1)
        model.logits_for(())[:] = np.log(counts / counts.sum())
        grad = grad_log_loss(model, corpus)
        assert math.sqrt(sum(float(np.sum(g**2)) for g in grad.values())) < 1e-8


class TestKLToBase:
    def test_zero_at_anchor_point(self, toy3, toy3_oracle, frozen_base):
        # KL of the masked model against itself: the value is exactly the
        # minimum, and the analytic gradient still matches the objective's
        # true first-order behavior (the enumeration-boundary term)
        arch = CanonicalizedArchitecture(TabularLogitLM.from_ngram(frozen_base), toy3_oracle)
        anchor = LocalModel(frozen_base, toy3_oracle)
        value, grad = kl_to_base(arch, anchor, mode="exact", max_len=6)
        assert abs(value) < 1e-10
        directional_fd_check(
            lambda: kl_to_base(arch, anchor, mode="exact", max_len=6)[0],
            arch.base,
            grad,
            np.random.Generator(np.random.PCG64(21)),
        )

    def test_exact_gradient_matches_finite_differences(self, toy3, toy3_oracle, frozen_base):
        rng = np.random.Generator(np.random.PCG64(4))
        for _ in range(5):
            arch = random_arch(toy3, toy3_oracle, rng)
            value, analytic = kl_to_base(arch, frozen_base, mode="exact", max_len=5)
            directional_fd_check(
                lambda: kl_to_base(arch, frozen_base, mode="exact", max_len=5)[0],
                arch.base,
                analytic,
                rng,
            )

    def test_sampled_value_matches_exact(self, toy3, toy3_oracle, frozen_base):
        rng = np.random.Generator(np.random.PCG64(5))
        arch = random_arch(toy3, toy3_oracle, rng)
        exact_value, exact_grad = kl_to_base(arch, frozen_base, mode="exact", max_len=7)
        values = []
        for seed in range(10):
            v, _ = kl_to_base(
                arch,
                frozen_base,
                mode="sampled",
                rng=np.random.Generator(np.random.PCG64(seed)),
                max_len=40,
                n_samples=5000,
            )
            values.append(v)
        values = np.array(values)
        se = values.std(ddof=1) / math.sqrt(len(values))
        assert abs(values.mean() - exact_value) <= 3 * se

    def test_sampled_gradient_tracks_exact(self, toy3, toy3_oracle, frozen_base):
        rng = np.random.Generator(np.random.PCG64(6))
        arch = random_arch(toy3, toy3_oracle, rng)
        _, exact_grad = kl_to_base(arch, frozen_base, mode="exact", max_len=7)
        _, sampled_grad = kl_to_base(
            arch,
            frozen_base,
            mode="sampled",
            rng=np.random.Generator(np.random.PCG64(99)),
            max_len=40,
            n_samples=50_000,
        )
        dot = sum(
            float(np.dot(sampled_grad.get(c, np.zeros(7)), exact_grad.get(c, np.zeros(7))))
            for c in set(sampled_grad) | set(exact_grad)
        )
        norm_s = math.sqrt(sum(float(np.sum(g**2)) for g in sampled_grad.values()))
        norm_e = math.sqrt(sum(float(np.sum(g**2)) for g in exact_grad.values()))
        assert dot / (norm_s * norm_e) > 0.99
        assert 0.9 < norm_s / norm_e < 1.1


class TestFinetune:
    def test_lambda_zero_full_batch_monotone(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
        trace = finetune(
            arch,
            toy3_corpus,
            frozen_base,
            lam=0.0,
            steps=60,
            learning_rate=0.5,
            batch_size=len(toy3_corpus),
            rng=np.random.Generator(np.random.PCG64(7)),
        )
        objectives = [r.objective for r in trace]
        assert all(r.term == "logloss" for r in trace)
        assert all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))

    def test_lambda_one_reaches_anchor_floor(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        # the best any masked model can do against an unmasked anchor is
        # -log2(canonicality rate of the anchor)
        arch = random_arch(toy3, toy3_oracle, np.random.Generator(np.random.PCG64(3)), scale=0.8, eos_bias=1.0)
        before = kl_to_base(arch, frozen_base, mode="exact", max_len=6)[0]
        finetune(
            arch,
            toy3_corpus,
            frozen_base,
            lam=1.0,
            steps=250,
            learning_rate=0.3,
            batch_size=8,
            rng=np.random.Generator(np.random.PCG64(8)),
            kl_samples=64,
            kl_max_len=30,
        )
        after = kl_to_base(arch, frozen_base, mode="exact", max_len=6)[0]
        z, _ = exact_Z(frozen_base, toy3_oracle, 8)
        floor = -math.log2(z)
        assert after < before
        assert after <= floor + 0.02

    def test_fixed_seed_bit_identical(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        traces = []
        thetas = []
        for _ in range(2):
            arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
            trace = finetune(
                arch,
                toy3_corpus[:100],
                frozen_base,
                lam=0.1,
                steps=40,
                learning_rate=0.2,
                batch_size=8,
                rng=np.random.Generator(np.random.PCG64(9)),
                kl_samples=16,
                kl_max_len=20,
            )
            traces.append(trace)
            thetas.append({ctx: row.copy() for ctx, row in arch.base.logits.items()})
        assert traces[0] == traces[1]
        assert set(thetas[0]) == set(thetas[1])
        for ctx in thetas[0]:
            assert np.array_equal(thetas[0][ctx], thetas[1][ctx])

    def test_support_invariance_at_training_snapshots(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        import itertools

        arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
        rng = np.random.Generator(np.random.PCG64(10))

        def assert_canonical_support_only():
            for k in range(4):
                for tokens in itertools.product(range(6), repeat=k):
                    tokens = list(tokens)
                    if not toy3_oracle.is_canonical(tokens):
                        assert sequence_log_prob(arch, tokens) == -math.inf

        for _ in range(4):  # snapshot after every training leg
            finetune(
                arch,
                toy3_corpus[:100],
                frozen_base,
                lam=0.05,
                steps=15,
                learning_rate=0.3,
                batch_size=8,
                rng=rng,
                kl_samples=16,
                kl_max_len=20,
            )
            assert_canonical_support_only()

    def test_blended_objective_decreases(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        arch = CanonicalizedArchitecture(TabularLogitLM(toy3, order=2), toy3_oracle)
        start = finetune_objective(arch, toy3_corpus, frozen_base, lam=0.1, max_len=6)
        finetune(
            arch,
            toy3_corpus,
            frozen_base,
            lam=0.1,
            steps=120,
            learning_rate=0.3,
            batch_size=16,
            rng=np.random.Generator(np.random.PCG64(11)),
            kl_samples=32,
            kl_max_len=20,
        )
        end = finetune_objective(arch, toy3_corpus, frozen_base, lam=0.1, max_len=6)
        assert end < start


class TestHeldOutComparison:
    def test_masked_at_most_unmasked_plus_slack(self, toy3, toy3_oracle, toy3_corpus, frozen_base):
        train, held = toy3_corpus[:400], toy3_corpus[400:]

        def fit(masked):
            model = TabularLogitLM(toy3, order=2)
            target = CanonicalizedArchitecture(model, toy3_oracle) if masked else model
            rng = np.random.Generator(np.random.PCG64(55))
            for _ in range(400):
                picks = rng.integers(0, len(train), size=16)
                batch = [train[int(i)] for i in picks]
                grad = grad_log_loss(target, batch)
                for ctx, row in grad.items():
                    model.logits_for(ctx)[:] -= 0.4 * row
            return log_loss(target, held)

        unmasked_bits = fit(False)
        masked_bits = fit(True)
        assert masked_bits <= unmasked_bits + 0.01
