"""Tests for policies: evaluation, sampling, enumeration and gradients."""

import math

import numpy as np
import pytest
import torch

from aligndistil_lab.errors import (
    ConfigError,
    ContextTooLongError,
    InstanceTooLargeError,
    InvalidContextError,
    NonFiniteError,
    TokenOutOfRangeError,
    VocabularyMismatchError,
)
from aligndistil_lab.policy import (
    TABULAR,
    TINY_NEURAL,
    Policy,
    PrefixTree,
    Sequence,
    check_same_space,
    count_responses,
    enumerate_responses,
    from_checkpoint,
    init_policy,
    logits,
    logsumexp,
    next_dist,
    param_count,
    sample,
    sample_batch,
    seq_log_prob,
    seq_log_probs,
    softmax,
    to_checkpoint,
    value_and_grad,
)
from aligndistil_lab.verify import fd_check, policy_closure
from tests.conftest import tabular


def neural(vocab_size=4, max_context=3, seed=0, prompt_len=1):
    return init_policy(
        TINY_NEURAL,
        vocab_size,
        max_context,
        prompt_len=prompt_len,
        seed=seed,
        embed_dim=4,
        hidden=5,
    )


class TestInitPolicy:
    """Tests for init_policy() and Policy validation."""

    def test_tabular_default_is_uniform(self):
        policy = init_policy(TABULAR, 4, 3)
        dist = next_dist(policy, (1,), (0, 2))
        assert torch.allclose(dist, torch.full((4,), 0.25, dtype=dist.dtype))

    def test_tabular_param_count(self):
        # V^P prompts times sum_k (V-1)^k prefixes, one row of V each
        assert param_count(TABULAR, 3, 3) == 3 * 7 * 3
        assert param_count(TABULAR, 3, 3, prompt_len=2) == 9 * 7 * 3

    def test_neural_param_count(self):
        policy = neural()
        # E, P, W_h, b_h, W_o, b_o
        expected = 4 * 4 + 3 * 4 + 5 * 12 + 5 + 4 * 5 + 4
        assert policy.n_params == expected

    def test_same_seed_same_params(self):
        assert torch.equal(neural(seed=5).params, neural(seed=5).params)

    def test_different_seed_different_params(self):
        assert not torch.equal(neural(seed=5).params, neural(seed=6).params)

    def test_neural_biases_start_at_zero(self):
        policy = neural()
        assert torch.all(policy.params[-4:] == 0)

    def test_params_are_float64(self):
        assert neural().params.dtype == torch.float64
        assert tabular().params.dtype == torch.float64

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            Policy("lstm", 3, 3, torch.zeros(1))

    def test_wrong_param_count(self):
        with pytest.raises(ConfigError):
            Policy(TABULAR, 3, 3, torch.zeros(5))

    def test_tabular_too_large(self):
        with pytest.raises(InstanceTooLargeError):
            Policy(TABULAR, 10, 7, torch.zeros(1))

    def test_vocab_too_small(self):
        with pytest.raises(ConfigError):
            Policy(TABULAR, 1, 3, torch.zeros(1))

    def test_eos_is_last_token(self):
        assert tabular(vocab_size=5).eos == 4


class TestEvaluation:
    """Tests for logits(), next_dist() and context validation."""

    @pytest.mark.parametrize("make", [tabular, neural])
    def test_next_dist_normalized(self, make):
        policy = make()
        dist = next_dist(policy, (0,), (1,))
        assert dist.min() >= 0
        assert math.isclose(float(dist.sum()), 1.0, abs_tol=1e-12)

    def test_logits_shape(self):
        assert logits(neural(), (0,), ()).shape == (4,)

    def test_prefix_at_limit_rejected(self):
        with pytest.raises(ContextTooLongError):
            logits(tabular(), (0,), (0, 1, 0))

    def test_token_out_of_range(self):
        with pytest.raises(TokenOutOfRangeError):
            logits(neural(), (0,), (7,))

    def test_negative_token(self):
        with pytest.raises(TokenOutOfRangeError):
            logits(neural(), (-1,), ())

    def test_eos_inside_prefix(self):
        with pytest.raises(InvalidContextError):
            logits(tabular(), (0,), (2,))

    def test_wrong_prompt_length(self):
        with pytest.raises(InvalidContextError):
            logits(tabular(), (0, 1), ())

    def test_neural_depends_on_prompt(self):
        policy = neural(seed=3)
        assert not torch.allclose(
            logits(policy, (0,), (1,)), logits(policy, (2,), (1,))
        )

    @pytest.mark.parametrize(
        "prompt,prefix", [((0, 3), ()), ((1, 2), (0,)), ((3, 3), (2, 1))]
    )
    def test_neural_matches_numpy_forward_pass(self, prompt, prefix):
        policy = neural(seed=5, prompt_len=2)
        V, T, d, H = 4, 3, 4, 5
        flat = policy.params.numpy()
        sizes = [V * d, T * d, H * 3 * d, H, V * H, V]
        E, P, W_h, b_h, W_o, b_o = np.split(flat, np.cumsum(sizes)[:-1])
        E, P = E.reshape(V, d), P.reshape(T, d)
        W_h, W_o = W_h.reshape(H, 3 * d), W_o.reshape(V, H)
        tokens = list(prompt + prefix)
        f = np.concatenate(
            [E[tokens].mean(axis=0), E[tokens[-1]], P[len(prefix)]]
        )
        expected = W_o @ np.tanh(W_h @ f + b_h) + b_o
        actual = logits(policy, prompt, prefix).numpy()
        np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-12)


class TestLogsumexp:
    """Tests for the max-subtracted log-sum-exp."""

    def test_large_logits_finite(self):
        z = torch.tensor([1000.0, 1000.0], dtype=torch.float64)
        assert math.isclose(float(logsumexp(z)), 1000.0 + math.log(2.0))

    def test_very_negative_logits(self):
        z = torch.tensor([-1000.0, -1001.0], dtype=torch.float64)
        assert math.isfinite(float(logsumexp(z)))

    @pytest.mark.parametrize("c", [-50.0, -3.5, 0.0, 7.25, 50.0])
    def test_softmax_shift_invariance(self, c):
        z = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=torch.float64)
        assert torch.allclose(softmax(z + c), softmax(z), rtol=0, atol=1e-12)


class TestSequenceLogProb:
    """Tests for seq_log_prob() and the terminal forcing convention."""

    def test_matches_sum_of_next_dist(self):
        policy = neural(seed=1)
        seq = Sequence((1,), (0, 3))
        expected = math.log(float(next_dist(policy, (1,), ())[0])) + (
            math.log(float(next_dist(policy, (1,), (0,))[3]))
        )
        assert math.isclose(float(seq_log_prob(policy, seq)), expected)

    def test_forced_eos_contributes_nothing(self):
        policy = tabular(seed=4)
        seq = Sequence((0,), (0, 1, 2))
        expected = math.log(float(next_dist(policy, (0,), ())[0])) + (
            math.log(float(next_dist(policy, (0,), (0,))[1]))
        )
        assert math.isclose(float(seq_log_prob(policy, seq)), expected)

    def test_batch_matches_single(self):
        policy = neural(seed=2)
        seqs = [Sequence((0,), (3,)), Sequence((2,), (1, 0, 3))]
        batch = seq_log_probs(policy, seqs)
        for i, seq in enumerate(seqs):
            assert math.isclose(
                float(batch[i]), float(seq_log_prob(policy, seq))
            )

    def test_response_without_eos(self):
        with pytest.raises(InvalidContextError):
            seq_log_prob(tabular(), Sequence((0,), (0, 1)))

    def test_response_too_long(self):
        with pytest.raises(ContextTooLongError):
            seq_log_prob(tabular(), Sequence((0,), (0, 1, 0, 2)))

    def test_empty_response(self):
        with pytest.raises(InvalidContextError):
            seq_log_prob(tabular(), Sequence((0,), ()))


class TestEnumeration:
    """Tests for enumerate_responses() and PrefixTree."""

    def test_count(self):
        responses = enumerate_responses(3, 3)
        assert len(responses) == count_responses(3, 3) == 7
        assert len(set(responses)) == 7

    def test_every_response_ends_with_single_eos(self):
        for response in enumerate_responses(4, 3):
            assert response[-1] == 3
            assert 3 not in response[:-1]

    def test_single_position_context(self):
        # T_max=1: the only response is EOS itself
        assert enumerate_responses(3, 1) == [(2,)]

    def test_too_large(self):
        with pytest.raises(InstanceTooLargeError):
            enumerate_responses(10, 7)

    @pytest.mark.parametrize("make", [tabular, neural])
    def test_probabilities_sum_to_one(self, make):
        policy = make()
        V, T = policy.vocab_size, policy.max_context
        total = math.fsum(
            math.exp(float(seq_log_prob(policy, Sequence((1,), y))))
            for y in enumerate_responses(V, T)
        )
        assert math.isclose(total, 1.0, abs_tol=1e-12)

    def test_tree_matches_seq_log_probs(self):
        policy = neural(seed=7)
        tree = PrefixTree(4, 3, [(0,), (2,)])
        logp = tree.sequence_log_probs(tree.step_log_probs(policy))
        direct = seq_log_probs(policy, tree.sequences)
        assert torch.allclose(logp, direct, atol=1e-12)

    def test_tree_probabilities_sum_per_prompt(self):
        policy = tabular(seed=9)
        tree = PrefixTree(3, 3, [(0,), (1,)])
        probs = torch.exp(tree.sequence_log_probs(tree.step_log_probs(policy)))
        for i in range(2):
            total = float(probs[tree.prompt_index == i].sum())
            assert math.isclose(total, 1.0, abs_tol=1e-12)

    def test_path_sums(self):
        tree = PrefixTree(3, 3, [(0,)])
        values = torch.arange(len(tree), dtype=torch.float64)
        sums = tree.path_sums(values)
        for i, (_, prefix) in enumerate(tree.contexts):
            expected = sum(
                float(values[tree.contexts.index(((0,), prefix[:k]))])
                for k in range(len(prefix) + 1)
            )
            assert float(sums[i]) == expected

    def test_forced_marks_last_depth(self):
        tree = PrefixTree(3, 3, [(0,)])
        for forced, (_, prefix) in zip(tree.forced.tolist(), tree.contexts):
            assert forced == (len(prefix) == 2)


class TestSampling:
    """Tests for sample() and sample_batch()."""

    def test_same_seed_same_samples(self):
        policy = neural(seed=3)
        prompts = [(0,), (1,), (2,)] * 5
        a = sample_batch(policy, prompts, np.random.default_rng(11))
        b = sample_batch(policy, prompts, np.random.default_rng(11))
        assert a == b

    def test_responses_are_well_formed(self, rng):
        policy = neural(seed=3)
        for seq in sample_batch(policy, [(0,)] * 50, rng):
            assert seq.response[-1] == policy.eos
            assert policy.eos not in seq.response[:-1]
            assert len(seq.response) <= policy.max_context

    def test_max_context_one_gives_eos(self, rng):
        seq = sample(neural(), (0,), rng, max_context=1)
        assert seq.response == (3,)

    def test_limit_above_policy(self, rng):
        with pytest.raises(ContextTooLongError):
            sample(neural(), (0,), rng, max_context=4)

    def test_frequencies_match_probabilities(self):
        policy = tabular(vocab_size=2, max_context=2, seed=5)
        rng = np.random.default_rng(0)
        seqs = sample_batch(policy, [(0,)] * 20000, rng)
        freq = sum(s.response == (1,) for s in seqs) / len(seqs)
        p_eos = float(next_dist(policy, (0,), ())[1])
        assert abs(freq - p_eos) < 0.02


class TestGradients:
    """Tests for value_and_grad() against central finite differences."""

    def test_tabular_matches_fd(self):
        policy = tabular(seed=2)
        seqs = [Sequence((0,), (1, 0, 2)), Sequence((1,), (2,))]

        def loss(p):
            return -seq_log_probs(p, seqs).sum()

        analytic = value_and_grad(policy, loss)[1]
        error = fd_check(
            policy_closure(policy, loss), policy.params, analytic=analytic
        )
        assert error < 1e-6

    def test_neural_matches_fd(self):
        policy = neural(seed=4)
        seqs = [Sequence((0,), (1, 3)), Sequence((2,), (0, 1, 3))]

        def loss(p):
            return -seq_log_probs(p, seqs).sum()

        analytic = value_and_grad(policy, loss)[1]
        closure = policy_closure(policy, loss)
        h = 1e-5
        numeric = torch.zeros_like(policy.params)
        for i in range(policy.n_params):
            step = torch.zeros_like(policy.params)
            step[i] = h
            numeric[i] = (
                float(closure(policy.params + step))
                - float(closure(policy.params - step))
            ) / (2 * h)
        assert torch.allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_value_returned(self):
        policy = init_policy(TABULAR, 3, 3)
        value, _ = value_and_grad(
            policy, lambda p: seq_log_prob(p, Sequence((0,), (2,)))
        )
        assert math.isclose(value, math.log(1 / 3))

    def test_nan_loss_raises(self):
        with pytest.raises(NonFiniteError):
            value_and_grad(
                tabular(), lambda p: p.params.sum() * float("nan")
            )

    def test_constant_loss_has_zero_grad(self):
        _, gradient = value_and_grad(tabular(), lambda p: 1.5)
        assert torch.all(gradient == 0)


class TestSpaces:
    """Tests for check_same_space() and checkpoints."""

    def test_mismatch(self):
        with pytest.raises(VocabularyMismatchError):
            check_same_space(tabular(vocab_size=3), tabular(vocab_size=4))

    def test_checkpoint_roundtrip(self):
        policy = neural(seed=8)
        loaded = from_checkpoint(to_checkpoint(policy))
        assert torch.equal(loaded.params, policy.params)
        assert loaded.same_space(policy)
        assert loaded.kind == TINY_NEURAL
