import numpy as np
import numpy.testing as npt
import pytest

from vlab import evalkit as E
from vlab import tokens
from vlab.errors import ConfigError, ContractError


def rng(seed=0):
    return np.random.default_rng(seed)


def brute_force_recall(scores, truths, ks):
    """Ranking oracle: sort each row with (−score, index) keys."""
    out = {}
    q, g = scores.shape
    ranks = []
    for i in range(q):
        order = sorted(range(g), key=lambda j: (-scores[i, j], j))
        ranks.append(order.index(truths[i]) + 1)
    for k in ks:
        out[f"R@{k}"] = 100.0 * sum(r <= k for r in ranks) / q
    out["SUM"] = sum(out[f"R@{k}"] for k in ks)
    return out


class TestRecallAtK:
    def test_identity_matrix_perfect(self):
        m = E.SimMatrix(np.eye(3), np.arange(3))
        got = E.recall_at_k(m, ks=(1, 2, 3))
        assert got["R@1"] == 100.0 and got["SUM"] == 300.0

    def test_identity_ten_default_ks(self):
        m = E.SimMatrix(np.eye(10), np.arange(10))
        assert E.recall_at_k(m)["SUM"] == 300.0

    def test_hand_ranked_case(self):
        m = E.SimMatrix(np.array([[0.9, 0.1], [0.8, 0.2]]), np.array([0, 1]))
        got = E.recall_at_k(m, ks=(1, 2))
        assert got["R@1"] == 50.0 and got["R@2"] == 100.0

    def test_tie_break_prefers_lower_gallery_index(self):
        # all-equal scores: the truth wins at rank 1 only from index 0
        m = E.SimMatrix(np.ones((10, 10)), np.arange(10))
        got = E.recall_at_k(m)
        assert got["R@1"] == 10.0  # only the query with truth index 0

    def test_gallery_too_small_rejected(self):
        with pytest.raises(ConfigError):
            E.recall_at_k(E.SimMatrix(np.eye(3), np.arange(3)))

    def test_nan_rejected(self):
        scores = np.eye(3)
        scores[0, 0] = np.nan
        with pytest.raises(ContractError):
            E.recall_at_k(E.SimMatrix(scores, np.arange(3)), ks=(1,))

    def test_matches_brute_force_on_random_matrices(self):
        r = rng(1)
        for trial in range(200):
            q = int(r.integers(1, 21))
            g = int(r.integers(10, 21))
            scores = np.round(r.normal(size=(q, g)), 1)  # ties likely
            truths = r.integers(0, g, q)
            ks = (1, 5, 10)
            got = E.recall_at_k(E.SimMatrix(scores, truths), ks)
            want = brute_force_recall(scores, truths, ks)
            assert got == pytest.approx(want, abs=1e-12)

    def test_invariant_under_monotone_transforms(self):
        r = rng(2)
        scores = r.normal(size=(6, 12))
        truths = r.integers(0, 12, 6)
        base = E.recall_at_k(E.SimMatrix(scores, truths))
        for f in (lambda s: 3 * s + 1, np.tanh, lambda s: np.exp(s / 4)):
            got = E.recall_at_k(E.SimMatrix(f(scores), truths))
            assert got == base


class TestDualSoftmax:
    def test_singleton(self):
        out = E.dual_softmax(E.SimMatrix(np.array([[3.7]]), np.array([0])))
        assert out.scores[0, 0] == pytest.approx(1.0)

    def test_symmetry_preserved(self):
        m = E.SimMatrix(np.array([[0.6, 0.2], [0.2, 0.6]]), np.array([0, 1]))
        out = E.dual_softmax(m).scores
        npt.assert_allclose(out, out.T, atol=1e-15)

    def test_hand_two_by_two(self):
        scores = np.array([[0.8, 0.3], [0.1, 0.6]])
        t = 100.0

        def soft(v):
            e = np.exp(v - v.max())
            return e / e.sum()

        rows = np.stack([soft(t * scores[0]), soft(t * scores[1])])
        cols = np.stack([soft(t * scores[:, 0]), soft(t * scores[:, 1])], axis=1)
        got = E.dual_softmax(E.SimMatrix(scores, np.array([0, 1])), t).scores
        npt.assert_allclose(got, rows * cols, atol=1e-12)

    def test_truths_unchanged(self):
        m = E.SimMatrix(rng(3).normal(size=(4, 4)), np.array([2, 0, 3, 1]))
        npt.assert_array_equal(E.dual_softmax(m).truths, m.truths)


def scripted_step(script, prompt_len=1):
    """Deterministic fake causal LM: follows ``script`` then [EOS]."""

    def step(prefix):
        logits = np.zeros(64)
        pos = len(prefix) - prompt_len
        logits[script[pos] if pos < len(script) else tokens.EOS] = 10.0
        return logits

    return step


def hashed_step(prefix):
    """Deterministic pseudo-random logits, a pure function of the prefix."""
    seed = abs(hash(tuple(prefix))) % (2**32)
    return np.random.default_rng(seed).normal(size=64)


class TestGenerate:
    def test_greedy_reproduces_scripted_sequence(self):
        script = [7, 8, 9, 10]
        out = E.generate(scripted_step(script), [tokens.CLS], max_len=16)
        assert out == script

    def test_beam_one_equals_greedy(self):
        greedy = E.generate(hashed_step, [tokens.CLS], max_len=10, beam=1)
        beamed = E.generate(hashed_step, [tokens.CLS], max_len=10, beam=1)
        assert greedy == beamed

    def test_beam_search_prefers_higher_total_probability(self):
        # greedy starts with token 1 but its probability mass then splits;
        # token 2 has one dominant continuation, so the beam picks 2 -> 3
        def step(prefix):
            logits = np.full(8, -20.0)
            if len(prefix) == 1:
                logits[1] = 1.0
                logits[2] = 0.8
            elif prefix[-1] == 1:
                logits[5] = 0.0
                logits[6] = 0.0  # mass split in two
            elif prefix[-1] == 2:
                logits[3] = 10.0
            else:
                logits[tokens.EOS] = 10.0
            return logits

        greedy = E.generate(step, [0], max_len=6, beam=1)
        beamed = E.generate(step, [0], max_len=6, beam=3)
        assert greedy == [1, 5]
        assert beamed == [2, 3]

    def test_never_exceeds_max_len(self):
        def never_stop(prefix):
            logits = np.zeros(64)
            logits[7] = 1.0
            return logits

        out = E.generate(never_stop, [tokens.CLS], max_len=9)
        assert len(out) == 8  # prompt of 1 + 8 generated

    def test_stops_at_eos(self):
        out = E.generate(scripted_step([5], prompt_len=2), [tokens.CLS, 9], max_len=16)
        assert out == [5]


class TestCaptionMetrics:
    def test_exact_match_is_perfect_score(self):
        got = E.caption_metrics(["a red square moving left slow"],
                                ["a red square moving left slow"])
        assert got["bleu4"] == pytest.approx(100.0)
        assert got["exact_match"] == 1.0

    def test_disjoint_tokens_zero(self):
        got = E.caption_metrics(["x y z w v"], ["a b c d e"])
        assert got["bleu4"] == 0.0 and got["exact_match"] == 0.0

    def test_hand_computed_clipped_precisions(self):
        # 4/5, 3/4, 2/3, 1/2 with brevity penalty 1
        got = E.caption_metrics(["a b c d x"], ["a b c d e"])
        want = 100.0 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
        assert got["bleu4"] == pytest.approx(want, abs=1e-9)

    def test_empty_hypothesis_counts_zero(self):
        got = E.caption_metrics(["", "a b c d e"], ["a b c d e", "a b c d e"])
        assert got["exact_match"] == 0.5
        assert got["bleu4"] == pytest.approx(100.0 * (5 / 5 * 1) ** 0.25 *
                                             np.exp(1 - 10 / 5), abs=1e-6)

    def test_brevity_penalty_applied(self):
        got = E.caption_metrics(["a b c d"], ["a b c d e"])
        want = 100.0 * np.exp(1 - 5 / 4)  # all precisions 1, short hypothesis
        assert got["bleu4"] == pytest.approx(want, abs=1e-9)

    def test_misaligned_lists_rejected(self):
        with pytest.raises(ContractError):
            E.caption_metrics(["a"], ["a", "b"])


class _StubModel:
    """Drives qa_eval without a trained network."""

    def __init__(self, corpus, answers_queue=None, constant=None):
        self.cfg = type("C", (), {"frames": 4})()
        self.queue = list(answers_queue or [])
        self.constant = constant

    def eval(self):
        return self

    def step_logits_fn(self, frames):
        from vlab import data as D

        answer = self.constant if self.constant else self.queue.pop(0)
        answer_ids = list(D.tokenize(answer).ids[:-1])

        def step(prefix):
            logits = np.zeros(64)
            try:
                sep_at = len(prefix) - 1 - prefix[::-1].index(tokens.SEP)
            except ValueError:
                sep_at = 0
            pos = len(prefix) - 1 - sep_at
            logits[answer_ids[pos] if pos < len(answer_ids) else tokens.EOS] = 10.0
            return logits

        return step


class TestQaEval:
    @pytest.fixture()
    def corpus(self, tmp_path):
        from vlab import data as D

        return D.Corpus(D.generate_corpus(60, seed=13, out_dir=str(tmp_path)))

    def test_oracle_model_is_perfect(self, corpus):
        answers = [corpus.record(i)["answer"] for i in corpus.split_ids("test")]
        model = _StubModel(corpus, answers_queue=answers)
        got = E.qa_eval(model, corpus, "test")
        assert got["accuracy"] == 1.0 and got["n"] == len(answers)

    def test_constant_answer_on_direction_questions(self, corpus):
        model = _StubModel(corpus, constant="left")
        is_direction = lambda rec: rec["question"].startswith("which direction")
        got = E.qa_eval(model, corpus, "test", question_filter=is_direction)
        records = [corpus.record(i) for i in corpus.split_ids("test")]
        direction = [r for r in records if is_direction(r)]
        want = sum(r["answer"] == "left" for r in direction) / len(direction)
        assert got["n"] == len(direction)
        assert got["accuracy"] == pytest.approx(want)
        assert 0.0 <= got["accuracy"] <= 0.6  # roughly chance on 4 directions
