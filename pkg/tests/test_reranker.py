from types import SimpleNamespace

import numpy as np
import pytest

from rmelnet.reranker import FAILED_BROKEN, FAILED_END, OK, analyze, rank, score


def clean(T=40, U=20):
    """Soft diagonal: two frames per position, weight spread over three positions."""
    w = np.zeros((T, U))
    for t in range(T):
        c = t / 2
        for u in range(U):
            w[t, u] = max(0.0, 1 - abs(u - c) / 1.5)
        w[t] /= w[t].sum()
    return w


def stalled(T=40, U=20):
    w = clean(T, U)
    stop = U // 2
    for t in range(T):
        if t / 2 > stop:
            w[t] = w[2 * stop]
    return w


def broken(T=40, U=20):
    # jumps 10 positions ahead for a stretch, then returns to the diagonal
    w = clean(T, U)
    shifted = np.roll(w, 10, axis=1)
    shifted[:, :10] = 0
    w[T // 4: T // 2] = shifted[T // 4: T // 2]
    return w


def cand(w, seed):
    return SimpleNamespace(attention=np.asarray(w), seed=seed)


class TestAnalyze:
    def test_perfect_diagonal(self):
        s = analyze(np.eye(12))
        assert s.reached_end and s.contiguous
        assert np.all(s.trace == 1)
        assert s.trace_min <= s.trace_median <= s.trace_max <= 1

    def test_stalled_fails_end(self):
        s = analyze(stalled())
        assert not s.reached_end

    def test_broken_fails_contiguity(self):
        s = analyze(broken())
        assert s.reached_end and not s.contiguous

    def test_clean_passes(self):
        s = analyze(clean())
        assert s.reached_end and s.contiguous

    def test_forward_tolerance_scales_with_u(self):
        # a 4-position jump is fine for U=100 (tolerance 5) but not for U=40 (tolerance 2)
        w = np.eye(100)[np.r_[0:50, 54:100]]
        assert analyze(w).contiguous
        w2 = np.eye(40)[np.r_[0:20, 24:40]]
        assert not analyze(w2).contiguous

    def test_backward_tolerance(self):
        order = [0, 1, 2, 3, 2, 3, 4, 5, 6, 7]
        assert analyze(np.eye(8)[order]).contiguous
        order = [0, 1, 2, 3, 4, 2, 3, 4, 5, 6, 7]
        assert not analyze(np.eye(8)[order]).contiguous

    def test_trailing_zero_rows_only_change_length(self):
        w = clean()
        padded = np.vstack([w, np.zeros((5, w.shape[1]))])
        a, b = analyze(w), analyze(padded)
        assert b.length == a.length + 5
        assert np.array_equal(a.trace, b.trace)
        assert (a.trace_min, a.trace_median, a.trace_max) == (b.trace_min, b.trace_median, b.trace_max)
        assert (a.reached_end, a.contiguous) == (b.reached_end, b.contiguous)

    def test_empty(self):
        with pytest.raises(ValueError):
            analyze(np.zeros((0, 4)))


class TestScore:
    def test_constant_trace_scores_zero(self):
        s = analyze(np.eye(10) * 0.7)
        val, factors = score(s, 10)
        assert val == 0 and factors[0] == 1

    def test_identical_candidates(self):
        s = analyze(clean())
        assert score(s, 35)[0] == score(analyze(clean()), 35)[0]

    def test_clean_beats_wobbly(self):
        w = clean()
        wobbly = w * np.where(np.arange(len(w)) % 3 == 0, 0.5, 1.0)[:, None]
        assert score(analyze(w), 40)[0] < score(analyze(wobbly), 40)[0]

    def test_factors(self):
        s = analyze(np.diag([0.2, 0.5, 0.9, 0.4, 0.6]))
        val, (f1, f2, f3, f4) = score(s, 3)
        assert (f1, f2, f3) == pytest.approx((3.0, 0.4, 0.7))
        assert f4 == pytest.approx(1 / (0.2 + 1e-6))
        assert val == pytest.approx(f1 * f2 * f3 * f4)


def _hand_candidates():
    """Five one-hot diagonals with chosen peak heights; factors computed by hand below."""
    specs = [  # (seed, length, trace values cycling)
        (10, 10, [0.9, 0.8]),
        (11, 12, [0.9, 0.9, 0.6]),
        (12, 10, [0.5, 0.5]),
        (13, 14, [0.8, 0.4]),
        (14, 10, [0.7, 0.6, 0.5]),
    ]
    cands, expected = [], {}
    for i, (seed, T, vals) in enumerate(specs):
        trace = np.array([vals[t % len(vals)] for t in range(T)])
        w = np.zeros((T, T))
        w[np.arange(T), np.arange(T)] = trace
        cands.append(cand(w, seed))
        expected[i] = trace
    return cands, expected


class TestRank:
    def test_hand_computed_ordering(self):
        cands, traces = _hand_candidates()
        median = 10.0
        want = {}
        for i, tr in traces.items():
            f1 = abs(len(tr) - median) + 1
            f2 = tr.max() - np.median(tr)
            f3 = tr.max() - tr.min()
            f4 = 1 / (tr.min() + 1e-6)
            want[i] = f1 * f2 * f3 * f4
        report = rank(cands)
        assert report.median_length == median
        for i, c in enumerate(report.candidates):
            assert c.status == OK
            assert c.score == pytest.approx(want[i], rel=1e-12)
        expected_order = sorted(want, key=lambda i: (want[i], cands[i].seed))
        assert report.order == expected_order
        assert report.chosen == expected_order[0]

    def test_one_ok_two_failed(self):
        report = rank([cand(stalled(), 1), cand(clean(), 2), cand(broken(), 3)])
        assert [c.status for c in report.candidates] == [FAILED_END, OK, FAILED_BROKEN]
        assert report.chosen == 1 and report.status == "ok"

    def test_all_failed(self):
        report = rank([cand(stalled(), 1), cand(broken(), 2)])
        assert report.chosen is None and report.status == "all_failed" and report.order == []

    def test_ties_go_to_lower_seed(self):
        report = rank([cand(clean(), 9), cand(clean(), 4)])
        assert report.chosen == 1

    def test_total_and_deterministic(self, tmp_path):
        cands = [cand(clean(), s) for s in range(4)] + [cand(stalled(), 9)]
        a, b = rank(cands), rank(cands)
        assert a.to_json() == b.to_json()
        assert sorted(c.index for c in a.candidates) == list(range(5))
        a.save(tmp_path / "r.json")
        assert "factors" in (tmp_path / "r.json").read_text()

    def test_empty(self):
        with pytest.raises(ValueError):
            rank([])

    def test_common_trace_scale_preserves_ranking(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cands = []
            for s in range(5):
                T = int(rng.integers(18, 26))
                w = np.zeros((T, T))
                w[np.arange(T), np.arange(T)] = rng.uniform(0.3, 1.0, T)
                cands.append(cand(w, s))
            base = rank(cands).order
            for c in (0.9, 0.5):
                scaled = [cand(k.attention * c, k.seed) for k in cands]
                assert rank(scaled).order == base
