import json
import os

import numpy as np
import pytest

from afbc_lab import evalkit
from afbc_lab.errors import UsageError
from afbc_lab.evalkit import LearningCurve, advantage_histogram, emit_report, score, smooth


def curve(returns, steps=None, seed=0):
    returns = np.asarray(returns, dtype=np.float64)
    if steps is None:
        steps = np.arange(1, len(returns) + 1) * 1000
    return LearningCurve(steps=steps, returns=returns, seed=seed)


class TestSmooth:
    def test_constant_curve_is_fixed_point(self):
        out = smooth(curve([7.0] * 12))
        assert np.allclose(out.returns, 7.0)

    def test_coeff_zero_is_identity(self):
        values = [3.0, -1.0, 4.0, 1.5]
        out = smooth(curve(values), coeff=0.0)
        assert np.allclose(out.returns, values)

    def test_hand_arithmetic(self):
        out = smooth(curve([0.0, 10.0]), coeff=0.65)
        assert np.allclose(out.returns, [0.0, 3.5])

    def test_empty_curve_rejected(self):
        with pytest.raises(UsageError):
            smooth(curve([]))

    def test_order_preserved_under_constant_shift(self):
        base = np.random.default_rng(0).uniform(0, 100, size=20)
        a = smooth(curve(base)).returns
        b = smooth(curve(base + 50.0)).returns
        assert np.allclose(b - a, 50.0)

    def test_misordered_steps_rejected(self):
        with pytest.raises(UsageError):
            LearningCurve(steps=[2000, 1000], returns=[1.0, 2.0])


class TestScore:
    def test_single_constant_curve(self):
        report = score([curve([500.0] * 15)])
        assert report.mean == 500.0
        assert report.spread == 0.0
        assert report.n_seeds == 1

    def test_two_constant_curves_average(self):
        report = score([curve([400.0] * 15, seed=0), curve([600.0] * 15, seed=1)])
        assert report.mean == 500.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        curves = [curve(rng.uniform(0, 1000, size=20), seed=i) for i in range(4)]
        a = score(curves)
        b = score(curves[::-1])
        assert a.mean == pytest.approx(b.mean, rel=1e-12)
        assert a.spread == pytest.approx(b.spread, rel=1e-12)

    def test_misaligned_steps_rejected(self):
        with pytest.raises(UsageError):
            score([curve([1.0, 2.0]), curve([1.0, 2.0], steps=[500, 1500])])

    def test_matches_spreadsheet_oracle(self):
        # independent recomputation of the three-step recipe in plain python
        rng = np.random.default_rng(2)
        raws = [rng.uniform(0, 100, size=14) for _ in range(3)]
        smoothed = []
        for raw in raws:
            acc = [raw[0]]
            for y in raw[1:]:
                acc.append(0.65 * acc[-1] + 0.35 * y)
            smoothed.append(acc)
        mean_curve = [sum(col) / 3 for col in zip(*smoothed)]
        tail = mean_curve[-10:]
        expect_mean = sum(tail) / 10
        expect_spread = 2.0 * float(np.std(tail))
        report = score([curve(raw, seed=i) for i, raw in enumerate(raws)])
        assert abs(report.mean - expect_mean) < 1e-9
        assert abs(report.spread - expect_spread) < 1e-9


class TestAdvantageHistogram:
    def test_constant_critics_mass_in_zero_bin(self):
        from afbc_lab.agents import AfbcAgent
        from afbc_lab.datasets import TransitionSet
        from afbc_lab.seeding import stream

        agent = AfbcAgent(1, 1, rng=stream(0, "a"), hidden=(8,))
        for net in agent.critics:
            net.load_flat(np.zeros(net.to_flat().size))
        probe = TransitionSet(
            s=np.zeros((50, 1)),
            a=np.zeros((50, 1)),
            r=np.zeros(50),
            s_next=np.zeros((50, 1)),
            done=np.zeros(50, dtype=bool),
        )
        counts, edges, adv = advantage_histogram(agent, probe, stream(1, "a"))
        assert np.all(adv == 0.0)
        center = len(counts) // 2
        assert counts[center] == 50
        assert counts.sum() == 50

    def test_counts_conserved(self):
        from afbc_lab.agents import AfbcAgent
        from afbc_lab.datasets import TransitionSet
        from afbc_lab.seeding import stream

        rng = np.random.default_rng(3)
        agent = AfbcAgent(2, 1, rng=stream(2, "a"), hidden=(8,))
        probe = TransitionSet(
            s=rng.normal(size=(200, 2)),
            a=np.tanh(rng.normal(size=(200, 1))),
            r=np.zeros(200),
            s_next=rng.normal(size=(200, 2)),
            done=np.zeros(200, dtype=bool),
        )
        counts, edges, _ = advantage_histogram(agent, probe, stream(3, "a"))
        assert counts.sum() == 200
        assert len(counts) == 61
        assert np.isclose(edges[0], -edges[-1])  # symmetric range


def write_fake_run(run_dir, seeds=2, evals=12, with_hist=True):
    rng = np.random.default_rng(7)
    for i in range(seeds):
        d = os.path.join(run_dir, f"seed_{i}")
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "train_log.jsonl"), "w") as fh:
            for j in range(1, evals + 1):
                rec = {
                    "step": j * 1000,
                    "critic_loss": float(rng.uniform()),
                    "actor_loss": float(rng.uniform()),
                    "approval_fraction": float(rng.uniform()),
                    "adv_mean": 0.0,
                    "adv_std": 1.0,
                    "adv_negative_fraction": 0.5,
                    "eval_return": float(rng.uniform(0, 1000)),
                    "eval_goal_rate": 0.0,
                    "adv_hist_counts": [0, 5, 0] if with_hist else None,
                    "adv_hist_edges": [-1.0, -0.33, 0.33, 1.0] if with_hist else None,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class TestEmitReport:
    def test_writes_tables_and_figures(self, tmp_path):
        write_fake_run(tmp_path)
        written = emit_report(str(tmp_path))
        names = {os.path.basename(p) for p in written}
        assert {"score.csv", "curves.csv", "approval.csv", "curves.svg", "approval.svg"} <= names
        assert "advantage_histograms.csv" in names
        assert "advantage_histogram.svg" in names
        for p in written:
            assert os.path.getsize(p) > 0

    def test_idempotent_byte_identical(self, tmp_path):
        write_fake_run(tmp_path)
        first = {p: open(p, "rb").read() for p in emit_report(str(tmp_path))}
        second = {p: open(p, "rb").read() for p in emit_report(str(tmp_path))}
        assert first == second

    def test_score_csv_round_trips_through_score(self, tmp_path):
        import csv

        write_fake_run(tmp_path, seeds=3)
        written = emit_report(str(tmp_path))
        score_path = next(p for p in written if p.endswith("score.csv"))
        with open(score_path) as fh:
            row = list(csv.DictReader(fh))[0]
        records = [evalkit.load_run_log(os.path.join(tmp_path, f"seed_{i}")) for i in range(3)]
        curves = [evalkit.curve_from_records(r, seed=i) for i, r in enumerate(records)]
        report = score(curves)
        assert float(row["mean"]) == pytest.approx(report.mean, abs=1e-6)
        assert float(row["spread_2std"]) == pytest.approx(report.spread, abs=1e-6)

    def test_missing_logs_is_error(self, tmp_path):
        with pytest.raises(UsageError):
            emit_report(str(tmp_path))
