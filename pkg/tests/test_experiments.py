"""Study harness: grids, slopes, determinism, resumability, skip accounting."""

from __future__ import annotations

import csv
import math
from functools import lru_cache

import numpy as np
import pytest

from sgmoe.errors import InputError, NumericError
from sgmoe.estimation import FitConfig
from sgmoe.experiments import (
    PRESET_NAMES,
    RateStudyConfig,
    SelectionStudyConfig,
    log_size_grid,
    preset,
    resolve_workers,
    run_rate_study,
    run_selection_study,
    slope_fit,
)


@pytest.fixture(autouse=True)
def _no_thread_override(monkeypatch):
    monkeypatch.delenv("SGMOE_THREADS", raising=False)


def tiny_rate_config(**kw):
    base = dict(truth="g0_2", setting="exact", n_min=100, n_max=400,
                n_count=3, reps=2, loss="vde", seed=11, workers=1,
                em=FitConfig(K=2, tol=1e-5, max_iter=300))
    base.update(kw)
    return RateStudyConfig(**base)


def zero_update_config(**kw):
    # scale-0 perturbation copies the truth; max_iter 0 returns it untouched
    base = dict(truth="g0_2", setting="exact", n_min=100, n_max=400,
                n_count=3, reps=2, loss="vde", seed=3, workers=1,
                em=FitConfig(K=2, max_iter=0, init_scale=0.0))
    base.update(kw)
    return RateStudyConfig(**base)


@lru_cache(maxsize=None)
def cached_rate_result(cfg):
    return run_rate_study(cfg)


class TestGridAndSlope:
    def test_grid_endpoints_and_length(self):
        grid = log_size_grid(100, 10_000, 12)
        assert len(grid) == 12
        assert grid[0] == 100 and grid[-1] == 10_000
        assert all(b >= a for a, b in zip(grid, grid[1:]))

    def test_grid_single_point(self):
        assert log_size_grid(500, 500, 1) == (500,)

    def test_grid_rejects_bad_ranges(self):
        with pytest.raises(InputError):
            log_size_grid(100, 10, 3)
        with pytest.raises(InputError):
            log_size_grid(0, 10, 3)
        with pytest.raises(InputError):
            log_size_grid(10, 100, 0)

    def test_slope_exact_half_power(self):
        pts = [(n, 3.7 * n ** -0.5) for n in (10, 100, 1000, 10_000)]
        slope, intercept = slope_fit(pts)
        assert slope == pytest.approx(-0.5, abs=1e-12)
        assert intercept == pytest.approx(math.log(3.7), abs=1e-10)

    def test_slope_constant(self):
        slope, _ = slope_fit([(10, 2.0), (100, 2.0), (1000, 2.0)])
        assert slope == pytest.approx(0.0, abs=1e-12)

    def test_slope_quarter_power(self):
        pts = [(n, n ** -0.25) for n in (10, 40, 160, 640)]
        slope, _ = slope_fit(pts)
        assert slope == pytest.approx(-0.25, abs=1e-12)

    def test_slope_rejects_short_or_nonpositive(self):
        with pytest.raises(InputError):
            slope_fit([(10, 1.0), (20, 0.5)])
        with pytest.raises(InputError):
            slope_fit([(10, 1.0), (20, 0.5), (30, 0.0)])


class TestWorkerResolution:
    def test_env_wins(self, monkeypatch):
        monkeypatch.setenv("SGMOE_THREADS", "3")
        assert resolve_workers(1) == 3

    def test_config_when_no_env(self):
        assert resolve_workers(2) == 2

    def test_default_at_least_one(self):
        assert resolve_workers() >= 1

    def test_bad_env_rejected(self, monkeypatch):
        monkeypatch.setenv("SGMOE_THREADS", "zero")
        with pytest.raises(InputError):
            resolve_workers()
        monkeypatch.setenv("SGMOE_THREADS", "0")
        with pytest.raises(InputError):
            resolve_workers()


class TestRateConfigValidation:
    def test_unknown_names_rejected(self):
        with pytest.raises(InputError):
            tiny_rate_config(truth="g9")
        with pytest.raises(InputError):
            tiny_rate_config(setting="underfit")
        with pytest.raises(InputError):
            tiny_rate_config(loss="hellinger")

    def test_sample_size_floor(self):
        with pytest.raises(InputError):
            tiny_rate_config(setting="overfit", fit_k=4, n_min=30)

    def test_fit_k_below_truth_rejected(self):
        with pytest.raises(InputError):
            tiny_rate_config(setting="merged", fit_k=1)

    def test_reps_floor(self):
        with pytest.raises(InputError):
            tiny_rate_config(reps=0)


class TestRateStudy:
    def test_zero_update_study_sits_at_truth(self):
        res = run_rate_study(zero_update_config())
        assert res.skipped == 0
        for row in res.rows:
            assert row.reps_used == 2
            assert row.mean_loss < 1e-6

    def test_zero_update_merged_also_exact(self):
        res = run_rate_study(zero_update_config(
            setting="merged", fit_k=4,
            em=FitConfig(K=4, max_iter=0, init_scale=0.0)))
        for row in res.rows:
            assert row.mean_loss < 1e-6
        assert len(res.raw_rows) == 3
        for row in res.raw_rows:
            assert row.mean_loss < 1e-6

    def test_deterministic_rerun(self):
        cfg = tiny_rate_config()
        assert repr(run_rate_study(cfg)) == repr(cached_rate_result(cfg))

    def test_losses_shrink_with_n(self):
        res = cached_rate_result(tiny_rate_config())
        assert all(row.mean_loss > 0 for row in res.rows)
        assert math.isfinite(res.slope)
        assert res.rows[-1].mean_loss < res.rows[0].mean_loss

    def test_resume_completes_to_identical_table(self, tmp_path):
        cfg = tiny_rate_config()
        full = tmp_path / "full.csv"
        res_full = run_rate_study(cfg, checkpoint=full)
        assert repr(res_full) == repr(cached_rate_result(cfg))

        with open(full, newline="") as fh:
            lines = fh.read().splitlines()
        part = tmp_path / "part.csv"
        part.write_text("\n".join(lines[:4]) + "\n")
        res_resumed = run_rate_study(cfg, checkpoint=part)
        assert repr(res_resumed) == repr(res_full)
        # and a second resume finds nothing left to do
        assert repr(run_rate_study(cfg, checkpoint=part)) == repr(res_full)

    def test_replication_order_irrelevant(self, tmp_path):
        cfg = tiny_rate_config()
        full = tmp_path / "full.csv"
        res_full = run_rate_study(cfg, checkpoint=full)
        with open(full, newline="") as fh:
            lines = fh.read().splitlines()
        shuffled = tmp_path / "shuffled.csv"
        shuffled.write_text(
            "\n".join([lines[0]] + list(reversed(lines[1:]))) + "\n")
        assert repr(run_rate_study(cfg, checkpoint=shuffled)) == repr(res_full)

    def test_truncated_tail_is_recomputed(self, tmp_path):
        cfg = tiny_rate_config()
        full = tmp_path / "full.csv"
        res_full = run_rate_study(cfg, checkpoint=full)
        with open(full, newline="") as fh:
            text = fh.read()
        cut = tmp_path / "cut.csv"
        cut.write_text(text[:text.rfind(",")])  # mid-row power cut
        assert repr(run_rate_study(cfg, checkpoint=cut)) == repr(res_full)
        # the rewritten file must reload cleanly
        assert repr(run_rate_study(cfg, checkpoint=cut)) == repr(res_full)

    def test_checkpoint_from_other_grid_rejected(self, tmp_path):
        cfg = tiny_rate_config()
        ckpt = tmp_path / "c.csv"
        run_rate_study(cfg, checkpoint=ckpt)
        with pytest.raises(InputError):
            run_rate_study(tiny_rate_config(n_min=120, n_max=480),
                           checkpoint=ckpt)

    def test_process_pool_matches_inline(self):
        cfg = zero_update_config(workers=2)
        assert repr(run_rate_study(cfg)) == \
            repr(run_rate_study(zero_update_config(workers=1)))


class TestSkipAccounting:
    def test_isolated_failures_are_counted(self, monkeypatch):
        import sgmoe.experiments as exp
        real = exp.em_fit

        def flaky(data, cfg, init):
            if data.n == 100 and data.ys[0] == flaky.mark:
                raise NumericError("synthetic failure")
            return real(data, cfg, init)

        cfg = zero_update_config(n_count=3, reps=4)
        probe = run_rate_study(cfg)  # locate one rep's dataset
        flaky.mark = None
        monkeypatch.setattr(exp, "em_fit", flaky)

        from sgmoe.datagen import GenConfig, builtin_truths, derive_seed, sample
        data0 = sample(builtin_truths()["g0_2"],
                       GenConfig(n=100, seed=derive_seed(cfg.seed, 0, 0, 0)))
        flaky.mark = data0.ys[0]
        res = run_rate_study(cfg)
        assert res.skipped == 1  # 1 of 12 is under the 10% abort line
        assert res.rows[0].reps_used == 3
        assert res.rows[1].reps_used == 4
        assert probe.skipped == 0

    def test_excess_failures_abort(self, monkeypatch):
        import sgmoe.experiments as exp

        def always_fails(data, cfg, init):
            raise NumericError("synthetic failure")

        monkeypatch.setattr(exp, "em_fit", always_fails)
        with pytest.raises(NumericError, match="replications failed"):
            run_rate_study(zero_update_config())


class TestSelectionStudy:
    def small_config(self, **kw):
        base = dict(truth="g0_2", n_min=500, n_max=500, n_count=1, reps=3,
                    kmax=2, seed=21, workers=1,
                    em=FitConfig(K=2, tol=1e-5, max_iter=300))
        base.update(kw)
        return SelectionStudyConfig(**base)

    def test_smoke_rows_cover_grid(self):
        res = run_selection_study(self.small_config())
        assert res.true_k == 2
        assert res.skipped == 0
        assert [(r.n, r.method) for r in res.rows] == \
            [(500, m) for m in ("dsc", "aic", "bic", "icl")]
        for row in res.rows:
            assert row.reps_used == 3
            assert 0.0 <= row.proportion_correct <= 1.0
            assert 1.0 <= row.mean_chosen <= 2.0

    def test_deterministic_rerun(self):
        cfg = self.small_config()
        assert repr(run_selection_study(cfg)) == \
            repr(run_selection_study(cfg))

    def test_dsc_only_config(self):
        res = run_selection_study(self.small_config(methods=("dsc",)))
        assert [r.method for r in res.rows] == ["dsc"]

    def test_resume_matches_fresh(self, tmp_path):
        cfg = self.small_config()
        full = tmp_path / "sel.csv"
        res_full = run_selection_study(cfg, checkpoint=full)
        with open(full, newline="") as fh:
            lines = fh.read().splitlines()
        part = tmp_path / "part.csv"
        part.write_text("\n".join(lines[:3]) + "\n")
        assert repr(run_selection_study(cfg, checkpoint=part)) == \
            repr(res_full)

    def test_validation(self):
        with pytest.raises(InputError):
            self.small_config(methods=("dsc", "dsc"))
        with pytest.raises(InputError):
            self.small_config(methods=("gic",))
        with pytest.raises(InputError):
            self.small_config(kmax=1)
        with pytest.raises(InputError):
            self.small_config(contamination_eps=1.0)
        with pytest.raises(InputError):
            self.small_config(epsilon_n=0.0)
        with pytest.raises(InputError):
            self.small_config(n_min=10, n_max=500)


class TestPresets:
    def test_all_names_construct(self):
        for name in PRESET_NAMES:
            preset(name)

    def test_rate_grids_match_published_scale(self):
        a, b, c = preset("fig3a"), preset("fig3b"), preset("fig3c")
        assert (a.setting, a.n_count, a.reps, a.n_max) == \
            ("exact", 100, 30, 50_000)
        assert (b.setting, b.fit_k, b.n_count, b.reps, b.n_min, b.n_max) == \
            ("overfit", 4, 165, 40, 338, 100_000)
        assert (c.setting, c.n_count, c.reps, c.n_max) == \
            ("merged", 200, 40, 100_000)

    def test_selection_grids(self):
        clean, dirty = preset("fig4"), preset("fig5")
        assert (clean.n_count, clean.reps, clean.kmax) == (32, 25, 4)
        assert clean.contamination_eps == 0.0
        assert dirty.contamination_eps == 0.05
        assert (dirty.n_min, dirty.n_max) == (1_000, 50_000)

    def test_unknown_preset(self):
        with pytest.raises(InputError):
            preset("fig6")
