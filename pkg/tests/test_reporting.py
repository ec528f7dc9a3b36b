from __future__ import annotations

import csv

import pytest

from backx.errors import InputError
from backx.evaluation import MetricReport
from backx.reporting import (
    _ratio_k_index,
    _sorted_reports,
    plot_asr_curves,
    plot_parameter_lines,
    plot_tr_curves,
    render_all,
    summary_table,
)


def _report(method="grad", tr=True, alpha=0.5, ratio=0.035):
    k = [0.0, 0.035, 1.0]
    return MetricReport(
        method=method, config_hash="d" * 64, k_values=k,
        asr_curve=[1.0, 0.4, 0.0],
        tr_curve=[0.0, 0.8, 1.0] if tr else [None, None, None],
        delta_logit_y=[0.0, 0.6, 1.0], delta_logit_target=[1.0, 0.3, 0.0],
        delta_prob_y=[0.0, 0.6, 1.0], delta_prob_target=[1.0, 0.3, 0.0],
        flc=[0.0, 1.2, 2.0], sample_count=20, seed=0,
        extras={"conventions": {"trigger_ratio": ratio, "alpha": alpha,
                                "poisoning_rate": 0.1}},
    )


class TestOrdering:
    def test_empty_set_rejected(self):
        with pytest.raises(InputError):
            _sorted_reports([])
        with pytest.raises(InputError):
            render_all([], "/tmp/unused")

    def test_oracle_sorts_last(self):
        ordered = _sorted_reports([_report("oracle"), _report("grad"), _report("ig")])
        assert [r.method for r in ordered] == ["grad", "ig", "oracle"]

    def test_ratio_index_picks_closest_k(self):
        assert _ratio_k_index(_report(ratio=0.03)) == 1
        assert _ratio_k_index(_report(ratio=0.9)) == 2

    def test_ratio_index_defaults_to_middle(self):
        rep = _report()
        rep.extras = {}
        assert _ratio_k_index(rep) == 1


class TestCurvePlots:
    def test_asr_writes_csv_then_png(self, tmp_path):
        paths = plot_asr_curves([_report("grad"), _report("oracle")], tmp_path)
        assert [p.name for p in paths] == ["asr_curves.csv", "asr_curves.png"]
        assert all(p.exists() for p in paths)

    def test_csv_rows_carry_every_point(self, tmp_path):
        csv_path, _ = plot_asr_curves([_report("grad")], tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "k", "asr_curve"]
        assert len(rows) == 4
        assert rows[1][0] == "grad" and float(rows[1][2]) == 1.0

    def test_tr_skips_disabled_reports(self, tmp_path):
        paths = plot_tr_curves([_report("grad", tr=False)], tmp_path)
        assert paths == []

    def test_tr_mixes_enabled_only(self, tmp_path):
        csv_path, png = plot_tr_curves(
            [_report("grad", tr=True), _report("ig", tr=False)], tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        methods = {row[0] for row in rows[1:]}
        assert methods == {"grad"}
        assert png.exists()


class TestParameterLines:
    def test_single_value_skipped(self, tmp_path):
        paths = plot_parameter_lines([_report(alpha=0.5), _report(alpha=0.5)],
                                     tmp_path, "alpha")
        assert paths == []

    def test_two_values_rendered(self, tmp_path):
        csv_path, png = plot_parameter_lines(
            [_report(alpha=0.3), _report(alpha=0.7)], tmp_path, "alpha")
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "alpha", "flc"]
        assert [row[1] for row in rows[1:]] == ["0.3", "0.7"]
        assert png.exists()

    def test_untagged_reports_ignored(self, tmp_path):
        rep = _report(alpha=0.3)
        bare = _report(alpha=0.7)
        bare.extras = {}
        assert plot_parameter_lines([rep, bare], tmp_path, "alpha") == []


class TestSummaryAndRenderAll:
    def test_summary_row_per_method(self, tmp_path):
        csv_path, png = summary_table([_report("grad"), _report("oracle")], tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3
        assert rows[1][0] == "grad" and rows[2][0] == "oracle"
        assert png.exists()

    def test_tr_disabled_shows_na(self, tmp_path):
        csv_path, _ = summary_table([_report("grad", tr=False)], tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[1][3] == "n/a"

    def test_render_all_standard_set(self, tmp_path):
        reports = [_report("grad"), _report("ig"), _report("oracle")]
        paths = render_all(reports, tmp_path / "plots")
        names = {p.name for p in paths}
        assert {"asr_curves.csv", "asr_curves.png", "tr_curves.csv",
                "tr_curves.png", "flc_bubble.csv", "flc_bubble.png",
                "summary.csv", "summary_table.png"} <= names
        # one alpha and one poisoning rate across the set: no parameter lines
        assert not any(n.startswith("flc_vs_") for n in names)
        assert all(p.exists() for p in paths)

    def test_render_all_with_parameter_spread(self, tmp_path):
        reports = [_report("grad", alpha=0.3), _report("grad", alpha=0.7)]
        names = {p.name for p in render_all(reports, tmp_path)}
        assert "flc_vs_alpha.csv" in names and "flc_vs_alpha.png" in names
