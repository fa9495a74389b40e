import numpy as np
import pytest

from longmatch.core import (
    CaptureTable, dilation_constancy, dilation_ratio, validate_dataset,
)

from conftest import make_capture


class TestDilationRatio:
    def test_direct_arithmetic(self):
        assert dilation_ratio(30.0, 100.0) == pytest.approx(0.30)
        assert dilation_ratio(50.0, 100.0) == pytest.approx(0.50)

    def test_near_boundary(self):
        assert dilation_ratio(99.0, 100.0) == pytest.approx(0.99)

    @pytest.mark.parametrize("pupil,iris", [(0.0, 10.0), (-1.0, 10.0),
                                            (10.0, 10.0), (11.0, 10.0),
                                            (5.0, 0.0)])
    def test_rejects_bad_radii(self, pupil, iris):
        with pytest.raises(ValueError):
            dilation_ratio(pupil, iris)

    def test_always_in_open_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            iris = rng.uniform(1e-3, 1e3)
            pupil = rng.uniform(1e-6, 1.0) * iris * 0.999
            d = dilation_ratio(pupil, iris)
            assert 0.0 < d < 1.0


class TestDilationConstancy:
    def test_identical_dilation(self):
        assert dilation_constancy(0.4, 0.4) == 1.0

    def test_examples(self):
        assert dilation_constancy(0.6, 0.3) == pytest.approx(0.7)
        assert dilation_constancy(1.0, 0.0) == 0.0

    @pytest.mark.parametrize("a,b", [(1.2, 0.5), (-0.1, 0.5), (0.5, 1.01)])
    def test_rejects_out_of_range(self, a, b):
        with pytest.raises(ValueError):
            dilation_constancy(a, b)

    def test_symmetry_and_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            a, b = rng.uniform(0, 1, 2)
            assert dilation_constancy(a, b) == dilation_constancy(b, a)
            assert dilation_constancy(a, a) == 1.0
            assert 0.0 <= dilation_constancy(a, b) <= 1.0


class TestValidateDataset:
    def test_clean_table_empty_report(self):
        table = CaptureTable([make_capture(f"I{i}") for i in range(5)])
        report = validate_dataset(table)
        assert report.is_clean()
        assert report.n_flagged == 0
        assert report.flagged_fraction == 0.0

    def test_duplicate_image_id_single_finding(self):
        table = CaptureTable([make_capture("I0"), make_capture("I1"),
                              make_capture("I0")])
        report = validate_dataset(table)
        findings = [f for f in report.findings if f.violation == "duplicate key"]
        assert len(findings) == 1
        assert findings[0].image_id == "I0"

    def test_dilation_bounds_flagged(self):
        table = CaptureTable([make_capture("I0", pupil=120.0, iris=110.0)])
        report = validate_dataset(table)
        assert report.counts == {"dilation bounds": 1}

    def test_quality_range_flagged(self):
        table = CaptureTable([make_capture("I0", quality=101.0)])
        report = validate_dataset(table)
        assert report.counts == {"quality range": 1}

    def test_flagged_fraction_bookkeeping(self):
        # 97 flawed records among 18,318: fraction just above half a percent
        records = []
        for i in range(18318):
            if i < 97:
                records.append(make_capture(f"I{i:05d}", pupil=150.0, iris=110.0))
            else:
                records.append(make_capture(f"I{i:05d}"))
        report = validate_dataset(CaptureTable(records))
        assert report.n_flagged == 97
        assert report.n_records == 18318
        assert report.flagged_fraction == pytest.approx(0.0053, abs=1e-4)
