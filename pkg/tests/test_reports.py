"""
Tests for check blocks, report validation and table output
"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from errors import InputError
from reports import (
    CheckResult, flag_check, all_passed, to_jsonable, build_report, validate_report, write_report, write_table,
)


class TestCheckResult:
    @pytest.mark.parametrize("residual,tolerance,expected", [
        (0.0, 0.0, True),
        (1e-7, 1e-6, True),
        (1e-5, 1e-6, False),
        (math.nan, 1.0, False),
        (math.inf, math.inf, False),
    ])
    def test_passed(self, residual, tolerance, expected):
        assert CheckResult("c", residual, tolerance).passed is expected

    def test_flag_check(self):
        assert flag_check("ok", True).passed
        assert not flag_check("bad", False).passed
        assert all_passed([flag_check("a", True), CheckResult("b", 0.5, 1.0)])
        assert not all_passed([flag_check("a", True), flag_check("b", False)])

    def test_to_dict(self):
        data = CheckResult("gap", np.float64(1e-9), 1e-5).to_dict()
        assert data == {"name": "gap", "residual": 1e-9, "tolerance": 1e-5, "pass": True}


class TestJsonable:
    def test_numpy_and_non_finite(self):
        data = to_jsonable({"a": np.array([1.0, np.inf]), "b": np.int64(3), "c": np.bool_(True), 4: (np.nan,)})
        assert data == {"a": [1.0, None], "b": 3, "c": True, "4": [None]}
        json.dumps(data)

    def test_build_report_exit_code(self):
        good = build_report("solve-primal", {"x": 1.0}, 0, [flag_check("a", True)])
        bad = build_report("solve-primal", {"x": 1.0}, 0, [flag_check("a", False)])
        assert good["exit_code"] == 0
        assert bad["exit_code"] == 1
        assert good["checks"][0]["pass"] is True
        assert set(good) == {"command", "config", "seed", "checks", "result", "exit_code"}


class TestValidation:
    def test_valid_report(self):
        assert validate_report(build_report("gen-tree", {}, 1, result={"nodes": 7}))

    def test_missing_key(self):
        report = build_report("gen-tree", {}, 1)
        del report["exit_code"]
        with pytest.raises(InputError, match="exit_code"):
            validate_report(report)

    def test_wrong_type(self):
        report = build_report("gen-tree", {}, 1)
        report["command"] = 5
        with pytest.raises(InputError):
            validate_report(report)


class TestFiles:
    def test_write_report(self, tmp_path):
        report = build_report("solve-dual", {"y": 1.0}, 2, [CheckResult("gap", 0.0, 1e-5)])
        path = write_report(report, str(tmp_path / "run"))
        with open(path) as f:
            assert json.load(f) == report

    def test_write_table(self, tmp_path):
        rows = [{"x": 1.0, "u": 0.0}, {"x": 2.0, "u": math.log(2.0)}]
        path = write_table(rows, str(tmp_path), "u_curve.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["x", "u"]
        assert frame["u"].iloc[1] == pytest.approx(math.log(2.0))
