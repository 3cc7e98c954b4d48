import csv
import json

import jsonschema
import numpy as np
import pytest

from _oracles import pearson_ref, spearman_ref
from sbvqa.errors import DegenerateInput
from sbvqa.manifest import ManifestEntry
from sbvqa.metrics import REPORT_SCHEMA, EvalReport, ItemError, evaluate, main_score, plcc, srcc


def test_against_brute_force_with_ties():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        x = rng.integers(0, 6, n).astype(float)
        y = x + rng.integers(-3, 4, n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        worst = max(worst, abs(srcc(x, y) - spearman_ref(x.tolist(), y.tolist())),
                    abs(plcc(x, y) - pearson_ref(x.tolist(), y.tolist())))
    assert worst <= 1e-12


def test_simple_values():
    assert srcc([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert srcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert plcc([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
    # ranks (1,2,3) vs (1,3,2): 1 - 6*2/(3*8) = 0.5
    assert srcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_srcc_invariant_to_monotone_maps():
    rng = np.random.default_rng(1)
    x, y = rng.random(50), rng.random(50)
    assert srcc(np.exp(3 * x), y) == pytest.approx(srcc(x, y), abs=1e-12)


def test_main_score_rows():
    assert main_score(0.7350, 0.7310) == pytest.approx(0.7330, abs=1e-12)
    assert main_score(0.862, 0.857) == pytest.approx(0.8595, abs=1e-12)


@pytest.mark.parametrize("p,y", [
    ([1.0], [2.0]),
    ([1, 2], [1, 2, 3]),
    ([1, 1, 1], [1, 2, 3]),
    ([1, np.nan, 2], [1, 2, 3]),
])
def test_degenerate_inputs(p, y):
    with pytest.raises(DegenerateInput):
        srcc(p, y)
    with pytest.raises(DegenerateInput):
        plcc(p, y)


def test_report_roundtrip(tmp_path):
    rep = EvalReport.from_predictions(np.array([1.0, 2.5, 2.0]), np.array([1.0, 3.0, 2.0]), ["a", "b", "c"])
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert data["srcc"] == pytest.approx(1.0)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["id", "mos", "pred"] and len(rows) == 4
    assert "SRCC" in rep.table()


def test_evaluate_reports_failing_item():
    entries = [ManifestEntry(f"v{i}", f"v{i}.npy", float(i)) for i in range(4)]

    def predictor(e):
        if e.id == "v2":
            raise OSError("boom")
        return e.mos

    with pytest.raises(ItemError) as exc:
        evaluate(entries, predictor)
    assert exc.value.item_id == "v2"
    rep = evaluate(entries, lambda e: e.mos * 2)
    assert rep.main_score == pytest.approx(1.0) and rep.n == 4
