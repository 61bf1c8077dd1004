import io
import json
import math

import numpy as np
import pytest

from trajcluster.core import PosteriorMatrix, TrajclusterError
from trajcluster.methods import MethodConfig
from trajcluster.selection import (
    NO_ELBOW,
    FitReport,
    FitRow,
    bic,
    choose,
    elbow,
    posterior_entropy,
    sweep,
    write_curves,
)


def test_bic_examples():
    assert bic(0.0, 3, 100) == pytest.approx(13.8155, abs=1e-4)
    assert bic(-12.5, 0, 7) == 25.0
    with pytest.raises(TrajclusterError):
        bic(0.0, 1, 0)
    with pytest.raises(TrajclusterError):
        bic(0.0, -1, 10)


def test_entropy_definition(rng):
    for _ in range(20):
        z = rng.dirichlet(np.ones(4) * 0.5, size=30)
        z[0] = [1, 0, 0, 0]
        z /= z.sum(axis=1, keepdims=True)
        want = -sum(p * math.log(p) for row in z for p in row if p > 0) / z.shape[0]
        got = posterior_entropy(PosteriorMatrix(z))
        assert got == pytest.approx(want, abs=1e-12)
        assert 0 <= got <= math.log(4) + 1e-12
    assert posterior_entropy(np.eye(3)) == 0.0
    assert posterior_entropy(np.full((5, 3), 1 / 3)) == pytest.approx(math.log(3))


def test_elbow_examples():
    assert elbow([100, 40, 38, 37]) == 3
    assert elbow({1: 100, 2: 40, 3: 38, 4: 37}) == 3
    assert elbow([10, 9, 8, 7, 6]) is NO_ELBOW
    with pytest.raises(TrajclusterError):
        elbow([3, 2])
    with pytest.raises(TrajclusterError):
        elbow({1: 3, 3: 2, 4: 1})


def _report(values, name="bic"):
    rows = [FitRow(G=g, **{name: v}) for g, v in values.items()]
    return FitReport("x", rows)


def test_choosers_tie_to_smallest_G():
    assert choose(_report({1: 5.0, 2: 3.0, 3: 3.0}), "bic-min") == 2
    assert choose(_report({2: 0.4, 3: 0.5, 4: 0.5}, "asw"), "asw-max") == 3
    assert choose(_report({1: 100, 2: 40, 3: 38, 4: 37}), "elbow") == 3
    with pytest.raises(TrajclusterError):
        choose(_report({2: 0.4}, "asw"), "bic-min")
    with pytest.raises(TrajclusterError):
        choose(_report({2: 0.4}), "best")


def test_sweep_rows_scores_and_determinism(small_synth):
    ds, _ = small_synth
    cfg = MethodConfig("gbtm", n_starts=2)
    a = sweep(ds, cfg, 1, 4, seed=3, chooser="bic-min")
    b = sweep(ds, cfg, 1, 4, seed=3, threads=2)
    assert [r.G for r in a.rows] == [1, 2, 3, 4]
    assert all(r.ok for r in a.rows)
    assert a.rows[0].asw is None and a.rows[1].asw is not None
    assert all(r.entropy is not None and r.bic is not None for r in a.rows)
    assert a.chosen_G == min(a.scores("bic"), key=a.scores("bic").get)
    buf_a, buf_b = io.StringIO(), io.StringIO()
    a.to_csv(buf_a)
    b.to_csv(buf_b)
    assert buf_a.getvalue() == buf_b.getvalue()
    # a row does not depend on the range swept
    c = sweep(ds, cfg, 3, 3, seed=3)
    assert c.rows[0].loglik == a.row(3).loglik


def test_sweep_bic_n_subjects(small_synth):
    ds, _ = small_synth
    rep = sweep(ds, MethodConfig("gbtm", n_starts=1, bic_n="subjects"), 2, 2, seed=0)
    r = rep.rows[0]
    assert r.bic == pytest.approx(bic(r.loglik, r.n_params, len(ds)))


def test_sweep_records_failures(small_synth):
    ds, _ = small_synth
    sub = type(ds)(ds.trajectories[:5], ds.time_unit)
    rep = sweep(sub, MethodConfig("kml", n_starts=1), 4, 6, seed=0)
    assert [r.ok for r in rep.rows] == [True, True, False]
    assert rep.rows[2].status.startswith("failed")
    with pytest.raises(TrajclusterError):
        sweep(sub, MethodConfig("kml", n_starts=1), 6, 7, seed=0)


def test_sweep_asw_only_methods_need_two(small_synth):
    with pytest.raises(TrajclusterError):
        sweep(small_synth[0], MethodConfig("ahc"), 1, 3)


def test_report_outputs(small_synth, tmp_path):
    ds, _ = small_synth
    rep = sweep(ds, MethodConfig("ahc"), 2, 4, seed=0, chooser="asw-max")
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,G,status,loglik,n_params,bic,asw,entropy,min_size,near_empty,flags"
    assert len(lines) == 4 and lines[1].startswith("ahc,2,ok,,,,")
    doc = json.loads(rep.to_json())
    assert doc["chosen_G"] == rep.chosen_G and "wall_time" not in doc["rows"][0]
    assert "wall_time" in json.loads(rep.to_json(wall_time=True))["rows"][0]
    write_curves(rep, ds, tmp_path / "c.csv")
    curves = (tmp_path / "c.csv").read_text().splitlines()
    assert curves[0] == "G,cluster,time,value"
    assert len(curves) == 1 + (2 + 3 + 4) * 26


def test_near_empty_count(small_synth):
    ds, _ = small_synth
    rep = sweep(ds, MethodConfig("ahc"), 8, 8, seed=0)
    r = rep.rows[0]
    sizes = rep.outcomes[8].partition.sizes()
    assert r.near_empty == int(np.sum(sizes < 0.01 * len(ds)))
    assert r.min_size == sizes.min()
