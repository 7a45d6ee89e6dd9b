import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oneshotseg.diffops import ShapeError
from oneshotseg.metrics import EvalReport, CaseResult, dice_hard, evaluate, ncc_global
from oneshotseg.nets import EncoderConfig, ModelConfig, init_bundle
from oneshotseg.pipeline import identity_dice, make_dataset
from oneshotseg.synth import SyntheticSpec
from oneshotseg.volume import LabelMap, Volume


def dice_brute(p, g, c):
    tp = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a == c and b == c)
    n = sum(1 for a in p.ravel() if a == c) + sum(1 for b in g.ravel() if b == c)
    return 1.0 if n == 0 else 2 * tp / n


def ncc_two_pass(a, b):
    a = [float(v) for v in a.ravel()]
    b = [float(v) for v in b.ravel()]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return 0.0 if va * vb == 0 else cov / (va * vb) ** 0.5


def _lab(arr, c=3):
    return LabelMap(np.asarray(arr, dtype=np.uint8), c)


def test_dice_examples():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, (4, 4, 4))
    per, mean = dice_hard(_lab(a), _lab(a))
    assert per == {0: 1.0, 1: 1.0, 2: 1.0} and mean == 1.0
    p, g = np.zeros((4, 4, 1)), np.zeros((4, 4, 1))
    p[0, :2] = 1
    g[1, :2] = 1
    assert dice_hard(_lab(p, 2), _lab(g, 2))[0][1] == 0.0
    p, g = np.zeros((4, 4, 1)), np.zeros((4, 4, 1))
    p[0, :4] = 1
    g[0, 2:] = 1
    g[1, :2] = 1
    assert dice_hard(_lab(p, 2), _lab(g, 2))[0][1] == 0.5


def test_dice_edge_conventions():
    z = _lab(np.zeros((3, 3, 3)))
    per, mean = dice_hard(z, z)
    assert per[1] == 1.0 and per[2] == 1.0 and mean == 1.0
    one = np.zeros((3, 3, 3))
    one[0, 0, 0] = 1
    assert dice_hard(_lab(one), z)[0][1] == 0.0
    assert dice_hard(z, _lab(one))[0][1] == 0.0


def test_dice_background_switch():
    a = np.zeros((2, 2, 2))
    a[0] = 1
    b = np.zeros((2, 2, 2))
    _, fg = dice_hard(_lab(a, 2), _lab(b, 2))
    _, all_ = dice_hard(_lab(a, 2), _lab(b, 2), include_background=True)
    assert fg == 0.0 and all_ == pytest.approx((0 + 2 * 4 / 12) / 2)
    with pytest.raises(ShapeError):
        dice_hard(_lab(a), _lab(np.zeros((2, 2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = _lab(rng.integers(0, 3, (3, 4, 5))), _lab(rng.integers(0, 3, (3, 4, 5)))
    pa, ma = dice_hard(a, b)
    pb, mb = dice_hard(b, a)
    assert pa == pb and ma == mb
    assert all(0 <= v <= 1 for v in pa.values())


def test_dice_and_ncc_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        dims = tuple(rng.integers(2, 6, 3))
        p, g = rng.integers(0, 4, dims), rng.integers(0, 4, dims)
        per, _ = dice_hard(_lab(p, 4), _lab(g, 4))
        for c in range(4):
            assert abs(per[c] - dice_brute(p, g, c)) <= 1e-6
        a, b = rng.standard_normal(dims).astype(np.float32), rng.standard_normal(dims).astype(np.float32)
        assert abs(ncc_global(Volume(a), Volume(b)) - ncc_two_pass(a, b)) <= 1e-6


def test_ncc_examples(rng):
    a = rng.standard_normal((4, 5, 6)).astype(np.float32)
    assert ncc_global(Volume(a), Volume(a)) == pytest.approx(1.0, abs=1e-9)
    assert ncc_global(Volume(a), Volume(-a)) == pytest.approx(-1.0, abs=1e-9)
    assert ncc_global(Volume(a), Volume(3 * a + 2)) == pytest.approx(1.0, abs=1e-6)
    assert ncc_global(Volume(a), Volume(np.ones_like(a))) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ncc_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = (Volume(rng.standard_normal((3, 3, 3)).astype(np.float32)) for _ in range(2))
    v = ncc_global(a, b)
    assert -1 <= v <= 1 and v == ncc_global(b, a)


def _case(s, r, n, cid="c"):
    return CaseResult(cid, {}, {}, s, r, n)


def test_report_statistics(tmp_path):
    rep = EvalReport([_case(0.5, 0.4, 0.1)])
    assert rep.s_dice == (0.5, 0.0)
    rep = EvalReport([_case(0.5, 0.4, 0.1, "a"), _case(0.7, 0.6, 0.3, "b")])
    assert rep.s_dice[0] == pytest.approx(0.6)
    assert rep.s_dice[1] == pytest.approx(np.std([0.5, 0.7], ddof=1))
    assert "2 cases" in rep.summary()


@pytest.fixture(scope="module")
def data():
    return make_dataset(SyntheticSpec(dims=(8, 8, 8), seed=3), 0, 0, 3)


def test_oracle_predictor_scores_one(data):
    by_image = {id(c.image): c for c in data.test}

    def oracle(image):
        c = by_image[id(image)]
        return c.hidden_gt, torch.from_numpy(c.gen_field.astype(np.float32))[None]

    rep = evaluate(None, data.test, data.atlas, predictor=oracle)
    assert rep.s_dice == (1.0, 0.0) and rep.r_dice == (1.0, 0.0)


def test_untrained_registration_is_identity_baseline(data, tmp_path):
    cfg = ModelConfig(EncoderConfig(stage_channels=(4, 8, 8)), EncoderConfig(stage_channels=(4, 8, 8)), 3)
    rep = evaluate(init_bundle(cfg, 0), data.test, data.atlas, case_ids=["z", "y", "x"])
    assert [c.case_id for c in rep.cases] == ["x", "y", "z"]
    assert rep.r_dice[0] == pytest.approx(identity_dice(data), abs=1e-12)
    rep.write_csv(tmp_path / "e.csv")
    rows = list(csv.reader((tmp_path / "e.csv").open()))
    assert rows[0] == ["case", "class", "s_dice", "r_dice", "ncc"]
    assert rows[-2][:2] == ["mean", "mean"] and rows[-1][:2] == ["std", "mean"]
    assert len(rows) == 1 + 3 * 4 + 2
