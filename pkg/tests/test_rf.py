import json
import math

import numpy as np
import pytest

from dasrf import rf
from dasrf.errors import ConfigurationError, ContractError
from dasrf.tensor import LayerSpec, Tensor, ops


def test_theoretical_rf():
    assert rf.theoretical_rf(rf.parse_layers("k3s1,k3s1,k3s1")) == 7
    assert rf.theoretical_rf(rf.parse_layers("k3s2,k3s2")) == 7
    assert rf.theoretical_rf(rf.parse_layers("k3d2")) == 5
    assert rf.theoretical_rf([]) == 1
    assert rf.theoretical_rf_per_layer(rf.parse_layers("k3,k3s2,k3")) == [3, 5, 9]
    assert rf.theoretical_rf([LayerSpec.conv(3), LayerSpec("relu"), LayerSpec.conv(3)]) == 5
    with pytest.raises(ConfigurationError):
        rf.parse_layers("conv3")


def test_rect_and_polygon_areas():
    a, b = rf.Rect.square(3), rf.Rect.square(3, 1, 1)
    assert rf.rect_intersection_area(a, b) == 4.0
    assert rf.union_area_rects([a, b]) == 14.0
    pa, pb = rf.Poly.from_rect(a), rf.Poly.from_rect(b)
    assert rf.poly_clip_area(pa, pb) == pytest.approx(4.0)
    assert rf.union_area_polys([pa, pb]) == pytest.approx(14.0)
    assert rf.poly_intersection(pa, rf.Poly.from_rect(rf.Rect.square(1, 5, 5))) is None
    with pytest.raises(ConfigurationError):
        rf.Poly([(0, 0), (2, 0), (1, 0.2), (1, 2)])
    with pytest.raises(ConfigurationError):
        rf.Rect(1, 0, 0, 1)


def test_rotated_square_area_preserved():
    sq = rf.Poly.from_rect(rf.Rect.square(3))
    turned = sq.transformed(rf._rotation(37, (1.0, 2.0)))
    assert turned.area == pytest.approx(9.0)


def test_monte_carlo_matches_union():
    polys = rf.frame_regions("translate", [1, 1], 3, 3)
    est, err = rf.monte_carlo_union_area(polys, 200_000, 0)
    assert abs(est - 19.0) < 4 * err


def test_fused_rf_variants():
    assert rf.fused_rf_area("translate", [0, 0], 3, 3) == 9.0
    assert rf.fused_rf_area("scale", [0.5], 3, 3) == 9.0
    assert rf.fused_rf_area("rotate", [0], 3, 3) == pytest.approx(9.0)
    corner = rf.fused_rf_area("rotate", [30], 3, 3, pivot=(0.0, 0.0))
    assert corner > rf.fused_rf_area("rotate", [30], 3, 3)
    with pytest.raises(ConfigurationError):
        rf.fused_rf_area("shear", [1], 3, 3)


def test_empirical_rf_of_one_conv():
    w = Tensor(np.ones((1, 1, 3, 3)))
    heat = rf.empirical_rf(lambda x: ops.conv2d_raw(x, w, padding=1), (1, 9, 9), (0, 4, 4))
    assert rf.support(heat).sum() == 9
    assert rf.extent_box(heat, (4, 4), 1.0) == (3, 3, 5, 5)
    with pytest.raises(ContractError):
        rf.empirical_rf(lambda x: ops.conv2d_raw(x, w, padding=1), (1, 9, 9), (0, 20, 4))


def test_report_round_trip(tmp_path):
    report = rf.RFReport([3, 5], {"kind": "translate", "area": 19.0})
    report.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["per_layer"] == [3, 5] and math.isclose(data["fused"]["area"], 19.0)
