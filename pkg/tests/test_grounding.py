import pytest

from vlmseq import (
    BoundingBox,
    CoordScale,
    FormatError,
    PatchGrid,
    PointSet,
    box_to_pixels,
    convert_scale,
    parse_box,
    parse_point_tokens,
    parse_xml_points,
    point_set_to_pixels,
    render_box,
    render_point_tokens,
    render_xml_points,
)
from vlmseq.rng import split_rng


def random_percent_pointset(rng, with_label=True):
    n = int(rng.integers(1, 6))
    pts = tuple(
        (int(rng.integers(0, 1001)) / 10.0, int(rng.integers(0, 1001)) / 10.0)
        for _ in range(n)
    )
    label = f"obj{int(rng.integers(0, 100))}" if with_label else None
    return PointSet(pts, CoordScale.PERCENT100, label)


def test_parse_single_point():
    ps = parse_xml_points('<points x1="10.5" y1="20.0" alt="cat">cat</points>')
    assert ps.points == ((10.5, 20.0),)
    assert ps.label == "cat"
    assert ps.scale is CoordScale.PERCENT100


def test_parse_origin_corner():
    ps = parse_xml_points('<points x1="0.0" y1="0.0" alt="o">o</points>')
    assert ps.points == ((0.0, 0.0),)


def test_xml_canonical_form_byte_identical():
    ps = PointSet(((10.5, 20.0),), CoordScale.PERCENT100, "cat")
    assert render_xml_points(ps) == '<points x1="10.5" y1="20.0" alt="cat">cat</points>'


def test_xml_roundtrip_fuzz():
    rng = split_rng(0, "ground-xml")
    for _ in range(500):
        ps = random_percent_pointset(rng)
        assert parse_xml_points(render_xml_points(ps)) == ps


def test_xml_rejections():
    bad = [
        '<points x1="10.5" alt="a">a</points>',                     # unpaired
        '<points x1="10.5" y1="20.0" alt="a">b</points>',           # alt/body mismatch
        '<points x1="150.5" y1="20.0" alt="a">a</points>',          # out of range
        '<points x1="10.55" y1="20.0" alt="a">a</points>',          # two decimals
        '<points x1="10" y1="20.0" alt="a">a</points>',             # no decimal
        '<points x2="10.5" y2="20.0" alt="a">a</points>',           # gap: starts at 2
        '<points x1="1.0" y1="2.0" x3="3.0" y3="4.0" alt="a">a</points>',  # gap
        '<points y1="1.0" x1="2.0" alt="a">a</points>',             # reordered attrs
        '<points x1="1.0" y1="2.0" alt="">',                        # malformed
        'points x1="1.0" y1="2.0" alt="a">a</points>',
    ]
    for text in bad:
        with pytest.raises(FormatError):
            parse_xml_points(text)


def test_point_token_canonical_form():
    ps = PointSet(((105.0, 200.0),), CoordScale.PERMILLE1000)
    assert render_point_tokens(ps) == "<|point_start|>(105, 200)<|point_end|>"


def test_point_token_empty_set_renders_empty():
    assert render_point_tokens(PointSet((), CoordScale.PERMILLE1000)) == ""


def test_point_token_label_wrapping():
    ps = PointSet(((1.0, 2.0),), CoordScale.PERMILLE1000, "dog")
    text = render_point_tokens(ps)
    assert text == "<|object_ref_start|>dog<|object_ref_end|><|point_start|>(1, 2)<|point_end|>"
    assert parse_point_tokens(text) == ps


def test_point_token_roundtrip_fuzz():
    rng = split_rng(1, "ground-pt")
    for _ in range(500):
        ps = convert_scale(random_percent_pointset(rng, with_label=bool(rng.integers(0, 2))))
        assert parse_point_tokens(render_point_tokens(ps)) == ps


def test_point_token_accepts_optional_space():
    a = parse_point_tokens("<|point_start|>(105,200)<|point_end|>")
    b = parse_point_tokens("<|point_start|>(105, 200)<|point_end|>")
    assert a == b


def test_point_token_rejections():
    bad = [
        "<|point_start|>(105, 200)",
        "<|point_start|>(105,  200)<|point_end|>",   # two spaces
        "<|point_start|>(10500, 200)<|point_end|>",  # five digits
        "<|point_start|>(1001, 200)<|point_end|>",   # out of range
        "<|point_start|>(-5, 200)<|point_end|>",
        "<|point_start|>(105, 200)<|point_end|>junk",
        "<|point_start|>(1.5, 200)<|point_end|>",
    ]
    for text in bad:
        with pytest.raises(FormatError):
            parse_point_tokens(text)


def test_scale_conversion_decimal_shift():
    ps = PointSet(((10.5, 20.0),), CoordScale.PERCENT100, "x")
    pm = convert_scale(ps)
    assert pm.scale is CoordScale.PERMILLE1000
    assert pm.points == ((105.0, 200.0),)
    back = convert_scale(pm)
    assert back == ps


def test_scale_conversion_endpoints():
    lo = PointSet(((0.0, 0.0),), CoordScale.PERCENT100)
    hi = PointSet(((100.0, 100.0),), CoordScale.PERCENT100)
    assert convert_scale(lo).points == ((0.0, 0.0),)
    assert convert_scale(hi).points == ((1000.0, 1000.0),)


def test_scale_conversion_exhaustive_bijection():
    seen = set()
    for v in range(1001):
        pm = PointSet(((float(v), 0.0),), CoordScale.PERMILLE1000)
        pct = convert_scale(pm)
        assert convert_scale(pct).points[0][0] == float(v)
        seen.add(pct.points[0][0])
    assert len(seen) == 1001


def test_box_canonical_form():
    box = BoundingBox(100, 200, 300, 400)
    assert render_box(box) == "<|box_start|>[100, 200, 300, 400]<|box_end|>"
    assert parse_box(render_box(box)) == box


def test_box_degenerate_accepted():
    assert parse_box("<|box_start|>[5, 5, 5, 5]<|box_end|>") == BoundingBox(5, 5, 5, 5)


def test_box_corner_order_enforced():
    with pytest.raises(FormatError):
        parse_box("<|box_start|>[300, 200, 100, 400]<|box_end|>")
    with pytest.raises(FormatError):
        BoundingBox(300, 200, 100, 400)


def test_box_rejections():
    bad = [
        "<|box_start|>[100, 200, 300]<|box_end|>",
        "<|box_start|>[100, 200, 300, 4000]<|box_end|>",
        "<|box_start|>[100.5, 200, 300, 400]<|box_end|>",
        "<|box_start|>[100, 200, 300, 400]",
        "[100, 200, 300, 400]",
    ]
    for text in bad:
        with pytest.raises(FormatError):
            parse_box(text)


def test_box_roundtrip_fuzz():
    rng = split_rng(2, "ground-box")
    for _ in range(500):
        xs = sorted(int(v) for v in rng.integers(0, 1001, 2))
        ys = sorted(int(v) for v in rng.integers(0, 1001, 2))
        label = "obj" if rng.integers(0, 2) else None
        box = BoundingBox(xs[0], ys[0], xs[1], ys[1], label)
        assert parse_box(render_box(box)) == box


def test_to_pixels_midpoint_and_edges():
    grid = PatchGrid(25, 35)  # 700 x 980
    ps = PointSet(((500.0, 500.0),), CoordScale.PERMILLE1000)
    assert point_set_to_pixels(ps, grid) == ((490.0, 350.0),)
    full = PointSet(((100.0, 100.0),), CoordScale.PERCENT100)
    assert point_set_to_pixels(full, grid) == ((980.0, 700.0),)


def test_to_pixels_matches_scalar_recompute():
    rng = split_rng(3, "ground-px")
    grid = PatchGrid(10, 20)  # 280 x 560
    for _ in range(200):
        x, y = int(rng.integers(0, 1001)), int(rng.integers(0, 1001))
        ps = PointSet(((float(x), float(y)),), CoordScale.PERMILLE1000)
        (px, py), = point_set_to_pixels(ps, grid)
        assert px == x / 1000 * 560
        assert py == y / 1000 * 280
    box = BoundingBox(0, 0, 1000, 1000)
    assert box_to_pixels(box, grid) == (0.0, 0.0, 560.0, 280.0)


def test_pointset_validation():
    with pytest.raises(FormatError):
        PointSet(((10.55, 1.0),), CoordScale.PERCENT100)
    with pytest.raises(FormatError):
        PointSet(((100.5, 1.0),), CoordScale.PERCENT100)
    with pytest.raises(FormatError):
        PointSet(((1.5, 1.0),), CoordScale.PERMILLE1000)
    with pytest.raises(FormatError):
        PointSet(((1001.0, 1.0),), CoordScale.PERMILLE1000)
