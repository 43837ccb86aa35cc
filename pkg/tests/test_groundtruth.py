import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdsnet.errors import ParseError, UsageError
from mdsnet.groundtruth import (
    DotAnnotation,
    adaptive_density_map,
    adaptive_sigmas,
    dot_target_map,
    export_pgm,
    gaussian_density_map,
    parse_dot_annotations,
    round_half_up,
    write_dot_annotations,
)


def naive_density(points, shape, sigma):
    """Per-pixel loop over the truncated, renormalised kernel of every dot."""
    h, w = shape
    out = np.zeros(shape)
    r = math.ceil(3 * sigma)
    for x, y in points:
        cx, cy = math.floor(x + 0.5), math.floor(y + 0.5)
        patch = {}
        for row in range(cy - r, cy + r + 1):
            for col in range(cx - r, cx + r + 1):
                if 0 <= row < h and 0 <= col < w:
                    patch[row, col] = math.exp(-((col - x) ** 2 + (row - y) ** 2) / (2 * sigma**2))
        total = sum(patch.values())
        for (row, col), v in patch.items():
            out[row, col] += v / total
    return out


def test_parse_reads_header_and_rejects(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1.5,2.0\n\n10,3\n-1,0\n3,40\n")
    ann = parse_dot_annotations(p, (32, 32))
    np.testing.assert_array_equal(ann.points, [[1.5, 2.0], [10.0, 3.0]])
    assert ann.rejected == 2 and ann.image_id == "a"


@pytest.mark.parametrize(
    "text,line",
    [("a,b\n1,2\n", ":1:"), ("x,y\n1,2\n3\n", ":3:"), ("x,y\n1,zz\n", ":2:"), ("x,y\n1,nan\n", ":2:")],
)
def test_parse_errors_name_the_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ParseError, match=line):
        parse_dot_annotations(p, (16, 16))


def test_write_parse_round_trip(tmp_path):
    ann = DotAnnotation("r", np.array([[0.1, 0.7], [15.999, 3.25]]), (16, 16))
    write_dot_annotations(tmp_path / "r.csv", ann)
    back = parse_dot_annotations(tmp_path / "r.csv", (16, 16))
    assert back.points.tobytes() == ann.points.tobytes()


def test_annotation_out_of_bounds():
    with pytest.raises(UsageError):
        DotAnnotation("o", np.array([[16.0, 1.0]]), (16, 16))


@pytest.mark.parametrize("sigma", [1.0, 2.5, 5.0])
def test_density_matches_naive_oracle(sigma):
    rng = np.random.default_rng(int(sigma * 10))
    pts = rng.uniform(0, 23.99, size=(7, 2))
    pts[0] = (0.0, 0.0)
    ann = DotAnnotation("n", pts, (24, 24))
    np.testing.assert_allclose(gaussian_density_map(ann, sigma).values, naive_density(pts, (24, 24), sigma), atol=1e-14)


def test_corner_dot_keeps_mass():
    ann = DotAnnotation("c", np.array([[0.0, 0.0]]), (20, 20))
    for sigma in (5.0, 15.0):
        assert gaussian_density_map(ann, sigma).values.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 30), sigma=st.sampled_from([5.0, 15.0]))
def test_mass_conservation(seed, n, sigma):
    rng = np.random.default_rng(seed)
    ann = DotAnnotation("m", rng.uniform(0, 31.999, size=(n, 2)), (32, 32))
    assert abs(gaussian_density_map(ann, sigma).values.sum() - n) < 1e-9
    assert abs(adaptive_density_map(ann).values.sum() - n) < 1e-9


def test_density_nonnegative_and_empty():
    ann = DotAnnotation("e", np.zeros((0, 2)), (8, 8))
    dm = gaussian_density_map(ann, 2.0)
    assert dm.values.sum() == 0.0 and dm.count == 0.0
    with pytest.raises(UsageError):
        gaussian_density_map(ann, 0.0)


def test_adaptive_sigma_two_dots():
    sig = adaptive_sigmas(np.array([[10.0, 10.0], [20.0, 10.0]]), beta=0.3, k=1)
    np.testing.assert_allclose(sig, [3.0, 3.0])


def test_adaptive_sigma_fallback_and_coincident():
    np.testing.assert_allclose(adaptive_sigmas(np.array([[1.0, 1.0]]), k=3, fallback=4.0), [4.0])
    np.testing.assert_allclose(adaptive_sigmas(np.array([[1.0, 1.0], [1.0, 1.0]]), k=1, fallback=4.0), [4.0, 4.0])


def test_adaptive_sigma_grows_with_spacing():
    near = adaptive_sigmas(np.array([[0.0, 0.0], [4.0, 0.0]]), k=1)
    far = adaptive_sigmas(np.array([[0.0, 0.0], [9.0, 0.0]]), k=1)
    assert np.all(far > near)


def test_wider_kernel_lower_peak():
    ann = DotAnnotation("p", np.array([[20.0, 20.0]]), (41, 41))
    assert gaussian_density_map(ann, 2.0).values.max() > gaussian_density_map(ann, 4.0).values.max()


def test_dot_map_rounding_and_collisions():
    ann = DotAnnotation("d", np.array([[10.4, 20.6], [10.0, 21.0], [31.6, 2.0]]), (32, 32))
    dm = dot_target_map(ann)
    assert dm.values[21, 10] == 1.0
    assert dm.collisions == 1 and dm.dropped == 1
    assert dm.count == 1
    assert round_half_up(2.5) == 3 and round_half_up(0.49) == 0


def test_translation_equivariance():
    # dyadic offsets are exact in binary, so the shifted map matches bit for bit
    pts = np.array([[12.25, 14.5], [18.75, 16.125]])
    a = gaussian_density_map(DotAnnotation("a", pts, (48, 48)), 2.0).values
    b = gaussian_density_map(DotAnnotation("b", pts + [5.0, 3.0], (48, 48)), 2.0).values
    np.testing.assert_array_equal(np.roll(a, (3, 5), axis=(0, 1)), b)


def test_export_pgm(tmp_path):
    from PIL import Image

    vals = np.array([[0.0, 0.5], [1.0, 0.25]])
    export_pgm(tmp_path / "m.pgm", vals)
    with Image.open(tmp_path / "m.pgm") as im:
        got = np.asarray(im)
    np.testing.assert_array_equal(got, [[0, 128], [255, 64]])
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")
