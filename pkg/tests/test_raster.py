import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_pgm, random_grid
from treatise import raster
from treatise.raster import (
    BoundingBox,
    ImageGrid,
    MarkerMap,
    MaskRLE,
    PgmError,
    RleError,
    SegmentMap,
    boundary_pixels,
    decode_pgm,
    encode_pgm,
    extract_segments,
    gradient_magnitude,
    regional_minima_markers,
    rle_decode,
    rle_encode,
    trace_contour,
    watershed,
)

grids = st.integers(2, 6).flatmap(
    lambda w: st.integers(2, 6).flatmap(
        lambda h: st.lists(
            st.lists(st.integers(0, 9), min_size=w, max_size=w),
            min_size=h, max_size=h,
        )
    )
)

masks = st.integers(1, 6).flatmap(
    lambda w: st.integers(1, 6).flatmap(
        lambda h: st.lists(
            st.lists(st.booleans(), min_size=w, max_size=w),
            min_size=h, max_size=h,
        )
    )
)


# ---------------------------------------------------------------------------
# PGM

class TestPgm:
    def test_decode_2x2(self):
        grid = decode_pgm(b"P5 2 2 255\n" + bytes([0, 255, 0, 255]))
        assert grid.width == 2 and grid.height == 2
        assert grid.tolist() == [0, 255, 0, 255]

    def test_decode_minimal(self):
        grid = decode_pgm(b"P5 1 1 255\n" + bytes([7]))
        assert grid.tolist() == [7]

    def test_truncated(self):
        with pytest.raises(PgmError):
            decode_pgm(b"P5 3 2 255\n" + bytes(5))

    def test_wrong_magic(self):
        with pytest.raises(PgmError):
            decode_pgm(b"P2 1 1 255\n7")

    def test_maxval_over_255(self):
        with pytest.raises(PgmError):
            decode_pgm(b"P5 1 1 65535\n" + bytes(2))

    def test_comment_header(self):
        grid = decode_pgm(b"P5\n# scanner output\n2 1\n255\n" + bytes([3, 4]))
        assert grid.tolist() == [3, 4]

    def test_roundtrip(self):
        rng = random.Random(7)
        for _ in range(20):
            w, h = rng.randint(1, 9), rng.randint(1, 9)
            rows = random_grid(rng, w, h, 0, 255)
            grid = ImageGrid.from_list(w, h, [v for r in rows for v in r])
            assert decode_pgm(encode_pgm(grid)) == grid


# ---------------------------------------------------------------------------
# gradient

class TestGradient:
    def test_constant_is_zero(self):
        grid = ImageGrid.from_list(3, 3, [5] * 9)
        assert gradient_magnitude(grid).tolist() == [0] * 9

    def test_vertical_step(self):
        # columns [0,0,255,255]: interior response |gx|=255 at the step
        grid = ImageGrid.from_list(4, 1, [0, 0, 255, 255])
        out = gradient_magnitude(grid)
        assert out.tolist() == [0, 255, 255, 0]

    @settings(max_examples=60, deadline=None)
    @given(grids)
    def test_matches_convolution_oracle(self, rows):
        w, h = len(rows[0]), len(rows)
        grid = ImageGrid.from_list(w, h, [v for r in rows for v in r])
        expect = oracles.sobel_oracle(rows)
        got = gradient_magnitude(grid).pixels.tolist()
        assert got == expect

    def test_full_range_values(self):
        rng = random.Random(11)
        rows = random_grid(rng, 6, 5, 0, 255)
        grid = ImageGrid.from_list(6, 5, [v for r in rows for v in r])
        assert gradient_magnitude(grid).pixels.tolist() == oracles.sobel_oracle(rows)


# ---------------------------------------------------------------------------
# regional minima

class TestMinima:
    def test_single_global_min(self):
        grid = ImageGrid.from_list(3, 1, [2, 1, 2])
        markers = regional_minima_markers(grid)
        assert markers.labels.tolist() == [[0, 1, 0]]

    def test_plateau_single_label(self):
        grid = ImageGrid.from_list(4, 1, [1, 1, 2, 2])
        markers = regional_minima_markers(grid)
        assert markers.labels.tolist() == [[1, 1, 0, 0]]

    def test_two_minima_row_major_order(self):
        grid = ImageGrid.from_list(5, 1, [1, 2, 5, 2, 1])
        markers = regional_minima_markers(grid)
        assert markers.labels.tolist() == [[1, 0, 0, 0, 2]]

    def test_constant_grid_single_marker(self):
        grid = ImageGrid.from_list(3, 3, [4] * 9)
        markers = regional_minima_markers(grid)
        assert markers.labels.tolist() == [[1] * 3] * 3

    @settings(max_examples=80, deadline=None)
    @given(grids)
    def test_matches_plateau_oracle(self, rows):
        w, h = len(rows[0]), len(rows)
        grid = ImageGrid.from_list(w, h, [v for r in rows for v in r])
        assert regional_minima_markers(grid).labels.tolist() == oracles.minima_oracle(rows)

    def test_h_suppression_shallow_basin_merges(self):
        # side basin of depth 1 disappears with h=2; deep basin survives
        vals = [0, 5, 4, 5, 9]
        grid = ImageGrid.from_list(5, 1, vals)
        plain = regional_minima_markers(grid)
        assert plain.labels.tolist() == [[1, 0, 2, 0, 0]]
        suppressed = regional_minima_markers(grid, h=2)
        assert suppressed.labels.tolist() == [[1, 0, 0, 0, 0]]

    @settings(max_examples=40, deadline=None)
    @given(grids, st.integers(0, 4))
    def test_h_matches_reconstruction_oracle(self, rows, h):
        w, hgt = len(rows[0]), len(rows)
        grid = ImageGrid.from_list(w, hgt, [v for r in rows for v in r])
        recon = oracles.hminima_oracle(rows, h)
        expect = oracles.minima_oracle(recon)
        got = regional_minima_markers(grid, h=h).labels.tolist()
        assert got == expect

    def test_labels_contiguous(self):
        rng = random.Random(3)
        for _ in range(30):
            rows = random_grid(rng, rng.randint(1, 7), rng.randint(1, 7))
            grid = ImageGrid.from_list(len(rows[0]), len(rows), [v for r in rows for v in r])
            m = regional_minima_markers(grid)
            ids = sorted(set(int(v) for v in m.labels.ravel()) - {0})
            assert ids == list(range(1, len(ids) + 1))
            assert len(ids) >= 1


# ---------------------------------------------------------------------------
# watershed

def ws_pair(rows, markers_rows=None):
    w, h = len(rows[0]), len(rows)
    grid = ImageGrid.from_list(w, h, [v for r in rows for v in r])
    if markers_rows is None:
        markers = regional_minima_markers(grid)
    else:
        markers = MarkerMap(np.asarray(markers_rows, dtype=np.int32))
    return grid, markers


class TestWatershed:
    def test_single_marker_floods_all(self):
        rows = [[3, 3, 3]] * 3
        markers = [[0, 0, 0], [0, 0, 0], [0, 0, 0]]
        markers[0][0] = 1
        grid, m = ws_pair(rows, markers)
        out = watershed(grid, m)
        assert out.labels.tolist() == [[1, 1, 1]] * 3

    def test_symmetric_ridge(self):
        grid, m = ws_pair([[1, 2, 5, 2, 1]], [[1, 0, 0, 0, 2]])
        out = watershed(grid, m)
        assert out.labels.tolist() == [[1, 1, 0, 2, 2]]

    def test_dimension_mismatch_rejected(self):
        grid = ImageGrid.from_list(2, 2, [1, 2, 3, 4])
        markers = MarkerMap(np.asarray([[1, 0, 0]], dtype=np.int32))
        with pytest.raises(ValueError):
            watershed(grid, markers)

    @settings(max_examples=100, deadline=None)
    @given(grids)
    def test_oracle_equivalence(self, rows):
        grid, markers = ws_pair(rows)
        got = watershed(grid, markers).labels.tolist()
        expect = oracles.watershed_oracle(rows, markers.labels.tolist())
        assert got == expect

    def test_oracle_equivalence_8x8(self):
        rng = random.Random(2024)
        for _ in range(100):
            rows = random_grid(rng, 8, 8, 0, 7)
            grid, markers = ws_pair(rows)
            got = watershed(grid, markers).labels.tolist()
            assert got == oracles.watershed_oracle(rows, markers.labels.tolist())

    def test_partition_and_preservation(self):
        rng = random.Random(5)
        for _ in range(300):
            w, h = rng.randint(1, 7), rng.randint(1, 7)
            rows = random_grid(rng, w, h)
            grid, markers = ws_pair(rows)
            out = watershed(grid, markers).labels
            # partition: each pixel exactly one of line/region
            areas = {rid: int((out == rid).sum())
                     for rid in set(out.ravel().tolist()) if rid > 0}
            line = int((out == 0).sum())
            assert line + sum(areas.values()) == w * h
            # marker preservation
            ml = markers.labels
            for rid in range(1, markers.count + 1):
                assert (out[ml == rid] == rid).all()

    def test_relabeling_invariance(self):
        rng = random.Random(8)
        for _ in range(40):
            rows = random_grid(rng, 5, 5)
            grid, markers = ws_pair(rows)
            k = markers.count
            if k < 2:
                continue
            perm = list(range(1, k + 1))
            rng.shuffle(perm)
            remap = {i + 1: perm[i] for i in range(k)}
            ml = markers.labels
            permuted = np.zeros_like(ml)
            for src, dst in remap.items():
                permuted[ml == src] = dst
            out_a = watershed(grid, markers).labels
            out_b = watershed(grid, MarkerMap(permuted)).labels
            expect = np.zeros_like(out_a)
            for src, dst in remap.items():
                expect[out_a == src] = dst
            assert np.array_equal(out_b, expect)
            assert np.array_equal(out_b == 0, out_a == 0)

    def test_intensity_shift_invariance(self):
        rng = random.Random(13)
        for _ in range(40):
            rows = random_grid(rng, 5, 4, 0, 6)
            shifted = [[v + 3 for v in r] for r in rows]
            grid_a, markers = ws_pair(rows)
            grid_b = ImageGrid.from_list(5, 4, [v for r in shifted for v in r])
            out_a = watershed(grid_a, markers).labels
            out_b = watershed(grid_b, markers).labels
            assert np.array_equal(out_a, out_b)


# ---------------------------------------------------------------------------
# RLE

class TestRle:
    def test_all_zero(self):
        assert rle_encode([0, 0, 0, 0], 2, 2).counts == (4,)

    def test_all_one(self):
        assert rle_encode([1, 1, 1, 1], 2, 2).counts == (0, 4)

    def test_leading_zero_run_may_be_zero(self):
        rle = rle_encode([1, 0, 1], 3, 1)
        assert rle.counts == (0, 1, 1, 1)

    def test_decode_checks_total(self):
        with pytest.raises(RleError):
            rle_decode(MaskRLE(2, 2, (1, 1)))

    def test_roundtrip_1000(self):
        rng = random.Random(99)
        for _ in range(1000):
            w, h = rng.randint(1, 9), rng.randint(1, 9)
            bits = [rng.randint(0, 1) for _ in range(w * h)]
            rle = rle_encode(bits, w, h)
            back = rle_decode(rle)
            assert back.shape == (h, w)
            assert [int(v) for v in back.ravel()] == bits
            # counts alternate and, past the first, are positive
            assert all(c > 0 for c in rle.counts[1:])
            assert sum(rle.counts) == w * h

    @settings(max_examples=100, deadline=None)
    @given(masks)
    def test_roundtrip_property(self, rows):
        w, h = len(rows[0]), len(rows)
        bits = [int(v) for r in rows for v in r]
        assert [int(v) for v in rle_decode(rle_encode(bits, w, h)).ravel()] == bits


# ---------------------------------------------------------------------------
# contours and extraction

class TestContour:
    def test_single_pixel(self):
        mask = np.asarray([[True]])
        assert trace_contour(mask) == [(0, 0)]

    def test_full_rect_clockwise_start_topleft(self):
        mask = np.ones((3, 4), dtype=bool)
        contour = trace_contour(mask)
        assert contour[0] == (0, 0)
        # clockwise: the walk leaves eastward along the top row
        assert contour[1] == (1, 0)
        assert set(contour) == oracles.boundary_oracle(mask.tolist())

    def test_row_mask(self):
        mask = np.ones((1, 5), dtype=bool)
        assert trace_contour(mask) == [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)]

    def test_hole_boundary_included(self):
        mask = np.ones((5, 5), dtype=bool)
        mask[2, 2] = False
        contour = trace_contour(mask)
        assert set(contour) == oracles.boundary_oracle(mask.tolist())
        assert len(contour) == len(set(contour))

    @settings(max_examples=120, deadline=None)
    @given(masks)
    def test_contour_set_equals_boundary_scan(self, rows):
        mask = np.asarray(rows, dtype=bool)
        if not mask.any():
            return
        contour = trace_contour(mask)
        assert set(contour) == oracles.boundary_oracle([[int(v) for v in r] for r in rows])
        assert len(contour) == len(set(contour))


class TestExtractSegments:
    def test_full_frame(self):
        seg = extract_segments(SegmentMap(np.ones((2, 3), dtype=np.int32)))
        assert len(seg) == 1
        assert seg[0].bbox.as_list() == [0, 0, 3, 2]
        assert seg[0].area == 6

    def test_ridge_example(self):
        segmap = SegmentMap(np.asarray([[1, 1, 0, 2, 2]], dtype=np.int32))
        segs = extract_segments(segmap)
        assert [s.id for s in segs] == [1, 2]
        assert [s.bbox.as_list() for s in segs] == [[0, 0, 2, 1], [3, 0, 2, 1]]
        assert [s.area for s in segs] == [2, 2]

    def test_random_maps_area_and_contour(self):
        rng = random.Random(21)
        for _ in range(60):
            w, h = rng.randint(1, 7), rng.randint(1, 7)
            rows = random_grid(rng, w, h)
            grid, markers = ws_pair(rows)
            segmap = watershed(grid, markers)
            for seg in extract_segments(segmap):
                region = segmap.labels == seg.id
                assert seg.area == int(region.sum())
                local = region[seg.bbox.y : seg.bbox.y + seg.bbox.h,
                               seg.bbox.x : seg.bbox.x + seg.bbox.w]
                expect = {(x + seg.bbox.x, y + seg.bbox.y)
                          for (x, y) in oracles.boundary_oracle(local.tolist())}
                assert set(seg.contour) == expect
                # mask decodes back to the region
                assert np.array_equal(rle_decode(seg.mask), local)

    def test_line_pixels_in_no_segment(self):
        segmap = SegmentMap(np.asarray([[1, 0, 2]], dtype=np.int32))
        segs = extract_segments(segmap)
        covered = set()
        for s in segs:
            dec = rle_decode(s.mask)
            for yy in range(dec.shape[0]):
                for xx in range(dec.shape[1]):
                    if dec[yy, xx]:
                        covered.add((xx + s.bbox.x, yy + s.bbox.y))
        assert (1, 0) not in covered


class TestBoundingBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 1)

    def test_fits(self):
        assert BoundingBox(1, 1, 2, 2).fits(3, 3)
        assert not BoundingBox(1, 1, 3, 2).fits(3, 3)


def test_boundary_pixels_matches_oracle():
    rng = random.Random(17)
    for _ in range(50):
        w, h = rng.randint(1, 8), rng.randint(1, 8)
        rows = [[rng.random() < 0.5 for _ in range(w)] for _ in range(h)]
        mask = np.asarray(rows, dtype=bool)
        assert boundary_pixels(mask) == oracles.boundary_oracle(
            [[int(v) for v in r] for r in rows])


def test_make_pgm_helper_is_valid():
    grid = decode_pgm(make_pgm([[1, 2], [3, 4]]))
    assert grid.tolist() == [1, 2, 3, 4]
