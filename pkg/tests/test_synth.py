import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cathseg.metrics import dsc_metric
from cathseg.synth import (TILT_ANGLES, AortaPath, CatheterPath, FrameSample, ShadowSpec, SequenceSpec, SpecError,
                           SpeckleSpec, augment, frame_geometry, generate_sequence, random_augment_params,
                           random_spec, rasterize_ellipse, speckle_field, validate_spec)

QUIET = dict(speckle=SpeckleSpec(sigma=0.0), shadow=ShadowSpec(probability=0.0))


def test_noise_free_frame_is_piecewise_constant():
    spec = SequenceSpec(frames=2, **QUIET)
    frame = generate_sequence(spec)[0]
    ints = spec.intensities
    expected = {np.float32(v) for v in (ints.background, ints.wall, ints.lumen, spec.catheter.intensity)}
    assert set(np.unique(frame.image).tolist()) == expected
    lumen_only = (frame.aorta_mask > 0) & (frame.catheter_mask == 0)
    assert np.all(frame.image[lumen_only] == np.float32(ints.lumen))
    outside = frame.aorta_mask == 0
    assert set(np.unique(frame.image[outside]).tolist()) == {np.float32(ints.background), np.float32(ints.wall)}


def test_same_spec_is_bit_identical():
    spec = random_spec(11)
    a, b = generate_sequence(spec), generate_sequence(spec)
    for fa, fb in zip(a, b):
        assert fa.image.tobytes() == fb.image.tobytes()
        assert fa.catheter_mask.tobytes() == fb.catheter_mask.tobytes()


def test_ellipse_area_matches_formula():
    mask = rasterize_ellipse(64, (32.0, 32.0), (20.0, 15.0))
    assert abs(mask.sum() - math.pi * 20 * 15) <= 0.05 * math.pi * 20 * 15


@pytest.mark.parametrize("seed", range(12))
def test_generated_frames_respect_invariants(seed):
    spec = random_spec(seed)
    assert spec.tilt_angle in TILT_ANGLES
    prev = None
    for t, f in enumerate(generate_sequence(spec)):
        assert f.image.min() >= 0.0 and f.image.max() <= 1.0
        assert set(np.unique(f.aorta_mask)) <= {0.0, 1.0}
        assert set(np.unique(f.catheter_mask)) <= {0.0, 1.0}
        assert not np.any((f.catheter_mask > 0) & (f.aorta_mask == 0))
        c = frame_geometry(spec, t).center
        if prev is not None:
            assert math.dist(prev, c) <= 2.0 + 1e-9
        prev = c


def test_catheter_leaving_lumen_is_rejected_with_frame():
    spec = SequenceSpec(frames=6, catheter=CatheterPath((0.0, 0.0), (11.0, 0.0), radius=2.0))
    with pytest.raises(SpecError) as err:
        validate_spec(spec)
    assert err.value.frame is not None and err.value.frame > 0


def test_fast_aorta_is_rejected():
    spec = SequenceSpec(frames=3, aorta=AortaPath((20.0, 32.0), (40.0, 32.0)))
    with pytest.raises(SpecError, match="moves"):
        validate_spec(spec)


def test_bad_tilt_is_rejected():
    with pytest.raises(SpecError):
        validate_spec(SequenceSpec(tilt_angle=45))


@pytest.mark.parametrize("sigma", [0.1, 0.3, 0.5])
def test_speckle_has_unit_mean(sigma):
    field = speckle_field(np.random.default_rng(3), 256, sigma, 1.0)
    assert 0.95 <= field.mean() <= 1.05


def test_shadow_zeroes_below_upper_wall():
    spec = SequenceSpec(frames=1, speckle=SpeckleSpec(sigma=0.0), shadow=ShadowSpec(probability=1.0, width_deg=30))
    frame = generate_sequence(spec)[0]
    g = frame_geometry(spec, 0)
    col = int(round(g.center[0]))
    below = frame.image[int(g.center[1]) + 2:, col]
    quiet = generate_sequence(SequenceSpec(frames=1, **QUIET))[0]
    assert np.count_nonzero(frame.image == 0) > 0
    assert np.all(frame.image[frame.image != quiet.image] == 0)
    assert np.any(below == 0)


def test_absent_frames_have_empty_catheter_mask():
    spec = SequenceSpec(frames=5, catheter=CatheterPath(absent_frames=(1, 3)))
    masks = [f.catheter_mask.sum() for f in generate_sequence(spec)]
    assert masks[1] == 0 and masks[3] == 0 and all(m > 0 for i, m in enumerate(masks) if i not in (1, 3))


def test_spec_dict_round_trip():
    spec = random_spec(5)
    assert SequenceSpec.from_dict(spec.to_dict()) == spec


def _frame(rng):
    f = generate_sequence(random_spec(int(rng.integers(1000))))[0]
    return f


def test_augment_identity(rng):
    f = _frame(rng)
    out = augment(f, 0.0, 1.0)
    assert np.array_equal(out.image, f.image) and np.array_equal(out.aorta_mask, f.aorta_mask)


def test_augment_gain_leaves_masks(rng):
    f = _frame(rng)
    out = augment(f, 0.0, 1.3)
    assert dsc_metric(out.aorta_mask, f.aorta_mask) == 1.0
    assert dsc_metric(out.catheter_mask, f.catheter_mask) == 1.0


def test_quarter_turn_of_centered_square():
    mask = np.zeros((16, 16), np.float32)
    mask[5:11, 5:11] = 1
    f = FrameSample(mask.copy(), mask.copy(), mask.copy(), 0)
    out = augment(f, 90.0, allow_any_rotation=True)
    assert np.array_equal(out.aorta_mask, mask)


def test_augment_range_checks(rng):
    f = _frame(rng)
    with pytest.raises(ValueError):
        augment(f, 45.0)
    with pytest.raises(ValueError):
        augment(f, 0.0, 1.5)


@given(st.integers(0, 2**32 - 1))
def test_augment_is_pure(seed):
    r = np.random.default_rng(seed)
    params = random_augment_params(r, 32)
    f = FrameSample(np.linspace(0, 1, 32 * 32, dtype=np.float32).reshape(32, 32),
                    rasterize_ellipse(32, (16, 16), (8, 6)), rasterize_ellipse(32, (16, 16), (2, 2)), 0)
    a, b = augment(f, **params), augment(f, **params)
    assert a.image.tobytes() == b.image.tobytes()
    assert set(np.unique(a.aorta_mask)) <= {0.0, 1.0}
