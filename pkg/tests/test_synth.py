import math

import numpy as np
import pytest

from errors import InfeasibleSpec, InvalidConfig
from geometry import band_mask, signed_distance
from grid import BinaryMask
from synth import SynthSpec, synth_generate, synth_spec_from_json, validate_spec


def test_default_disc_matches_requested_fraction():
    sample = synth_generate(SynthSpec())
    assert sample.truth.shape == (64, 64)
    assert sample.achieved_fraction == pytest.approx(0.024, rel=0.10)
    radius = math.sqrt(sample.truth.labels.sum() / math.pi)
    assert radius == pytest.approx(5.6, abs=0.3)


def test_image_is_normalised():
    image = synth_generate(SynthSpec(seed=4)).image.values
    assert image.shape == (64, 64)
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_zero_noise_keeps_labels():
    sample = synth_generate(SynthSpec(noise=0.0, seed=3))
    np.testing.assert_array_equal(sample.noisy.labels, sample.truth.labels)


def test_noise_flips_only_inside_boundary_band():
    spec = SynthSpec(noise=0.2, seed=1)
    sample = synth_generate(spec)
    band = band_mask(signed_distance(BinaryMask(sample.truth.labels == 1)), spec.band_half_width).combined.bits
    flipped = sample.noisy.labels != sample.truth.labels
    assert flipped.sum() == round(0.2 * band.sum())
    assert not (flipped & ~band).any()


def test_generation_is_deterministic():
    spec = SynthSpec(noise=0.1, seed=9)
    first, second = synth_generate(spec), synth_generate(spec)
    np.testing.assert_array_equal(first.image.values, second.image.values)
    np.testing.assert_array_equal(first.noisy.labels, second.noisy.labels)


def test_seeds_move_the_object():
    first = synth_generate(SynthSpec(seed=0)).truth.labels
    second = synth_generate(SynthSpec(seed=1)).truth.labels
    assert not np.array_equal(first, second)


@pytest.mark.parametrize("kind,fraction", [("annulus", 0.05), ("vessel-curve", 0.1)])
def test_other_shapes_reach_fraction(kind, fraction):
    sample = synth_generate(SynthSpec(kind=kind, fg_fraction=fraction, seed=2))
    assert sample.achieved_fraction == pytest.approx(fraction, rel=0.10)
    assert set(np.unique(sample.truth.labels)) == {0, 1}


def test_annulus_has_a_hole():
    truth = synth_generate(SynthSpec(kind="annulus", fg_fraction=0.05)).truth.labels
    ys, xs = np.nonzero(truth)
    cy, cx = int(round(ys.mean())), int(round(xs.mean()))
    assert truth[cy, cx] == 0


def test_validate_spec_reports_infeasible_fraction():
    ok, msg = validate_spec(SynthSpec())
    assert ok and msg == "Valid"
    ok, msg = validate_spec(SynthSpec(width=4, height=4, fg_fraction=0.05))
    assert not ok
    assert "below one pixel" in msg


def test_generate_raises_for_infeasible_spec():
    with pytest.raises(InfeasibleSpec):
        synth_generate(SynthSpec(width=4, height=4, fg_fraction=0.05))


def test_spec_json_validation():
    assert synth_spec_from_json('{"kind": "annulus", "seed": 3}').seed == 3
    for bad in ('{"width": 2}', '{"fg_fraction": 0.9}', '{"noise": -0.1}', '{"colour": "red"}'):
        with pytest.raises(InvalidConfig):
            synth_spec_from_json(bad)
