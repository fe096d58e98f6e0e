import filecmp

import numpy as np
import pytest

from scch.heatmap import decode, encode
from scch.synthetic import (
    Roster,
    RosterError,
    SyntheticAUSpec,
    build_split,
    default_roster,
    format_roster,
    generate_dataset,
    generate_sample,
    load_dataset,
    parse_roster,
    read_pgm,
    render,
    roster_hash,
    sample_intensities,
    sample_seed,
    write_pgm,
)


def test_default_roster_shape(roster):
    assert roster.au_ids == [0, 1, 2, 3, 4, 5]
    assert roster.num_maps == 8
    assert roster.location_index() == {0: [0], 1: [1, 2], 2: [3], 3: [4, 5], 4: [6], 5: [7]}


def test_roster_text_roundtrip(roster):
    text = format_roster(roster)
    assert parse_roster(text) == roster
    assert roster_hash(parse_roster(text)) == roster_hash(roster)


@pytest.mark.parametrize(
    "text",
    [
        "au=0 blob 1,1\n",  # too close to border
        "au=0 blob 10,10\nau=0 blob 12,12\n",  # duplicate ids
        "au=0 star 10,10\n",
        "au=0 blob 10,10\ncouple=0 9 0.5\n",
        "au=0 blob 10,10\ncouple=0 0 0.5\n",
        "au=0 blob 10,10\nau=1 blob 20,20\ncouple=0 1 1.5\n",
        "au=0 blob 10\n",
        "au=0 blob 10,10\nshade=3\n",
        "levels=0.5,0.5\nau=0 blob 10,10\n",
        "",
    ],
)
def test_invalid_rosters_raise(text):
    with pytest.raises(RosterError):
        parse_roster(text)


def test_sample_seeds_are_distinct_and_split_dependent():
    seeds = {sample_seed(0, s, i) for s in ("train", "test") for i in range(500)}
    assert len(seeds) == 1000
    assert sample_seed(1, "train", 0) != sample_seed(0, "train", 0)


def test_generation_is_deterministic(roster):
    a, b = generate_sample(roster, 99), generate_sample(roster, 99)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.annotations == b.annotations


def test_image_is_quantised_and_in_range(roster):
    img = generate_sample(roster, 3).image
    assert img.shape == (1, 64, 64) and img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1
    np.testing.assert_allclose(img * 255, np.rint(img * 255), atol=1e-4)


def test_jitter_is_even_so_half_scale_is_integer(roster):
    for seed in range(40):
        for ann in generate_sample(roster, seed).annotations:
            for x, y in ann.locations:
                assert x % 2 == 0 and y % 2 == 0


def test_annotations_are_decodable_targets(roster):
    s = generate_sample(roster, 5)
    hs = encode(s.annotations, 1.5, 64, 64)
    got = {d.au_id: d for d in decode(hs)}
    for ann in s.annotations:
        assert got[ann.au_id].intensity == pytest.approx(ann.intensity, abs=1e-5)
        assert got[ann.au_id].locations == ([] if ann.intensity == 0 else [tuple(map(int, p)) for p in ann.locations])


def test_primitive_amplitude_tracks_intensity(roster):
    # brightness over an AU site grows with its level, everything else fixed
    rng = np.random.default_rng(0)
    x, y = roster.aus[2].locations[0]
    vals = []
    for level in range(6):
        levels = [0] * 6
        levels[2] = level
        vals.append(render(levels, roster, rng, noise=False, shift=(0, 0)).image[0, y, x])
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_coupling_rate_matches_closed_form(roster):
    # AU3 ends >= 2 if its base is >= 2, or AU1's base is >= 4 and the 0.8 coin fires
    p = np.asarray(roster.levels)
    q, r = p[2:].sum(), p[4:].sum()
    want = q + (1 - q) * r * 0.8
    rng = np.random.default_rng(11)
    draws = np.array([sample_intensities(roster, rng) for _ in range(20000)])
    got = np.mean(draws[:, 3] >= 2)
    se = np.sqrt(want * (1 - want) / len(draws))
    assert abs(got - want) < 5 * se
    # uncoupled AU2 keeps the marginal
    assert abs(np.mean(draws[:, 2] >= 2) - q) < 5 * np.sqrt(q * (1 - q) / len(draws))


def test_labels_are_imbalanced_toward_zero(roster):
    rng = np.random.default_rng(2)
    draws = np.array([sample_intensities(roster, rng) for _ in range(5000)])
    counts = np.bincount(draws[:, 2], minlength=6)
    assert counts[0] == counts.max()


def test_pgm_roundtrip(tmp_path):
    img = np.rint(np.random.default_rng(0).uniform(0, 1, (5, 7)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img, atol=1e-7)
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


def test_dataset_roundtrip_and_determinism(tmp_path, roster):
    generate_dataset(tmp_path / "a", 6, 4, roster, seed=3)
    generate_dataset(tmp_path / "b", 6, 4, roster, seed=3)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a" / "images", tmp_path / "b" / "images").diff_files
    train, test = load_dataset(tmp_path / "a")
    fresh = build_split(roster, 6, 3, "train")
    np.testing.assert_array_equal(train.images, fresh.images)
    assert train.annotations == fresh.annotations
    assert len(test) == 4 and train.labels.shape == (6, 6)


def test_empty_train_split(tmp_path, roster):
    manifest = generate_dataset(tmp_path, 0, 3, roster)
    assert manifest["n_train"] == "0"
    train, test = load_dataset(tmp_path)
    assert len(train) == 0 and len(test) == 3


def test_targets_rescale_locations(roster):
    ds = build_split(roster, 2, 0, "train")
    t = ds.targets(32, 1.5)
    assert t.shape == (2, 8, 32, 32)
    ann = ds.annotations[0][2]
    if ann.intensity:
        x, y = ann.locations[0]
        assert np.unravel_index(np.argmax(t[0, 3]), (32, 32)) == (y // 2, x // 2)


def test_custom_roster_renders(tmp_path):
    r = Roster((SyntheticAUSpec(7, ((20, 20),), "ridge"),), image_size=32, jitter=0)
    s = generate_sample(r, 0)
    assert s.image.shape == (1, 32, 32)
    assert s.annotations[0].locations == ((10.0, 10.0),)
