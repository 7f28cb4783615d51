import json

import numpy as np
import pytest

from lcumini import tasks
from lcumini.ppm import read_image, read_mask
from lcumini.tasks import EDGE_COND, INPAINT, SUBJECT_REF, BACKGROUNDS


def _colors(img):
    return {tuple(np.round(c, 4)) for c in img.reshape(3, -1).T}


def _check_invariants(s, size):
    assert s.input_image.shape == s.target_image.shape == (3, size, size)
    assert s.mask.shape == (1, size, size)
    for img in [s.input_image, s.target_image, *s.references]:
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert set(np.unique(s.mask)) <= {0.0, 1.0}
    assert s.mask.sum() >= 1
    if s.kind in (INPAINT, EDGE_COND):
        assert s.references == []
    else:
        assert len(s.references) == 1
    assert not s.instruction.is_null


@pytest.mark.parametrize("kind", tasks.KINDS)
def test_invariants_over_many_seeds(kind):
    for seed in range(1000):
        _check_invariants(tasks.generate(kind, seed, 16), 16)


@pytest.mark.parametrize("kind", tasks.KINDS)
def test_generators_are_pure(kind):
    a, b = tasks.generate(kind, 42, 16), tasks.generate(kind, 42, 16)
    assert np.array_equal(a.target_image, b.target_image)
    assert np.array_equal(a.input_image, b.input_image)
    assert a.instruction == b.instruction


def test_size_precondition():
    with pytest.raises(ValueError):
        tasks.gen_inpaint_sample(0, 7)


def test_inpaint_unmasked_region_matches_target():
    for seed in range(200):
        s = tasks.gen_inpaint_sample(seed, 16)
        keep = np.broadcast_to(s.mask == 0, s.target_image.shape)
        assert np.array_equal(s.input_image[keep], s.target_image[keep])
        assert np.all(s.input_image[~keep] == 0)


@pytest.mark.parametrize("size", [8, 16, 32])
def test_inpaint_mask_coverage(size):
    cov = [tasks.gen_inpaint_sample(seed, size).mask.mean() for seed in range(500)]
    assert min(cov) > 0 and max(cov) <= 0.5


def test_inpaint_instruction_names_hole():
    s = tasks.gen_inpaint_sample(3, 16)
    words = s.instruction.words()
    assert words[0] == "fill"
    hole = s.target_image[:, s.mask[0] > 0]
    color = np.array(tasks.COLORS[words[1]], np.float32)
    assert np.any(np.all(hole.T == color, axis=1))


def test_edge_cond_contract():
    for seed in range(300):
        s = tasks.gen_edge_cond_sample(seed, 16)
        assert set(np.unique(s.input_image)) <= {0.0, 1.0}
        assert np.all(s.mask == 1)
        assert s.input_image.sum() > 0
        assert np.array_equal(s.input_image[0], s.input_image[1])


def test_subject_ref_contract():
    for seed in range(300):
        s = tasks.gen_subject_ref_sample(seed, 16)
        ref = s.references[0]
        bgs = {tuple(np.round(np.array(v, np.float32), 4)) for v in BACKGROUNDS.values()}
        assert _colors(ref) - bgs == _colors(s.target_image) - bgs
        assert np.all(s.input_image == 0)
        assert np.all(s.mask == 1)
        assert not np.array_equal(ref, s.target_image)
        assert s.instruction.words()[0] == "place"


def test_make_split():
    sp = tasks.make_split([INPAINT, SUBJECT_REF], 20, 5, seed=9)
    assert len(sp.train) == 20 and len(sp.test) == 5
    assert not {s.seed for s in sp.train} & {s.seed for s in sp.test}
    assert [s.kind for s in sp.train[:4]] == [INPAINT, SUBJECT_REF, INPAINT, SUBJECT_REF]
    again = tasks.make_split([INPAINT, SUBJECT_REF], 20, 5, seed=9)
    assert [s.seed for s in again.train] == [s.seed for s in sp.train]
    with pytest.raises(ValueError):
        tasks.make_split(INPAINT, 0, 1, 0)


def test_export_dataset(tmp_path):
    sp = tasks.make_split([INPAINT, SUBJECT_REF], 4, 1, seed=0)
    index = tasks.export_dataset(sp.train, tmp_path)
    recs = [json.loads(line) for line in index.read_text().splitlines()]
    assert len(recs) == 4
    for rec, s in zip(recs, sp.train):
        assert rec["kind"] == s.kind and rec["seed"] == s.seed
        assert rec["instruction"] == list(s.instruction.token_ids)
        img = read_image(tmp_path / rec["files"]["target"])
        assert np.abs(img - s.target_image).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(read_mask(tmp_path / rec["files"]["mask"]), s.mask)
        assert len(rec["files"]["references"]) == len(s.references)
