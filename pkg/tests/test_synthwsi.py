import pytest
param = pytest.mark.parametrize

import json
import numpy as np

def small_config(**kwargs):
    from metastasis_ewc_pytorch.synthwsi import SynthConfig

    defaults = dict(slide_size = 256, itc_max_um = 5., micro_max_um = 40.)
    defaults.update(kwargs)
    return SynthConfig(**defaults)

@param('label', ('negative', 'itc', 'micro', 'macro'))
def test_generated_label_matches_request(label):
    from metastasis_ewc_pytorch.synthwsi import generate_slide
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    cfg = small_config()
    requested = MetastasisClass[label]

    for seed in range(3):
        slide = generate_slide(cfg, 'B', requested, np.random.default_rng(seed))

        assert slide.label == requested
        assert slide.image.shape == (256, 256, 3) and slide.image.dtype == np.uint8

        # lesions only inside tissue, ids match the lesion list

        assert not ((slide.lesion > 0) & (slide.tissue == 0)).any()
        assert set(np.unique(slide.lesion).tolist()) - {0} == {lesion.lesion_id for lesion in slide.lesions}

        if requested == MetastasisClass.negative:
            assert len(slide.lesions) == 0
        else:
            largest = max(lesion.diameter_um for lesion in slide.lesions)
            assert cfg.size_class(largest) == requested

def test_lesion_area_close_to_disc():
    from metastasis_ewc_pytorch.synthwsi import generate_slide
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    slide = generate_slide(small_config(), 'C', MetastasisClass.macro, np.random.default_rng(0))
    lesion = slide.lesions[0]

    area = (slide.lesion == lesion.lesion_id).sum()
    assert area == pytest.approx(lesion.analytic_area, rel = 0.05)

def test_generation_is_deterministic():
    from metastasis_ewc_pytorch.synthwsi import generate_slide
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    a = generate_slide(small_config(), 'HN', MetastasisClass.micro, np.random.default_rng(7))
    b = generate_slide(small_config(), 'HN', MetastasisClass.micro, np.random.default_rng(7))

    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.lesion, b.lesion)
    assert np.array_equal(a.tissue, b.tissue)

def test_size_classes():
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    cfg = small_config()

    assert cfg.size_class(0.) == MetastasisClass.negative
    assert cfg.size_class(5.) == MetastasisClass.itc
    assert cfg.size_class(5.01) == MetastasisClass.micro
    assert cfg.size_class(40.) == MetastasisClass.micro
    assert cfg.size_class(40.01) == MetastasisClass.macro
    assert cfg.macro_max_um == pytest.approx(48.)

def test_oversized_lesions_rejected():
    with pytest.raises(AssertionError):
        small_config(slide_size = 64, micro_max_um = 40.)

def test_lesion_cannot_be_placed():
    from metastasis_ewc_pytorch.synthwsi import place_lesions
    from metastasis_ewc_pytorch.errors import GenerationError

    tissue = np.zeros((32, 32), dtype = bool)
    tissue[10:14, 10:14] = True

    with pytest.raises(GenerationError):
        place_lesions(np.random.default_rng(0), tissue, [20.], spacing = 0.5, retries = 5)

    # satellites are dropped rather than failing

    # clearance above 16 only within a square of about 30 px, so three discs of radius 15 never fit

    tissue = np.zeros((64, 64), dtype = bool)
    tissue[1:-1, 1:-1] = True

    placed = place_lesions(np.random.default_rng(0), tissue, [30., 30., 30.], spacing = 1., retries = 20)

    assert 1 <= len(placed) < 3
    assert placed[0].diameter_um == 30.

def test_reference_pn():
    from metastasis_ewc_pytorch.synthwsi import reference_pn
    from metastasis_ewc_pytorch.postproc import PnStage

    assert reference_pn(['negative'] * 5) == PnStage.pN0
    assert reference_pn(['itc', 'negative', 'negative', 'itc', 'negative']) == PnStage.pN0_itc
    assert reference_pn(['micro', 'itc', 'negative', 'negative', 'negative']) == PnStage.pN1mi
    assert reference_pn(['macro', 'micro', 'micro', 'itc', 'negative']) == PnStage.pN1
    assert reference_pn(['macro', 'micro', 'micro', 'micro', 'itc']) == PnStage.pN2

def test_generate_dataset(tmp_path):
    from metastasis_ewc_pytorch.synthwsi import generate_dataset
    from metastasis_ewc_pytorch.sampler import load_manifest

    cfg = small_config(slide_size = 96, micro_max_um = 15., slide_fraction = 0.01)
    generated = generate_dataset(cfg, 'C', seed = 0, out_dir = tmp_path)

    assert set(generated.manifests.keys()) == {'train', 'val', 'test'}
    assert generated.cases == []

    train = load_manifest(tmp_path / 'C' / 'train.json')
    counts = cfg.split_counts('C')['train']

    assert len(train) == sum(counts)
    assert sum(record.is_positive for record in train.slides) == counts[1]
    assert {record.label for record in train.slides} <= {'negative', 'positive'}

    for record in train.slides:
        assert record.raster_path.exists() and record.tissue_path.exists() and record.lesion_path.exists()

def test_generated_cases(tmp_path):
    from metastasis_ewc_pytorch.synthwsi import generate_dataset, load_cases, reference_pn
    from metastasis_ewc_pytorch.sampler import load_manifest
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    cfg = small_config(slide_size = 96, micro_max_um = 15., slide_fraction = 0.02)
    generated = generate_dataset(cfg, 'B', seed = 1, out_dir = tmp_path, splits = ('cases',))

    cases = load_cases(tmp_path / 'B' / 'pn_reference.json')
    manifest = load_manifest(tmp_path / 'B' / 'cases.json')

    assert len(cases) == cfg.case_count() == 2
    assert len(manifest) == 10
    assert [case.stage for case in cases] == [case.stage for case in generated.cases]

    labels = {record.slide_id: MetastasisClass.coerce(record.label) for record in manifest.slides}

    for case in cases:
        assert len(case.slide_ids) == 5
        assert case.stage == reference_pn([labels[slide_id] for slide_id in case.slide_ids])

    document = json.loads((tmp_path / 'B' / 'pn_reference.json').read_text())
    assert all(entry['pn'] in ('pN0', 'pN0(i+)', 'pN1mi', 'pN1', 'pN2') for entry in document)

def test_normal_texture_shared_across_tasks():
    from metastasis_ewc_pytorch.synthwsi import Texture, NORMAL_TEXTURE, generate_slide, slide_rng
    from metastasis_ewc_pytorch.postproc import MetastasisClass

    # a pixel-scale lattice, so ten small slides per task give tight estimates

    cfg = small_config(normal_texture = Texture(NORMAL_TEXTURE.color, 1., NORMAL_TEXTURE.noise))

    stats = dict()

    for task in ('B', 'C', 'HN'):
        pixels = []

        for index in range(10):
            slide = generate_slide(cfg, task, MetastasisClass.negative, slide_rng(0, task, 'train', index))
            pixels.append(slide.image[slide.tissue > 0].astype(np.float64))

        pixels = np.concatenate(pixels)
        stats[task] = (pixels.mean(axis = 0), pixels.var(axis = 0))

    mean_b, var_b = stats['B']

    for task in ('C', 'HN'):
        mean, var = stats[task]

        assert np.allclose(mean, mean_b, rtol = 0.02, atol = 0.)
        assert np.allclose(var, var_b, rtol = 0.02, atol = 0.)
