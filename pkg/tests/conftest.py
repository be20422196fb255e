import pytest
import numpy as np

def disc(size, center, radius):
    yy, xx = np.ogrid[0:size, 0:size]
    return ((yy - center[0]) ** 2 + (xx - center[1]) ** 2) <= radius ** 2

def write_slide(root, slide_id, size = 300, lesion_radius = 0, seed = 0, tissue = None, label = None):
    from metastasis_ewc_pytorch.raster import write_raster
    from metastasis_ewc_pytorch.sampler import SlideRecord

    rng = np.random.default_rng(seed)

    image = rng.integers(150, 230, size = (size, size, 3), dtype = np.uint8)
    tissue = np.ones((size, size), dtype = np.uint8) if tissue is None else tissue.astype(np.uint8)
    lesion = np.zeros((size, size), dtype = np.uint16)

    if lesion_radius > 0:
        inside = disc(size, (size // 2, size // 2), lesion_radius)
        lesion[inside] = 1
        image[inside] = rng.integers(60, 120, size = (int(inside.sum()), 3), dtype = np.uint8)

    paths = [root / f'{slide_id}.{kind}.sras' for kind in ('rgb', 'tissue', 'lesion')]

    for path, pixels in zip(paths, (image, tissue, lesion)):
        write_raster(path, pixels, 0.5)

    label = label if label is not None else ('macro' if lesion_radius > 0 else 'negative')
    return SlideRecord(slide_id, *paths, label = label)

@pytest.fixture
def slide_factory(tmp_path):
    def make(slide_id, **kwargs):
        return write_slide(tmp_path, slide_id, **kwargs)

    return make

@pytest.fixture(scope = 'session')
def tiny_datasets(tmp_path_factory):
    from metastasis_ewc_pytorch.sampler import TASKS, DatasetManifest

    root = tmp_path_factory.mktemp('tiny_datasets')
    datasets = dict()

    for task_index, task in enumerate(TASKS):
        datasets[task] = dict()

        for split_index, split in enumerate(('train', 'val', 'test')):
            seed = 100 * task_index + 10 * split_index

            slides = [
                write_slide(root, f'{task}-{split}-0', seed = seed),
                write_slide(root, f'{task}-{split}-1', lesion_radius = 50, seed = seed + 1)
            ]

            datasets[task][split] = DatasetManifest(f'tiny-{task}', task, split, slides)

    return datasets
