import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dilseg.phantom import PhantomConfig, generate_dataset
from dilseg.volumes import load_manifest


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    """Four small phantom cases shared across tests that just need data."""
    root = tmp_path_factory.mktemp("phantom")
    config = PhantomConfig(
        shape=(64, 64, 10),
        gland_semiaxes_mm=(16.0, 14.0, 12.0),
        lesion_count=(1, 2),
        lesion_radius_mm=(4.0, 6.0),
    )
    manifest = generate_dataset(config, 4, seed=123, out_dir=root)
    return load_manifest(manifest), manifest, config


def random_blob_mask(shape, rng, threshold=1.0):
    """Smooth-noise threshold mask producing a few rounded components."""
    from scipy import ndimage

    noise = ndimage.gaussian_filter(rng.normal(size=shape), sigma=1.5)
    return (noise > threshold * noise.std()).astype(np.uint8)
