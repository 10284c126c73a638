import io

import numpy as np
import pytest
from PIL import Image

from treelabel.taxonomy import load_taxonomy

FIXTURE_TAXONOMY = """\
root\t-\tRoot
exp\troot\tExperimental
gel\texp\tGel
plate\texp\tPlate
microscopy\troot\tMicroscopy
light\tmicroscopy\tLight
fluorescence\tmicroscopy\tFluorescence
electron\tmicroscopy\tElectron
scanning\telectron\tScanning
transmission\telectron\tTransmission
"""


@pytest.fixture
def taxonomy():
    return load_taxonomy(FIXTURE_TAXONOMY)


@pytest.fixture
def flat_taxonomy():
    # Single classifier at the root; the shape used by the end-to-end loop.
    return load_taxonomy("exp\t-\tExperimental\ngel\texp\tGel\nplate\texp\tPlate\n")


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode an HxWx3 uint8 array as PNG."""
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def solid_image(w: int, h: int, rgb) -> bytes:
    px = np.zeros((h, w, 3), dtype=np.uint8)
    px[:, :] = rgb
    return png_bytes(px)
