import os
from pathlib import Path

_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "val_images": "t10k-images-idx3-ubyte",
    "val_labels": "t10k-labels-idx1-ubyte",
}

MNIST_SKIP_REASON = (
    "MNIST IDX files not found: set SUBDISTILL_MNIST_DIR or place the four "
    "standard ubyte files under <repo>/data/mnist/"
)


def find_mnist():
    """Locate the four MNIST IDX files, or return None if unavailable."""
    candidates = []
    if os.environ.get("SUBDISTILL_MNIST_DIR"):
        candidates.append(Path(os.environ["SUBDISTILL_MNIST_DIR"]))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for root in candidates:
        paths = {key: root / name for key, name in _MNIST_FILES.items()}
        if all(p.exists() for p in paths.values()):
            return {key: str(p) for key, p in paths.items()}
    return None
